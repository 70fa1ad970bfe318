//! Minimal binary tensor container.
//!
//! Layout (little-endian, no padding, no footer):
//! - bytes 0..4: magic `DIPT`
//! - bytes 4..8: version, u32 (currently 1)
//! - byte 8: dtype code (1 = f32, 2 = u16, 3 = u8)
//! - byte 9: ndim (1..=4)
//! - ndim × u64 dims
//! - row-major payload

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"DIPT";
pub const VERSION: u32 = 1;
pub const MAX_NDIM: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    U16,
    U8,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::U16 => 2,
            DType::U8 => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::U16),
            3 => Some(DType::U8),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U16 => 2,
            DType::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorHeader {
    pub dtype: DType,
    pub dims: Vec<u64>,
}

impl TensorHeader {
    /// Size of the encoded header in bytes.
    pub fn encoded_len(&self) -> usize {
        10 + 8 * self.dims.len()
    }

    pub fn numel(&self) -> Option<u64> {
        self.dims.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d))
    }

    pub fn payload_len(&self) -> Option<u64> {
        self.numel()?.checked_mul(self.dtype.size() as u64)
    }
}

/// A tensor file held fully in memory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorFile {
    pub dtype: DType,
    pub dims: Vec<u64>,
    pub payload: Vec<u8>,
}

impl TensorFile {
    pub fn from_f32(dims: Vec<u64>, values: &[f32]) -> Self {
        let payload = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        TensorFile {
            dtype: DType::F32,
            dims,
            payload,
        }
    }

    pub fn from_u16(dims: Vec<u64>, values: &[u16]) -> Self {
        let payload = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        TensorFile {
            dtype: DType::U16,
            dims,
            payload,
        }
    }

    pub fn header(&self) -> TensorHeader {
        TensorHeader {
            dtype: self.dtype,
            dims: self.dims.clone(),
        }
    }

    pub fn dims_usize(&self) -> Vec<usize> {
        self.dims.iter().map(|&d| d as usize).collect()
    }

    pub fn to_f32(&self) -> Result<Vec<f32>> {
        self.expect_dtype(DType::F32)?;
        Ok(self
            .payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub fn to_u16(&self) -> Result<Vec<u16>> {
        self.expect_dtype(DType::U16)?;
        Ok(self
            .payload
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect())
    }

    fn expect_dtype(&self, dtype: DType) -> Result<()> {
        if self.dtype != dtype {
            return Err(Error::Shape(format!(
                "expected dtype {:?}, found {:?}",
                dtype, self.dtype
            )));
        }
        Ok(())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_tensor(path, self.dtype, &self.dims, &self.payload)
    }
}

fn check_shape(dtype: DType, dims: &[u64], payload_len: usize) -> Result<()> {
    if dims.is_empty() || dims.len() > MAX_NDIM {
        return Err(Error::Shape(format!(
            "ndim must be in 1..={MAX_NDIM}, got {}",
            dims.len()
        )));
    }
    if let Some(pos) = dims.iter().position(|&d| d == 0) {
        return Err(Error::Shape(format!("dimension {pos} is zero")));
    }
    let header = TensorHeader {
        dtype,
        dims: dims.to_vec(),
    };
    match header.payload_len() {
        Some(n) if n == payload_len as u64 => Ok(()),
        Some(n) => Err(Error::Shape(format!(
            "dims {dims:?} of {dtype:?} need {n} payload bytes, got {payload_len}"
        ))),
        None => Err(Error::Shape(format!("dims {dims:?} overflow"))),
    }
}

pub fn encode_header(dtype: DType, dims: &[u64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + 8 * dims.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype.code());
    out.push(dims.len() as u8);
    for d in dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    out
}

pub fn write_tensor(
    path: impl AsRef<Path>,
    dtype: DType,
    dims: &[u64],
    payload: &[u8],
) -> Result<()> {
    let path = path.as_ref();
    check_shape(dtype, dims, payload.len())?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&encode_header(dtype, dims))
        .and_then(|_| w.write_all(payload))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Reads exactly the fixed-size header from `reader`, consuming nothing beyond it.
pub fn read_header<R: Read>(reader: &mut R, path: &Path) -> Result<TensorHeader> {
    let truncated = |what: &str| Error::Corruption {
        path: path.to_path_buf(),
        reason: format!("truncated header ({what})"),
    };
    let mut fixed = [0u8; 10];
    if !read_fully(reader, &mut fixed, path)? {
        return Err(truncated("fixed part"));
    }
    let magic = [fixed[0], fixed[1], fixed[2], fixed[3]];
    if magic != MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            found: magic,
        });
    }
    let version = u32::from_le_bytes([fixed[4], fixed[5], fixed[6], fixed[7]]);
    if version != VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            version,
        });
    }
    let dtype = DType::from_code(fixed[8]).ok_or_else(|| Error::Corruption {
        path: path.to_path_buf(),
        reason: format!("unknown dtype code {}", fixed[8]),
    })?;
    let ndim = fixed[9] as usize;
    if ndim == 0 || ndim > MAX_NDIM {
        return Err(Error::Corruption {
            path: path.to_path_buf(),
            reason: format!("ndim {ndim} outside 1..={MAX_NDIM}"),
        });
    }
    let mut dim_bytes = vec![0u8; 8 * ndim];
    if !read_fully(reader, &mut dim_bytes, path)? {
        return Err(truncated("dims"));
    }
    let dims: Vec<u64> = dim_bytes
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    if dims.contains(&0) {
        return Err(Error::Corruption {
            path: path.to_path_buf(),
            reason: format!("zero dimension in {dims:?}"),
        });
    }
    Ok(TensorHeader { dtype, dims })
}

/// Like `read_exact`, but reports a short read as `Ok(false)` instead of an error.
fn read_fully<R: Read>(reader: &mut R, buf: &mut [u8], path: &Path) -> Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        match reader.read(&mut buf[filled..]) {
            Ok(0) => return Ok(false),
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(Error::io(path, e)),
        }
    }
    Ok(true)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<TensorFile> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let header = read_header(&mut reader, path)?;
    let expected = header.payload_len().ok_or_else(|| Error::Corruption {
        path: path.to_path_buf(),
        reason: format!("dims {:?} overflow", header.dims),
    })?;
    let mut payload = Vec::with_capacity(expected.min(1 << 32) as usize);
    reader
        .read_to_end(&mut payload)
        .map_err(|e| Error::io(path, e))?;
    if payload.len() as u64 != expected {
        return Err(Error::Corruption {
            path: path.to_path_buf(),
            reason: format!(
                "payload is {} bytes, header declares {expected}",
                payload.len()
            ),
        });
    }
    Ok(TensorFile {
        dtype: header.dtype,
        dims: header.dims,
        payload,
    })
}

pub fn read_tensor_header(path: impl AsRef<Path>) -> Result<TensorHeader> {
    let path = path.as_ref();
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_header(&mut file, path)
}
