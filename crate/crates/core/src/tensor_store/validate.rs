use std::fmt;
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use super::format::{read_header, DType, TensorHeader};
use super::manifest::{DatasetManifest, ImageRecord};
use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    Features,
    Global,
    Segments,
    Labels,
}

impl fmt::Display for TensorRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TensorRole::Features => "features",
            TensorRole::Global => "global",
            TensorRole::Segments => "segments",
            TensorRole::Labels => "labels",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ViolationKind {
    MissingFile,
    Unreadable(String),
    ShapeMismatch { expected: Vec<u64>, found: Vec<u64> },
    DTypeMismatch { expected: Vec<DType>, found: DType },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub record: String,
    pub role: TensorRole,
    pub path: PathBuf,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "record `{}` {} ({}): ", self.record, self.role, self.path.display())?;
        match &self.kind {
            ViolationKind::MissingFile => write!(f, "missing file"),
            ViolationKind::Unreadable(msg) => write!(f, "unreadable header: {msg}"),
            ViolationKind::ShapeMismatch { expected, found } => {
                write!(f, "shape {found:?}, expected {expected:?}")
            }
            ViolationKind::DTypeMismatch { expected, found } => {
                write!(f, "dtype {found:?}, expected one of {expected:?}")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks every tensor referenced by the manifest against the manifest geometry.
///
/// Only the fixed-size header of each file is read.
pub fn validate_dataset(manifest: &DatasetManifest) -> ValidationReport {
    validate_dataset_with(manifest, |p| File::open(p))
}

/// Like [`validate_dataset`], with a caller-supplied file opener.
pub fn validate_dataset_with<R, F>(manifest: &DatasetManifest, mut open: F) -> ValidationReport
where
    R: Read,
    F: FnMut(&Path) -> std::io::Result<R>,
{
    let mut report = ValidationReport::default();
    // Global dim is shared; without a declared value the first file seen fixes it.
    let mut global_dim = manifest.global_dim.map(|d| d as u64);

    for rec in &manifest.records {
        let l = manifest.num_patches(rec) as u64;
        let hw = vec![rec.height as u64, rec.width as u64];
        let mut check = |role: TensorRole,
                         path: &Path,
                         dtypes: &[DType],
                         expected: Option<Vec<u64>>|
         -> Option<TensorHeader> {
            let header = match open_header(&mut open, path) {
                Ok(h) => h,
                Err(kind) => {
                    report.violations.push(violation(rec, role, path, kind));
                    return None;
                }
            };
            if !dtypes.contains(&header.dtype) {
                report.violations.push(violation(
                    rec,
                    role,
                    path,
                    ViolationKind::DTypeMismatch {
                        expected: dtypes.to_vec(),
                        found: header.dtype,
                    },
                ));
            }
            if let Some(expected) = expected {
                if header.dims != expected {
                    report.violations.push(violation(
                        rec,
                        role,
                        path,
                        ViolationKind::ShapeMismatch {
                            expected,
                            found: header.dims.clone(),
                        },
                    ));
                }
            }
            Some(header)
        };

        check(
            TensorRole::Features,
            &rec.features,
            &[DType::F32],
            Some(vec![l, manifest.feature_dim as u64]),
        );
        if let Some(path) = &rec.global {
            let expected = global_dim.map(|d| vec![d]);
            if let Some(h) = check(TensorRole::Global, path, &[DType::F32], expected) {
                if global_dim.is_none() && h.dims.len() == 1 {
                    global_dim = Some(h.dims[0]);
                }
            }
        }
        if let Some(path) = &rec.segments {
            check(TensorRole::Segments, path, &[DType::U16], Some(hw.clone()));
        }
        if let Some(path) = &rec.labels {
            check(
                TensorRole::Labels,
                path,
                &[DType::U16, DType::F32],
                Some(hw.clone()),
            );
        }
    }
    report
}

fn violation(rec: &ImageRecord, role: TensorRole, path: &Path, kind: ViolationKind) -> Violation {
    Violation {
        record: rec.id.clone(),
        role,
        path: path.to_path_buf(),
        kind,
    }
}

fn open_header<R, F>(open: &mut F, path: &Path) -> Result<TensorHeader, ViolationKind>
where
    R: Read,
    F: FnMut(&Path) -> std::io::Result<R>,
{
    let mut reader = open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => ViolationKind::MissingFile,
        _ => ViolationKind::Unreadable(e.to_string()),
    })?;
    read_header(&mut reader, path).map_err(|e| match e {
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
            ViolationKind::MissingFile
        }
        other => ViolationKind::Unreadable(other.to_string()),
    })
}
