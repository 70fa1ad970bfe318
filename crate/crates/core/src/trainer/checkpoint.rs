//! Head checkpoints: four f32 tensor files plus a `head.toml` descriptor.

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::head::HeadParams;
use crate::error::{Error, Result};
use crate::tensor_store::{read_tensor, write_f32};

const FILES: [&str; 4] = ["w1.dipt", "b1.dipt", "w2.dipt", "b2.dipt"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadDescriptor {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub activation: String,
    pub checksum: String,
}

/// Writes `params` into `dir` (created if needed). Values are stored as f32;
/// the descriptor checksum is that of the rounded parameters, so it matches
/// [`load_head`] output.
pub fn save_head(dir: &Path, params: &HeadParams) -> Result<HeadDescriptor> {
    let mut rounded = params.clone();
    for s in rounded.slices_mut() {
        s.iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
    let params = &rounded;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (d, h, o) = (params.input_dim(), params.hidden_dim(), params.output_dim());
    let dims: [Vec<u64>; 4] = [
        vec![d as u64, h as u64],
        vec![h as u64],
        vec![h as u64, o as u64],
        vec![o as u64],
    ];
    for ((name, dims), values) in FILES.iter().zip(&dims).zip(params.slices()) {
        let values: Vec<f32> = values.iter().map(|&v| v as f32).collect();
        write_f32(&dir.join(name), dims, &values)?;
    }
    let desc = HeadDescriptor {
        input_dim: d,
        hidden_dim: h,
        output_dim: o,
        activation: "gelu".into(),
        checksum: params.checksum(),
    };
    let path = dir.join("head.toml");
    let text = toml::to_string(&desc).expect("descriptor serializes");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(desc)
}

pub fn load_head(dir: &Path) -> Result<HeadParams> {
    let path = dir.join("head.toml");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let desc: HeadDescriptor = toml::from_str(&text).map_err(|e| Error::Parse {
        field: "head.toml".into(),
        reason: e.message().to_string(),
    })?;
    let load = |name: &str, expected: Vec<u64>| -> Result<Vec<f64>> {
        let p = dir.join(name);
        let t = read_tensor(&p)?;
        if t.dims != expected {
            return Err(Error::Shape(format!(
                "{}: dims {:?}, expected {expected:?}",
                p.display(),
                t.dims
            )));
        }
        Ok(t.to_f32()?.into_iter().map(f64::from).collect())
    };
    let (d, h, o) = (desc.input_dim, desc.hidden_dim, desc.output_dim);
    let params = HeadParams {
        w1: Array2::from_shape_vec((d, h), load(FILES[0], vec![d as u64, h as u64])?)
            .expect("dims checked"),
        b1: Array1::from(load(FILES[1], vec![h as u64])?),
        w2: Array2::from_shape_vec((h, o), load(FILES[2], vec![h as u64, o as u64])?)
            .expect("dims checked"),
        b2: Array1::from(load(FILES[3], vec![o as u64])?),
    };
    params.check()?;
    Ok(params)
}
