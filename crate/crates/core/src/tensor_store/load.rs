use std::path::Path;

use ndarray::Array2;

use super::format::{read_tensor, write_tensor, DType, TensorFile};
use super::manifest::{DatasetManifest, ImageRecord};
use crate::error::{Error, Result};
use crate::incontext::{FeatureMap, LabelMap};

fn expect_dims(path: &Path, t: &TensorFile, expected: &[u64]) -> Result<()> {
    if t.dims != expected {
        return Err(Error::Shape(format!(
            "{}: dims {:?}, expected {expected:?}",
            path.display(),
            t.dims
        )));
    }
    Ok(())
}

pub fn load_features(manifest: &DatasetManifest, record: &ImageRecord) -> Result<FeatureMap> {
    let t = read_tensor(&record.features)?;
    let (rows, cols) = manifest.grid(record);
    let d = manifest.feature_dim;
    expect_dims(&record.features, &t, &[(rows * cols) as u64, d as u64])?;
    let values = t.to_f32()?.into_iter().map(f64::from).collect();
    let values = Array2::from_shape_vec((rows * cols, d), values).expect("dims checked");
    FeatureMap::new(values, rows, cols, manifest.patch_size)
}

pub fn load_label_map(path: &Path, height: usize, width: usize) -> Result<LabelMap> {
    let t = read_tensor(path)?;
    expect_dims(path, &t, &[height as u64, width as u64])?;
    LabelMap::new(height, width, t.to_u16()?)
}

/// Continuous per-pixel labels (e.g. depth), H×W f32.
pub fn load_depth_map(path: &Path, height: usize, width: usize) -> Result<Vec<f32>> {
    let t = read_tensor(path)?;
    expect_dims(path, &t, &[height as u64, width as u64])?;
    t.to_f32()
}

pub fn load_global(path: &Path, dim: Option<usize>) -> Result<Vec<f64>> {
    let t = read_tensor(path)?;
    if t.dims.len() != 1 || dim.is_some_and(|d| t.dims[0] != d as u64) {
        return Err(Error::Shape(format!(
            "{}: global feature dims {:?}, expected [{}]",
            path.display(),
            t.dims,
            dim.map_or("Dg".to_string(), |d| d.to_string())
        )));
    }
    Ok(t.to_f32()?.into_iter().map(f64::from).collect())
}

pub fn write_label_map(path: &Path, map: &LabelMap) -> Result<()> {
    let t = TensorFile::from_u16(vec![map.height() as u64, map.width() as u64], map.data());
    t.write(path)
}

pub fn write_f32(path: &Path, dims: &[u64], values: &[f32]) -> Result<()> {
    let payload: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_tensor(path, DType::F32, dims, &payload)
}

/// One image with its features and (optional) class-id labels in memory.
#[derive(Debug, Clone)]
pub struct LoadedImage {
    pub id: String,
    pub features: FeatureMap,
    pub labels: Option<LabelMap>,
}

/// Images of a manifest loaded into memory, in manifest order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub patch_size: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub images: Vec<LoadedImage>,
}

impl Dataset {
    /// Loads features and, where present, u16 label maps.
    ///
    /// The class count is the manifest's `num_classes`, or one past the
    /// largest label seen.
    pub fn load(manifest: &DatasetManifest) -> Result<Self> {
        let mut images = Vec::with_capacity(manifest.len());
        for rec in &manifest.records {
            let features = load_features(manifest, rec)?;
            let labels = match &rec.labels {
                Some(p) => Some(load_label_map(p, rec.height, rec.width)?),
                None => None,
            };
            images.push(LoadedImage {
                id: rec.id.clone(),
                features,
                labels,
            });
        }
        Self::from_images(manifest.patch_size, manifest.feature_dim, manifest.num_classes, images)
    }

    pub fn from_images(
        patch_size: usize,
        feature_dim: usize,
        num_classes: Option<usize>,
        images: Vec<LoadedImage>,
    ) -> Result<Self> {
        let seen = images
            .iter()
            .filter_map(|im| im.labels.as_ref()?.max_label())
            .max()
            .map_or(0, |m| m as usize + 1);
        let num_classes = num_classes.unwrap_or(seen);
        if seen > num_classes {
            return Err(Error::LabelRange {
                label: (seen - 1) as u16,
                classes: num_classes,
            });
        }
        Ok(Dataset {
            patch_size,
            feature_dim,
            num_classes,
            images,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.images.iter().position(|im| im.id == id)
    }
}
