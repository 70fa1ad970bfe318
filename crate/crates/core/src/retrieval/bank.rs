//! Memory bank of labelled patch features.
//!
//! On disk a bank is a directory with `features.dipt` (f32 B×D′),
//! `labels.dipt` (f32 B×C), `provenance.dipt` (u16 B×4: image index and
//! patch index, each as low/high words) and a `bank.toml` descriptor.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::incontext::{patchify_labels, NORM_EPS};
use crate::seed::stage_rng;
use crate::tensor_store::{
    load_depth_map, load_features, load_label_map, read_tensor, write_f32, DatasetManifest, TensorFile,
};
use crate::trainer::{project_rows, HeadParams};

pub const DEFAULT_BANK_SIZE: usize = 10_240_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelMode {
    /// u16 class-id maps; label rows are patch class frequencies.
    Discrete,
    /// f32 per-pixel values such as depth; label rows hold the patch mean.
    Continuous,
}

/// Feature space tag: `raw`, or `head:<checksum>` for head-projected features.
pub fn feature_source(head: Option<&HeadParams>) -> String {
    match head {
        None => "raw".into(),
        Some(h) => format!("head:{}", h.checksum()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankConfig {
    pub target_size: usize,
    pub mode: LabelMode,
    /// Fraction of labelled images kept before patch sampling.
    pub data_fraction: f64,
    pub seed: u64,
}

impl Default for BankConfig {
    fn default() -> Self {
        BankConfig {
            target_size: DEFAULT_BANK_SIZE,
            mode: LabelMode::Discrete,
            data_fraction: 1.0,
            seed: 0,
        }
    }
}

impl BankConfig {
    pub fn check(&self) -> Result<()> {
        if self.target_size == 0 {
            return Err(Error::Config("bank target size must be positive".into()));
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "data fraction {} outside (0, 1]",
                self.data_fraction
            )));
        }
        Ok(())
    }
}

/// Descriptor stored in `bank.toml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankMeta {
    pub size: usize,
    pub dim: usize,
    /// Label columns: classes in discrete mode, 1 in continuous mode.
    pub label_dim: usize,
    pub mode: LabelMode,
    pub feature_source: String,
    pub target_size: usize,
    pub data_fraction: f64,
    pub seed: u64,
    pub patch_size: usize,
    /// Ids of the images patches were drawn from; provenance indexes this list.
    pub images: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    pub features: Array2<f32>,
    pub labels: Array2<f32>,
    /// (image index into `meta.images`, patch index) per row.
    pub provenance: Vec<(u32, u32)>,
    pub meta: BankMeta,
}

impl MemoryBank {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn label_dim(&self) -> usize {
        self.labels.ncols()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (b, d, c) = (self.len() as u64, self.dim() as u64, self.label_dim() as u64);
        write_f32(&dir.join("features.dipt"), &[b, d], self.features.as_slice().expect("standard layout"))?;
        write_f32(&dir.join("labels.dipt"), &[b, c], self.labels.as_slice().expect("standard layout"))?;
        let words: Vec<u16> = self
            .provenance
            .iter()
            .flat_map(|&(img, patch)| {
                [img as u16, (img >> 16) as u16, patch as u16, (patch >> 16) as u16]
            })
            .collect();
        TensorFile::from_u16(vec![b, 4], &words).write(&dir.join("provenance.dipt"))?;
        let path = dir.join("bank.toml");
        let text = toml::to_string(&self.meta).expect("descriptor serializes");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("bank.toml");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: BankMeta = toml::from_str(&text).map_err(|e| Error::Parse {
            field: "bank.toml".into(),
            reason: e.message().to_string(),
        })?;
        let (b, d, c) = (meta.size, meta.dim, meta.label_dim);
        let read = |name: &str, expected: [usize; 2]| -> Result<TensorFile> {
            let p = dir.join(name);
            let t = read_tensor(&p)?;
            if t.dims != [expected[0] as u64, expected[1] as u64] {
                return Err(Error::Shape(format!(
                    "{}: dims {:?}, expected {expected:?}",
                    p.display(),
                    t.dims
                )));
            }
            Ok(t)
        };
        let features = Array2::from_shape_vec((b, d), read("features.dipt", [b, d])?.to_f32()?)
            .expect("dims checked");
        let labels = Array2::from_shape_vec((b, c), read("labels.dipt", [b, c])?.to_f32()?)
            .expect("dims checked");
        let words = read("provenance.dipt", [b, 4])?.to_u16()?;
        let provenance = words
            .chunks_exact(4)
            .map(|w| {
                (
                    u32::from(w[0]) | (u32::from(w[1]) << 16),
                    u32::from(w[2]) | (u32::from(w[3]) << 16),
                )
            })
            .collect();
        let bank = MemoryBank { features, labels, provenance, meta };
        bank.check()?;
        Ok(bank)
    }

    /// Structural invariants: non-empty, unit-norm finite rows, consistent sizes.
    pub fn check(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Degenerate("memory bank is empty".into()));
        }
        if self.labels.nrows() != self.len() || self.provenance.len() != self.len() {
            return Err(Error::Shape("bank features, labels and provenance differ in length".into()));
        }
        for (i, row) in self.features.rows().into_iter().enumerate() {
            let n: f64 = row.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
            if !n.is_finite() || (n - 1.0).abs() > 1e-5 {
                return Err(Error::Numeric(format!("bank row {i} has norm {n}")));
            }
        }
        if let Some(&(img, _)) = self.provenance.iter().find(|p| p.0 as usize >= self.meta.images.len()) {
            return Err(Error::Shape(format!("provenance names image {img} outside the image list")));
        }
        Ok(())
    }
}

/// Normalized f32 rows for a set of f64 feature rows, raw or head-projected.
pub fn embed_rows(rows: ArrayView2<f64>, head: Option<&HeadParams>) -> Result<Array2<f32>> {
    let projected = match head {
        Some(h) => project_rows(h, rows)?.into_inner(),
        None => crate::incontext::l2_normalize_rows(rows)?,
    };
    Ok(projected.mapv(|v| v as f32))
}

fn is_zero_row(row: ndarray::ArrayView1<f64>) -> bool {
    row.dot(&row).sqrt() < NORM_EPS
}

pub(crate) fn depth_valid(v: f32) -> bool {
    v.is_finite() && v > 0.0
}

/// Samples labelled patches uniformly without replacement and stores their
/// embedded features and label rows.
///
/// With `data_fraction < 1` a seeded subset of `ceil(fraction · N)` labelled
/// images is kept first. Patches whose feature is zero, or (continuous mode)
/// that contain no valid pixel, are dropped after sampling.
pub fn build_memory_bank(
    manifest: &DatasetManifest,
    head: Option<&HeadParams>,
    config: &BankConfig,
) -> Result<MemoryBank> {
    config.check()?;
    let labelled: Vec<usize> = (0..manifest.len())
        .filter(|&i| manifest.records[i].labels.is_some())
        .collect();
    if labelled.is_empty() {
        return Err(Error::Config("no labelled images to build a memory bank from".into()));
    }
    if let Some(h) = head {
        if h.input_dim() != manifest.feature_dim {
            return Err(Error::Shape(format!(
                "head expects D={}, dataset has D={}",
                h.input_dim(),
                manifest.feature_dim
            )));
        }
    }
    let retained: Vec<usize> = if config.data_fraction < 1.0 {
        let keep = ((config.data_fraction * labelled.len() as f64).ceil() as usize).clamp(1, labelled.len());
        let mut rng = stage_rng(config.seed, "bank-fraction");
        let mut picked = sample(&mut rng, labelled.len(), keep).into_vec();
        picked.sort_unstable();
        picked.into_iter().map(|i| labelled[i]).collect()
    } else {
        labelled
    };

    let classes = match config.mode {
        LabelMode::Continuous => 1,
        LabelMode::Discrete => match manifest.num_classes {
            Some(c) => c,
            None => {
                let mut max = None;
                for &i in &retained {
                    let rec = &manifest.records[i];
                    let map = load_label_map(rec.labels.as_ref().expect("labelled"), rec.height, rec.width)?;
                    max = max.max(map.max_label());
                }
                max.map_or(0, |m| m as usize + 1)
            }
        },
    };
    if classes == 0 {
        return Err(Error::Config("labelled images contain no labelled pixel".into()));
    }

    let counts: Vec<usize> = retained.iter().map(|&i| manifest.num_patches(&manifest.records[i])).collect();
    let total: usize = counts.iter().sum();
    let amount = config.target_size.min(total);
    let mut chosen = if amount == total {
        (0..total).collect::<Vec<_>>()
    } else {
        let mut rng = stage_rng(config.seed, "bank-sample");
        sample(&mut rng, total, amount).into_vec()
    };
    chosen.sort_unstable();

    let out_dim = head.map_or(manifest.feature_dim, HeadParams::output_dim);
    let mut features: Vec<f32> = Vec::with_capacity(amount * out_dim);
    let mut labels: Vec<f32> = Vec::with_capacity(amount * classes);
    let mut provenance = Vec::with_capacity(amount);
    let mut offset = 0;
    let mut cursor = 0;
    for (slot, (&rec_index, &n)) in retained.iter().zip(&counts).enumerate() {
        let start = cursor;
        while cursor < chosen.len() && chosen[cursor] < offset + n {
            cursor += 1;
        }
        let patches: Vec<usize> = chosen[start..cursor].iter().map(|&g| g - offset).collect();
        offset += n;
        if patches.is_empty() {
            continue;
        }
        let rec = &manifest.records[rec_index];
        let fmap = load_features(manifest, rec)?;
        let label_path = rec.labels.as_ref().expect("labelled");
        let p = manifest.patch_size;
        let (_, grid_cols) = manifest.grid(rec);
        let label_rows: Array2<f64> = match config.mode {
            LabelMode::Discrete => {
                let map = load_label_map(label_path, rec.height, rec.width)?;
                patchify_labels(&map, p, classes)?.values
            }
            LabelMode::Continuous => {
                let depth = load_depth_map(label_path, rec.height, rec.width)?;
                let mut rows = Array2::<f64>::from_elem((n, 1), f64::NAN);
                for (patch, v) in rows.column_mut(0).iter_mut().enumerate() {
                    let (py, px) = (patch / grid_cols * p, patch % grid_cols * p);
                    let (mut sum, mut cnt) = (0.0, 0usize);
                    for y in py..py + p {
                        for &d in &depth[y * rec.width + px..y * rec.width + px + p] {
                            if depth_valid(d) {
                                sum += f64::from(d);
                                cnt += 1;
                            }
                        }
                    }
                    if cnt > 0 {
                        *v = sum / cnt as f64;
                    }
                }
                rows
            }
        };
        let keep: Vec<usize> = patches
            .into_iter()
            .filter(|&i| !is_zero_row(fmap.values().row(i)) && label_rows[[i, 0]].is_finite())
            .collect();
        if keep.is_empty() {
            continue;
        }
        let raw = fmap.values().select(ndarray::Axis(0), &keep);
        let embedded = embed_rows(raw.view(), head)?;
        features.extend(embedded.iter());
        for &i in &keep {
            labels.extend(label_rows.row(i).iter().map(|&v| v as f32));
            provenance.push((slot as u32, i as u32));
        }
    }

    let b = provenance.len();
    if b == 0 {
        return Err(Error::Degenerate("every sampled patch was excluded".into()));
    }
    let meta = BankMeta {
        size: b,
        dim: out_dim,
        label_dim: classes,
        mode: config.mode,
        feature_source: feature_source(head),
        target_size: config.target_size,
        data_fraction: config.data_fraction,
        seed: config.seed,
        patch_size: manifest.patch_size,
        images: retained.iter().map(|&i| manifest.records[i].id.clone()).collect(),
    };
    Ok(MemoryBank {
        features: Array2::from_shape_vec((b, out_dim), features).expect("row count tracked"),
        labels: Array2::from_shape_vec((b, classes), labels).expect("row count tracked"),
        provenance,
        meta,
    })
}
