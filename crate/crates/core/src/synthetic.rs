//! Synthetic datasets and episodes with known structure.
//!
//! Every image is split into two class regions along a patch-grid line.
//! A patch feature is its class's unit vector plus isotropic Gaussian noise;
//! segment maps mark the two regions, and the global feature is the class
//! area histogram plus a little noise.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::incontext::{patchify_labels, FeatureMap, LabelMap};
use crate::seed::stage_rng;
use crate::tensor_store::{write_f32, write_label_map, DatasetManifest, ImageRecord, IGNORE};
use crate::trainer::{Episode, SupportExample};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub images: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub classes: usize,
    /// Per-dimension standard deviation of the patch noise.
    pub noise: f64,
    pub global_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            images: 200,
            grid_rows: 8,
            grid_cols: 8,
            patch_size: 2,
            dim: 32,
            classes: 6,
            noise: 0.1,
            global_noise: 0.02,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticImage {
    pub id: String,
    pub features: FeatureMap,
    /// True class of every pixel.
    pub labels: LabelMap,
    /// Region ids 0 and 1.
    pub segments: LabelMap,
    pub global: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub config: SyntheticConfig,
    pub class_vectors: Array2<f64>,
    pub images: Vec<SyntheticImage>,
}

/// Rows drawn uniformly on the unit sphere.
pub fn random_unit_rows<R: Rng + ?Sized>(rng: &mut R, n: usize, d: usize) -> Array2<f64> {
    let mut m: Array2<f64> = Array2::from_shape_simple_fn((n, d), || StandardNormal.sample(&mut *rng));
    for mut row in m.rows_mut() {
        let norm = row.dot(&row).sqrt();
        row /= norm;
    }
    m
}

pub fn generate(config: &SyntheticConfig) -> Result<SyntheticDataset> {
    if config.classes < 2 || config.grid_rows < 2 || config.grid_cols < 2 || config.dim == 0 {
        return Err(Error::Config("synthetic data needs ≥2 classes, a ≥2x2 grid and D ≥ 1".into()));
    }
    let mut rng = stage_rng(config.seed, "synthetic");
    let class_vectors = random_unit_rows(&mut rng, config.classes, config.dim);
    let noise = Normal::new(0.0, config.noise).map_err(|e| Error::Config(e.to_string()))?;
    let gnoise = Normal::new(0.0, config.global_noise).map_err(|e| Error::Config(e.to_string()))?;
    let (rows, cols, p) = (config.grid_rows, config.grid_cols, config.patch_size);
    let (h, w) = (rows * p, cols * p);

    let mut images = Vec::with_capacity(config.images);
    for i in 0..config.images {
        let a = rng.random_range(0..config.classes);
        let b = (a + rng.random_range(1..config.classes)) % config.classes;
        let vertical = rng.random_bool(0.5);
        let split = rng.random_range(1..if vertical { cols } else { rows });
        let region = |r: usize, c: usize| usize::from(if vertical { c >= split } else { r >= split });
        let class_of = [a, b];

        let mut values = Array2::<f64>::zeros((rows * cols, config.dim));
        for r in 0..rows {
            for c in 0..cols {
                let class = class_of[region(r, c)];
                let mut row = values.row_mut(r * cols + c);
                for (v, &m) in row.iter_mut().zip(class_vectors.row(class)) {
                    *v = m + noise.sample(&mut rng);
                }
            }
        }
        let mut labels = Vec::with_capacity(h * w);
        let mut segments = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let reg = region(y / p, x / p);
                labels.push(class_of[reg] as u16);
                segments.push(reg as u16);
            }
        }
        let mut global = vec![0.0; config.classes];
        for &l in &labels {
            global[l as usize] += 1.0 / (h * w) as f64;
        }
        for g in &mut global {
            *g += gnoise.sample(&mut rng);
        }
        images.push(SyntheticImage {
            id: format!("img{i:04}"),
            features: FeatureMap::new(values, rows, cols, p)?,
            labels: LabelMap::new(h, w, labels)?,
            segments: LabelMap::new(h, w, segments)?,
            global,
        });
    }
    Ok(SyntheticDataset {
        config: config.clone(),
        class_vectors,
        images,
    })
}

/// Which optional per-image files to write.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WriteOptions {
    pub labels: bool,
    pub segments: bool,
    pub global: bool,
    pub num_classes: bool,
}

impl Default for WriteOptions {
    fn default() -> Self {
        WriteOptions {
            labels: true,
            segments: true,
            global: true,
            num_classes: true,
        }
    }
}

/// Writes tensor files under `dir` and saves `dir/manifest.toml`.
pub fn write_dataset(data: &SyntheticDataset, dir: &Path, opts: WriteOptions) -> Result<DatasetManifest> {
    for sub in ["features", "global", "segments", "labels"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let cfg = &data.config;
    let mut records = Vec::with_capacity(data.images.len());
    for im in &data.images {
        let features = dir.join("features").join(format!("{}.dipt", im.id));
        let values: Vec<f32> = im.features.values().iter().map(|&v| v as f32).collect();
        write_f32(&features, &[im.features.len() as u64, cfg.dim as u64], &values)?;
        let global = if opts.global {
            let p = dir.join("global").join(format!("{}.dipt", im.id));
            let g: Vec<f32> = im.global.iter().map(|&v| v as f32).collect();
            write_f32(&p, &[g.len() as u64], &g)?;
            Some(p)
        } else {
            None
        };
        let segments = if opts.segments {
            let p = dir.join("segments").join(format!("{}.dipt", im.id));
            write_label_map(&p, &im.segments)?;
            Some(p)
        } else {
            None
        };
        let labels = if opts.labels {
            let p = dir.join("labels").join(format!("{}.dipt", im.id));
            write_label_map(&p, &im.labels)?;
            Some(p)
        } else {
            None
        };
        records.push(ImageRecord {
            id: im.id.clone(),
            height: im.labels.height(),
            width: im.labels.width(),
            features,
            global,
            segments,
            labels,
        });
    }
    let manifest = DatasetManifest {
        root: dir.to_path_buf(),
        patch_size: cfg.patch_size,
        feature_dim: cfg.dim,
        global_dim: opts.global.then_some(cfg.classes),
        num_classes: opts.num_classes.then_some(cfg.classes),
        records,
    };
    manifest.save(dir.join("manifest.toml"))?;
    Ok(manifest)
}

/// Sizes of a random episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeShape {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub classes: usize,
    pub support: usize,
}

fn random_labels<R: Rng + ?Sized>(rng: &mut R, h: usize, w: usize, classes: usize, ignore_rate: f64) -> LabelMap {
    let data = (0..h * w)
        .map(|_| {
            if rng.random_bool(ignore_rate) {
                IGNORE
            } else {
                rng.random_range(0..classes) as u16
            }
        })
        .collect();
    LabelMap::new(h, w, data).expect("sizes match")
}

fn random_features<R: Rng + ?Sized>(rng: &mut R, s: &EpisodeShape) -> FeatureMap {
    let values: Array2<f64> = Array2::from_shape_simple_fn((s.grid_rows * s.grid_cols, s.dim), || {
        StandardNormal.sample(&mut *rng)
    });
    FeatureMap::new(values, s.grid_rows, s.grid_cols, s.patch_size).expect("sizes match")
}

/// An episode with Gaussian features and uniformly random pixel labels
/// (about 10% ignored, never all ignored in the query).
pub fn random_episode<R: Rng + ?Sized>(rng: &mut R, s: &EpisodeShape) -> Episode {
    let (h, w) = (s.grid_rows * s.patch_size, s.grid_cols * s.patch_size);
    let mut query_labels = random_labels(rng, h, w, s.classes, 0.1);
    if query_labels.max_label().is_none() {
        query_labels.set(0, 0, 0);
    }
    let support = (0..s.support)
        .map(|i| SupportExample {
            source: i + 1,
            features: random_features(rng, s),
            labels: patchify_labels(&random_labels(rng, h, w, s.classes, 0.1), s.patch_size, s.classes)
                .expect("geometry"),
        })
        .collect();
    Episode {
        query_source: 0,
        query_features: random_features(rng, s),
        query_patch_labels: patchify_labels(&query_labels, s.patch_size, s.classes).expect("geometry"),
        query_labels,
        support,
        positive: 0,
        crops: None,
    }
}

/// Mean feature of each true class over all patches (diagnostics).
pub fn class_means(data: &SyntheticDataset) -> Array2<f64> {
    let c = data.config.classes;
    let mut sums = Array2::<f64>::zeros((c, data.config.dim));
    let mut counts = Array1::<f64>::zeros(c);
    let p = data.config.patch_size;
    for im in &data.images {
        let cols = im.features.grid().1;
        for (i, row) in im.features.values().rows().into_iter().enumerate() {
            let class = im.labels.get(i / cols * p, i % cols * p) as usize;
            sums.row_mut(class).scaled_add(1.0, &row);
            counts[class] += 1.0;
        }
    }
    for (mut row, &n) in sums.rows_mut().into_iter().zip(counts.iter()) {
        if n > 0.0 {
            row /= n;
        }
    }
    sums
}
