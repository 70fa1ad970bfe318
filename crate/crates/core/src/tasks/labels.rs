use ndarray::Array2;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::kmeans::{kmeans_restarts, KMeansModel};
use super::pooling::{pool_segment_features, SegmentPool};
use super::pseudo::assign_pseudo_classes;
use crate::error::{Error, Result};
use crate::incontext::LabelMap;
use crate::seed::stage_rng;
use crate::tensor_store::{load_features, load_label_map, DatasetManifest, ImageRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelConfig {
    /// Number of pseudo-classes.
    pub k: usize,
    pub max_iters: usize,
    /// Independent k-means++ runs; the lowest inertia wins.
    pub restarts: usize,
    /// Cluster a seeded subset of this many pooled segments instead of all.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cluster_sample: Option<usize>,
    pub seed: u64,
}

impl Default for LabelConfig {
    fn default() -> Self {
        LabelConfig {
            k: 1000,
            max_iters: 100,
            restarts: 1,
            cluster_sample: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PseudoLabels {
    pub model: KMeansModel,
    /// One map per manifest record, in order.
    pub maps: Vec<LabelMap>,
    pub segments: usize,
}

fn segments_of(rec: &ImageRecord) -> Result<LabelMap> {
    let path = rec
        .segments
        .as_ref()
        .ok_or_else(|| Error::Config(format!("image `{}` has no segment map", rec.id)))?;
    load_label_map(path, rec.height, rec.width)
}

/// Pools every image's segments, clusters the pooled features and labels
/// every pixel with its segment's majority cluster.
pub fn build_pseudo_labels(manifest: &DatasetManifest, config: &LabelConfig) -> Result<PseudoLabels> {
    if manifest.is_empty() {
        return Err(Error::Config("manifest has no records".into()));
    }
    let mut pools: Vec<SegmentPool> = Vec::with_capacity(manifest.len());
    for rec in &manifest.records {
        let features = load_features(manifest, rec)?;
        pools.push(pool_segment_features(&features, &segments_of(rec)?)?);
    }
    let total: usize = pools.iter().map(SegmentPool::len).sum();
    let d = manifest.feature_dim;
    let rows: Vec<usize> = match config.cluster_sample {
        Some(n) if n < total => {
            let mut rng = stage_rng(config.seed, "cluster-sample");
            let mut picked = sample(&mut rng, total, n).into_vec();
            picked.sort_unstable();
            picked
        }
        _ => (0..total).collect(),
    };
    let mut points = Array2::<f64>::zeros((rows.len(), d));
    let mut all = pools.iter().flat_map(|p| p.segments.iter()).enumerate();
    for (out, &want) in rows.iter().enumerate() {
        let seg = all.find(|(i, _)| *i == want).expect("sorted indices").1;
        points.row_mut(out).assign(&seg.feature);
    }
    let (model, _) = kmeans_restarts(points.view(), config.k, config.max_iters, config.seed, config.restarts)?;

    let mut maps = Vec::with_capacity(manifest.len());
    for (rec, pool) in manifest.records.iter().zip(&pools) {
        let features = load_features(manifest, rec)?;
        maps.push(assign_pseudo_classes(pool, &model, &features, &segments_of(rec)?)?);
    }
    Ok(PseudoLabels {
        model,
        maps,
        segments: total,
    })
}
