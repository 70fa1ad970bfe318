use std::collections::BTreeMap;

use super::kmeans::KMeansModel;
use super::pooling::{pixelize_features, segment_patch_counts, SegmentPool};
use crate::error::{Error, Result};
use crate::incontext::{FeatureMap, LabelMap};
use crate::tensor_store::IGNORE;

/// Pseudo-class of every pixel: the majority cluster of its segment.
pub type PseudoLabelMap = LabelMap;

/// Labels each segment with the most frequent nearest-centroid id among its pixels.
///
/// Every pixel takes the cluster of the centroid nearest to its (patch-constant)
/// feature; the segment then takes the id with most pixels, ties going to the
/// smaller id. Unsegmented pixels stay [`IGNORE`].
pub fn assign_pseudo_classes(
    pool: &SegmentPool,
    model: &KMeansModel,
    features: &FeatureMap,
    segments: &LabelMap,
) -> Result<PseudoLabelMap> {
    if model.dim() != features.dim() {
        return Err(Error::Shape(format!(
            "centroids have D={}, features D={}",
            model.dim(),
            features.dim()
        )));
    }
    if model.k() >= IGNORE as usize {
        return Err(Error::Shape(format!("{} clusters do not fit u16 labels", model.k())));
    }
    let pixels = pixelize_features(features, segments.height(), segments.width())?;
    let patch_cluster: Vec<usize> = features
        .values()
        .rows()
        .into_iter()
        .map(|r| model.nearest(r).0)
        .collect();

    let mut voted: BTreeMap<u16, u16> = BTreeMap::new();
    for (seg, patches) in segment_patch_counts(&pixels, segments) {
        if !pool.contains(seg) {
            return Err(Error::Shape(format!("segment {seg} missing from the pool")));
        }
        let mut votes = vec![0usize; model.k()];
        for (patch, n) in patches {
            votes[patch_cluster[patch]] += n;
        }
        let mut best = 0;
        for (c, &v) in votes.iter().enumerate() {
            if v > votes[best] {
                best = c;
            }
        }
        voted.insert(seg, best as u16);
    }

    let data = segments
        .data()
        .iter()
        .map(|s| if *s == IGNORE { IGNORE } else { voted[s] })
        .collect();
    LabelMap::new(segments.height(), segments.width(), data)
}
