//! Automatic construction of pseudo in-context tasks.
//!
//! Class-agnostic segments are pooled into feature vectors, clustered into
//! pseudo-classes, and painted back onto pixels by majority vote. Images are
//! paired with global-feature neighbours that share a large pseudo-class, and
//! episodes combine such a pair with randomly drawn distractor images.

mod episode;
mod kmeans;
mod labels;
mod pairs;
mod pooling;
mod pseudo;

pub use episode::{sample_distractors, sample_episode, sample_two_crop_episode};
pub use kmeans::{kmeans, kmeans_restarts, KMeansModel};
pub use labels::{build_pseudo_labels, LabelConfig, PseudoLabels};
pub use pairs::{
    class_areas, global_neighbors, mine_pairs_from_manifest, mine_positive_pairs, shared_class, PairConfig, PositivePair,
    PositivePairList,
};
pub use pooling::{pixelize_features, pool_segment_features, PixelFeatures, PooledSegment, SegmentPool};
pub use pseudo::{assign_pseudo_classes, PseudoLabelMap};
