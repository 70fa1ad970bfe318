use std::collections::BTreeMap;

use ndarray::{Array1, ArrayView1};

use crate::error::{Error, Result};
use crate::incontext::{FeatureMap, LabelMap};
use crate::tensor_store::IGNORE;

/// Pixel-resolution view of patch features: every pixel reads its patch row.
#[derive(Debug, Clone, Copy)]
pub struct PixelFeatures<'a> {
    features: &'a FeatureMap,
}

impl<'a> PixelFeatures<'a> {
    pub fn height(&self) -> usize {
        self.features.height()
    }

    pub fn width(&self) -> usize {
        self.features.width()
    }

    /// Patch index `⌊y/P⌋·cols + ⌊x/P⌋`.
    pub fn patch_index(&self, y: usize, x: usize) -> usize {
        let p = self.features.patch_size();
        (y / p) * self.features.grid().1 + x / p
    }

    pub fn pixel(&self, y: usize, x: usize) -> ArrayView1<'a, f64> {
        self.features.values().row(self.patch_index(y, x))
    }
}

pub fn pixelize_features(features: &FeatureMap, height: usize, width: usize) -> Result<PixelFeatures<'_>> {
    if (height, width) != (features.height(), features.width()) {
        return Err(Error::Shape(format!(
            "{height}x{width} pixels vs {}x{} covered by the feature grid",
            features.height(),
            features.width()
        )));
    }
    Ok(PixelFeatures { features })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PooledSegment {
    pub id: u16,
    pub feature: Array1<f64>,
    pub area: usize,
}

/// Mean features of every segment of one image, ordered by segment id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SegmentPool {
    pub segments: Vec<PooledSegment>,
}

impl SegmentPool {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn contains(&self, id: u16) -> bool {
        self.segments.binary_search_by_key(&id, |s| s.id).is_ok()
    }
}

/// Pixel counts of every (segment, patch) pair.
pub(crate) fn segment_patch_counts(
    pixels: &PixelFeatures<'_>,
    segments: &LabelMap,
) -> BTreeMap<u16, BTreeMap<usize, usize>> {
    let mut counts: BTreeMap<u16, BTreeMap<usize, usize>> = BTreeMap::new();
    for y in 0..segments.height() {
        for x in 0..segments.width() {
            let id = segments.get(y, x);
            if id == IGNORE {
                continue;
            }
            *counts
                .entry(id)
                .or_default()
                .entry(pixels.patch_index(y, x))
                .or_default() += 1;
        }
    }
    counts
}

/// Averages pixelized features over each segment's pixels.
///
/// Pixels with segment id [`IGNORE`] belong to no segment.
pub fn pool_segment_features(features: &FeatureMap, segments: &LabelMap) -> Result<SegmentPool> {
    let pixels = pixelize_features(features, segments.height(), segments.width())?;
    let counts = segment_patch_counts(&pixels, segments);
    if counts.is_empty() {
        return Err(Error::Degenerate("segment map has no segmented pixels".into()));
    }
    let values = features.values();
    let segments = counts
        .into_iter()
        .map(|(id, patches)| {
            let area: usize = patches.values().sum();
            let mut feature = Array1::<f64>::zeros(features.dim());
            for (patch, n) in patches {
                feature.scaled_add(n as f64, &values.row(patch));
            }
            feature /= area as f64;
            PooledSegment { id, feature, area }
        })
        .collect();
    Ok(SegmentPool { segments })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};

    fn grid_2x2() -> FeatureMap {
        FeatureMap::new(
            array![[1.0, 0.0], [0.0, 1.0], [2.0, 2.0], [-1.0, 3.0]],
            2,
            2,
            2,
        )
        .unwrap()
    }

    #[test]
    fn pixel_view_indexing() {
        let f = grid_2x2();
        let v = pixelize_features(&f, 4, 4).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(v.patch_index(y, x), (y / 2) * 2 + x / 2);
                assert_eq!(v.pixel(y, x), f.values().row(v.patch_index(y, x)));
            }
        }
        assert!(matches!(pixelize_features(&f, 4, 6), Err(Error::Shape(_))));

        let single = FeatureMap::new(array![[0.5, 0.25]], 1, 1, 3).unwrap();
        let v = pixelize_features(&single, 3, 3).unwrap();
        assert!((0..9).all(|i| v.pixel(i / 3, i % 3) == single.values().row(0)));
    }

    #[test]
    fn whole_image_segment_is_mean_of_patches() {
        let f = grid_2x2();
        let pool = pool_segment_features(&f, &LabelMap::filled(4, 4, 0)).unwrap();
        assert_eq!(pool.len(), 1);
        assert_eq!(pool.segments[0].area, 16);
        assert_eq!(pool.segments[0].feature, array![0.5, 1.5]);
    }

    #[test]
    fn block_segment_recovers_patch_row() {
        let f = grid_2x2();
        let mut seg = LabelMap::filled(4, 4, 1);
        for y in 2..4 {
            for x in 0..2 {
                seg.set(y, x, 5);
            }
        }
        let pool = pool_segment_features(&f, &seg).unwrap();
        let five = pool.segments.iter().find(|s| s.id == 5).unwrap();
        assert_eq!(five.feature, f.values().row(2));
        assert_eq!(five.area, 4);
    }

    #[test]
    fn all_ignored_is_degenerate() {
        assert!(matches!(
            pool_segment_features(&grid_2x2(), &LabelMap::filled(4, 4, IGNORE)),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn random_segments_match_pixel_loop() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let values = Array2::from_shape_simple_fn((4, 3), || rng.random_range(-1.0..1.0));
        let f = FeatureMap::new(values, 2, 2, 3).unwrap();
        let data: Vec<u16> = (0..36).map(|_| rng.random_range(0..3) * 7).collect();
        let seg = LabelMap::new(6, 6, data.clone()).unwrap();
        let pool = pool_segment_features(&f, &seg).unwrap();
        let mut sums: BTreeMap<u16, (Vec<f64>, usize)> = BTreeMap::new();
        for y in 0..6 {
            for x in 0..6 {
                let e = sums.entry(data[y * 6 + x]).or_insert((vec![0.0; 3], 0));
                let row = (y / 3) * 2 + x / 3;
                for d in 0..3 {
                    e.0[d] += f.values()[[row, d]];
                }
                e.1 += 1;
            }
        }
        assert_eq!(pool.len(), sums.len());
        for (entry, (id, (sum, area))) in pool.segments.iter().zip(sums) {
            assert_eq!(entry.id, id);
            assert_eq!(entry.area, area);
            for d in 0..3 {
                assert!((entry.feature[d] - sum[d] / area as f64).abs() < 1e-12);
            }
        }
    }
}
