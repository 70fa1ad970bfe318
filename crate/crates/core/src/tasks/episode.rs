use rand::seq::index::sample;
use rand::Rng;

use super::pairs::PositivePairList;
use crate::error::{Error, Result};
use crate::incontext::{patchify_labels, LabelMap, PatchLabels};
use crate::tensor_store::Dataset;
use crate::trainer::{CropRect, Episode, SupportExample};

fn labels_of(dataset: &Dataset, index: usize) -> Result<&LabelMap> {
    dataset.images[index].labels.as_ref().ok_or_else(|| {
        Error::Config(format!("image `{}` has no label map", dataset.images[index].id))
    })
}

fn patch_labels(dataset: &Dataset, labels: &LabelMap) -> Result<PatchLabels> {
    patchify_labels(labels, dataset.patch_size, dataset.num_classes)
}

/// `count` distinct dataset indices drawn uniformly, skipping `excluded`.
pub fn sample_distractors<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    excluded: &[usize],
    count: usize,
) -> Result<Vec<usize>> {
    let mut excluded = excluded.to_vec();
    excluded.sort_unstable();
    excluded.dedup();
    let pool = n - excluded.len();
    if count > pool {
        return Err(Error::Cardinality(format!(
            "need {count} distractors but only {pool} images are available"
        )));
    }
    Ok(sample(rng, pool, count)
        .into_iter()
        .map(|mut i| {
            for &e in &excluded {
                if i >= e {
                    i += 1;
                }
            }
            i
        })
        .collect())
}

fn distractor_support<R: Rng + ?Sized>(
    dataset: &Dataset,
    rng: &mut R,
    excluded: &[usize],
    count: usize,
) -> Result<Vec<SupportExample>> {
    sample_distractors(rng, dataset.len(), excluded, count)?
        .into_iter()
        .map(|i| {
            Ok(SupportExample {
                source: i,
                features: dataset.images[i].features.clone(),
                labels: patch_labels(dataset, labels_of(dataset, i)?)?,
            })
        })
        .collect()
}

/// Builds the episode for pair `pair_index`: its positive first, then `k - 1`
/// distractors drawn from the rest of the dataset.
pub fn sample_episode<R: Rng + ?Sized>(
    pairs: &PositivePairList,
    dataset: &Dataset,
    pair_index: usize,
    k: usize,
    rng: &mut R,
) -> Result<Episode> {
    if k == 0 {
        return Err(Error::Cardinality("support size must be at least 1".into()));
    }
    if dataset.len() < k + 1 {
        return Err(Error::Cardinality(format!(
            "support size {k} needs {} images, dataset has {}",
            k + 1,
            dataset.len()
        )));
    }
    let pair = pairs.pairs.get(pair_index).ok_or_else(|| {
        Error::Cardinality(format!("pair {pair_index} of {}", pairs.len()))
    })?;
    let find = |id: &str| {
        dataset
            .index_of(id)
            .ok_or_else(|| Error::Config(format!("image `{id}` not in dataset")))
    };
    let q = find(&pair.query)?;
    let p = find(&pair.positive)?;
    if q == p {
        return Err(Error::Config(format!("pair {pair_index} pairs `{}` with itself", pair.query)));
    }

    let query_labels = labels_of(dataset, q)?.clone();
    let mut support = vec![SupportExample {
        source: p,
        features: dataset.images[p].features.clone(),
        labels: patch_labels(dataset, labels_of(dataset, p)?)?,
    }];
    support.extend(distractor_support(dataset, rng, &[q, p], k - 1)?);
    Ok(Episode {
        query_source: q,
        query_features: dataset.images[q].features.clone(),
        query_patch_labels: patch_labels(dataset, &query_labels)?,
        query_labels,
        support,
        positive: 0,
        crops: None,
    })
}

/// Episode whose query and positive are two random patch-aligned crops of one image.
///
/// Each crop spans `round(crop_fraction · rows)` × `round(crop_fraction · cols)`
/// patches (at least one).
pub fn sample_two_crop_episode<R: Rng + ?Sized>(
    dataset: &Dataset,
    image_index: usize,
    k: usize,
    crop_fraction: f64,
    rng: &mut R,
) -> Result<Episode> {
    if k == 0 {
        return Err(Error::Cardinality("support size must be at least 1".into()));
    }
    if image_index >= dataset.len() {
        return Err(Error::Cardinality(format!("image {image_index} of {}", dataset.len())));
    }
    if !(crop_fraction > 0.0) || crop_fraction > 1.0 {
        return Err(Error::Geometry(format!(
            "crop fraction {crop_fraction} does not fit inside the image"
        )));
    }
    let image = &dataset.images[image_index];
    let labels = labels_of(dataset, image_index)?;
    let (rows, cols) = image.features.grid();
    let p = dataset.patch_size;
    let crop_rows = ((rows as f64 * crop_fraction).round() as usize).clamp(1, rows);
    let crop_cols = ((cols as f64 * crop_fraction).round() as usize).clamp(1, cols);

    let crop = |rng: &mut R| -> Result<(CropRect, SupportExample, LabelMap)> {
        let r0 = rng.random_range(0..=rows - crop_rows);
        let c0 = rng.random_range(0..=cols - crop_cols);
        let rect = CropRect {
            y: r0 * p,
            x: c0 * p,
            height: crop_rows * p,
            width: crop_cols * p,
        };
        let features = image.features.crop(r0, c0, crop_rows, crop_cols)?;
        let pixel_labels = labels.crop(rect.y, rect.x, rect.height, rect.width)?;
        let example = SupportExample {
            source: image_index,
            features,
            labels: patch_labels(dataset, &pixel_labels)?,
        };
        Ok((rect, example, pixel_labels))
    };
    let (query_rect, query, query_labels) = crop(rng)?;
    let (positive_rect, positive, _) = crop(rng)?;

    let mut support = vec![positive];
    support.extend(distractor_support(dataset, rng, &[image_index], k - 1)?);
    Ok(Episode {
        query_source: image_index,
        query_features: query.features,
        query_patch_labels: query.labels,
        query_labels,
        support,
        positive: 0,
        crops: Some((query_rect, positive_rect)),
    })
}
