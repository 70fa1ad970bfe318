use std::collections::BTreeMap;
use std::path::Path;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::incontext::{l2_normalize_rows, LabelMap};
use crate::tensor_store::{load_global, load_label_map, DatasetManifest, IGNORE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairConfig {
    /// Global-feature neighbours considered per query image.
    pub top_n: usize,
    /// Minimum area fraction of the shared class in both images (exclusive).
    pub area_thresh: f64,
}

impl Default for PairConfig {
    fn default() -> Self {
        PairConfig {
            top_n: 5,
            area_thresh: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PositivePair {
    #[serde(rename = "query_id")]
    pub query: String,
    #[serde(rename = "positive_id")]
    pub positive: String,
    pub class_id: u16,
}

/// Directed (query → positive) pairs in mining order.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PositivePairList {
    #[serde(default)]
    pub pairs: Vec<PositivePair>,
}

impl PositivePairList {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("pair list serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            field: "pairs".into(),
            reason: e.message().to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

/// Pixel count of every class present in `map`.
pub fn class_areas(map: &LabelMap) -> BTreeMap<u16, usize> {
    let mut areas = BTreeMap::new();
    for &v in map.data() {
        if v != IGNORE {
            *areas.entry(v).or_insert(0) += 1;
        }
    }
    areas
}

/// The shared class with the largest combined area among those covering more
/// than `area_thresh` of both images (ties → smaller id).
pub fn shared_class(a: &LabelMap, b: &LabelMap, area_thresh: f64) -> Option<u16> {
    let total_a = (a.height() * a.width()) as f64;
    let total_b = (b.height() * b.width()) as f64;
    let areas_b = class_areas(b);
    let mut best: Option<(usize, u16)> = None;
    for (class, na) in class_areas(a) {
        let Some(&nb) = areas_b.get(&class) else { continue };
        if na as f64 / total_a > area_thresh && nb as f64 / total_b > area_thresh {
            let combined = na + nb;
            if best.is_none_or(|(c, _)| combined > c) {
                best = Some((combined, class));
            }
        }
    }
    best.map(|(_, class)| class)
}

/// Indices of the `top_n` most cosine-similar rows to every row, self excluded.
///
/// Ordered by similarity, ties → smaller index.
pub fn global_neighbors(global: ArrayView2<f64>, top_n: usize) -> Result<Vec<Vec<usize>>> {
    let g = l2_normalize_rows(global)?;
    let sims = g.dot(&g.t());
    let n = g.nrows();
    Ok((0..n)
        .map(|i| {
            let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            others.sort_by(|&a, &b| sims[[i, b]].total_cmp(&sims[[i, a]]).then(a.cmp(&b)));
            others.truncate(top_n);
            others
        })
        .collect())
}

/// Mines query → positive pairs from global-feature neighbours, keeping pairs
/// whose pseudo-label maps share a sufficiently large class.
pub fn mine_positive_pairs(
    global: ArrayView2<f64>,
    maps: &[LabelMap],
    ids: &[String],
    top_n: usize,
    area_thresh: f64,
) -> Result<PositivePairList> {
    let n = global.nrows();
    if n < 2 {
        return Err(Error::Cardinality(format!("need at least 2 images to mine pairs, got {n}")));
    }
    if maps.len() != n || ids.len() != n {
        return Err(Error::Shape(format!(
            "{n} global features, {} label maps, {} ids",
            maps.len(),
            ids.len()
        )));
    }
    if top_n == 0 {
        return Err(Error::Parameter("top_n must be at least 1".into()));
    }
    if !(area_thresh > 0.0 && area_thresh < 1.0) {
        return Err(Error::Parameter(format!("area threshold {area_thresh} outside (0, 1)")));
    }
    let neighbors = global_neighbors(global, top_n)?;
    let mut pairs = Vec::new();
    for (q, cands) in neighbors.iter().enumerate() {
        for &p in cands {
            if let Some(class_id) = shared_class(&maps[q], &maps[p], area_thresh) {
                pairs.push(PositivePair {
                    query: ids[q].clone(),
                    positive: ids[p].clone(),
                    class_id,
                });
            }
        }
    }
    Ok(PositivePairList { pairs })
}

/// Mines pairs over a manifest whose records carry global features and
/// (pseudo-)label maps.
pub fn mine_pairs_from_manifest(manifest: &DatasetManifest, config: &PairConfig) -> Result<PositivePairList> {
    let mut rows = Vec::with_capacity(manifest.len());
    let mut maps = Vec::with_capacity(manifest.len());
    for rec in &manifest.records {
        let g = rec
            .global
            .as_ref()
            .ok_or_else(|| Error::Config(format!("image `{}` has no global feature", rec.id)))?;
        let l = rec
            .labels
            .as_ref()
            .ok_or_else(|| Error::Config(format!("image `{}` has no label map", rec.id)))?;
        rows.push(load_global(g, manifest.global_dim.or_else(|| rows.first().map(Vec::len)))?);
        maps.push(load_label_map(l, rec.height, rec.width)?);
    }
    let dg = rows.first().map_or(0, Vec::len);
    let global = ndarray::Array2::from_shape_vec((rows.len(), dg), rows.concat()).expect("uniform global dims");
    let ids: Vec<String> = manifest.records.iter().map(|r| r.id.clone()).collect();
    mine_positive_pairs(global.view(), &maps, &ids, config.top_n, config.area_thresh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identical_images_pair_both_ways() {
        let g = array![[1.0, 0.0], [1.0, 0.0]];
        let maps = vec![LabelMap::filled(4, 4, 2), LabelMap::filled(4, 4, 2)];
        let ids = vec!["a".to_string(), "b".to_string()];
        let out = mine_positive_pairs(g.view(), &maps, &ids, 5, 0.05).unwrap();
        assert_eq!(
            out.pairs,
            vec![
                PositivePair { query: "a".into(), positive: "b".into(), class_id: 2 },
                PositivePair { query: "b".into(), positive: "a".into(), class_id: 2 },
            ]
        );
    }

    #[test]
    fn small_shared_class_is_filtered() {
        // class 1 covers 1 of 100 pixels in the first image
        let mut a = LabelMap::filled(10, 10, 0);
        a.set(0, 0, 1);
        let b = LabelMap::filled(10, 10, 1);
        assert_eq!(shared_class(&a, &b, 0.05), None);
        let g = array![[1.0, 0.1], [1.0, 0.0]];
        let ids = vec!["a".to_string(), "b".to_string()];
        let out = mine_positive_pairs(g.view(), &[a, b], &ids, 1, 0.05).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn area_uses_total_pixels() {
        // class 0 is 4 of 100 pixels but 4 of 4 non-ignored pixels
        let mut a = LabelMap::filled(10, 10, IGNORE);
        for x in 0..4 {
            a.set(0, x, 0);
        }
        let b = LabelMap::filled(10, 10, 0);
        assert_eq!(shared_class(&a, &b, 0.05), None);
        assert_eq!(shared_class(&a, &b, 0.03), Some(0));
    }

    #[test]
    fn errors() {
        let g = array![[1.0]];
        let ids = vec!["a".to_string()];
        assert!(matches!(
            mine_positive_pairs(g.view(), &[LabelMap::filled(1, 1, 0)], &ids, 5, 0.05),
            Err(Error::Cardinality(_))
        ));
    }

    #[test]
    fn pair_list_roundtrip() {
        let list = PositivePairList {
            pairs: vec![PositivePair { query: "x".into(), positive: "y".into(), class_id: 9 }],
        };
        let text = list.to_toml();
        assert!(text.contains("query_id = \"x\""));
        assert_eq!(PositivePairList::from_toml(&text).unwrap(), list);
    }
}
