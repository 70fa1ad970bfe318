use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bank::{depth_valid, embed_rows, feature_source, LabelMode, MemoryBank};
use super::metrics::{ConfusionMatrix, DepthAccumulator};
use super::propagate::propagate_labels;
use super::search::{topk_search_with, SearchOptions};
use crate::error::{Error, Result};
use crate::incontext::LabelMap;
use crate::tensor_store::{load_depth_map, load_features, load_label_map, DatasetManifest, IGNORE};
use crate::trainer::HeadParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Neighbours retrieved per query patch.
    pub k: usize,
    pub tau: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { k: 30, tau: 0.07 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iou: Option<f64>,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: LabelMode,
    pub feature_source: String,
    pub k: usize,
    pub tau: f64,
    pub bank_size: usize,
    pub seed: u64,
    pub data_fraction: f64,
    pub images: usize,
    pub evaluated_pixels: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub miou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rmse: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub classes: Vec<ClassReport>,
}

impl EvalReport {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report serializes")
    }

    /// One row per class (discrete) or a single `rmse` row (continuous).
    pub fn to_csv(&self) -> String {
        match self.mode {
            LabelMode::Discrete => {
                let mut out = String::from("class,iou,tp,fp,fn\n");
                for c in &self.classes {
                    let iou = c.iou.map_or(String::new(), |v| v.to_string());
                    out.push_str(&format!("{},{iou},{},{},{}\n", c.class, c.tp, c.fp, c.fn_));
                }
                out
            }
            LabelMode::Continuous => format!(
                "metric,value,pixels\nrmse,{},{}\n",
                self.rmse.unwrap_or(f64::NAN),
                self.evaluated_pixels
            ),
        }
    }
}

/// Pixel class map from patch predictions: each patch's argmax (ties → smaller
/// class) painted over its block. Rows with no positive mass predict nothing.
pub fn paint_argmax(pred: ArrayView2<f64>, patch: usize, height: usize, width: usize) -> Result<LabelMap> {
    let cols = width / patch;
    if patch == 0 || height % patch != 0 || width % patch != 0 || pred.nrows() != (height / patch) * cols {
        return Err(Error::Geometry(format!(
            "{} patch predictions do not tile {height}x{width} at patch size {patch}",
            pred.nrows()
        )));
    }
    let ids: Vec<u16> = pred
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            if row.get(best).is_some_and(|&v| v > 0.0) {
                best as u16
            } else {
                IGNORE
            }
        })
        .collect();
    let data = (0..height * width)
        .map(|i| ids[(i / width / patch) * cols + (i % width) / patch])
        .collect();
    LabelMap::new(height, width, data)
}

enum ImageScore {
    Discrete(ConfusionMatrix),
    Continuous(DepthAccumulator),
}

/// Retrieval evaluation of every record of `manifest` against `bank`.
///
/// Queries are embedded like the bank (raw, or through `head`); the two must
/// agree. Metrics are accumulated over all pixels before division; per-image
/// partial results are combined in manifest order.
pub fn evaluate(
    manifest: &DatasetManifest,
    bank: &MemoryBank,
    head: Option<&HeadParams>,
    config: &EvalConfig,
) -> Result<EvalReport> {
    evaluate_with(manifest, bank, head, config, SearchOptions::default())
}

pub fn evaluate_with(
    manifest: &DatasetManifest,
    bank: &MemoryBank,
    head: Option<&HeadParams>,
    config: &EvalConfig,
    search: SearchOptions,
) -> Result<EvalReport> {
    let source = feature_source(head);
    if source != bank.meta.feature_source {
        return Err(Error::Config(format!(
            "bank features are `{}` but evaluation features are `{source}`",
            bank.meta.feature_source
        )));
    }
    if manifest.is_empty() {
        return Err(Error::Config("evaluation manifest has no records".into()));
    }
    if let Some(rec) = manifest.records.iter().find(|r| r.labels.is_none()) {
        return Err(Error::Config(format!("evaluation image `{}` has no labels", rec.id)));
    }
    let classes = bank.label_dim();
    let mode = bank.meta.mode;
    let p = manifest.patch_size;

    let scores: Vec<ImageScore> = manifest
        .records
        .par_iter()
        .map(|rec| -> Result<ImageScore> {
            let fmap = load_features(manifest, rec)?;
            let queries = embed_rows(fmap.values().view(), head)?;
            let result = topk_search_with(bank.features.view(), queries.view(), config.k, search)?;
            let pred = propagate_labels(&result, bank.labels.view(), config.tau)?;
            let label_path = rec.labels.as_ref().expect("checked");
            match mode {
                LabelMode::Discrete => {
                    let gt = load_label_map(label_path, rec.height, rec.width)?;
                    let map = paint_argmax(pred.view(), p, rec.height, rec.width)?;
                    let mut cm = ConfusionMatrix::new(classes);
                    cm.add(&map, &gt)?;
                    Ok(ImageScore::Discrete(cm))
                }
                LabelMode::Continuous => {
                    let gt = load_depth_map(label_path, rec.height, rec.width)?;
                    let cols = rec.width / p;
                    let pixels: Vec<f64> = (0..rec.height * rec.width)
                        .map(|i| pred[[(i / rec.width / p) * cols + (i % rec.width) / p, 0]])
                        .collect();
                    let valid: Vec<bool> = gt.iter().map(|&g| depth_valid(g)).collect();
                    let gt: Vec<f64> = gt.into_iter().map(f64::from).collect();
                    let mut acc = DepthAccumulator::default();
                    acc.add(&pixels, &gt, &valid)?;
                    Ok(ImageScore::Continuous(acc))
                }
            }
        })
        .collect::<Result<_>>()?;

    let mut report = EvalReport {
        mode,
        feature_source: source,
        k: config.k,
        tau: config.tau,
        bank_size: bank.len(),
        seed: bank.meta.seed,
        data_fraction: bank.meta.data_fraction,
        images: manifest.len(),
        evaluated_pixels: 0,
        miou: None,
        rmse: None,
        classes: Vec::new(),
    };
    match mode {
        LabelMode::Discrete => {
            let mut cm = ConfusionMatrix::new(classes);
            for s in &scores {
                if let ImageScore::Discrete(m) = s {
                    cm.merge(m);
                }
            }
            report.evaluated_pixels = cm.evaluated_pixels();
            report.miou = Some(cm.mean_iou());
            report.classes = cm
                .per_class_iou()
                .into_iter()
                .enumerate()
                .map(|(class, iou)| {
                    let (tp, fp, fn_) = cm.class_counts(class);
                    ClassReport { class, iou, tp, fp, fn_ }
                })
                .collect();
        }
        LabelMode::Continuous => {
            let mut acc = DepthAccumulator::default();
            for s in &scores {
                if let ImageScore::Continuous(a) = s {
                    acc.merge(a);
                }
            }
            report.evaluated_pixels = acc.count;
            report.rmse = Some(acc.rmse()?);
        }
    }
    Ok(report)
}

/// Patch predictions of one image (used by tests and diagnostics).
pub fn predict_patches(
    bank: &MemoryBank,
    features: ArrayView2<f64>,
    head: Option<&HeadParams>,
    config: &EvalConfig,
) -> Result<Array2<f64>> {
    let queries = embed_rows(features, head)?;
    let result = topk_search_with(bank.features.view(), queries.view(), config.k, SearchOptions::default())?;
    propagate_labels(&result, bank.labels.view(), config.tau)
}
