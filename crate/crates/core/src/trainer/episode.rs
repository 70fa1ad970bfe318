//! One in-context task and its loss/gradient with respect to the head.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};

use super::head::{forward_rows, head_backward, HeadParams};
use crate::error::{Error, Result};
use crate::incontext::{
    block_class_counts, cross_attention_backward, cross_attention_predict, cross_entropy_patchwise,
    FeatureMap, LabelMap, PatchLabels, ProjectedFeatures,
};

#[derive(Debug, Clone)]
pub struct SupportExample {
    /// Dataset index of the image the example was taken from.
    pub source: usize,
    pub features: FeatureMap,
    pub labels: PatchLabels,
}

/// Pixel rectangle of a crop, aligned to the patch grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropRect {
    pub y: usize,
    pub x: usize,
    pub height: usize,
    pub width: usize,
}

/// A query with its pixel labels plus `K` labelled support examples.
#[derive(Debug, Clone)]
pub struct Episode {
    pub query_source: usize,
    pub query_features: FeatureMap,
    pub query_labels: LabelMap,
    pub query_patch_labels: PatchLabels,
    pub support: Vec<SupportExample>,
    pub positive: usize,
    /// Query and positive crops when both come from one image.
    pub crops: Option<(CropRect, CropRect)>,
}

impl Episode {
    pub fn check(&self) -> Result<()> {
        if self.support.is_empty() {
            return Err(Error::Cardinality("episode has no support examples".into()));
        }
        if self.positive >= self.support.len() {
            return Err(Error::Cardinality(format!(
                "positive index {} with {} support examples",
                self.positive,
                self.support.len()
            )));
        }
        let d = self.query_features.dim();
        let p = self.query_features.patch_size();
        let c = self.query_patch_labels.classes();
        for (i, s) in self.support.iter().enumerate() {
            if s.features.dim() != d || s.features.patch_size() != p {
                return Err(Error::Shape(format!(
                    "support {i} has D={} P={}, query has D={d} P={p}",
                    s.features.dim(),
                    s.features.patch_size()
                )));
            }
            if s.labels.classes() != c || s.labels.len() != s.features.len() {
                return Err(Error::Shape(format!("support {i} labels do not match its features")));
            }
        }
        let q = &self.query_features;
        if (self.query_labels.height(), self.query_labels.width()) != (q.height(), q.width()) {
            return Err(Error::Shape("query labels do not cover the query grid".into()));
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.query_patch_labels.classes()
    }

    /// Support patch labels stacked in support order (M×C).
    pub fn stacked_support_labels(&self) -> Array2<f64> {
        let views: Vec<ArrayView2<f64>> = self.support.iter().map(|s| s.labels.values.view()).collect();
        concatenate(Axis(0), &views).expect("support labels share C")
    }

    fn stacked_inputs(&self) -> Array2<f64> {
        let mut views = vec![self.query_features.values().view()];
        views.extend(self.support.iter().map(|s| s.features.values().view()));
        concatenate(Axis(0), &views).expect("episode features share D")
    }
}

#[derive(Debug, Clone)]
pub struct EpisodeOutput {
    pub loss: f64,
    /// Patch-level query prediction (L×C).
    pub prediction: Array2<f64>,
}

/// Forward pass only: prediction and loss.
pub fn episode_forward(params: &HeadParams, ep: &Episode, tau: f64) -> Result<EpisodeOutput> {
    ep.check()?;
    let (_, out) = forward_internal(params, ep, tau)?;
    Ok(out)
}

struct Forward {
    cache: super::head::ForwardCache,
    attn: crate::incontext::AttentionMatrix,
    support_labels: Array2<f64>,
    d_pred: Array2<f64>,
    query_rows: usize,
}

fn forward_internal(params: &HeadParams, ep: &Episode, tau: f64) -> Result<(Forward, EpisodeOutput)> {
    let x = ep.stacked_inputs();
    let cache = forward_rows(params, x.view())?;
    let lq = ep.query_features.len();
    let fq = ProjectedFeatures::from_normalized(cache.output.slice(s![..lq, ..]).to_owned());
    let fs = ProjectedFeatures::from_normalized(cache.output.slice(s![lq.., ..]).to_owned());
    let support_labels = ep.stacked_support_labels();
    let (attn, prediction) = cross_attention_predict(&fq, &fs, support_labels.view(), tau)?;
    let counts = block_class_counts(&ep.query_labels, ep.query_features.patch_size(), ep.classes())?;
    let (loss, d_pred) = cross_entropy_patchwise(prediction.view(), counts.view())?;
    Ok((
        Forward {
            cache,
            attn,
            support_labels,
            d_pred,
            query_rows: lq,
        },
        EpisodeOutput { loss, prediction },
    ))
}

/// Episode cross-entropy and its exact gradient with respect to every head parameter.
///
/// The head is applied to the query and to every support example; the
/// gradient sums both paths.
pub fn episode_loss_and_grad(params: &HeadParams, ep: &Episode, tau: f64) -> Result<(f64, HeadParams)> {
    ep.check()?;
    let (fwd, out) = forward_internal(params, ep, tau)?;
    let lq = fwd.query_rows;
    let f = &fwd.cache.output;
    let (d_fq, d_fs) = cross_attention_backward(
        &fwd.attn,
        f.slice(s![..lq, ..]),
        f.slice(s![lq.., ..]),
        fwd.support_labels.view(),
        fwd.d_pred.view(),
        tau,
    );
    let d_out = concatenate![Axis(0), d_fq, d_fs];
    let grads = head_backward(params, &fwd.cache, d_out.view());
    Ok((out.loss, grads))
}
