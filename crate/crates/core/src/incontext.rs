//! Forward math of dense in-context prediction.
//!
//! A query image is segmented by attending from its projected patch features
//! to the projected patch features of a labelled support set and averaging the
//! support's patch-level label frequencies with the attention weights. The
//! patch-level prediction is upsampled to pixels by nearest-neighbour
//! replication and scored with a pixel-wise cross-entropy.
//!
//! Everything here runs in `f64`. The backward helpers at the bottom are the
//! pieces the trainer chains together.

use ndarray::{s, Array2, Array3, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};
use crate::tensor_store::IGNORE;

/// Clamp for row norms in [`l2_normalize_rows`].
pub const NORM_EPS: f64 = 1e-12;
/// Clamp for probabilities inside the cross-entropy logarithm.
pub const LOG_EPS: f64 = 1e-12;

/// Patch features of one image laid out on its patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    values: Array2<f64>,
    rows: usize,
    cols: usize,
    patch_size: usize,
}

impl FeatureMap {
    pub fn new(values: Array2<f64>, rows: usize, cols: usize, patch_size: usize) -> Result<Self> {
        let (l, d) = values.dim();
        if l == 0 || d == 0 {
            return Err(Error::Shape(format!("feature map must be non-empty, got {l}x{d}")));
        }
        if rows * cols != l {
            return Err(Error::Shape(format!(
                "grid {rows}x{cols} does not hold {l} patches"
            )));
        }
        if patch_size == 0 {
            return Err(Error::Shape("patch size must be at least 1".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("feature map has non-finite entries".into()));
        }
        Ok(FeatureMap {
            values,
            rows,
            cols,
            patch_size,
        })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn height(&self) -> usize {
        self.rows * self.patch_size
    }

    pub fn width(&self) -> usize {
        self.cols * self.patch_size
    }

    /// Sub-grid of patches `[row0, row0+rows) × [col0, col0+cols)`.
    pub fn crop(&self, row0: usize, col0: usize, rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 || row0 + rows > self.rows || col0 + cols > self.cols {
            return Err(Error::Geometry(format!(
                "crop {rows}x{cols} at ({row0},{col0}) exceeds grid {}x{}",
                self.rows, self.cols
            )));
        }
        let mut values = Array2::zeros((rows * cols, self.dim()));
        for r in 0..rows {
            for c in 0..cols {
                let src = (row0 + r) * self.cols + col0 + c;
                values.row_mut(r * cols + c).assign(&self.values.row(src));
            }
        }
        FeatureMap::new(values, rows, cols, self.patch_size)
    }
}

/// Per-pixel class ids; [`IGNORE`] marks pixels without a class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u16>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u16>) -> Result<Self> {
        if height * width != data.len() || data.is_empty() {
            return Err(Error::Shape(format!(
                "label map {height}x{width} needs {} pixels, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(LabelMap {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, id: u16) -> Self {
        LabelMap {
            height,
            width,
            data: vec![id; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, y: usize, x: usize) -> u16 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, id: u16) {
        self.data[y * self.width + x] = id;
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u16> {
        self.data
    }

    /// Pixel crop `[y0, y0+h) × [x0, x0+w)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 || y0 + h > self.height || x0 + w > self.width {
            return Err(Error::Geometry(format!(
                "crop {h}x{w} at ({y0},{x0}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(h * w);
        for y in y0..y0 + h {
            data.extend_from_slice(&self.data[y * self.width + x0..y * self.width + x0 + w]);
        }
        LabelMap::new(h, w, data)
    }

    /// Largest non-ignored id, if any.
    pub fn max_label(&self) -> Option<u16> {
        self.data.iter().copied().filter(|&v| v != IGNORE).max()
    }
}

/// Patch-level class frequencies (L×C) and per-patch non-ignored pixel fraction.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchLabels {
    pub values: Array2<f64>,
    pub valid_mass: Vec<f64>,
}

impl PatchLabels {
    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn classes(&self) -> usize {
        self.values.ncols()
    }
}

/// Row-normalized projected features.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedFeatures(Array2<f64>);

impl ProjectedFeatures {
    /// Normalizes the rows of `raw`.
    pub fn from_raw(raw: ArrayView2<f64>) -> Result<Self> {
        Ok(ProjectedFeatures(l2_normalize_rows(raw)?))
    }

    /// Wraps rows already known to be normalized.
    pub(crate) fn from_normalized(values: Array2<f64>) -> Self {
        ProjectedFeatures(values)
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }
}

/// Row-stochastic attention weights (queries × support).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMatrix(pub Array2<f64>);

/// Per-block class counts of non-ignored pixels (L×C, row-major patch order).
pub fn block_class_counts(labels: &LabelMap, patch: usize, classes: usize) -> Result<Array2<f64>> {
    let (h, w) = (labels.height, labels.width);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Geometry(format!(
            "label map {h}x{w} not divisible by patch size {patch}"
        )));
    }
    let cols = w / patch;
    let mut counts = Array2::<f64>::zeros(((h / patch) * cols, classes));
    for y in 0..h {
        let row_base = (y / patch) * cols;
        for x in 0..w {
            let id = labels.data[y * w + x];
            if id == IGNORE {
                continue;
            }
            if id as usize >= classes {
                return Err(Error::LabelRange { label: id, classes });
            }
            counts[[row_base + x / patch, id as usize]] += 1.0;
        }
    }
    Ok(counts)
}

/// Averages one-hot pixel labels inside each `patch`×`patch` block.
pub fn patchify_labels(labels: &LabelMap, patch: usize, classes: usize) -> Result<PatchLabels> {
    let mut values = block_class_counts(labels, patch, classes)?;
    let area = (patch * patch) as f64;
    values.mapv_inplace(|c| c / area);
    let valid_mass = values.rows().into_iter().map(|r| r.sum()).collect();
    Ok(PatchLabels { values, valid_mass })
}

/// Divides each row by `max(‖row‖₂, 1e-12)`.
pub fn l2_normalize_rows(m: ArrayView2<f64>) -> Result<Array2<f64>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite entry in normalization input".into()));
    }
    let mut out = m.to_owned();
    for mut row in out.rows_mut() {
        let norm = row.dot(&row).sqrt().max(NORM_EPS);
        row.mapv_inplace(|v| v / norm);
    }
    Ok(out)
}

/// Row softmax with per-row max subtraction.
pub fn softmax_rows(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Attention of query patches over support patches and the label average it induces.
///
/// Returns the attention matrix `softmax(Fq·Fsᵀ/τ)` (L×M) and the prediction
/// `A·Ys` (L×C).
pub fn cross_attention_predict(
    query: &ProjectedFeatures,
    support: &ProjectedFeatures,
    support_labels: ArrayView2<f64>,
    tau: f64,
) -> Result<(AttentionMatrix, Array2<f64>)> {
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
    }
    if query.dim() != support.dim() {
        return Err(Error::Shape(format!(
            "query dim {} != support dim {}",
            query.dim(),
            support.dim()
        )));
    }
    if support_labels.nrows() != support.len() {
        return Err(Error::Shape(format!(
            "{} support label rows for {} support patches",
            support_labels.nrows(),
            support.len()
        )));
    }
    if support.is_empty() {
        return Err(Error::Shape("empty support".into()));
    }
    let logits = query.values().dot(&support.values().t()) / tau;
    let attn = softmax_rows(logits.view());
    let pred = attn.dot(&support_labels);
    Ok((AttentionMatrix(attn), pred))
}

/// Replicates every patch row over its `patch`×`patch` pixel block (H×W×C).
pub fn upsample_nearest(pred: ArrayView2<f64>, patch: usize, height: usize, width: usize) -> Result<Array3<f64>> {
    if patch == 0 || height % patch != 0 || width % patch != 0 {
        return Err(Error::Shape(format!(
            "{height}x{width} not divisible by patch size {patch}"
        )));
    }
    let cols = width / patch;
    if pred.nrows() != (height / patch) * cols {
        return Err(Error::Shape(format!(
            "{} patch rows for a {height}x{width} image at patch size {patch}",
            pred.nrows()
        )));
    }
    let mut out = Array3::<f64>::zeros((height, width, pred.ncols()));
    for y in 0..height {
        for x in 0..width {
            out.slice_mut(s![y, x, ..])
                .assign(&pred.row((y / patch) * cols + x / patch));
        }
    }
    Ok(out)
}

/// Mean over non-ignored pixels of `-ln max(pred[target], 1e-12)` and its gradient.
pub fn cross_entropy_pixelwise(pred: &Array3<f64>, target: &LabelMap) -> Result<(f64, Array3<f64>)> {
    let (h, w, c) = pred.dim();
    if (h, w) != (target.height, target.width) {
        return Err(Error::Shape(format!(
            "prediction {h}x{w} vs target {}x{}",
            target.height, target.width
        )));
    }
    let valid = target.data.iter().filter(|&&v| v != IGNORE).count();
    if valid == 0 {
        return Err(Error::Degenerate("every target pixel is ignored".into()));
    }
    let n = valid as f64;
    let mut loss = 0.0;
    let mut grad = Array3::<f64>::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            let t = target.get(y, x);
            if t == IGNORE {
                continue;
            }
            if t as usize >= c {
                return Err(Error::LabelRange { label: t, classes: c });
            }
            let p = pred[[y, x, t as usize]].max(LOG_EPS);
            loss -= p.ln();
            grad[[y, x, t as usize]] = -1.0 / (n * p);
        }
    }
    Ok((loss / n, grad))
}

/// Cross-entropy evaluated at patch level from per-patch target counts.
///
/// Equal to upsampling `pred` and calling [`cross_entropy_pixelwise`] when
/// `counts` comes from [`block_class_counts`] of the same target, but never
/// materializes the pixel map. The returned gradient is with respect to the
/// patch-level prediction (the pixel gradient summed over each block).
pub fn cross_entropy_patchwise(pred: ArrayView2<f64>, counts: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
    if pred.dim() != counts.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs counts {:?}",
            pred.dim(),
            counts.dim()
        )));
    }
    let n = counts.sum();
    if n <= 0.0 {
        return Err(Error::Degenerate("every target pixel is ignored".into()));
    }
    let mut loss = 0.0;
    let mut grad = Array2::<f64>::zeros(pred.dim());
    Zip::from(&mut grad)
        .and(pred)
        .and(counts)
        .for_each(|g, &p, &k| {
            if k > 0.0 {
                let p = p.max(LOG_EPS);
                loss -= k * p.ln();
                *g = -k / (n * p);
            }
        });
    Ok((loss / n, grad))
}

/// Gradient of `F = Z / max(‖Z‖, ε)` row-wise, given `Z`, `F` and `dL/dF`.
pub fn l2_normalize_backward(z: ArrayView2<f64>, f: ArrayView2<f64>, d_f: ArrayView2<f64>) -> Array2<f64> {
    let mut d_z = Array2::<f64>::zeros(z.dim());
    for (((zr, fr), gr), mut out) in z
        .rows()
        .into_iter()
        .zip(f.rows())
        .zip(d_f.rows())
        .zip(d_z.rows_mut())
    {
        let norm = zr.dot(&zr).sqrt();
        if norm > NORM_EPS {
            let proj = fr.dot(&gr);
            Zip::from(&mut out)
                .and(&fr)
                .and(&gr)
                .for_each(|o, &fv, &gv| *o = (gv - fv * proj) / norm);
        } else {
            Zip::from(&mut out)
                .and(&gr)
                .for_each(|o, &gv| *o = gv / NORM_EPS);
        }
    }
    d_z
}

/// Backpropagates `dL/dPred` through `Pred = softmax(Fq·Fsᵀ/τ)·Ys`.
///
/// Returns `(dL/dFq, dL/dFs)`.
pub fn cross_attention_backward(
    attn: &AttentionMatrix,
    query: ArrayView2<f64>,
    support: ArrayView2<f64>,
    support_labels: ArrayView2<f64>,
    d_pred: ArrayView2<f64>,
    tau: f64,
) -> (Array2<f64>, Array2<f64>) {
    let a = &attn.0;
    let d_a = d_pred.dot(&support_labels.t());
    let row_dot = (&d_a * a).sum_axis(Axis(1));
    let mut d_logits = d_a;
    Zip::from(d_logits.rows_mut())
        .and(a.rows())
        .and(&row_dot)
        .for_each(|mut dl, ar, &rd| {
            Zip::from(&mut dl).and(&ar).for_each(|g, &av| *g = av * (*g - rd) / tau);
        });
    let d_query = d_logits.dot(&support);
    let d_support = d_logits.t().dot(&query);
    (d_query, d_support)
}

/// Index of the largest entry of every row (ties → smaller index).
pub fn argmax_rows(m: ArrayView2<f64>) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
        let raw = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
        l2_normalize_rows(raw.view()).unwrap()
    }

    #[test]
    fn patchify_single_block() {
        let map = LabelMap::new(2, 2, vec![0, 0, 1, 0]).unwrap();
        let p = patchify_labels(&map, 2, 2).unwrap();
        assert_eq!(p.values, array![[0.75, 0.25]]);
        assert_eq!(p.valid_mass, vec![1.0]);
    }

    #[test]
    fn patchify_uniform_is_one_hot() {
        let map = LabelMap::filled(6, 4, 3);
        let p = patchify_labels(&map, 2, 5).unwrap();
        for row in p.values.rows() {
            assert_eq!(row.to_vec(), vec![0.0, 0.0, 0.0, 1.0, 0.0]);
        }
    }

    #[test]
    fn patchify_rejects_out_of_range_label() {
        let map = LabelMap::filled(2, 2, 4);
        assert!(matches!(
            patchify_labels(&map, 2, 4),
            Err(Error::LabelRange { label: 4, classes: 4 })
        ));
    }

    #[test]
    fn patchify_matches_block_histogram_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<u16> = (0..64)
            .map(|_| {
                if rng.random_bool(0.2) {
                    IGNORE
                } else {
                    rng.random_range(0..3)
                }
            })
            .collect();
        let map = LabelMap::new(8, 8, data.clone()).unwrap();
        let got = patchify_labels(&map, 4, 3).unwrap();
        for by in 0..2 {
            for bx in 0..2 {
                let mut hist = [0usize; 3];
                let mut valid = 0usize;
                for y in by * 4..by * 4 + 4 {
                    for x in bx * 4..bx * 4 + 4 {
                        let v = data[y * 8 + x];
                        if v != IGNORE {
                            hist[v as usize] += 1;
                            valid += 1;
                        }
                    }
                }
                let row = by * 2 + bx;
                for c in 0..3 {
                    assert_eq!(got.values[[row, c]], hist[c] as f64 / 16.0);
                }
                assert_eq!(got.valid_mass[row], valid as f64 / 16.0);
            }
        }
    }

    #[test]
    fn normalize_examples() {
        let out = l2_normalize_rows(array![[3.0, 4.0], [0.0, 0.0], [0.6, 0.8]].view()).unwrap();
        assert!((out[[0, 0]] - 0.6).abs() < 1e-15 && (out[[0, 1]] - 0.8).abs() < 1e-15);
        assert_eq!(out.row(1).to_vec(), vec![0.0, 0.0]);
        let again = l2_normalize_rows(out.view()).unwrap();
        assert!((&again - &out).iter().all(|d| d.abs() < 1e-15));
        assert!(matches!(
            l2_normalize_rows(array![[f64::NAN, 1.0]].view()),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn single_support_patch_copies_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = ProjectedFeatures::from_normalized(random_unit_rows(&mut rng, 3, 4));
        let s = ProjectedFeatures::from_normalized(random_unit_rows(&mut rng, 1, 4));
        let ys = array![[0.2, 0.5, 0.3]];
        let (a, pred) = cross_attention_predict(&q, &s, ys.view(), 0.07).unwrap();
        assert!(a.0.iter().all(|&v| v == 1.0));
        for row in pred.rows() {
            assert_eq!(row, ys.row(0));
        }
    }

    #[test]
    fn identical_support_rows_split_evenly() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = random_unit_rows(&mut rng, 1, 5);
        let s = ndarray::concatenate![Axis(0), q, q];
        let (a, _) = cross_attention_predict(
            &ProjectedFeatures::from_normalized(q),
            &ProjectedFeatures::from_normalized(s),
            array![[1.0, 0.0], [0.0, 1.0]].view(),
            0.07,
        )
        .unwrap();
        assert_eq!(a.0.row(0).to_vec(), vec![0.5, 0.5]);
    }

    #[test]
    fn attention_parameter_and_shape_errors() {
        let q = ProjectedFeatures::from_normalized(array![[1.0, 0.0]]);
        let s = ProjectedFeatures::from_normalized(array![[1.0, 0.0, 0.0]]);
        let ys = array![[1.0]];
        assert!(matches!(
            cross_attention_predict(&q, &q, ys.view(), 0.0),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            cross_attention_predict(&q, &s, ys.view(), 0.07),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn attention_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = random_unit_rows(&mut rng, 2, 4);
        let s = random_unit_rows(&mut rng, 3, 4);
        let ys = Array2::from_shape_fn((3, 3), |_| rng.random_range(0.0..1.0));
        let tau = 0.07;
        let (_, pred) = cross_attention_predict(
            &ProjectedFeatures::from_normalized(q.clone()),
            &ProjectedFeatures::from_normalized(s.clone()),
            ys.view(),
            tau,
        )
        .unwrap();
        for i in 0..2 {
            let mut logits = [0.0f64; 3];
            for j in 0..3 {
                let mut dot = 0.0;
                for d in 0..4 {
                    dot += q[[i, d]] * s[[j, d]];
                }
                logits[j] = dot / tau;
            }
            let denom: f64 = logits.iter().map(|l| l.exp()).sum();
            for c in 0..3 {
                let mut expect = 0.0;
                for j in 0..3 {
                    expect += logits[j].exp() / denom * ys[[j, c]];
                }
                assert!((pred[[i, c]] - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn upsample_examples() {
        let single = upsample_nearest(array![[0.1, 0.9]].view(), 2, 2, 2).unwrap();
        for y in 0..2 {
            for x in 0..2 {
                assert_eq!(single.slice(s![y, x, ..]).to_vec(), vec![0.1, 0.9]);
            }
        }
        let pred = Array2::from_shape_fn((4, 2), |(i, c)| (i * 2 + c) as f64);
        let up = upsample_nearest(pred.view(), 3, 6, 6).unwrap();
        for y in 0..6 {
            for x in 0..6 {
                let patch = (y / 3) * 2 + x / 3;
                assert_eq!(up.slice(s![y, x, ..]), pred.row(patch));
            }
        }
        // block-average inverse
        for p in 0..4 {
            let (by, bx) = (p / 2, p % 2);
            let block = up.slice(s![by * 3..by * 3 + 3, bx * 3..bx * 3 + 3, ..]);
            let mean = block.sum_axis(Axis(0)).sum_axis(Axis(0)) / 9.0;
            assert_eq!(mean, pred.row(p));
        }
        assert!(matches!(
            upsample_nearest(pred.view(), 2, 6, 6),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn cross_entropy_examples() {
        let target = LabelMap::new(2, 2, vec![0, 1, 2, 1]).unwrap();
        let mut onehot = Array3::<f64>::zeros((2, 2, 3));
        for y in 0..2 {
            for x in 0..2 {
                onehot[[y, x, target.get(y, x) as usize]] = 1.0;
            }
        }
        assert_eq!(cross_entropy_pixelwise(&onehot, &target).unwrap().0, 0.0);
        let uniform = Array3::from_elem((2, 2, 3), 1.0 / 3.0);
        let (loss, _) = cross_entropy_pixelwise(&uniform, &target).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
        let ignored = LabelMap::filled(2, 2, IGNORE);
        assert!(matches!(
            cross_entropy_pixelwise(&uniform, &ignored),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut pred = Array3::from_shape_fn((4, 4, 3), |_| rng.random_range(0.1..1.0));
        for y in 0..4 {
            for x in 0..4 {
                let sum: f64 = pred.slice(s![y, x, ..]).sum();
                pred.slice_mut(s![y, x, ..]).mapv_inplace(|v| v / sum);
            }
        }
        let data = (0..16)
            .map(|i| if i == 5 { IGNORE } else { rng.random_range(0..3) })
            .collect();
        let target = LabelMap::new(4, 4, data).unwrap();
        let (_, grad) = cross_entropy_pixelwise(&pred, &target).unwrap();
        let h = 1e-5;
        for idx in ndarray::indices((4, 4, 3)) {
            let mut plus = pred.clone();
            plus[idx] += h;
            let mut minus = pred.clone();
            minus[idx] -= h;
            let fd = (cross_entropy_pixelwise(&plus, &target).unwrap().0
                - cross_entropy_pixelwise(&minus, &target).unwrap().0)
                / (2.0 * h);
            let g = grad[idx];
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-8);
            assert!(rel < 1e-6 || (g == 0.0 && fd.abs() < 1e-12), "{idx:?}: {g} vs {fd}");
        }
    }

    #[test]
    fn patchwise_cross_entropy_equals_pixelwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pred = softmax_rows(Array2::from_shape_fn((6, 4), |_| rng.random_range(-2.0..2.0)).view());
        let data = (0..6 * 9)
            .map(|_| {
                if rng.random_bool(0.1) {
                    IGNORE
                } else {
                    rng.random_range(0..4)
                }
            })
            .collect();
        let target = LabelMap::new(6, 9, data).unwrap();
        let up = upsample_nearest(pred.view(), 3, 6, 9).unwrap();
        let (pix_loss, pix_grad) = cross_entropy_pixelwise(&up, &target).unwrap();
        let counts = block_class_counts(&target, 3, 4).unwrap();
        let (patch_loss, patch_grad) = cross_entropy_patchwise(pred.view(), counts.view()).unwrap();
        assert!((pix_loss - patch_loss).abs() < 1e-12);
        for p in 0..6 {
            let (by, bx) = (p / 3, p % 3);
            let block = pix_grad.slice(s![by * 3..by * 3 + 3, bx * 3..bx * 3 + 3, ..]);
            let summed: Array1<f64> = block.sum_axis(Axis(0)).sum_axis(Axis(0));
            for c in 0..4 {
                assert!((summed[c] - patch_grad[[p, c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn normalize_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let z = Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0));
        let w = Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0));
        let loss = |z: &Array2<f64>| (&l2_normalize_rows(z.view()).unwrap() * &w).sum();
        let f = l2_normalize_rows(z.view()).unwrap();
        let dz = l2_normalize_backward(z.view(), f.view(), w.view());
        let h = 1e-6;
        for idx in ndarray::indices((3, 4)) {
            let mut plus = z.clone();
            plus[idx] += h;
            let mut minus = z.clone();
            minus[idx] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            assert!((fd - dz[idx]).abs() < 1e-7);
        }
    }

    #[test]
    fn argmax_ties_prefer_smaller_index() {
        assert_eq!(argmax_rows(array![[0.5, 0.5], [0.1, 0.9]].view()), vec![0, 1]);
    }
}
