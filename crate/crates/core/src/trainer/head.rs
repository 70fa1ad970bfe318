//! Two-layer GELU projection head with an ℓ2-normalized output.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::incontext::{l2_normalize_backward, l2_normalize_rows, FeatureMap, ProjectedFeatures};

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x·Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

/// `d/dx gelu(x) = Φ(x) + x·φ(x)`.
pub fn gelu_grad(x: f64) -> f64 {
    std_normal_cdf(x) + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Head weights. Row-vector convention: `out = gelu(x·W1 + b1)·W2 + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl HeadParams {
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        HeadParams {
            w1: Array2::zeros((input, hidden)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((hidden, output)),
            b2: Array1::zeros(output),
        }
    }

    /// Uniform(±√(6/(fan_in+fan_out))) weights, zero biases.
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        let mut uniform = |fan_in: usize, fan_out: usize| {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            Array2::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-bound..bound))
        };
        let w1 = uniform(input, hidden);
        let w2 = uniform(hidden, output);
        HeadParams {
            w1,
            b1: Array1::zeros(hidden),
            w2,
            b2: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.ncols()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input_dim(), self.hidden_dim(), self.output_dim())
    }

    pub fn check(&self) -> Result<()> {
        let consistent = self.b1.len() == self.w1.ncols()
            && self.w2.nrows() == self.w1.ncols()
            && self.b2.len() == self.w2.ncols();
        if !consistent {
            return Err(Error::Shape(format!(
                "inconsistent head shapes w1 {:?} b1 {} w2 {:?} b2 {}",
                self.w1.dim(),
                self.b1.len(),
                self.w2.dim(),
                self.b2.len()
            )));
        }
        if self.slices().iter().any(|s| s.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numeric("non-finite head parameter".into()));
        }
        Ok(())
    }

    /// Flat views of `[w1, b1, w2, b2]`.
    pub fn slices(&self) -> [&[f64]; 4] {
        [
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    /// SHA-256 over the little-endian bytes of all parameters, in field order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for s in self.slices() {
            for v in s {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub input: Array2<f64>,
    pub pre_activation: Array2<f64>,
    pub hidden: Array2<f64>,
    pub pre_norm: Array2<f64>,
    pub output: Array2<f64>,
}

pub fn head_forward(params: &HeadParams, features: &FeatureMap) -> Result<(ProjectedFeatures, ForwardCache)> {
    let cache = forward_rows(params, features.values().view())?;
    Ok((ProjectedFeatures::from_normalized(cache.output.clone()), cache))
}

/// Projects rows without keeping intermediates.
pub fn project_rows(params: &HeadParams, x: ArrayView2<f64>) -> Result<ProjectedFeatures> {
    let cache = forward_rows(params, x)?;
    Ok(ProjectedFeatures::from_normalized(cache.output))
}

pub(crate) fn forward_rows(params: &HeadParams, x: ArrayView2<f64>) -> Result<ForwardCache> {
    if x.ncols() != params.input_dim() {
        return Err(Error::Shape(format!(
            "head expects {} input columns, got {}",
            params.input_dim(),
            x.ncols()
        )));
    }
    let pre_activation = x.dot(&params.w1) + &params.b1;
    let hidden = pre_activation.mapv(gelu);
    let pre_norm = hidden.dot(&params.w2) + &params.b2;
    let output = l2_normalize_rows(pre_norm.view())?;
    Ok(ForwardCache {
        input: x.to_owned(),
        pre_activation,
        hidden,
        pre_norm,
        output,
    })
}

/// Parameter gradients given `dL/d(output)` for the rows in `cache`.
pub fn head_backward(params: &HeadParams, cache: &ForwardCache, d_output: ArrayView2<f64>) -> HeadParams {
    let d_pre_norm = l2_normalize_backward(cache.pre_norm.view(), cache.output.view(), d_output);
    let w2 = cache.hidden.t().dot(&d_pre_norm);
    let b2 = d_pre_norm.sum_axis(Axis(0));
    let mut d_pre_act = d_pre_norm.dot(&params.w2.t());
    Zip::from(&mut d_pre_act)
        .and(&cache.pre_activation)
        .for_each(|g, &z| *g *= gelu_grad(z));
    let w1 = cache.input.t().dot(&d_pre_act);
    let b1 = d_pre_act.sum_axis(Axis(0));
    HeadParams { w1, b1, w2, b2 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        // Φ(1) = 0.841344746068543
        assert!((gelu(1.0) - 0.841_344_746_068_543).abs() < 1e-14);
        assert!((gelu(-1.0) + 0.158_655_253_931_457).abs() < 1e-14);
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_head_gives_zero_rows() {
        let p = HeadParams::zeros(3, 5, 4);
        let f = FeatureMap::new(Array2::from_elem((4, 3), 0.7), 2, 2, 1).unwrap();
        let (out, _) = head_forward(&p, &f).unwrap();
        assert!(out.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_head_matches_scalar_oracle() {
        let d = 4;
        let mut p = HeadParams::zeros(d, d, d);
        p.w1 = Array2::eye(d);
        p.w2 = Array2::eye(d);
        let f = FeatureMap::new(Array2::eye(d), 2, 2, 1).unwrap();
        let (out, _) = head_forward(&p, &f).unwrap();
        // one-hot row: gelu(1) at the hot index, gelu(0) = 0 elsewhere, then normalized
        for i in 0..d {
            for j in 0..d {
                let raw: Vec<f64> = (0..d).map(|k| gelu(if k == i { 1.0 } else { 0.0 })).collect();
                let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((out.values()[[i, j]] - raw[j] / norm).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn random_head_output_is_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = HeadParams::init(6, 42, 9, &mut rng);
        let x = Array2::from_shape_simple_fn((10, 6), || rng.random_range(-2.0..2.0));
        let f = FeatureMap::new(x, 2, 5, 14).unwrap();
        let (out, _) = head_forward(&p, &f).unwrap();
        for row in out.values().rows() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-12);
        }
        assert!(matches!(
            project_rows(&p, Array2::zeros((2, 5)).view()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = HeadParams::init(3, 5, 4, &mut rng);
        let x = Array2::from_shape_simple_fn((6, 3), || rng.random_range(-1.0..1.0));
        let w = Array2::from_shape_simple_fn((6, 4), || rng.random_range(-1.0..1.0));
        let loss = |p: &HeadParams| (&forward_rows(p, x.view()).unwrap().output * &w).sum();
        let cache = forward_rows(&p, x.view()).unwrap();
        let g = head_backward(&p, &cache, w.view());
        let h = 1e-6;
        for field in 0..4 {
            for i in 0..p.slices()[field].len() {
                let mut plus = p.clone();
                plus.slices_mut()[field][i] += h;
                let mut minus = p.clone();
                minus.slices_mut()[field][i] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                assert!((fd - g.slices()[field][i]).abs() < 1e-7, "field {field} [{i}]");
            }
        }
    }
}
