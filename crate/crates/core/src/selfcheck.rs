//! Embedded invariant suite run on synthetic data.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::incontext::{cross_attention_predict, LabelMap, ProjectedFeatures};
use crate::retrieval::{dot_f64, miou, propagate_labels, topk_search_with, SearchOptions};
use crate::synthetic::{random_episode, random_unit_rows, EpisodeShape};
use crate::tasks::kmeans;
use crate::trainer::{episode_loss_and_grad, HeadParams};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Relative error with an absolute floor for entries near zero.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Largest relative error between the analytic episode gradient and central
/// differences with step `h`.
pub fn max_gradient_error(params: &HeadParams, ep: &crate::trainer::Episode, tau: f64, h: f64) -> Result<f64> {
    let (_, grads) = episode_loss_and_grad(params, ep, tau)?;
    let mut worst: f64 = 0.0;
    for field in 0..4 {
        for i in 0..params.slices()[field].len() {
            let mut plus = params.clone();
            plus.slices_mut()[field][i] += h;
            let mut minus = params.clone();
            minus.slices_mut()[field][i] -= h;
            let lp = crate::trainer::episode_forward(&plus, ep, tau)?.loss;
            let lm = crate::trainer::episode_forward(&minus, ep, tau)?.loss;
            let fd = (lp - lm) / (2.0 * h);
            worst = worst.max(relative_error(grads.slices()[field][i], fd));
        }
    }
    Ok(worst)
}

fn gradient_check(rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let mut worst: f64 = 0.0;
    for _ in 0..3 {
        let shape = EpisodeShape {
            grid_rows: 2,
            grid_cols: 2,
            patch_size: 2,
            dim: 4,
            classes: 3,
            support: 2,
        };
        let ep = random_episode(rng, &shape);
        let params = HeadParams::init(4, 6, 5, rng);
        worst = worst.max(max_gradient_error(&params, &ep, 0.5, 1e-5)?);
    }
    Ok(CheckOutcome {
        name: "gradient",
        passed: worst < 1e-4,
        detail: format!("max relative error {worst:.2e}"),
    })
}

fn attention_check(rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let q = ProjectedFeatures::from_raw(random_unit_rows(rng, 4, 5).view())?;
        let s = ProjectedFeatures::from_raw(random_unit_rows(rng, 7, 5).view())?;
        let ys = Array2::from_shape_simple_fn((7, 3), || rng.random_range(0.0..1.0));
        let (attn, _) = cross_attention_predict(&q, &s, ys.view(), 0.07)?;
        for row in attn.0.rows() {
            worst = worst.max((row.sum() - 1.0).abs());
        }
    }
    Ok(CheckOutcome {
        name: "attention-rows",
        passed: worst < 1e-6,
        detail: format!("max |row sum - 1| {worst:.2e}"),
    })
}

fn search_check(rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let bank = random_unit_rows(rng, 500, 8).mapv(|v| v as f32);
    let queries = random_unit_rows(rng, 9, 8).mapv(|v| v as f32);
    let k = 12;
    let res = topk_search_with(bank.view(), queries.view(), k, SearchOptions { shard_rows: 37, query_group: 4 })?;
    let mut ok = true;
    for qi in 0..queries.nrows() {
        let q = queries.row(qi).to_vec();
        let mut all: Vec<(usize, f64)> = (0..bank.nrows())
            .map(|i| (i, dot_f64(&q, &bank.row(i).to_vec())))
            .collect();
        all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let (idx, sims) = res.neighbors(qi);
        ok &= all[..k].iter().zip(idx.iter().zip(sims)).all(|(e, (&i, &s))| e.0 == i && e.1 == s);
    }
    let labels = Array2::from_elem((bank.nrows(), 2), 0.5f32);
    let pred = propagate_labels(&res, labels.view(), 0.07)?;
    ok &= pred.iter().all(|&v| (v - 0.5).abs() < 1e-9);
    Ok(CheckOutcome {
        name: "topk-search",
        passed: ok,
        detail: "sharded search equals full sort".into(),
    })
}

fn kmeans_check(rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let mut ok = true;
    for seed in 0..5 {
        let pts = Array2::from_shape_simple_fn((120, 3), || rng.random_range(-1.0..1.0));
        let (model, _) = kmeans(pts.view(), 6, 50, seed)?;
        ok &= model.inertia_history.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12));
    }
    Ok(CheckOutcome {
        name: "kmeans-inertia",
        passed: ok,
        detail: "inertia non-increasing".into(),
    })
}

fn miou_check() -> Result<CheckOutcome> {
    let gt = LabelMap::new(1, 4, vec![0, 0, 1, 1])?;
    let pred = LabelMap::new(1, 4, vec![0, 1, 1, 1])?;
    let (_, mean) = miou(&pred, &gt, 2)?;
    let expect = (0.5 + 2.0 / 3.0) / 2.0;
    Ok(CheckOutcome {
        name: "miou",
        passed: (mean - expect).abs() < 1e-12,
        detail: format!("mean IoU {mean:.4}"),
    })
}

/// Runs every check with a fixed seed.
pub fn run_selfcheck() -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e1f);
    Ok(vec![
        gradient_check(&mut rng)?,
        attention_check(&mut rng)?,
        search_check(&mut rng)?,
        kmeans_check(&mut rng)?,
        miou_check()?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for c in run_selfcheck().unwrap() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
