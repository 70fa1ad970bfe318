use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::episode::episode_loss_and_grad;
use super::head::HeadParams;
use super::optim::{adamw_step, cosine_lr, AdamWConfig, OptimizerState};
use crate::error::{Error, Result};
use crate::seed::stage_rng;
use crate::tasks::{sample_episode, sample_two_crop_episode, PositivePairList};
use crate::tensor_store::Dataset;

/// How the positive support example is constructed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositiveMode {
    /// The mined neighbour image of the query.
    NearestNeighbor,
    /// Two random crops of the query image.
    TwoCrops,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub tau: f64,
    /// Support examples per episode: one positive plus `support_size - 1` distractors.
    pub support_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub head_hidden_multiplier: usize,
    pub head_out_dim: usize,
    pub distractors: bool,
    pub positive_mode: PositiveMode,
    pub crop_fraction: f64,
    /// Stop after this many optimizer steps; the schedule spans the capped length.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            tau: 0.07,
            support_size: 8,
            epochs: 5,
            lr: 2.25e-7,
            min_lr: 0.0,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            head_hidden_multiplier: 7,
            head_out_dim: 6144,
            distractors: true,
            positive_mode: PositiveMode::NearestNeighbor,
            crop_fraction: 0.5,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn check(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.support_size == 0 {
            return Err(Error::Config("support_size must be at least 1".into()));
        }
        if !(self.lr >= 0.0) || !(self.min_lr >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        if self.head_hidden_multiplier == 0 || self.head_out_dim == 0 {
            return Err(Error::Config("head dimensions must be positive".into()));
        }
        if !(self.crop_fraction > 0.0) {
            return Err(Error::Config("crop_fraction must be positive".into()));
        }
        self.adamw().check()
    }

    /// Support size actually used, accounting for the distractor switch.
    pub fn effective_support(&self) -> usize {
        if self.distractors {
            self.support_size
        } else {
            1
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub checksum: String,
}

impl TrainLog {
    /// `step,lr,loss` lines followed by the parameter checksum.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,lr,loss\n");
        for r in &self.steps {
            out.push_str(&format!("{},{:e},{:e}\n", r.step, r.lr, r.loss));
        }
        out.push_str(&format!("# checksum {}\n", self.checksum));
        out
    }
}

/// Fresh head for `input_dim` features, seeded from the `head-init` stream.
pub fn init_head(config: &TrainConfig, input_dim: usize) -> HeadParams {
    let mut rng = stage_rng(config.seed, "head-init");
    HeadParams::init(
        input_dim,
        config.head_hidden_multiplier * input_dim,
        config.head_out_dim,
        &mut rng,
    )
}

/// Runs episodic training of the projection head.
pub fn train(config: &TrainConfig, dataset: &Dataset, pairs: &PositivePairList) -> Result<(HeadParams, TrainLog)> {
    let params = init_head(config, dataset.feature_dim);
    train_from(config, dataset, pairs, params)
}

/// Like [`train`], starting from the given parameters.
pub fn train_from(
    config: &TrainConfig,
    dataset: &Dataset,
    pairs: &PositivePairList,
    mut params: HeadParams,
) -> Result<(HeadParams, TrainLog)> {
    config.check()?;
    if pairs.is_empty() {
        return Err(Error::Config("no positive pairs to train on".into()));
    }
    if dataset.num_classes == 0 {
        return Err(Error::Config("dataset has no labelled pixels".into()));
    }
    let adamw = config.adamw();
    let per_epoch = pairs.len() as u64;
    let mut total = config.epochs as u64 * per_epoch;
    if let Some(cap) = config.max_steps {
        total = total.min(cap);
    }
    let k = config.effective_support();
    let mut rng = stage_rng(config.seed, "train");
    let mut state = OptimizerState::new(&params);
    let mut log = TrainLog::default();
    let mut step = 0u64;

    'epochs: for _ in 0..config.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng);
        for idx in order {
            if step >= total {
                break 'epochs;
            }
            let episode = match config.positive_mode {
                PositiveMode::NearestNeighbor => sample_episode(pairs, dataset, idx, k, &mut rng)?,
                PositiveMode::TwoCrops => {
                    let query = dataset.index_of(&pairs.pairs[idx].query).ok_or_else(|| {
                        Error::Config(format!("pair query `{}` not in dataset", pairs.pairs[idx].query))
                    })?;
                    sample_two_crop_episode(dataset, query, k, config.crop_fraction, &mut rng)?
                }
            };
            let lr = cosine_lr(step, total, config.lr, config.min_lr);
            let (loss, grads) = episode_loss_and_grad(&params, &episode, config.tau)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("loss became {loss} at step {step}")));
            }
            adamw_step(&mut state, &mut params, &grads, lr, &adamw)?;
            log.steps.push(StepRecord { step, lr, loss });
            step += 1;
        }
    }
    log.checksum = params.checksum();
    Ok((params, log))
}
