//! Episodic training of the projection head.
//!
//! Only the head is trainable; the encoder features are fixed inputs. The
//! loss is the cross-entropy of the in-context prediction for the query and
//! is backpropagated by hand through attention, normalization and the MLP.

mod checkpoint;
mod episode;
mod head;
mod optim;
mod train;

pub use checkpoint::{load_head, save_head, HeadDescriptor};
pub use episode::{episode_forward, episode_loss_and_grad, CropRect, Episode, EpisodeOutput, SupportExample};
pub use head::{gelu, gelu_grad, head_backward, head_forward, project_rows, ForwardCache, HeadParams};
pub use optim::{adamw_step, cosine_lr, AdamWConfig, OptimizerState};
pub use train::{init_head, train, train_from, PositiveMode, StepRecord, TrainConfig, TrainLog};
