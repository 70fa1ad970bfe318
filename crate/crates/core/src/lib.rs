//! Dense in-context post-training and retrieval evaluation.
//!
//! The engine works on precomputed patch features. It builds pseudo in-context
//! segmentation tasks from unlabelled images ([`tasks`]), trains a projection
//! head by backpropagating a cross-attention label-propagation loss
//! ([`trainer`], [`incontext`]), and evaluates features by nearest-neighbour
//! retrieval against a large memory bank ([`retrieval`]).

pub mod config;
pub mod error;
pub mod incontext;
pub mod retrieval;
pub mod seed;
pub mod selfcheck;
pub mod synthetic;
pub mod tasks;
pub mod tensor_store;
pub mod trainer;

pub use error::{Error, Result};
