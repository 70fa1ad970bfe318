//! Memory-bank retrieval evaluation: bank construction, exact top-k search,
//! label propagation and metrics.

mod bank;
mod eval;
mod metrics;
mod propagate;
mod search;

pub use bank::{
    build_memory_bank, embed_rows, feature_source, BankConfig, BankMeta, LabelMode, MemoryBank, DEFAULT_BANK_SIZE,
};
pub use eval::{evaluate, evaluate_with, paint_argmax, predict_patches, ClassReport, EvalConfig, EvalReport};
pub use metrics::{miou, rmse_depth, ConfusionMatrix, DepthAccumulator};
pub use propagate::propagate_labels;
pub use search::{dot_f64, topk_search, topk_search_with, Candidate, RetrievalResult, SearchOptions};
