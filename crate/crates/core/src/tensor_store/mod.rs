//! On-disk tensors, dataset manifests, validation and typed loading.

mod format;
mod load;
mod manifest;
mod validate;

pub use format::{
    encode_header, read_header, read_tensor, read_tensor_header, write_tensor, DType, TensorFile,
    TensorHeader, MAGIC, MAX_NDIM, VERSION,
};
pub use load::{
    load_depth_map, load_features, load_global, load_label_map, write_f32, write_label_map,
    Dataset, LoadedImage,
};
pub use manifest::{load_manifest, parse_manifest, DatasetManifest, ImageRecord, IGNORE};
pub use validate::{
    validate_dataset, validate_dataset_with, TensorRole, ValidationReport, Violation,
    ViolationKind,
};
