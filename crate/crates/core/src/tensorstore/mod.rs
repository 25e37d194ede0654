//! Tensors, the `FPQT` binary container, calibration sets, quantization
//! manifests and error/sparsity metrics.

mod calib;
mod container;
mod manifest;
mod metrics;
mod tensor;

pub use calib::{calib_entry_name, parse_calib_name, CalibKey, CalibSet};
pub use container::{read_container, read_container_bytes, write_container, write_container_bytes, write_atomic};
pub use manifest::{QuantManifest, QuantMode, QuantRecord, TensorKind};
pub use metrics::{cosine_similarity, mse, mse_slices, sparsity, sqnr_db};
pub use tensor::Tensor;
