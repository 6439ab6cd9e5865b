//! Minimal neural-network toolkit: tensors, a reverse-mode tape, 1-D
//! convolutions, batch normalization and Adam.

mod adam;
mod checkpoint;
mod conv;
mod gemm;
mod gradcheck;
mod graph;
mod layers;
mod tensor;

pub use adam::{adam_update, AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use conv::Conv1dSpec;
pub use gradcheck::{check_gradients, layer_suite, relative_error, GradCheckConfig, GradCheckReport};
pub use graph::{BatchStats, Gradients, Graph, Var};
pub use layers::{BatchNorm1d, Conv1d, Init, Linear, Mode, ParamId, TensorStore};
pub use tensor::Tensor;
