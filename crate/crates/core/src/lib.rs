//! Static mask pruning for a desk-scale transformer encoder.
//!
//! The encoder's weights stay frozen; a task is learned entirely by choosing
//! a binary mask over its projection matrices. The crate provides the
//! autodiff engine, the encoder, masking functions and schedules, the
//! training loop (plus magnitude/movement/dense baselines), density
//! analysis, the `SMPM` mask container, model checkpoints and structural
//! compaction of pruned matrices.

pub mod analyze;
pub mod artifact;
pub mod autodiff;
pub mod checkpoint;
pub mod compact;
pub mod data;
pub mod error;
pub mod mask;
pub mod model;
pub mod optim;
pub mod pruning;
pub mod tensor;
pub mod train;
mod util;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, FormatError, Result};
pub use mask::Mask;
pub use model::{EncoderModel, MatrixId, MatrixKind, ModelConfig};
pub use tensor::Tensor;
pub use util::Fnv1a;
