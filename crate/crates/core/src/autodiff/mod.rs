//! Dense `f64` tensors with reverse-mode differentiation, the Adam
//! optimizer and the checkpoint container.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod kernels;
pub mod params;
pub mod suite;
pub mod tape;
pub mod tensor;

pub use adam::{AdamConfig, AdamError, AdamState};
pub use checkpoint::{Checkpoint, CheckpointError};
pub use gradcheck::{check_gradient, GradCheck};
pub use params::{Bound, ParamGrads, ParamStore};
pub use tape::{BackwardError, BoxCoords, Gradients, Tape, Var, BATCH_NORM_EPS};
pub use tensor::{ShapeError, Tensor};
