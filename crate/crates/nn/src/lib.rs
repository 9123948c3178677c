//! A compact reverse-mode autodiff engine over dense `f64` tensors.
//!
//! Everything runs on the CPU in double precision so that analytic gradients
//! can be checked against central finite differences. The op set is limited
//! to what small U-shaped denoisers and residual classifiers need.

pub mod checkpoint;
pub mod layers;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use layers::{Conv2d, GroupNorm, Linear};
pub use optim::{Adam, AdamConfig};
pub use tape::{Tape, Var};
pub use tensor::{ParamId, ParamStore, Shape, Tensor, TensorError};
