//! Minimal dense-tensor engine: tape-based reverse-mode autodiff, Adam/AdamW,
//! warm-up/cosine and Gumbel-temperature schedules, and batch-parallel helpers.

pub mod error;
pub mod exec;
#[cfg(feature = "gradcheck")]
pub mod gradcheck;
mod kernels;
pub mod optim;
pub mod params;
pub mod schedule;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use exec::Parallelism;
pub use kernels::ConvGeometry;
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use params::{Bound, ParamId, Params};
pub use schedule::{gumbel_schedule, lr_schedule, GumbelSchedule, LrSchedule};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Real, Tensor};
