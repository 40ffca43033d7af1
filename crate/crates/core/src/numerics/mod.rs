//! Shaped `f64` arrays, a define-by-run tape, and the AdamW optimizer.

pub mod gradcheck;
mod init;
mod optim;
mod params;
mod tape;
mod tensor;

pub use init::{name_seed, trunc_normal, xavier_uniform, Init, INIT_STD};
pub use optim::{AdamWConfig, LrSchedule, Moments, OptimizerState};
pub use params::{accumulate_grads, decays, ParamStore, Session, Trainable};
pub use tape::{Gradients, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;
