//! Dense tensors, reverse-mode differentiation, AdamW, the learning-rate
//! schedule and the finite-difference oracle.

mod graph;
mod init;
mod optim;
mod params;
mod scalar;
mod schedule;
mod tensor;

pub mod gradcheck;

pub use graph::{ConvGeom, Gradients, Graph, Var};
pub use init::truncated_normal;
pub use optim::{adamw_step, adamw_update, clip_global_norm, global_grad_norm, AdamWConfig, OptimizerState};
pub use params::{ParamEntry, ParamId, ParamKind, ParamStore};
pub use scalar::Scalar;
pub use schedule::LRSchedule;
pub use tensor::{numel, Tensor};
