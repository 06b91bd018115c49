//! Dense tensors with reverse-mode differentiation, a parameter registry,
//! a finite-difference gradient checker, Adam, and `LMP1` checkpoints.

mod adam;
mod backward;
mod checkpoint;
mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod params;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use backward::Gradients;
pub use checkpoint::{
    load_checkpoint, load_into, read_meta, save_checkpoint, CheckpointMeta, ParamEntry, CHECKPOINT_FORMAT,
};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{Graph, KeyMask, Unary, Var};
pub use params::{LayerPath, LayerTag, Param, ParamBuilder, ParamId, ParamStore};
pub use tensor::{numel, Tensor};

#[cfg(test)]
mod tests;
