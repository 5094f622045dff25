//! Reverse-mode differentiation over dense tensors with the operator set the
//! segmentation network and its losses need.

mod checkpoint;
mod conv;
mod gradcheck;
mod graph;
mod tensor;

pub use checkpoint::{Checkpoint, CheckpointEntry, EntryKind};
pub use conv::ConvGeom;
pub use gradcheck::{grad_check, grad_check_many, GradCheckReport, GRAD_FLOOR};
pub use graph::{BatchStats, Graph, Var, NORM_EPS};
pub use tensor::{Real, Tensor};
