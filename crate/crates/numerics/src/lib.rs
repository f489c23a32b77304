//! Dense `f64` tensors with a reverse-mode differentiation tape, named
//! parameter storage, first-order optimizers and a finite-difference
//! gradient oracle.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;
pub mod tensor;

pub use error::{NumericsError, Result};
pub use gradcheck::{finite_diff_check, finite_diff_check_where, relative_error, GradCheckReport, ParamCheck};
pub use graph::{Graph, NodeGrads, Primitive, Var};
pub use optim::{Optimizer, OptimizerRule};
pub use params::{Checkpoint, CheckpointEntry, ParamId, ParamStore};
pub use tensor::Tensor;
