//! Mixed-variable Bayesian optimization with frequency-modulated kernels.

// `!(x > 0.0)` deliberately rejects NaN along with nonpositive values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod acquire;
pub mod bench;
pub mod bo;
pub mod cli;
pub mod error;
pub mod gp;
pub mod graph;
pub mod kernel;
pub mod optim;
mod par;
pub mod regress;
pub mod space;
pub mod util;
pub mod verify;

pub use error::{Error, Result};
pub use graph::{FactorGraph, GraphDecl};
pub use kernel::{DiscSpectrum, FmFunction, Hyperparams, KernelForm, KernelSpec};
pub use space::{MixedPoint, SearchSpace};
