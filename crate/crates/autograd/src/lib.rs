//! Reverse-mode automatic differentiation for small dense models.
//!
//! The crate provides a [`Tensor`] type generic over [`Real`] precision, a
//! recording [`Graph`] with the primitives a convolutional transformer needs,
//! a named [`ParamStore`], AdaDelta, gradient clipping and a finite-difference
//! checker.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;
pub mod suite;
pub mod tensor;

pub use error::{AutogradError, Result};
pub use gradcheck::{finite_diff_check, CheckConfig, CheckReport};
pub use graph::{log_sum_exp, mix_seed, Graph, Mode, Var, LAYER_NORM_EPS};
pub use optim::{adadelta_step, scale_and_clip, AdaDeltaState};
pub use params::{xavier_uniform, Gradients, ParamId, ParamStore};
pub use suite::{primitive_suite, PrimitiveCheck};
pub use tensor::{real, Real, Tensor};
