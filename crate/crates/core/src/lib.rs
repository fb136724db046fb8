//! Mirrored Stein variational gradient descent for sampling on constrained
//! domains, with a population-limit quadrature harness and the step-size and
//! complexity constants of its convergence theory.

pub mod config;
pub mod engine;
pub mod error;
pub mod kernels;
pub mod mirror;
pub mod popquad;
pub mod run;
pub mod targets;
pub mod theory;
pub mod verify;

pub use config::{RunConfig, Setup};
pub use engine::{init_ensemble, msvgd_step, update_field, ParticleEnsemble};
pub use error::{Error, Result};
pub use kernels::{Kernel, KernelKind};
pub use mirror::{Domain, MirrorKind, MirrorMap};
pub use targets::{ConstrainedTarget, MirroredTarget, TargetKind};
pub use theory::{Provenance, SmoothnessProfile};
