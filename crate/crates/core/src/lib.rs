//! Nonlinear low-rank branches for linear layers.
//!
//! The crate is layered bottom-up:
//!
//! * [`tape`] and [`tensor`]: dense tensors with reverse-mode autodiff in two
//!   precisions, plus [`gradcheck`] against central differences.
//! * [`noble`]: the branch-augmented linear layer and its cosine activations.
//! * [`optim`]: AdamW with role-based learning-rate multipliers.
//! * [`model`]: a toy decoder-only transformer and a regression MLP.
//! * [`tasks`]: seeded synthetic corpora and regression targets.
//! * [`harness`]: training runs, efficiency metrics, ablation grids, reports.

pub mod error;
pub mod gradcheck;
pub mod harness;
mod kernels;
pub mod model;
pub mod noble;
pub mod optim;
pub mod params;
pub mod rng;
pub mod serialize;
pub mod tape;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};
pub use gradcheck::{grad_check, GradCheckReport};
pub use noble::{ActivationKind, Linear, NobleConfig, NobleLinear, NobleSpec, Projection};
pub use optim::{AdamW, AdamWConfig, ParamGroup, RoleTag};
pub use params::{Bound, Param, ParamId, ParamStore};
pub use tape::{Tape, Unary, Var};
pub use tensor::{Precision, Real, Tensor};
