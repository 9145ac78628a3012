//! Robust reduced-order nonlinear model predictive control on spectral
//! submanifolds with dynamic error tubes.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod exec;
pub mod experiment;
pub mod fit;
pub mod fom;
pub mod linalg;
pub mod mpc;
pub mod ode;
pub mod poly;
pub mod qp;
pub mod ssm;
pub mod tighten;
pub mod tube;

pub use error::{Error, Result};
pub use exec::Execution;
