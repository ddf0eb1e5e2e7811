//! Projected off-policy Q-learning for finite Markov models with linear
//! value approximation.
//!
//! The crate covers exact models and solvers ([`models`]), linear bases
//! ([`features`]), the contraction certificate ([`cert`]), TD iteration
//! ([`td`]), the KL-projection dual ([`dual`]) and joint policy training
//! ([`policy`]).

// `!(x > y)` is used on purpose so that NaN fails the check
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cert;
pub mod dual;
pub mod error;
pub mod features;
pub mod linalg;
pub mod models;
pub mod policy;
pub mod td;

pub use error::{PopqlError, Result};
