//! Simulation of integrated linear-optics quantum circuits observed through
//! time-correlated single-photon counting.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod circuits;
pub mod detector;
pub mod error;
pub mod experiments;
pub mod fit;
pub mod fock;
pub mod seeding;
pub mod tcspc;
pub mod timestamps;

pub use error::{Error, Result};
