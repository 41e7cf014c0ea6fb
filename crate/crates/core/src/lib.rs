#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod confset;
pub mod demand;
pub mod error;
pub mod market;
pub mod mc;
pub mod pipeline;
pub mod polyhedra;
pub mod qp;
pub mod rcc;
pub mod stats;
pub mod two_stage;

pub use error::{Error, Result};
