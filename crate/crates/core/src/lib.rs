// NaN must fail these checks, so the negated forms are deliberate.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod consensus;
pub mod error;
pub mod eval;
pub mod exec;
pub mod harness;
pub mod lfa;
pub mod maze;
pub mod metrics;
pub mod oracle;
pub mod pdnac;
pub mod pdnpg;
pub mod policy;
pub mod problem;

pub use error::{Error, Result};
