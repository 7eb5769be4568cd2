#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod factors;
pub mod gp_interp;
pub mod gp_prior;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod sim;
pub mod so3;
pub mod solver;
pub mod trajectory;
pub mod voxel_map;

pub use error::{Error, Result};
