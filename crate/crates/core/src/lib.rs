#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod certifier;
pub mod em;
pub mod error;
pub mod grid_solver;
pub mod kernel;
pub mod mixtures;
pub mod newton;
pub mod pipeline;
