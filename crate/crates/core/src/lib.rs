//! Online informative path planning over a TSDF voxel map.

// `!(x > 0.0)` style checks are meant to reject NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod error;
pub mod geometry;
pub mod objective;
pub mod planner;
pub mod raycast;
pub mod sim;
pub mod trajectory;
pub mod traversal;
pub mod tsdf_map;

pub use error::{Error, Result};
