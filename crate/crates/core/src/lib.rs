//! Point-cloud attention and pooling kernels.
//!
//! The crate provides grouped vector attention (with vector attention and
//! multi-head scalar attention as special cases), position-encoding
//! multipliers, partition-based grid pooling with map unpooling and its
//! sampling-based baselines, a small U-Net backbone assembled from them, and
//! the tooling to verify and benchmark all of it: a reverse-mode tape with a
//! finite-difference checker, brute-force oracles, and a pooling latency
//! harness.

pub mod attention;
pub mod bench;
pub mod checks;
pub mod error;
pub mod geom;
pub mod io;
pub mod network;
pub mod numerics;
pub mod pooling;
pub mod posenc;
pub mod rng;
pub mod spatial;

pub use error::{Error, Result};
pub use geom::{NeighborTable, PartitionMap, Point3, PointCloud};
pub use numerics::{ParamId, Params, Tape, Tensor, Var};
