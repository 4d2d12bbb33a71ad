//! k-nearest neighbors, farthest point sampling and uniform grid partitions.

mod fps;
mod grid;
mod knn;

pub use fps::{fps, fps_positions};
pub use grid::{
    grid_partition, grid_reference_sets, partition_positions, uniform_grid_size, GridSpec,
    DEFAULT_BASE_GRID,
};
pub use knn::{dist2, knn, knn_positions, knn_with_distances, KnnIndex};

/// Neighborhood size used when none is configured.
pub const DEFAULT_K: usize = 16;
