use rustc_hash::FxHashMap;

use crate::error::{Error, Result};
use crate::geom::{NeighborTable, PartitionMap, Point3, PointCloud};

/// Base voxel size used throughout the backbone defaults (meters).
pub const DEFAULT_BASE_GRID: f64 = 0.02;

/// Uniform lattice geometry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub grid_size: f64,
    /// Lattice origin; `None` uses the componentwise minimum of the cloud.
    pub origin: Option<Point3>,
    /// Offset of the lattice as a fraction of `grid_size`, each in `[0, 1)`.
    pub shift: Point3,
}

impl GridSpec {
    pub fn new(grid_size: f64) -> Self {
        Self {
            grid_size,
            origin: None,
            shift: [0.0; 3],
        }
    }

    pub fn with_origin(mut self, origin: Point3) -> Self {
        self.origin = Some(origin);
        self
    }

    pub fn with_shift(mut self, shift: Point3) -> Self {
        self.shift = shift;
        self
    }

    /// The half-cell shifted lattice used on alternating blocks.
    pub fn shifted_half(self) -> Self {
        self.with_shift([0.5; 3])
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.grid_size.is_finite() && self.grid_size > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "grid_size must be positive, got {}",
                self.grid_size
            )));
        }
        if !self.shift.iter().all(|s| (0.0..1.0).contains(s)) {
            return Err(Error::InvalidGrid(format!(
                "shift components must lie in [0, 1), got {:?}",
                self.shift
            )));
        }
        if let Some(o) = self.origin {
            if !o.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidGrid("origin must be finite".into()));
            }
        }
        Ok(())
    }

    /// Integer lattice coordinate of `p` given the resolved origin. A
    /// coordinate exactly on a boundary belongs to the higher cell.
    pub fn lattice_cell(&self, origin: Point3, p: Point3) -> [i64; 3] {
        let s = self.grid_size;
        std::array::from_fn(|a| ((p[a] - origin[a] - self.shift[a] * s) / s).floor() as i64)
    }
}

/// Partitions the cloud into the non-empty cells of the lattice. Cell ids are
/// dense and numbered by first occurrence in point order.
pub fn grid_partition(cloud: &PointCloud, spec: &GridSpec) -> Result<PartitionMap> {
    partition_positions(&cloud.positions, spec)
}

pub fn partition_positions(positions: &[Point3], spec: &GridSpec) -> Result<PartitionMap> {
    spec.validate()?;
    if positions.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let origin = spec.origin.unwrap_or_else(|| min_corner(positions));
    let mut ids: FxHashMap<[i64; 3], usize> = FxHashMap::default();
    ids.reserve(positions.len() / 4);
    let mut cell_of = Vec::with_capacity(positions.len());
    for &p in positions {
        let key = spec.lattice_cell(origin, p);
        let next = ids.len();
        cell_of.push(*ids.entry(key).or_insert(next));
    }
    let n_cells = ids.len();
    PartitionMap::from_assignment(cell_of, n_cells)
}

pub(crate) fn min_corner(positions: &[Point3]) -> Point3 {
    positions.iter().fold([f64::INFINITY; 3], |acc, p| {
        [acc[0].min(p[0]), acc[1].min(p[1]), acc[2].min(p[2])]
    })
}

/// Reference sets for grid-cell attention: each point attends over every
/// member of its own cell, itself included.
pub fn grid_reference_sets(cloud: &PointCloud, spec: &GridSpec) -> Result<NeighborTable> {
    Ok(grid_partition(cloud, spec)?.member_table())
}

/// Grid edge length that yields about `n * ratio` occupied cells for `n`
/// points drawn uniformly from the unit cube.
pub fn uniform_grid_size(n: usize, ratio: f64) -> f64 {
    (n as f64 * ratio).powf(-1.0 / 3.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(points: &[Point3]) -> PointCloud {
        PointCloud::from_positions(points.to_vec())
    }

    #[test]
    fn single_cell() {
        let c = cloud(&[[0.1, 0.1, 0.1], [0.2, 0.3, 0.15], [0.0, 0.0, 0.0]]);
        let map = grid_partition(&c, &GridSpec::new(1.0)).unwrap();
        assert_eq!(map.n_cells(), 1);
    }

    #[test]
    fn floor_rule_splits_two_points() {
        let c = cloud(&[[0.01, 0.0, 0.0], [0.03, 0.0, 0.0]]);
        let spec = GridSpec::new(0.02).with_origin([0.0; 3]);
        let map = grid_partition(&c, &spec).unwrap();
        assert_eq!(map.n_cells(), 2);
        assert_eq!(map.cell_of(), &[0, 1]);
    }

    #[test]
    fn boundary_belongs_to_higher_cell() {
        let spec = GridSpec::new(0.5).with_origin([0.0; 3]);
        assert_eq!(spec.lattice_cell([0.0; 3], [0.5, 0.0, 1.0]), [1, 0, 2]);
        let shifted = GridSpec::new(1.0).with_shift([0.5; 3]);
        assert_eq!(shifted.lattice_cell([0.0; 3], [0.5, 0.49, 1.5]), [0, -1, 1]);
    }

    #[test]
    fn invalid_specs_and_empty_cloud() {
        let c = cloud(&[[0.0; 3]]);
        assert!(grid_partition(&c, &GridSpec::new(0.0)).is_err());
        assert!(grid_partition(&c, &GridSpec::new(1.0).with_shift([1.0, 0.0, 0.0])).is_err());
        assert!(matches!(
            grid_partition(&cloud(&[]), &GridSpec::new(1.0)),
            Err(Error::EmptyCloud)
        ));
    }

    #[test]
    fn reference_sets_of_single_cell_list_everything() {
        let c = cloud(&[[0.0; 3], [0.1, 0.0, 0.0], [0.0, 0.2, 0.0]]);
        let table = grid_reference_sets(&c, &GridSpec::new(1.0)).unwrap();
        for i in 0..3 {
            assert_eq!(table.row(i), &[0, 1, 2]);
        }
    }

    #[test]
    fn reference_sets_stay_inside_clusters() {
        let c = cloud(&[[0.0; 3], [0.05, 0.0, 0.0], [5.0, 5.0, 5.0], [5.05, 5.0, 5.0]]);
        let table = grid_reference_sets(&c, &GridSpec::new(0.5)).unwrap();
        assert_eq!(table.row(0), &[0, 1]);
        assert_eq!(table.row(3), &[2, 3]);
    }
}
