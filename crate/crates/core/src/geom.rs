//! Point clouds and the index structures built over them.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub type Point3 = [f64; 3];

/// Positions (meters) and per-point feature rows.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<Point3>,
    /// `n × c` feature matrix.
    pub features: Tensor,
}

impl PointCloud {
    pub fn new(positions: Vec<Point3>, features: Tensor) -> Result<Self> {
        if features.shape().len() != 2 || features.rows() != positions.len() {
            return Err(Error::shape(
                "PointCloud::new",
                &[positions.len(), 3],
                features.shape(),
            ));
        }
        Ok(Self {
            positions,
            features,
        })
    }

    /// Cloud with zero feature channels.
    pub fn from_positions(positions: Vec<Point3>) -> Self {
        let n = positions.len();
        Self {
            positions,
            features: Tensor::zeros(&[n, 0]),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.features.cols()
    }

    /// Positions as an `n × 3` tensor.
    pub fn position_tensor(&self) -> Tensor {
        let data = self.positions.iter().flatten().copied().collect();
        Tensor::matrix(self.len(), 3, data).expect("n×3 by construction")
    }

    /// Componentwise minimum of the positions.
    pub fn min_corner(&self) -> Option<Point3> {
        let first = *self.positions.first()?;
        Some(self.positions.iter().fold(first, |acc, p| {
            [acc[0].min(p[0]), acc[1].min(p[1]), acc[2].min(p[2])]
        }))
    }

    pub fn translated(&self, offset: Point3) -> Self {
        Self {
            positions: self
                .positions
                .iter()
                .map(|p| [p[0] + offset[0], p[1] + offset[1], p[2] + offset[2]])
                .collect(),
            features: self.features.clone(),
        }
    }

    /// Reorders points so that new point `i` is old point `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            positions: order.iter().map(|&i| self.positions[i]).collect(),
            features: self.features.select_rows(order),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    RowCountMismatch { positions: usize, features: usize },
    NonFinitePosition { row: usize },
    NonFiniteFeature { row: usize },
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks row-count agreement and finiteness of every entry.
pub fn validate(cloud: &PointCloud) -> ValidationReport {
    let mut violations = Vec::new();
    let n = cloud.positions.len();
    let feature_rows = if cloud.features.shape().len() == 2 {
        cloud.features.rows()
    } else {
        usize::MAX
    };
    if feature_rows != n {
        violations.push(Violation::RowCountMismatch {
            positions: n,
            features: cloud.features.rows(),
        });
    }
    for (row, p) in cloud.positions.iter().enumerate() {
        if !p.iter().all(|v| v.is_finite()) {
            violations.push(Violation::NonFinitePosition { row });
        }
    }
    if feature_rows == n {
        for row in 0..n {
            if !cloud.features.row(row).iter().all(|v| v.is_finite()) {
                violations.push(Violation::NonFiniteFeature { row });
            }
        }
    }
    ValidationReport { violations }
}

/// Per-query reference sets in compressed-row form: the reference indices of
/// query `i` are `indices[offsets[i]..offsets[i + 1]]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborTable {
    offsets: Vec<usize>,
    indices: Vec<usize>,
}

impl NeighborTable {
    pub fn new(offsets: Vec<usize>, indices: Vec<usize>) -> Result<Self> {
        let table = Self { offsets, indices };
        table.check_structure()?;
        Ok(table)
    }

    /// Table in which every query has exactly `k` references.
    pub fn fixed_k(k: usize, indices: Vec<usize>) -> Result<Self> {
        if k == 0 || !indices.len().is_multiple_of(k) {
            return Err(Error::shape("NeighborTable::fixed_k", &[indices.len()], &[k]));
        }
        let rows = indices.len() / k;
        Self::new((0..=rows).map(|i| i * k).collect(), indices)
    }

    pub fn from_rows(rows: &[Vec<usize>]) -> Self {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        offsets.push(0);
        let mut indices = Vec::new();
        for row in rows {
            indices.extend_from_slice(row);
            offsets.push(indices.len());
        }
        Self { offsets, indices }
    }

    fn check_structure(&self) -> Result<()> {
        let ok = self.offsets.first() == Some(&0)
            && self.offsets.last() == Some(&self.indices.len())
            && self.offsets.windows(2).all(|w| w[0] <= w[1]);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(
                "neighbor offsets must start at 0, be non-decreasing and end at len(indices)".into(),
            ))
        }
    }

    /// Confirms every stored index addresses a point of the reference cloud.
    pub fn check_reference_size(&self, reference_len: usize) -> Result<()> {
        match self.indices.iter().find(|&&i| i >= reference_len) {
            Some(&bad) => Err(Error::shape("NeighborTable", &[bad], &[reference_len])),
            None => Ok(()),
        }
    }

    pub fn num_queries(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn num_edges(&self) -> usize {
        self.indices.len()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn counts(&self) -> Vec<usize> {
        self.offsets.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Query index of every edge, aligned with `indices()`.
    pub fn edge_queries(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.indices.len());
        for (i, w) in self.offsets.windows(2).enumerate() {
            out.extend(std::iter::repeat_n(i, w[1] - w[0]));
        }
        out
    }
}

/// Assignment of points to dense, non-empty cells.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartitionMap {
    cell_of: Vec<usize>,
    offsets: Vec<usize>,
    members: Vec<usize>,
}

impl PartitionMap {
    /// Builds the member lists from a dense assignment. Members of a cell are
    /// listed in ascending point order.
    pub fn from_assignment(cell_of: Vec<usize>, n_cells: usize) -> Result<Self> {
        let mut counts = vec![0usize; n_cells];
        for &c in &cell_of {
            if c >= n_cells {
                return Err(Error::InvalidConfig(format!(
                    "cell id {c} out of range for {n_cells} cells"
                )));
            }
            counts[c] += 1;
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(Error::InvalidConfig(format!("cell {empty} has no members")));
        }
        let mut offsets = Vec::with_capacity(n_cells + 1);
        offsets.push(0);
        for c in &counts {
            offsets.push(offsets.last().unwrap() + c);
        }
        let mut cursor = offsets[..n_cells].to_vec();
        let mut members = vec![0; cell_of.len()];
        for (point, &c) in cell_of.iter().enumerate() {
            members[cursor[c]] = point;
            cursor[c] += 1;
        }
        Ok(Self {
            cell_of,
            offsets,
            members,
        })
    }

    pub fn n_points(&self) -> usize {
        self.cell_of.len()
    }

    pub fn n_cells(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn cell_of(&self) -> &[usize] {
        &self.cell_of
    }

    pub fn members(&self, cell: usize) -> &[usize] {
        &self.members[self.offsets[cell]..self.offsets[cell + 1]]
    }

    /// Member lists in compressed-row form `(offsets, flat members)`.
    pub fn csr(&self) -> (&[usize], &[usize]) {
        (&self.offsets, &self.members)
    }

    /// Reference sets for attention restricted to a point's own cell.
    pub fn member_table(&self) -> NeighborTable {
        let mut offsets = Vec::with_capacity(self.n_points() + 1);
        offsets.push(0);
        let mut indices = Vec::new();
        for &c in &self.cell_of {
            indices.extend_from_slice(self.members(c));
            offsets.push(indices.len());
        }
        NeighborTable { offsets, indices }
    }
}
