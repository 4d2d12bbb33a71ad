//! Exact k-nearest-neighbor search on a uniform bucket grid.
//!
//! Reference points are bucketed into a dense lattice sized for a handful of
//! points per cell. A query visits cells in rings of growing Chebyshev
//! radius around its own cell and stops once the k-th best distance is
//! strictly closer than anything an unvisited ring could hold. Results are
//! ordered by `(squared distance, index)`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{NeighborTable, Point3, PointCloud};

#[inline]
pub fn dist2(a: Point3, b: Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Candidate ordering: distance first, then lowest index.
#[inline]
fn better(a: (f64, usize), b: (f64, usize)) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
}

/// Bounded best-k list kept sorted ascending.
struct TopK {
    k: usize,
    items: Vec<(f64, usize)>,
}

impl TopK {
    fn new(k: usize) -> Self {
        Self {
            k,
            items: Vec::with_capacity(k + 1),
        }
    }

    fn clear(&mut self) {
        self.items.clear();
    }

    fn full(&self) -> bool {
        self.items.len() == self.k
    }

    fn worst(&self) -> f64 {
        self.items.last().map_or(f64::INFINITY, |w| w.0)
    }

    #[inline]
    fn offer(&mut self, cand: (f64, usize)) {
        if self.full() && !better(cand, *self.items.last().unwrap()) {
            return;
        }
        let pos = self.items.partition_point(|&x| better(x, cand));
        self.items.insert(pos, cand);
        if self.items.len() > self.k {
            self.items.pop();
        }
    }
}

/// Bucket grid over a reference point set.
pub struct KnnIndex<'a> {
    points: &'a [Point3],
    origin: Point3,
    cell: f64,
    dims: [i64; 3],
    offsets: Vec<usize>,
    order: Vec<usize>,
}

const POINTS_PER_CELL: f64 = 2.0;

impl<'a> KnnIndex<'a> {
    pub fn new(points: &'a [Point3]) -> Self {
        let n = points.len();
        let (origin, extent) = if n == 0 {
            ([0.0; 3], [0.0; 3])
        } else {
            let lo = super::grid::min_corner(points);
            let hi = points.iter().fold([f64::NEG_INFINITY; 3], |acc, p| {
                [acc[0].max(p[0]), acc[1].max(p[1]), acc[2].max(p[2])]
            });
            (lo, [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]])
        };

        // Size cells from the measure of the non-degenerate axes.
        let active: Vec<f64> = extent.iter().copied().filter(|&e| e > 0.0).collect();
        let mut cell = if active.is_empty() {
            1.0
        } else {
            let measure: f64 = active.iter().product();
            (measure * POINTS_PER_CELL / n as f64).powf(1.0 / active.len() as f64)
        };
        if !(cell.is_finite() && cell > 0.0) {
            cell = active.iter().copied().fold(1.0, f64::max);
        }
        let max_cells = 4 * n as u64 + 8;
        let dims = loop {
            let d: [i64; 3] = std::array::from_fn(|a| (extent[a] / cell).floor() as i64 + 1);
            if (d[0] as u64).saturating_mul(d[1] as u64).saturating_mul(d[2] as u64) <= max_cells {
                break d;
            }
            cell *= 1.5;
        };

        let total = (dims[0] * dims[1] * dims[2]) as usize;
        let mut counts = vec![0usize; total + 1];
        let cells: Vec<usize> = points
            .iter()
            .map(|&p| {
                let c = Self::clamped_cell(origin, cell, dims, p);
                (c[0] + dims[0] * (c[1] + dims[1] * c[2])) as usize
            })
            .collect();
        for &c in &cells {
            counts[c + 1] += 1;
        }
        for i in 0..total {
            counts[i + 1] += counts[i];
        }
        let mut cursor = counts.clone();
        let mut order = vec![0; n];
        for (i, &c) in cells.iter().enumerate() {
            order[cursor[c]] = i;
            cursor[c] += 1;
        }
        Self {
            points,
            origin,
            cell,
            dims,
            offsets: counts,
            order,
        }
    }

    fn raw_cell(origin: Point3, cell: f64, p: Point3) -> [i64; 3] {
        std::array::from_fn(|a| ((p[a] - origin[a]) / cell).floor() as i64)
    }

    fn clamped_cell(origin: Point3, cell: f64, dims: [i64; 3], p: Point3) -> [i64; 3] {
        let raw = Self::raw_cell(origin, cell, p);
        std::array::from_fn(|a| raw[a].clamp(0, dims[a] - 1))
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn scan_cell(&self, q: Point3, c: [i64; 3], top: &mut TopK) {
        let id = (c[0] + self.dims[0] * (c[1] + self.dims[1] * c[2])) as usize;
        for &i in &self.order[self.offsets[id]..self.offsets[id + 1]] {
            top.offer((dist2(q, self.points[i]), i));
        }
    }

    fn search(&self, q: Point3, top: &mut TopK) {
        top.clear();
        if top.k == 0 {
            return;
        }
        let qc = Self::raw_cell(self.origin, self.cell, q);
        // Ring radius past which every cell of the grid has been visited.
        let last = (0..3)
            .map(|a| qc[a].abs().max((self.dims[a] - 1 - qc[a]).abs()))
            .max()
            .unwrap();
        let lo = |a: usize, r: i64| (qc[a] - r).max(0);
        let hi = |a: usize, r: i64| (qc[a] + r).min(self.dims[a] - 1);
        for r in 0..=last {
            for x in lo(0, r)..=hi(0, r) {
                let edge_x = (x - qc[0]).abs() == r;
                for y in lo(1, r)..=hi(1, r) {
                    if edge_x || (y - qc[1]).abs() == r {
                        for z in lo(2, r)..=hi(2, r) {
                            self.scan_cell(q, [x, y, z], top);
                        }
                    } else {
                        // Interior column of the ring shell: only its two caps.
                        for z in [qc[2] - r, qc[2] + r] {
                            if (0..self.dims[2]).contains(&z) {
                                self.scan_cell(q, [x, y, z], top);
                            }
                        }
                    }
                }
            }
            // Unvisited cells are at least r whole cells away along some axis.
            let reach = r as f64 * self.cell * (1.0 - 1e-12);
            if top.full() && top.worst() < reach * reach {
                break;
            }
        }
    }

    /// The `k` nearest reference points of `q` as `(squared distance, index)`.
    pub fn query(&self, q: Point3, k: usize) -> Vec<(f64, usize)> {
        let mut top = TopK::new(k.min(self.len()));
        self.search(q, &mut top);
        top.items
    }
}

/// Fixed-k neighbor table of `queries` against `reference`.
pub fn knn_positions(queries: &[Point3], reference: &[Point3], k: usize) -> Result<NeighborTable> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be positive".into()));
    }
    if reference.len() < k {
        return Err(Error::NotEnoughPoints {
            k,
            available: reference.len(),
        });
    }
    let index = KnnIndex::new(reference);
    let mut indices = vec![0usize; queries.len() * k];
    indices
        .par_chunks_mut(k)
        .zip(queries.par_iter())
        .for_each_init(
            || TopK::new(k),
            |top, (out, &q)| {
                index.search(q, top);
                for (o, &(_, i)) in out.iter_mut().zip(&top.items) {
                    *o = i;
                }
            },
        );
    NeighborTable::fixed_k(k, indices)
}

pub fn knn(query: &PointCloud, reference: &PointCloud, k: usize) -> Result<NeighborTable> {
    knn_positions(&query.positions, &reference.positions, k)
}

/// Nearest `k` reference points of each query with their Euclidean
/// distances, flattened row-major (`queries.len() * k` entries).
pub fn knn_with_distances(
    queries: &[Point3],
    reference: &[Point3],
    k: usize,
) -> Result<(Vec<usize>, Vec<f64>)> {
    if k == 0 || reference.len() < k {
        return Err(Error::NotEnoughPoints {
            k,
            available: reference.len(),
        });
    }
    let index = KnnIndex::new(reference);
    let mut indices = vec![0usize; queries.len() * k];
    let mut dists = vec![0f64; queries.len() * k];
    indices
        .par_chunks_mut(k)
        .zip(dists.par_chunks_mut(k))
        .zip(queries.par_iter())
        .for_each_init(
            || TopK::new(k),
            |top, ((oi, od), &q)| {
                index.search(q, top);
                for ((i, d), &(d2, idx)) in oi.iter_mut().zip(od.iter_mut()).zip(&top.items) {
                    *i = idx;
                    *d = d2.sqrt();
                }
            },
        );
    Ok((indices, dists))
}
