//! Downsampling and upsampling between point-cloud resolutions.
//!
//! Grid pooling partitions space into disjoint cells, max-pools projected
//! features per cell and averages positions; map unpooling copies each cell's
//! feature back to its members. FPS-kNN and Grid-kNN pooling are the
//! sampling-based baselines whose receptive fields may overlap, paired with
//! inverse-distance interpolation for unpooling.

use crate::error::{Error, Result};
use crate::geom::{NeighborTable, PartitionMap, Point3, PointCloud};
use crate::numerics::{Tape, Tensor, Var};
use crate::spatial::{self, GridSpec};

/// Added to distances before inversion in interpolation weights.
pub const INTERP_EPS: f64 = 1e-8;
pub const INTERP_NEIGHBORS: usize = 3;

pub(crate) mod kernels {
    use crate::numerics::Tensor;

    /// Channel-wise max of `x` rows over each segment of a CSR row list.
    /// Returns the pooled matrix and, per output entry, the source row that
    /// attained it (first in segment order on ties).
    pub fn segment_max(x: &Tensor, offsets: &[usize], indices: &[usize]) -> (Tensor, Vec<usize>) {
        let c = x.cols();
        let segments = offsets.len() - 1;
        let mut out = vec![f64::NEG_INFINITY; segments * c];
        let mut argmax = vec![0usize; segments * c];
        for (s, w) in offsets.windows(2).enumerate() {
            let o = &mut out[s * c..(s + 1) * c];
            let a = &mut argmax[s * c..(s + 1) * c];
            for &src in &indices[w[0]..w[1]] {
                for (ch, &v) in x.row(src).iter().enumerate() {
                    if v > o[ch] {
                        o[ch] = v;
                        a[ch] = src;
                    }
                }
            }
        }
        (
            Tensor::matrix(segments, c, out).expect("segments×c by construction"),
            argmax,
        )
    }

    /// Mean position of each segment.
    pub fn segment_centroids(
        positions: &[[f64; 3]],
        offsets: &[usize],
        indices: &[usize],
    ) -> Vec<[f64; 3]> {
        offsets
            .windows(2)
            .map(|w| {
                let mut acc = [0.0; 3];
                for &i in &indices[w[0]..w[1]] {
                    for a in 0..3 {
                        acc[a] += positions[i][a];
                    }
                }
                let count = (w[1] - w[0]) as f64;
                acc.map(|v| v / count)
            })
            .collect()
    }
}

/// Output of partition-based pooling.
#[derive(Clone, Debug)]
pub struct PoolResult {
    pub pooled: PointCloud,
    /// Partition of the input points; row order of `pooled` is cell order.
    pub map: PartitionMap,
    /// The projection applied before the max.
    pub projection: Tensor,
}

/// Output of the sampling-based baselines.
#[derive(Clone, Debug)]
pub struct KnnPoolResult {
    pub pooled: PointCloud,
    /// Input points aggregated by each pooled point.
    pub neighbors: NeighborTable,
}

fn check_projection(cloud: &PointCloud, projection: &Tensor) -> Result<()> {
    if projection.shape().len() != 2 || projection.rows() != cloud.channels() {
        return Err(Error::shape(
            "pooling projection",
            cloud.features.shape(),
            projection.shape(),
        ));
    }
    Ok(())
}

/// Grid pooling: per non-empty cell, channel-wise max of `f_j U` over its
/// members and the mean of their positions.
pub fn grid_pool(cloud: &PointCloud, spec: &GridSpec, projection: &Tensor) -> Result<PoolResult> {
    check_projection(cloud, projection)?;
    let map = spatial::grid_partition(cloud, spec)?;
    let projected = cloud.features.matmul(projection)?;
    let (offsets, members) = map.csr();
    let (features, _) = kernels::segment_max(&projected, offsets, members);
    let positions = kernels::segment_centroids(&cloud.positions, offsets, members);
    Ok(PoolResult {
        pooled: PointCloud::new(positions, features)?,
        map,
        projection: projection.clone(),
    })
}

/// Copies each cell's pooled row back to every member point.
pub fn map_unpool(pooled_features: &Tensor, map: &PartitionMap) -> Result<Tensor> {
    if pooled_features.rows() != map.n_cells() {
        return Err(Error::shape(
            "map_unpool",
            pooled_features.shape(),
            &[map.n_cells()],
        ));
    }
    Ok(pooled_features.select_rows(map.cell_of()))
}

/// Number of samples for ratio `r` of `n` points, `ceil(n r)`.
pub fn sample_count(n: usize, ratio: f64) -> Result<usize> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "sampling ratio must lie in (0, 1], got {ratio}"
        )));
    }
    let m = (n as f64 * ratio).ceil() as usize;
    if m == 0 {
        return Err(Error::EmptyCloud);
    }
    Ok(m.min(n))
}

/// FPS-kNN pooling: `ceil(n r)` farthest-point samples, each max-pooling the
/// projected features of its `k` nearest input points.
pub fn fps_knn_pool(
    cloud: &PointCloud,
    ratio: f64,
    k: usize,
    projection: &Tensor,
) -> Result<KnnPoolResult> {
    check_projection(cloud, projection)?;
    let centers = fps_centers(cloud, ratio)?;
    knn_pool(cloud, centers, k, projection)
}

pub(crate) fn fps_centers(cloud: &PointCloud, ratio: f64) -> Result<Vec<Point3>> {
    let m = sample_count(cloud.len(), ratio)?;
    let picks = spatial::fps(cloud, m, 0)?;
    Ok(picks.iter().map(|&i| cloud.positions[i]).collect())
}

/// Grid-kNN pooling: one center per occupied cell at the member centroid,
/// each max-pooling the projected features of its `k` nearest input points.
pub fn grid_knn_pool(
    cloud: &PointCloud,
    spec: &GridSpec,
    k: usize,
    projection: &Tensor,
) -> Result<KnnPoolResult> {
    check_projection(cloud, projection)?;
    let centers = grid_centers(cloud, spec)?;
    knn_pool(cloud, centers, k, projection)
}

pub(crate) fn grid_centers(cloud: &PointCloud, spec: &GridSpec) -> Result<Vec<Point3>> {
    let map = spatial::grid_partition(cloud, spec)?;
    let (offsets, members) = map.csr();
    Ok(kernels::segment_centroids(&cloud.positions, offsets, members))
}

fn knn_pool(
    cloud: &PointCloud,
    centers: Vec<Point3>,
    k: usize,
    projection: &Tensor,
) -> Result<KnnPoolResult> {
    let neighbors = spatial::knn_positions(&centers, &cloud.positions, k)?;
    let projected = cloud.features.matmul(projection)?;
    let (features, _) = kernels::segment_max(&projected, neighbors.offsets(), neighbors.indices());
    Ok(KnnPoolResult {
        pooled: PointCloud::new(centers, features)?,
        neighbors,
    })
}

/// Sparse interpolation weights from `source` points onto `targets`: each
/// target mixes its `min(3, |source|)` nearest sources with weights
/// proportional to `1 / (d + eps)`.
#[derive(Clone, Debug)]
pub struct InterpWeights {
    pub offsets: Vec<usize>,
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

pub fn interp_weights(source: &[Point3], targets: &[Point3], neighbors: usize) -> Result<InterpWeights> {
    if source.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let j = neighbors.min(source.len()).max(1);
    let (indices, dists) = spatial::knn_with_distances(targets, source, j)?;
    let mut weights: Vec<f64> = dists.iter().map(|d| 1.0 / (d + INTERP_EPS)).collect();
    for row in weights.chunks_mut(j) {
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|w| *w /= total);
    }
    Ok(InterpWeights {
        offsets: (0..=targets.len()).map(|i| i * j).collect(),
        indices,
        weights,
    })
}

/// Inverse-distance interpolation of pooled features onto `positions`.
pub fn interp_unpool(pooled: &PointCloud, positions: &[Point3], neighbors: usize) -> Result<Tensor> {
    let w = interp_weights(&pooled.positions, positions, neighbors)?;
    let c = pooled.channels();
    let mut out = Tensor::zeros(&[positions.len(), c]);
    for t in 0..positions.len() {
        let row = out.row_mut(t);
        for e in w.offsets[t]..w.offsets[t + 1] {
            let we = w.weights[e];
            for (o, v) in row.iter_mut().zip(pooled.features.row(w.indices[e])) {
                *o += we * v;
            }
        }
    }
    Ok(out)
}

/// Grid pooling recorded on a tape; gradients flow into `features` and the
/// projection through the per-channel argmax members.
pub fn grid_pool_on_tape(
    tape: &mut Tape,
    features: Var,
    positions: &[Point3],
    spec: &GridSpec,
    projection: Var,
) -> Result<(Var, Vec<Point3>, PartitionMap)> {
    let map = spatial::partition_positions(positions, spec)?;
    let projected = tape.matmul(features, projection)?;
    let (offsets, members) = map.csr();
    let pooled = tape.segment_max(projected, offsets, members)?;
    let centroids = kernels::segment_centroids(positions, offsets, members);
    Ok((pooled, centroids, map))
}

/// Max-pools projected features over an arbitrary neighbor table.
pub fn neighbor_pool_on_tape(
    tape: &mut Tape,
    features: Var,
    neighbors: &NeighborTable,
    projection: Var,
) -> Result<Var> {
    let projected = tape.matmul(features, projection)?;
    tape.segment_max(projected, neighbors.offsets(), neighbors.indices())
}

pub fn map_unpool_on_tape(tape: &mut Tape, pooled: Var, map: &PartitionMap) -> Result<Var> {
    if tape.value(pooled).rows() != map.n_cells() {
        return Err(Error::shape(
            "map_unpool",
            tape.value(pooled).shape(),
            &[map.n_cells()],
        ));
    }
    tape.gather_rows(pooled, map.cell_of().to_vec())
}

pub fn interp_unpool_on_tape(
    tape: &mut Tape,
    pooled: Var,
    pooled_positions: &[Point3],
    positions: &[Point3],
) -> Result<Var> {
    let w = interp_weights(pooled_positions, positions, INTERP_NEIGHBORS)?;
    tape.sparse_combine(pooled, w.offsets, w.indices, w.weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(points: &[Point3], features: &[Vec<f64>]) -> PointCloud {
        PointCloud::new(points.to_vec(), Tensor::from_rows(features).unwrap()).unwrap()
    }

    #[test]
    fn one_point_per_cell_keeps_projected_features() {
        let c = cloud(
            &[[0.0; 3], [1.5, 0.0, 0.0]],
            &[vec![1.0, 2.0], vec![-1.0, 0.5]],
        );
        let u = Tensor::matrix(2, 1, vec![2.0, 1.0]).unwrap();
        let r = grid_pool(&c, &GridSpec::new(1.0), &u).unwrap();
        assert_eq!(r.pooled.features.data(), &[4.0, -1.5]);
        assert_eq!(r.pooled.positions, c.positions);
    }

    #[test]
    fn single_cell_is_channelwise_max_and_centroid() {
        let c = cloud(
            &[[0.0; 3], [0.2, 0.4, 0.0], [0.4, 0.2, 0.6]],
            &[vec![1.0, 5.0], vec![3.0, -1.0], vec![2.0, 0.0]],
        );
        let r = grid_pool(&c, &GridSpec::new(1.0), &Tensor::identity(2)).unwrap();
        assert_eq!(r.pooled.features.data(), &[3.0, 5.0]);
        let p = r.pooled.positions[0];
        assert!((p[0] - 0.2).abs() < 1e-15 && (p[1] - 0.2).abs() < 1e-15 && (p[2] - 0.2).abs() < 1e-15);
        let up = map_unpool(&r.pooled.features, &r.map).unwrap();
        for i in 0..3 {
            assert_eq!(up.row(i), &[3.0, 5.0]);
        }
    }

    #[test]
    fn map_unpool_checks_row_count() {
        let map = PartitionMap::from_assignment(vec![0, 1, 0], 2).unwrap();
        assert!(map_unpool(&Tensor::zeros(&[3, 1]), &map).is_err());
        let up = map_unpool(&Tensor::matrix(2, 1, vec![7.0, 9.0]).unwrap(), &map).unwrap();
        assert_eq!(up.data(), &[7.0, 9.0, 7.0]);
    }

    #[test]
    fn fps_knn_identity_at_full_ratio() {
        let pts: Vec<Point3> = (0..6).map(|i| [i as f64, (i * i) as f64 * 0.1, 0.0]).collect();
        let feats: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, -(i as f64)]).collect();
        let c = cloud(&pts, &feats);
        let r = fps_knn_pool(&c, 1.0, 1, &Tensor::identity(2)).unwrap();
        assert_eq!(r.pooled.len(), 6);
        for (row, &center) in r.pooled.positions.iter().enumerate() {
            let src = pts.iter().position(|p| *p == center).unwrap();
            assert_eq!(r.neighbors.row(row), &[src]);
            assert_eq!(r.pooled.features.row(row), c.features.row(src));
        }
    }

    #[test]
    fn single_center_with_all_neighbors_is_global_max() {
        let c = cloud(
            &[[0.0; 3], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [3.0, 3.0, 3.0]],
            &[vec![1.0, -2.0], vec![4.0, 0.0], vec![-1.0, 3.0], vec![0.0, 1.0]],
        );
        let r = fps_knn_pool(&c, 0.25, 4, &Tensor::identity(2)).unwrap();
        assert_eq!(r.pooled.features.data(), &[4.0, 3.0]);
        assert!(fps_knn_pool(&c, 0.5, 5, &Tensor::identity(2)).is_err());
    }

    #[test]
    fn grid_knn_adjacent_cells_overlap_when_k_is_n() {
        let c = cloud(
            &[[0.1, 0.0, 0.0], [0.2, 0.0, 0.0], [1.1, 0.0, 0.0], [1.3, 0.0, 0.0]],
            &[vec![1.0], vec![2.0], vec![3.0], vec![4.0]],
        );
        let spec = GridSpec::new(1.0).with_origin([0.0; 3]);
        let r = grid_knn_pool(&c, &spec, 4, &Tensor::identity(1)).unwrap();
        assert_eq!(r.pooled.len(), 2);
        for s in 0..2 {
            let mut row = r.neighbors.row(s).to_vec();
            row.sort_unstable();
            assert_eq!(row, vec![0, 1, 2, 3]);
        }
        assert_eq!(r.pooled.features.data(), &[4.0, 4.0]);
    }

    #[test]
    fn grid_knn_one_point_per_cell_k1_is_identity() {
        let c = cloud(&[[0.5, 0.5, 0.5], [2.5, 0.5, 0.5]], &[vec![1.0], vec![2.0]]);
        let r = grid_knn_pool(&c, &GridSpec::new(1.0), 1, &Tensor::identity(1)).unwrap();
        assert_eq!(r.pooled.features.data(), &[1.0, 2.0]);
        assert_eq!(r.pooled.positions, c.positions);
    }

    #[test]
    fn interpolation_reproduces_coincident_source() {
        let pooled = cloud(
            &[[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            &[vec![2.0, -1.0], vec![5.0, 5.0], vec![-3.0, 0.5]],
        );
        let out = interp_unpool(&pooled, &[[1.0, 0.0, 0.0]], 3).unwrap();
        assert!((out.get(0, 0) - 5.0).abs() < 1e-6);
        assert!((out.get(0, 1) - 5.0).abs() < 1e-6);
    }

    #[test]
    fn interpolation_of_uniform_features_is_uniform() {
        let pooled = cloud(&[[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [4.0, 4.0, 4.0]], &vec![vec![0.75]; 4]);
        let targets = [[0.3, 0.2, 0.1], [3.0, -1.0, 2.0], [10.0, 10.0, 10.0]];
        let out = interp_unpool(&pooled, &targets, 3).unwrap();
        for v in out.data() {
            assert!((v - 0.75).abs() < 1e-15);
        }
        assert!(interp_unpool(&cloud(&[], &[]), &targets, 3).is_err());
    }
}
