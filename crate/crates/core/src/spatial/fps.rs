use crate::error::{Error, Result};
use crate::geom::{Point3, PointCloud};

/// Farthest point sampling: starts from `start`, then repeatedly takes the
/// point whose distance to the selected set is largest (lowest index on
/// ties).
pub fn fps(cloud: &PointCloud, m: usize, start: usize) -> Result<Vec<usize>> {
    fps_positions(&cloud.positions, m, start)
}

pub fn fps_positions(points: &[Point3], m: usize, start: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if m == 0 || m > n {
        return Err(Error::SampleTooLarge {
            requested: m,
            available: n,
        });
    }
    if start >= n {
        return Err(Error::InvalidConfig(format!(
            "fps start index {start} out of range for {n} points"
        )));
    }
    let xs: Vec<f64> = points.iter().map(|p| p[0]).collect();
    let ys: Vec<f64> = points.iter().map(|p| p[1]).collect();
    let zs: Vec<f64> = points.iter().map(|p| p[2]).collect();
    // Squared distance to the selected set; selected points hold -1 so they
    // can never win the argmax again, even among duplicates.
    let mut nearest = vec![f64::INFINITY; n];
    let mut selected = Vec::with_capacity(m);
    let mut current = start;
    for _ in 0..m {
        selected.push(current);
        nearest[current] = -1.0;
        current = update_and_argmax(&xs, &ys, &zs, &mut nearest, points[current]);
    }
    Ok(selected)
}

const LANES: usize = 8;

/// Lowers `nearest` with the squared distances to `c` and returns the index
/// of the largest entry, lowest index first among equals.
fn update_and_argmax(xs: &[f64], ys: &[f64], zs: &[f64], nearest: &mut [f64], c: Point3) -> usize {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked just above.
        return unsafe { update_and_argmax_avx2(xs, ys, zs, nearest, c) };
    }
    update_and_argmax_lanes(xs, ys, zs, nearest, c)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn update_and_argmax_avx2(xs: &[f64], ys: &[f64], zs: &[f64], nearest: &mut [f64], c: Point3) -> usize {
    update_and_argmax_lanes(xs, ys, zs, nearest, c)
}

/// Each of `LANES` interleaved lanes keeps its own running maximum; lanes
/// merge at the end, then the tail is scanned in order.
#[inline(always)]
fn update_and_argmax_lanes(xs: &[f64], ys: &[f64], zs: &[f64], nearest: &mut [f64], c: Point3) -> usize {
    let n = nearest.len();
    let body = n - n % LANES;
    let mut best = [f64::NEG_INFINITY; LANES];
    let mut best_idx = [0u64; LANES];
    let mut base = 0u64;
    let chunks = xs[..body]
        .chunks_exact(LANES)
        .zip(ys[..body].chunks_exact(LANES))
        .zip(zs[..body].chunks_exact(LANES))
        .zip(nearest[..body].chunks_exact_mut(LANES));
    for (((x, y), z), slot) in chunks {
        for l in 0..LANES {
            let (dx, dy, dz) = (x[l] - c[0], y[l] - c[1], z[l] - c[2]);
            let d = dx * dx + dy * dy + dz * dz;
            let v = if d < slot[l] { d } else { slot[l] };
            slot[l] = v;
            let better = v > best[l];
            best[l] = if better { v } else { best[l] };
            best_idx[l] = if better { base + l as u64 } else { best_idx[l] };
        }
        base += LANES as u64;
    }
    let (mut top, mut top_idx) = (f64::NEG_INFINITY, usize::MAX);
    for l in 0..LANES {
        let idx = best_idx[l] as usize;
        if best[l] > top || (best[l] == top && idx < top_idx) {
            top = best[l];
            top_idx = idx;
        }
    }
    for i in body..n {
        let (dx, dy, dz) = (xs[i] - c[0], ys[i] - c[1], zs[i] - c[2]);
        let d = dx * dx + dy * dy + dz * dz;
        if d < nearest[i] {
            nearest[i] = d;
        }
        if nearest[i] > top {
            top = nearest[i];
            top_idx = i;
        }
    }
    top_idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_picks_diagonal() {
        let pts = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]];
        assert_eq!(fps_positions(&pts, 2, 0).unwrap(), vec![0, 2]);
        // Remaining corners tie at distance 1; lowest index first.
        assert_eq!(fps_positions(&pts, 4, 0).unwrap(), vec![0, 2, 1, 3]);
    }

    #[test]
    fn m_equals_n_is_permutation_even_with_duplicates() {
        let pts = vec![[0.0; 3], [0.0; 3], [1.0, 0.0, 0.0], [0.0; 3]];
        let mut out = fps_positions(&pts, 4, 1).unwrap();
        assert_eq!(out[0], 1);
        out.sort_unstable();
        assert_eq!(out, vec![0, 1, 2, 3]);
    }

    #[test]
    fn dispatched_kernel_matches_portable() {
        let mut r = crate::rng::stream(9, crate::rng::STREAM_CHECKS);
        use rand::Rng as _;
        for n in [1usize, 7, 8, 9, 63, 200] {
            let pts: Vec<Point3> = (0..n).map(|_| [r.random(), r.random(), r.random()]).collect();
            let xs: Vec<f64> = pts.iter().map(|p| p[0]).collect();
            let ys: Vec<f64> = pts.iter().map(|p| p[1]).collect();
            let zs: Vec<f64> = pts.iter().map(|p| p[2]).collect();
            let (mut a, mut b) = (vec![f64::INFINITY; n], vec![f64::INFINITY; n]);
            for p in pts.iter().take(5) {
                let i = update_and_argmax(&xs, &ys, &zs, &mut a, *p);
                let j = update_and_argmax_lanes(&xs, &ys, &zs, &mut b, *p);
                assert_eq!(i, j);
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn errors() {
        let pts = vec![[0.0; 3]; 3];
        assert!(fps_positions(&pts, 4, 0).is_err());
        assert!(fps_positions(&pts, 0, 0).is_err());
        assert!(fps_positions(&pts, 2, 3).is_err());
    }
}
