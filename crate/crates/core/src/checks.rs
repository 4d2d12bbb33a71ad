//! Randomized verification suites: degeneracy identities, brute-force
//! oracles and finite-difference gradient checks.
//!
//! Each suite draws `trials` independent instances from
//! `substream(seed, STREAM_CHECKS, trial)` and records the worst error seen.

use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::Rng as _;

use crate::attention::{
    gva, make_weight_encoding, multi_head_attention, vector_attention, AttentionConfig,
    GroupedVectorAttention, QkvProjection, Relation, WeightEncodingKind,
};
use crate::error::{Error, Result};
use crate::geom::{NeighborTable, Point3, PointCloud};
use crate::network::{Block, ClsHead, SegHead};
use crate::numerics::{grad_check, GroupedLinear, Linear, Mlp2, ParamId, Params, Tape, Tensor, Var};
use crate::pooling;
use crate::posenc::{PosEncConfig, PosEncMode};
use crate::rng::{self, Rng};
use crate::spatial::{self, GridSpec};

/// Result of one suite.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub trials: usize,
    pub failures: Vec<String>,
    /// Worst max-abs difference (equivalence suites) or worst relative
    /// gradient error (gradient suites).
    pub max_error: f64,
    pub tol: f64,
}

impl CheckOutcome {
    fn new(name: impl Into<String>, tol: f64) -> Self {
        Self {
            name: name.into(),
            trials: 0,
            failures: Vec::new(),
            max_error: 0.0,
            tol,
        }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    fn record(&mut self, trial: usize, err: f64, detail: impl FnOnce() -> String) {
        self.trials += 1;
        self.max_error = self.max_error.max(err);
        if !(err <= self.tol) {
            self.failures.push(format!("trial {trial}: error {err:.3e} > {:.1e}; {}", self.tol, detail()));
        }
    }

    fn mismatch(&mut self, trial: usize, detail: String) {
        self.trials += 1;
        self.max_error = f64::INFINITY;
        self.failures.push(format!("trial {trial}: {detail}"));
    }
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: {} trials, max error {:.3e} (tol {:.1e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.trials,
            self.max_error,
            self.tol
        )
    }
}

fn random_points(r: &mut Rng, n: usize) -> Vec<Point3> {
    (0..n).map(|_| [r.random(), r.random(), r.random()]).collect()
}

fn random_tensor(r: &mut Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect())
        .expect("rows×cols")
}

fn random_cloud(r: &mut Rng, n: usize, c: usize) -> PointCloud {
    let p = random_points(r, n);
    PointCloud::new(p, random_tensor(r, n, c)).expect("rows match")
}

fn divisors(c: usize) -> Vec<usize> {
    (1..=c).filter(|&g| c.is_multiple_of(g)).collect()
}

// ---------------------------------------------------------------------------
// Oracles

pub mod oracles {
    //! Direct loop implementations used as references.

    use rustc_hash::FxHashMap;

    use crate::geom::Point3;
    use crate::numerics::Tensor;

    fn d2(a: Point3, b: Point3) -> f64 {
        (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
    }

    /// Sort-everything kNN with `(distance², index)` order.
    pub fn brute_knn(queries: &[Point3], reference: &[Point3], k: usize) -> Vec<Vec<usize>> {
        queries
            .iter()
            .map(|&q| {
                let mut all: Vec<(f64, usize)> =
                    reference.iter().enumerate().map(|(j, &p)| (d2(q, p), j)).collect();
                all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                all.into_iter().take(k).map(|(_, j)| j).collect()
            })
            .collect()
    }

    /// Greedy farthest-point sampling recomputing each candidate's distance
    /// to the selected set from scratch; lowest index wins ties.
    pub fn greedy_fps(points: &[Point3], m: usize, start: usize) -> Vec<usize> {
        let mut picked = vec![start];
        while picked.len() < m {
            let mut best = (f64::NEG_INFINITY, usize::MAX);
            for (i, &p) in points.iter().enumerate() {
                if picked.contains(&i) {
                    continue;
                }
                let d = picked.iter().map(|&s| d2(p, points[s])).fold(f64::INFINITY, f64::min);
                if d > best.0 {
                    best = (d, i);
                }
            }
            picked.push(best.1);
        }
        picked
    }

    /// Cells in first-occurrence order: member lists and lattice keys.
    pub fn grid_cells(points: &[Point3], grid: f64) -> Vec<Vec<usize>> {
        let mut origin = [f64::INFINITY; 3];
        for p in points {
            for a in 0..3 {
                origin[a] = origin[a].min(p[a]);
            }
        }
        let mut ids: FxHashMap<[i64; 3], usize> = FxHashMap::default();
        let mut cells: Vec<Vec<usize>> = Vec::new();
        for (i, p) in points.iter().enumerate() {
            let key = [0, 1, 2].map(|a| ((p[a] - origin[a]) / grid).floor() as i64);
            let id = *ids.entry(key).or_insert_with(|| {
                cells.push(Vec::new());
                cells.len() - 1
            });
            cells[id].push(i);
        }
        cells
    }

    pub fn centroid(points: &[Point3], members: &[usize]) -> Point3 {
        let mut acc = [0.0; 3];
        for &i in members {
            for a in 0..3 {
                acc[a] += points[i][a];
            }
        }
        acc.map(|v| v / members.len() as f64)
    }

    /// Row `i` of `x · u` computed term by term.
    pub fn project_row(x: &Tensor, u: &Tensor, i: usize) -> Vec<f64> {
        (0..u.cols())
            .map(|j| (0..u.rows()).map(|k| x.get(i, k) * u.get(k, j)).sum())
            .collect()
    }

    /// Channel-wise max of the projected rows of `members`.
    pub fn max_pool(x: &Tensor, u: &Tensor, members: &[usize]) -> Vec<f64> {
        let mut out = vec![f64::NEG_INFINITY; u.cols()];
        for &i in members {
            for (o, v) in out.iter_mut().zip(project_row(x, u, i)) {
                *o = o.max(v);
            }
        }
        out
    }
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Equivalence suites

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EquivSuite {
    GvaVa,
    GvaMsa,
    KnnBrute,
    FpsGreedy,
    PoolOracle,
}

impl EquivSuite {
    pub const ALL: [Self; 5] = [Self::GvaVa, Self::GvaMsa, Self::KnnBrute, Self::FpsGreedy, Self::PoolOracle];

    pub fn name(self) -> &'static str {
        match self {
            Self::GvaVa => "gva-va",
            Self::GvaMsa => "gva-msa",
            Self::KnnBrute => "knn-brute",
            Self::FpsGreedy => "fps-greedy",
            Self::PoolOracle => "pool-oracle",
        }
    }

    pub fn tolerance(self) -> f64 {
        match self {
            Self::GvaVa | Self::GvaMsa => 1e-10,
            Self::KnnBrute | Self::FpsGreedy => 0.0,
            Self::PoolOracle => 1e-12,
        }
    }
}

impl fmt::Display for EquivSuite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EquivSuite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

pub fn run_equiv(which: EquivSuite, trials: usize, seed: u64) -> Result<CheckOutcome> {
    let mut out = CheckOutcome::new(which.name(), which.tolerance());
    for t in 0..trials {
        let mut r = rng::substream(seed, rng::STREAM_CHECKS, t as u64);
        match which {
            EquivSuite::GvaVa => gva_va_trial(&mut r, t, &mut out)?,
            EquivSuite::GvaMsa => gva_msa_trial(&mut r, t, &mut out)?,
            EquivSuite::KnnBrute => knn_trial(&mut r, t, &mut out)?,
            EquivSuite::FpsGreedy => fps_trial(&mut r, t, &mut out)?,
            EquivSuite::PoolOracle => pool_trial(&mut r, t, &mut out)?,
        }
    }
    Ok(out)
}

/// A random attention instance: features, kNN reference sets and
/// projections.
struct AttnInstance {
    params: Params,
    x: Tensor,
    table: NeighborTable,
    qkv: QkvProjection,
    n: usize,
    c: usize,
}

fn attention_instance(r: &mut Rng) -> Result<AttnInstance> {
    let n = r.random_range(1..=64);
    let c = *[4, 8, 16].choose(r).unwrap();
    let k = r.random_range(1..=n.min(16));
    let positions = random_points(r, n);
    let table = spatial::knn_positions(&positions, &positions, k)?;
    let mut params = Params::new();
    let qkv = QkvProjection::new(&mut params, "qkv", c, c, r);
    let x = random_tensor(r, n, c);
    Ok(AttnInstance { params, x, table, qkv, n, c })
}

fn gva_va_trial(r: &mut Rng, t: usize, out: &mut CheckOutcome) -> Result<()> {
    let mut inst = attention_instance(r)?;
    let kind = *[
        WeightEncodingKind::Linear,
        WeightEncodingKind::GroupedLinear,
        WeightEncodingKind::LinearNormActLinear,
        WeightEncodingKind::GroupedLinearNormActLinear,
    ]
    .choose(r)
    .unwrap();
    let enc = make_weight_encoding(&mut inst.params, "we", kind, inst.c, inst.c, r)?;
    let mut tape = Tape::new();
    let x = tape.leaf(inst.x.clone());
    let g = gva(&mut tape, &inst.params, x, &inst.table, &inst.qkv, &enc, Relation::Subtract)?;
    let v = vector_attention(&mut tape, &inst.params, x, &inst.table, &inst.qkv, &enc, Relation::Subtract)?;
    let err = max_abs(tape.value(g.output).data(), tape.value(v.output).data());
    out.record(t, err, || format!("n={} c={} encoding={kind}", inst.n, inst.c));
    Ok(())
}

fn gva_msa_trial(r: &mut Rng, t: usize, out: &mut CheckOutcome) -> Result<()> {
    let mut inst = attention_instance(r)?;
    let g = *divisors(inst.c).choose(r).unwrap();
    let enc = make_weight_encoding(&mut inst.params, "we", WeightEncodingKind::Msa, inst.c, g, r)?;
    let mut tape = Tape::new();
    let x = tape.leaf(inst.x.clone());
    let a = gva(&mut tape, &inst.params, x, &inst.table, &inst.qkv, &enc, Relation::Multiply)?;
    let b = multi_head_attention(&mut tape, &inst.params, x, &inst.table, &inst.qkv, g)?;
    let err = max_abs(tape.value(a.output).data(), tape.value(b.output).data());
    out.record(t, err, || format!("n={} c={} heads={g}", inst.n, inst.c));
    Ok(())
}

fn knn_trial(r: &mut Rng, t: usize, out: &mut CheckOutcome) -> Result<()> {
    let n = r.random_range(1..=2000);
    let reference = random_points(r, n);
    // Half the trials query the reference itself, half a separate cloud.
    let queries = if t.is_multiple_of(2) {
        reference.clone()
    } else {
        let m = r.random_range(1..=500);
        random_points(r, m)
    };
    let k = r.random_range(1..=n.min(32));
    let table = spatial::knn_positions(&queries, &reference, k)?;
    let expect = oracles::brute_knn(&queries, &reference, k);
    match (0..queries.len()).find(|&i| table.row(i) != expect[i].as_slice()) {
        None => out.record(t, 0.0, String::new),
        Some(i) => out.mismatch(t, format!("n={n} k={k}: row {i} {:?} != {:?}", table.row(i), expect[i])),
    }
    Ok(())
}

fn fps_trial(r: &mut Rng, t: usize, out: &mut CheckOutcome) -> Result<()> {
    let n = r.random_range(1..=500);
    let m = r.random_range(1..=n);
    let start = r.random_range(0..n);
    let points = random_points(r, n);
    let got = spatial::fps_positions(&points, m, start)?;
    let expect = oracles::greedy_fps(&points, m, start);
    if got == expect {
        out.record(t, 0.0, String::new);
    } else {
        let at = got.iter().zip(&expect).position(|(a, b)| a != b).unwrap_or(0);
        out.mismatch(t, format!("n={n} m={m}: first difference at pick {at}"));
    }
    Ok(())
}

fn pool_trial(r: &mut Rng, t: usize, out: &mut CheckOutcome) -> Result<()> {
    let n = r.random_range(1..=2000);
    let (c, c_out) = (r.random_range(1..=8), r.random_range(1..=8));
    let cloud = random_cloud(r, n, c);
    let u = random_tensor(r, c, c_out);
    let ratio = *[0.5, 0.25, 1.0 / 6.0, 0.125].choose(r).unwrap();
    let grid = r.random_range(0.03..0.4);
    let k = r.random_range(1..=n.min(16));
    let mut err = 0.0f64;

    // Grid pooling, then map unpooling.
    let res = pooling::grid_pool(&cloud, &GridSpec::new(grid), &u)?;
    let cells = oracles::grid_cells(&cloud.positions, grid);
    if cells.len() != res.pooled.len() {
        out.mismatch(t, format!("grid: {} cells, oracle {}", res.pooled.len(), cells.len()));
        return Ok(());
    }
    for (j, members) in cells.iter().enumerate() {
        err = err.max(max_abs(res.pooled.features.row(j), &oracles::max_pool(&cloud.features, &u, members)));
        err = err.max(max_abs(&res.pooled.positions[j], &oracles::centroid(&cloud.positions, members)));
    }
    let up = pooling::map_unpool(&res.pooled.features, &res.map)?;
    for (j, members) in cells.iter().enumerate() {
        for &i in members {
            err = err.max(max_abs(up.row(i), res.pooled.features.row(j)));
        }
    }

    // FPS-kNN from composed oracles.
    let fps = pooling::fps_knn_pool(&cloud, ratio, k, &u)?;
    let m = (n as f64 * ratio).ceil() as usize;
    let centers: Vec<Point3> = oracles::greedy_fps(&cloud.positions, m, 0)
        .into_iter()
        .map(|i| cloud.positions[i])
        .collect();
    err = err.max(compare_knn_pool(&cloud, &u, &centers, k, &fps.pooled));

    // Grid-kNN from composed oracles.
    let gk = pooling::grid_knn_pool(&cloud, &GridSpec::new(grid), k, &u)?;
    let centers: Vec<Point3> = cells.iter().map(|m| oracles::centroid(&cloud.positions, m)).collect();
    err = err.max(compare_knn_pool(&cloud, &u, &centers, k, &gk.pooled));

    out.record(t, err, || format!("n={n} c={c}→{c_out} grid={grid:.3} r={ratio:.3} k={k}"));
    Ok(())
}

fn compare_knn_pool(cloud: &PointCloud, u: &Tensor, centers: &[Point3], k: usize, pooled: &PointCloud) -> f64 {
    if pooled.len() != centers.len() {
        return f64::INFINITY;
    }
    let nbrs = oracles::brute_knn(centers, &cloud.positions, k);
    let mut err = 0.0f64;
    for (j, members) in nbrs.iter().enumerate() {
        err = err.max(max_abs(&pooled.positions[j], &centers[j]));
        err = err.max(max_abs(pooled.features.row(j), &oracles::max_pool(&cloud.features, u, members)));
    }
    err
}

// ---------------------------------------------------------------------------
// Gradient suites

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradModule {
    Linear,
    GroupedLinear,
    Mlp2,
    Softmax,
    GvaBlock,
    GridPool,
    SegHead,
    ClsHead,
}

impl GradModule {
    pub const ALL: [Self; 8] = [
        Self::Linear,
        Self::GroupedLinear,
        Self::Mlp2,
        Self::Softmax,
        Self::GvaBlock,
        Self::GridPool,
        Self::SegHead,
        Self::ClsHead,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Linear => "linear",
            Self::GroupedLinear => "grouped_linear",
            Self::Mlp2 => "mlp2",
            Self::Softmax => "softmax",
            Self::GvaBlock => "gva_block",
            Self::GridPool => "grid_pool",
            Self::SegHead => "seg_head",
            Self::ClsHead => "cls_head",
        }
    }
}

impl fmt::Display for GradModule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GradModule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

/// Scalar objective `Σ w ⊙ y` with fixed random `w`, so every output
/// coordinate contributes a distinct sensitivity.
fn probe(tape: &mut Tape, y: Var, w: &Tensor) -> Result<Var> {
    tape.weighted_sum(y, w.clone())
}

/// Runs the central-difference check on `trials` random instances of
/// `module` with step `h`.
pub fn run_grad(module: GradModule, trials: usize, h: f64, tol: f64, seed: u64) -> Result<CheckOutcome> {
    let mut out = CheckOutcome::new(format!("grad {module}"), tol);
    for t in 0..trials {
        let mut r = rng::substream(seed, rng::STREAM_CHECKS, (1 << 16) + t as u64);
        let (report, detail) = grad_trial(module, &mut r, h, tol)?;
        out.record(t, report.max_rel_error, || {
            format!(
                "{detail}; worst {:?}: analytic {:.6e} numeric {:.6e}",
                report.worst, report.analytic_at_worst, report.numeric_at_worst
            )
        });
    }
    Ok(out)
}

fn grad_trial(
    module: GradModule,
    r: &mut Rng,
    h: f64,
    tol: f64,
) -> Result<(crate::numerics::GradCheckReport, String)> {
    let mut params = Params::new();
    // Jitter every parameter before checking: fresh normalization shifts are
    // exactly zero, which puts one-row normalized activations on the ReLU kink.
    let all = |p: &mut Params, r: &mut Rng| -> Vec<ParamId> {
        let ids: Vec<ParamId> = p.ids().collect();
        for &id in &ids {
            p.value_mut(id).data_mut().iter_mut().for_each(|v| *v += r.random_range(-0.2..0.2));
        }
        ids
    };
    match module {
        GradModule::Linear => {
            let (n, a, b) = (r.random_range(1..=6), r.random_range(1..=5), r.random_range(1..=5));
            let layer = Linear::new(&mut params, "lin", a, b, true, r);
            let x = params.add("x", random_tensor(r, n, a));
            let w = random_tensor(r, n, b);
            let ids = all(&mut params, r);
            let rep = grad_check(&mut params, &ids, h, tol, |tape, p| {
                let xv = tape.param(p, x);
                let y = layer.forward(tape, p, xv)?;
                probe(tape, y, &w)
            })?;
            Ok((rep, format!("n={n} {a}→{b}")))
        }
        GradModule::GroupedLinear => {
            let c = *[2, 4, 6, 8].choose(r).unwrap();
            let g = *divisors(c).choose(r).unwrap();
            let n = r.random_range(1..=6);
            let layer = GroupedLinear::new(&mut params, "gl", c, g, r)?;
            let x = params.add("x", random_tensor(r, n, c));
            let w = random_tensor(r, n, g);
            let ids = all(&mut params, r);
            let rep = grad_check(&mut params, &ids, h, tol, |tape, p| {
                let xv = tape.param(p, x);
                let y = layer.forward(tape, p, xv)?;
                probe(tape, y, &w)
            })?;
            Ok((rep, format!("n={n} c={c} g={g}")))
        }
        GradModule::Mlp2 => {
            let (n, a, hid, b) = (r.random_range(2..=6), r.random_range(1..=4), r.random_range(1..=5), r.random_range(1..=4));
            let norm = r.random_bool(0.5);
            let layer = Mlp2::new(&mut params, "mlp", a, hid, b, norm, r);
            let x = params.add("x", random_tensor(r, n, a));
            let w = random_tensor(r, n, b);
            let ids = all(&mut params, r);
            let rep = grad_check(&mut params, &ids, h, tol, |tape, p| {
                let xv = tape.param(p, x);
                let y = layer.forward(tape, p, xv)?;
                probe(tape, y, &w)
            })?;
            Ok((rep, format!("n={n} {a}→{hid}→{b} norm={norm}")))
        }
        GradModule::Softmax => {
            let n = r.random_range(1..=8);
            let groups = r.random_range(1..=4);
            let rows: Vec<Vec<usize>> = (0..n)
                .map(|_| {
                    let k = r.random_range(1..=n);
                    (0..k).map(|_| r.random_range(0..n)).collect()
                })
                .collect();
            let table = NeighborTable::from_rows(&rows);
            let e = table.num_edges();
            let logits = params.add("logits", random_tensor(r, e, groups));
            let w = random_tensor(r, e, groups);
            let ids = all(&mut params, r);
            let rep = grad_check(&mut params, &ids, h, tol, |tape, p| {
                let l = tape.param(p, logits);
                let y = crate::attention::masked_group_softmax(tape, l, &table)?;
                probe(tape, y, &w)
            })?;
            Ok((rep, format!("n={n} edges={e} groups={groups}")))
        }
        GradModule::GvaBlock => {
            let c = *[4, 8].choose(r).unwrap();
            let g = *divisors(c).choose(r).unwrap();
            let n = r.random_range(2..=8);
            // k < n: with full neighborhoods the relative offsets are
            // symmetric, their mean is zero and the normalized self-offset
            // rows land exactly on the ReLU kink.
            let k = r.random_range(1..=(n - 1).min(4));
            let kind = *WeightEncodingKind::ALL.choose(r).unwrap();
            let mode = *[PosEncMode::BiasOnly, PosEncMode::MultiplierAndBias].choose(r).unwrap();
            let mut cfg = AttentionConfig::new(c, g);
            cfg.weight_encoding = kind;
            let block = Block::new(&mut params, "blk", cfg, Some(PosEncConfig::new(mode, c)), r)?;
            let positions = random_points(r, n);
            let table = spatial::knn_positions(&positions, &positions, k)?;
            let x = params.add("x", random_tensor(r, n, c));
            let w = random_tensor(r, n, c);
            let ids = all(&mut params, r);
            let rep = grad_check(&mut params, &ids, h, tol, |tape, p| {
                let xv = tape.param(p, x);
                let y = block.forward(tape, p, xv, &positions, &table)?;
                probe(tape, y, &w)
            })?;
            Ok((rep, format!("n={n} k={k} c={c} g={g} encoding={kind} posenc={mode:?}")))
        }
        GradModule::GridPool => {
            let n = r.random_range(1..=12);
            let (c, c_out) = (r.random_range(1..=4), r.random_range(1..=4));
            let positions = random_points(r, n);
            let spec = GridSpec::new(r.random_range(0.2..0.8));
            let x = params.add("x", random_tensor(r, n, c));
            let u = params.add_uniform("u", &[c, c_out], c, r);
            let cells = spatial::partition_positions(&positions, &spec)?.n_cells();
            let w = random_tensor(r, cells, c_out);
            let ids = all(&mut params, r);
            let rep = grad_check(&mut params, &ids, h, tol, |tape, p| {
                let (xv, uv) = (tape.param(p, x), tape.param(p, u));
                let (y, _, _) = pooling::grid_pool_on_tape(tape, xv, &positions, &spec, uv)?;
                probe(tape, y, &w)
            })?;
            Ok((rep, format!("n={n} cells={cells} c={c}→{c_out}")))
        }
        GradModule::SegHead => {
            let (n, c, classes) = (r.random_range(1..=6), r.random_range(1..=5), r.random_range(1..=5));
            let head = SegHead::new(&mut params, c, classes, r);
            let x = params.add("x", random_tensor(r, n, c));
            let w = random_tensor(r, n, classes);
            let ids = all(&mut params, r);
            let rep = grad_check(&mut params, &ids, h, tol, |tape, p| {
                let xv = tape.param(p, x);
                let y = head.forward(tape, p, xv)?;
                probe(tape, y, &w)
            })?;
            Ok((rep, format!("n={n} c={c} classes={classes}")))
        }
        GradModule::ClsHead => {
            let (n, c, classes) = (r.random_range(1..=6), r.random_range(1..=5), r.random_range(1..=5));
            let head = ClsHead::new(&mut params, c, classes, r);
            let x = params.add("x", random_tensor(r, n, c));
            let w = random_tensor(r, 1, classes);
            let ids = all(&mut params, r);
            let rep = grad_check(&mut params, &ids, h, tol, |tape, p| {
                let xv = tape.param(p, x);
                let y = head.forward(tape, p, xv)?;
                probe(tape, y, &w)
            })?;
            Ok((rep, format!("n={n} c={c} classes={classes}")))
        }
    }
}

// ---------------------------------------------------------------------------
// Softmax normalization

/// Largest `|Σ_j w_ij − 1|` over every (point, weight column) for the
/// given attention output weights.
pub fn normalization_error(tape: &Tape, weights: Var, table: &NeighborTable) -> Result<f64> {
    let w = tape.value(weights);
    if w.rows() != table.num_edges() {
        return Err(Error::shape("normalization_error", w.shape(), &[table.num_edges()]));
    }
    let cols = w.cols();
    let mut worst = 0.0f64;
    for row in table.offsets().windows(2) {
        for col in 0..cols {
            let s: f64 = (row[0]..row[1]).map(|e| w.get(e, col)).sum();
            worst = worst.max((s - 1.0).abs());
        }
    }
    Ok(worst)
}

/// Softmax sums for every attention variant under kNN, grid and shifted-grid
/// reference sets.
pub fn run_normalization(trials: usize, seed: u64) -> Result<CheckOutcome> {
    let mut out = CheckOutcome::new("softmax normalization", 1e-12);
    for t in 0..trials {
        let mut r = rng::substream(seed, rng::STREAM_CHECKS, (2 << 16) + t as u64);
        let n = r.random_range(1..=200);
        let c = *[4, 8, 16].choose(&mut r).unwrap();
        let g = *divisors(c).choose(&mut r).unwrap();
        let positions = random_points(&mut r, n);
        let grid = r.random_range(0.1..0.6);
        let tables = [
            ("knn", spatial::knn_positions(&positions, &positions, r.random_range(1..=n.min(16)))?),
            ("grid", spatial::partition_positions(&positions, &GridSpec::new(grid))?.member_table()),
            (
                "shifted-grid",
                spatial::partition_positions(&positions, &GridSpec::new(grid).shifted_half())?.member_table(),
            ),
        ];
        let mut params = Params::new();
        let qkv = QkvProjection::new(&mut params, "qkv", c, c, &mut r);
        let x = random_tensor(&mut r, n, c);
        let mut worst = 0.0f64;
        let mut where_ = String::new();
        for (mode, table) in &tables {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let mut outputs = vec![
                ("scalar", crate::attention::scalar_attention(&mut tape, &params, xv, table, &qkv)?),
                ("msa", multi_head_attention(&mut tape, &params, xv, table, &qkv, g)?),
            ];
            let va_enc = make_weight_encoding(&mut params, "va", WeightEncodingKind::GroupedLinearNormActLinear, c, c, &mut r)?;
            outputs.push(("va", vector_attention(&mut tape, &params, xv, table, &qkv, &va_enc, Relation::Subtract)?));
            for kind in WeightEncodingKind::ALL {
                let mut cfg = AttentionConfig::new(c, g);
                cfg.weight_encoding = kind;
                let layer = GroupedVectorAttention::new(
                    &mut params,
                    "gva",
                    cfg,
                    Some(PosEncConfig::new(PosEncMode::MultiplierAndBias, c)),
                    &mut r,
                )?;
                let o = layer.forward(&mut tape, &params, xv, Some(&positions), table)?;
                outputs.push((kind.name(), o));
            }
            for (name, o) in outputs {
                let e = normalization_error(&tape, o.weights, table)?;
                if e > worst {
                    worst = e;
                    where_ = format!("{name} over {mode}");
                }
            }
        }
        out.record(t, worst, || format!("n={n} c={c} g={g}: {where_}"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_parse() {
        for s in EquivSuite::ALL {
            assert_eq!(s.name().parse::<EquivSuite>().unwrap(), s);
        }
        for m in GradModule::ALL {
            assert_eq!(m.name().parse::<GradModule>().unwrap(), m);
        }
        assert!("gva".parse::<EquivSuite>().is_err());
    }

    #[test]
    fn oracle_fps_on_a_line() {
        let pts: Vec<Point3> = [0.0, 1.0, 3.0, 10.0].iter().map(|&x| [x, 0.0, 0.0]).collect();
        assert_eq!(oracles::greedy_fps(&pts, 3, 0), vec![0, 3, 2]);
    }

    #[test]
    fn few_trials_of_every_suite_pass() {
        for s in EquivSuite::ALL {
            let o = run_equiv(s, 3, 1).unwrap();
            assert!(o.passed(), "{o} {:?}", o.failures);
        }
        for m in GradModule::ALL {
            let o = run_grad(m, 2, 1e-5, 1e-4, 1).unwrap();
            assert!(o.passed(), "{o} {:?}", o.failures);
        }
        let o = run_normalization(2, 1).unwrap();
        assert!(o.passed(), "{o}");
    }

    #[test]
    fn failures_are_reported() {
        let mut o = CheckOutcome::new("x", 1e-3);
        o.record(0, 1e-4, String::new);
        assert!(o.passed());
        o.record(1, 1.0, || "detail".into());
        assert!(!o.passed());
        assert!(o.failures[0].contains("detail"));
        assert!(o.to_string().starts_with("FAIL x: 2 trials"));
    }
}
