//! Synthetic clouds and the pooling latency benchmark.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::PointCloud;
use crate::numerics::{Params, Tensor};
use crate::pooling::{self, INTERP_NEIGHBORS};
use crate::rng;
use crate::spatial::{uniform_grid_size, GridSpec, DEFAULT_K};

pub const CSV_HEADER: [&str; 6] = ["method", "n", "r", "median_ms", "p25_ms", "p75_ms"];

/// `n` points uniform in the unit cube with `c` standard-normal features.
pub fn synth_uniform(n: usize, c: usize, seed: u64) -> PointCloud {
    let mut pr = rng::stream(seed, rng::STREAM_POINTS);
    let positions = (0..n)
        .map(|_| [pr.random::<f64>(), pr.random::<f64>(), pr.random::<f64>()])
        .collect();
    let mut fr = rng::stream(seed, rng::STREAM_FEATURES);
    let features = (0..n * c).map(|_| fr.sample(StandardNormal)).collect();
    PointCloud::new(positions, Tensor::matrix(n, c, features).expect("n×c"))
        .expect("rows match")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingMethod {
    FpsKnn,
    Grid,
    GridKnn,
}

impl PoolingMethod {
    pub const ALL: [Self; 3] = [Self::FpsKnn, Self::GridKnn, Self::Grid];

    pub fn name(self) -> &'static str {
        match self {
            Self::FpsKnn => "fps_knn",
            Self::Grid => "grid",
            Self::GridKnn => "grid_knn",
        }
    }
}

impl fmt::Display for PoolingMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PoolingMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchSpec {
    pub ns: Vec<usize>,
    pub ratios: Vec<f64>,
    pub methods: Vec<PoolingMethod>,
    pub repeats: usize,
    pub warmup: usize,
    pub seed: u64,
    pub channels: usize,
    pub k: usize,
    pub threads: usize,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            ns: vec![10_000, 40_000, 160_000],
            ratios: vec![0.5, 0.25, 0.125],
            methods: PoolingMethod::ALL.to_vec(),
            repeats: 5,
            warmup: 1,
            seed: 0,
            channels: 32,
            k: DEFAULT_K,
            threads: 1,
        }
    }
}

impl BenchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.repeats < 3 {
            return Err(Error::InvalidConfig(format!("repeats must be at least 3, got {}", self.repeats)));
        }
        if self.warmup < 1 {
            return Err(Error::InvalidConfig("warmup must be at least 1".into()));
        }
        if self.ns.contains(&0) {
            return Err(Error::InvalidConfig("point counts must be positive".into()));
        }
        if self.ratios.iter().any(|&r| !(r > 0.0 && r <= 1.0)) {
            return Err(Error::InvalidConfig("ratios must lie in (0, 1]".into()));
        }
        if self.channels == 0 || self.k == 0 || self.threads == 0 {
            return Err(Error::InvalidConfig("channels, k and threads must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub method: PoolingMethod,
    pub n: usize,
    pub r: f64,
    pub median_ms: f64,
    pub p25_ms: f64,
    pub p75_ms: f64,
}

impl BenchRow {
    fn key(&self) -> (PoolingMethod, usize, f64) {
        (self.method, self.n, self.r)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchTable {
    pub threads: usize,
    pub seed: u64,
    pub version: String,
    pub rows: Vec<BenchRow>,
}

impl BenchTable {
    pub fn new(threads: usize, seed: u64) -> Self {
        Self {
            threads,
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            rows: Vec::new(),
        }
    }

    /// Sorts rows by `(method, n, r)`.
    pub fn sort(&mut self) {
        self.rows
            .sort_by(|a, b| a.key().partial_cmp(&b.key()).expect("finite ratios"));
    }

    pub fn get(&self, method: PoolingMethod, n: usize, r: f64) -> Option<&BenchRow> {
        self.rows
            .iter()
            .find(|row| row.method == method && row.n == n && row.r == r)
    }
}

/// Pool then unpool once; returns the unpooled `n × c` features.
pub fn pool_unpool(
    method: PoolingMethod,
    cloud: &PointCloud,
    ratio: f64,
    k: usize,
    projection: &Tensor,
) -> Result<Tensor> {
    match method {
        PoolingMethod::Grid => {
            let spec = GridSpec::new(uniform_grid_size(cloud.len(), ratio));
            let res = pooling::grid_pool(cloud, &spec, projection)?;
            pooling::map_unpool(&res.pooled.features, &res.map)
        }
        PoolingMethod::GridKnn => {
            let spec = GridSpec::new(uniform_grid_size(cloud.len(), ratio));
            let res = pooling::grid_knn_pool(cloud, &spec, k.min(cloud.len()), projection)?;
            pooling::interp_unpool(&res.pooled, &cloud.positions, INTERP_NEIGHBORS)
        }
        PoolingMethod::FpsKnn => {
            let res = pooling::fps_knn_pool(cloud, ratio, k.min(cloud.len()), projection)?;
            pooling::interp_unpool(&res.pooled, &cloud.positions, INTERP_NEIGHBORS)
        }
    }
}

/// Linear-interpolated quantile of sorted samples.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn time_cell(
    spec: &BenchSpec,
    method: PoolingMethod,
    cloud: &PointCloud,
    ratio: f64,
    projection: &Tensor,
) -> Result<BenchRow> {
    let mut reference: Option<Tensor> = None;
    let mut times = Vec::with_capacity(spec.repeats);
    for i in 0..spec.warmup + spec.repeats {
        let start = Instant::now();
        let out = pool_unpool(method, cloud, ratio, spec.k, projection)?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        match &reference {
            None => reference = Some(out),
            Some(r) if *r != out => {
                return Err(Error::InvalidConfig(format!(
                    "{method} output changed between repeats at n={}",
                    cloud.len()
                )))
            }
            Some(_) => {}
        }
        if i >= spec.warmup {
            times.push(ms);
        }
    }
    times.sort_by(f64::total_cmp);
    Ok(BenchRow {
        method,
        n: cloud.len(),
        r: ratio,
        median_ms: quantile(&times, 0.5),
        p25_ms: quantile(&times, 0.25),
        p75_ms: quantile(&times, 0.75),
    })
}

/// Times pool + unpool for every `(method, n, r)` cell. Data generation is
/// outside the timed region; outputs are checked to be identical across
/// repeats.
pub fn bench_pooling(spec: &BenchSpec) -> Result<BenchTable> {
    spec.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.threads)
        .build()
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut params = Params::new();
    let mut prng = rng::stream(spec.seed, rng::STREAM_PARAMS);
    let u = params.add_uniform("bench.projection", &[spec.channels, spec.channels], spec.channels, &mut prng);
    let projection = params.value(u).clone();

    let mut table = BenchTable::new(spec.threads, spec.seed);
    pool.install(|| -> Result<()> {
        for &n in &spec.ns {
            let cloud = synth_uniform(n, spec.channels, spec.seed);
            for &r in &spec.ratios {
                for &method in &spec.methods {
                    table.rows.push(time_cell(spec, method, &cloud, r, &projection)?);
                }
            }
        }
        Ok(())
    })?;
    table.sort();
    Ok(table)
}

/// Writes the metadata comment, header and rows in `(method, n, r)` order.
pub fn write_csv<W: Write>(table: &BenchTable, mut out: W) -> Result<()> {
    let mut sorted = table.clone();
    sorted.sort();
    writeln!(
        out,
        "# threads={} seed={} version={}",
        table.threads, table.seed, table.version
    )
    .map_err(|e| Error::io("<csv>", e))?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for row in &sorted.rows {
        w.write_record([
            row.method.name().to_string(),
            row.n.to_string(),
            row.r.to_string(),
            row.median_ms.to_string(),
            row.p25_ms.to_string(),
            row.p75_ms.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn emit_csv(table: &BenchTable, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut buf = std::io::BufWriter::new(file);
    write_csv(table, &mut buf).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })?;
    buf.flush().map_err(|e| Error::io(path, e))
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn meta_value<'a>(line: &'a str, key: &str) -> Result<&'a str> {
    line.split_whitespace()
        .find_map(|kv| kv.strip_prefix(key).and_then(|v| v.strip_prefix('=')))
        .ok_or_else(|| bad(format!("metadata line lacks `{key}`")))
}

pub fn parse_csv<R: BufRead>(mut input: R) -> Result<BenchTable> {
    let mut meta = String::new();
    input.read_line(&mut meta).map_err(|e| Error::io("<csv>", e))?;
    let meta = meta
        .trim_end()
        .strip_prefix('#')
        .ok_or_else(|| bad("missing `# threads=… seed=… version=…` line"))?;
    let threads = meta_value(meta, "threads")?
        .parse()
        .map_err(|_| bad("bad threads value"))?;
    let seed = meta_value(meta, "seed")?.parse().map_err(|_| bad("bad seed value"))?;
    let version = meta_value(meta, "version")?.to_string();

    let mut reader = csv::Reader::from_reader(input);
    if reader.headers()?.iter().ne(CSV_HEADER) {
        return Err(bad(format!("unexpected header {:?}", reader.headers()?)));
    }
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let f = |i: usize| -> Result<f64> {
            rec[i].parse().map_err(|_| bad(format!("bad number `{}`", &rec[i])))
        };
        rows.push(BenchRow {
            method: rec[0].parse()?,
            n: rec[1].parse().map_err(|_| bad(format!("bad n `{}`", &rec[1])))?,
            r: f(2)?,
            median_ms: f(3)?,
            p25_ms: f(4)?,
            p75_ms: f(5)?,
        });
    }
    Ok(BenchTable {
        threads,
        seed,
        version,
        rows,
    })
}

pub fn read_csv(path: &Path) -> Result<BenchTable> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_csv(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: PoolingMethod, n: usize, r: f64) -> BenchRow {
        BenchRow {
            method,
            n,
            r,
            median_ms: 1.5,
            p25_ms: 1.0,
            p75_ms: 2.25,
        }
    }

    fn emit(table: &BenchTable) -> String {
        let mut buf = Vec::new();
        write_csv(table, &mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn synth_is_deterministic() {
        let a = synth_uniform(50, 4, 11);
        assert_eq!(a, synth_uniform(50, 4, 11));
        assert_ne!(a, synth_uniform(50, 4, 12));
        let one = synth_uniform(1, 0, 0);
        assert!(one.positions[0].iter().all(|v| (0.0..1.0).contains(v)));
    }

    #[test]
    fn empty_table_is_header_only() {
        let text = emit(&BenchTable::new(1, 3));
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with("# threads=1 seed=3 version="));
        assert_eq!(text.lines().nth(1), Some("method,n,r,median_ms,p25_ms,p75_ms"));
    }

    #[test]
    fn one_row_table_is_two_data_lines() {
        let mut t = BenchTable::new(1, 0);
        t.rows.push(row(PoolingMethod::Grid, 10, 0.25));
        let text = emit(&t);
        let body: Vec<_> = text.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(body, ["method,n,r,median_ms,p25_ms,p75_ms", "grid,10,0.25,1.5,1,2.25"]);
    }

    #[test]
    fn rows_are_emitted_in_key_order_and_round_trip() {
        let mut t = BenchTable::new(2, 9);
        t.rows.push(row(PoolingMethod::GridKnn, 10, 0.5));
        t.rows.push(row(PoolingMethod::Grid, 20, 1.0 / 6.0));
        t.rows.push(row(PoolingMethod::Grid, 10, 0.125));
        t.rows.push(row(PoolingMethod::FpsKnn, 40, 0.5));
        let parsed = parse_csv(emit(&t).as_bytes()).unwrap();
        let mut sorted = t.clone();
        sorted.sort();
        assert_eq!(parsed, sorted);
        let order: Vec<_> = parsed.rows.iter().map(|r| (r.method.name(), r.n)).collect();
        assert_eq!(order, [("fps_knn", 40), ("grid", 10), ("grid", 20), ("grid_knn", 10)]);
    }

    #[test]
    fn parse_rejects_garbage() {
        assert!(parse_csv("method,n\n".as_bytes()).is_err());
        assert!(parse_csv("# threads=1 seed=0 version=x\nfoo,bar\n".as_bytes()).is_err());
        let bad_method = "# threads=1 seed=0 version=x\nmethod,n,r,median_ms,p25_ms,p75_ms\nvoxel,1,0.5,1,1,1\n";
        assert!(parse_csv(bad_method.as_bytes()).is_err());
    }

    #[test]
    fn quantiles_interpolate() {
        let s = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&s, 0.5), 3.0);
        assert_eq!(quantile(&s, 0.25), 2.0);
        assert_eq!(quantile(&[1.0, 2.0], 0.5), 1.5);
    }

    #[test]
    fn spec_validation() {
        let mut s = BenchSpec::default();
        s.validate().unwrap();
        s.repeats = 2;
        assert!(s.validate().is_err());
        let s = BenchSpec { warmup: 0, ..BenchSpec::default() };
        assert!(s.validate().is_err());
    }

    #[test]
    fn tiny_sweep_covers_every_cell() {
        let spec = BenchSpec {
            ns: vec![200, 400],
            ratios: vec![0.5, 0.25],
            repeats: 3,
            ..BenchSpec::default()
        };
        let t = bench_pooling(&spec).unwrap();
        assert_eq!(t.rows.len(), 3 * 2 * 2);
        assert!(t.rows.iter().all(|r| r.p25_ms <= r.median_ms && r.median_ms <= r.p75_ms));
    }
}
