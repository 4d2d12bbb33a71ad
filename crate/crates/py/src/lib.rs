use std::path::PathBuf;

use pointgva_core::bench::{self, BenchSpec, PoolingMethod};
use pointgva_core::checks::{self, EquivSuite, GradModule};
use pointgva_core::network::{self, BackboneConfig};
use pointgva_core::numerics::{DEFAULT_STEP, DEFAULT_TOL};
use pointgva_core::spatial::{self, GridSpec};
use pointgva_core::{io, pooling, Point3, Tensor};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn err(e: pointgva_core::Error) -> PyErr {
    match e {
        pointgva_core::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn matrix(rows: &[Vec<f64>], cols: usize) -> PyResult<Tensor> {
    if rows.is_empty() {
        return Ok(Tensor::zeros(&[0, cols]));
    }
    Tensor::from_rows(rows).map_err(err)
}

#[pyclass(name = "PointCloud", module = "pointgva", from_py_object)]
#[derive(Clone)]
struct PyPointCloud {
    inner: pointgva_core::PointCloud,
}

#[pymethods]
impl PyPointCloud {
    #[new]
    #[pyo3(signature = (positions, features=None))]
    fn new(positions: Vec<Point3>, features: Option<Vec<Vec<f64>>>) -> PyResult<Self> {
        let inner = match features {
            Some(f) => {
                let cols = f.first().map_or(0, Vec::len);
                pointgva_core::PointCloud::new(positions, matrix(&f, cols)?).map_err(err)?
            }
            None => pointgva_core::PointCloud::from_positions(positions),
        };
        Ok(Self { inner })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn channels(&self) -> usize {
        self.inner.channels()
    }

    #[getter]
    fn positions(&self) -> Vec<Point3> {
        self.inner.positions.clone()
    }

    #[getter]
    fn features(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.features)
    }

    fn translated(&self, offset: Point3) -> Self {
        Self {
            inner: self.inner.translated(offset),
        }
    }

    fn permuted(&self, order: Vec<usize>) -> PyResult<Self> {
        let mut seen = vec![false; self.inner.len()];
        if order.len() != seen.len() || !order.iter().all(|&i| i < seen.len() && !std::mem::replace(&mut seen[i], true)) {
            return Err(PyValueError::new_err("order must be a permutation of 0..len"));
        }
        Ok(Self {
            inner: self.inner.permuted(&order),
        })
    }

    fn __repr__(&self) -> String {
        format!("PointCloud(n={}, c={})", self.inner.len(), self.inner.channels())
    }
}

/// Model configuration; see the repository README for the TOML schema.
#[pyclass(name = "Config", module = "pointgva", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: BackboneConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    fn new() -> Self {
        Self {
            inner: BackboneConfig::default(),
        }
    }

    #[staticmethod]
    fn toy() -> Self {
        Self {
            inner: BackboneConfig::toy(),
        }
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: BackboneConfig::from_toml_str(text).map_err(err)?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml_string()
    }

    fn param_count(&self) -> PyResult<usize> {
        network::count_params(&self.inner).map_err(err)
    }
}

#[pyclass(name = "SegmentationModel", module = "pointgva")]
struct PyModel {
    inner: network::SegmentationModel,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (config, seed=0))]
    fn new(config: PyConfig, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: network::SegmentationModel::new(config.inner, seed).map_err(err)?,
        })
    }

    fn param_count(&self) -> usize {
        self.inner.params.scalar_count()
    }

    /// Per-point class logits, one row per input point.
    fn logits(&self, py: Python<'_>, cloud: &PyPointCloud) -> PyResult<Vec<Vec<f64>>> {
        let cloud = cloud.inner.clone();
        let out = py.detach(|| self.inner.logits(&cloud)).map_err(err)?;
        Ok(rows(&out))
    }
}

#[pyfunction]
#[pyo3(signature = (n, c, seed=0))]
fn synth_uniform(n: usize, c: usize, seed: u64) -> PyResult<PyPointCloud> {
    if n == 0 {
        return Err(PyValueError::new_err("n must be at least 1"));
    }
    Ok(PyPointCloud {
        inner: bench::synth_uniform(n, c, seed),
    })
}

#[pyfunction]
fn read_ptpc(path: PathBuf) -> PyResult<(PyPointCloud, Option<Vec<u32>>)> {
    let f = io::read_ptpc(&path).map_err(err)?;
    Ok((PyPointCloud { inner: f.cloud }, f.labels))
}

#[pyfunction]
#[pyo3(signature = (path, cloud, labels=None))]
fn write_ptpc(path: PathBuf, cloud: &PyPointCloud, labels: Option<Vec<u32>>) -> PyResult<()> {
    io::write_ptpc(&path, &cloud.inner, labels.as_deref()).map_err(err)
}

/// Indices of the `k` nearest reference points for each query.
#[pyfunction]
fn knn(queries: Vec<Point3>, reference: Vec<Point3>, k: usize) -> PyResult<Vec<Vec<usize>>> {
    let table = spatial::knn_positions(&queries, &reference, k).map_err(err)?;
    Ok((0..table.num_queries()).map(|i| table.row(i).to_vec()).collect())
}

#[pyfunction]
#[pyo3(signature = (positions, m, start=0))]
fn fps(positions: Vec<Point3>, m: usize, start: usize) -> PyResult<Vec<usize>> {
    spatial::fps_positions(&positions, m, start).map_err(err)
}

/// Returns the pooled cloud and each input point's cell id.
#[pyfunction]
fn grid_pool(cloud: &PyPointCloud, grid_size: f64, projection: Vec<Vec<f64>>) -> PyResult<(PyPointCloud, Vec<usize>)> {
    let cols = projection.first().map_or(0, Vec::len);
    let u = matrix(&projection, cols)?;
    let r = pooling::grid_pool(&cloud.inner, &GridSpec::new(grid_size), &u).map_err(err)?;
    Ok((PyPointCloud { inner: r.pooled }, r.map.cell_of().to_vec()))
}

/// Runs an equivalence suite; returns `(passed, max_error)`.
#[pyfunction]
#[pyo3(signature = (which, trials=50, seed=0))]
fn check_equiv(which: &str, trials: usize, seed: u64) -> PyResult<(bool, f64)> {
    let suite: EquivSuite = which.parse().map_err(err)?;
    let o = checks::run_equiv(suite, trials, seed).map_err(err)?;
    Ok((o.passed(), o.max_error))
}

/// Runs a gradient check suite; returns `(passed, max_rel_error)`.
#[pyfunction]
#[pyo3(signature = (module, trials=20, tol=DEFAULT_TOL, seed=0))]
fn check_grad(module: &str, trials: usize, tol: f64, seed: u64) -> PyResult<(bool, f64)> {
    let m: GradModule = module.parse().map_err(err)?;
    let o = checks::run_grad(m, trials, DEFAULT_STEP, tol, seed).map_err(err)?;
    Ok((o.passed(), o.max_error))
}

/// `(method, n, r, median_ms, p25_ms, p75_ms)`
type BenchRowTuple = (String, usize, f64, f64, f64, f64);

#[pyfunction]
#[pyo3(signature = (ns, ratios, repeats=5, seed=0))]
fn bench_pooling(
    py: Python<'_>,
    ns: Vec<usize>,
    ratios: Vec<f64>,
    repeats: usize,
    seed: u64,
) -> PyResult<Vec<BenchRowTuple>> {
    let spec = BenchSpec {
        ns,
        ratios,
        methods: PoolingMethod::ALL.to_vec(),
        repeats,
        seed,
        ..BenchSpec::default()
    };
    let table = py.detach(|| bench::bench_pooling(&spec)).map_err(err)?;
    Ok(table
        .rows
        .into_iter()
        .map(|r| (r.method.name().to_string(), r.n, r.r, r.median_ms, r.p25_ms, r.p75_ms))
        .collect())
}

#[pymodule]
fn pointgva(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPointCloud>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(synth_uniform, m)?)?;
    m.add_function(wrap_pyfunction!(read_ptpc, m)?)?;
    m.add_function(wrap_pyfunction!(write_ptpc, m)?)?;
    m.add_function(wrap_pyfunction!(knn, m)?)?;
    m.add_function(wrap_pyfunction!(fps, m)?)?;
    m.add_function(wrap_pyfunction!(grid_pool, m)?)?;
    m.add_function(wrap_pyfunction!(check_equiv, m)?)?;
    m.add_function(wrap_pyfunction!(check_grad, m)?)?;
    m.add_function(wrap_pyfunction!(bench_pooling, m)?)?;
    Ok(())
}
