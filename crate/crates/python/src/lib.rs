//! Python bindings for the `fpnet` simulator.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use fpnet::compression::{certify_compressor, CompressorKind, CompressorSpec, VectorSampler};
use fpnet::config::Config;
use fpnet::engine::RunTrace;
use fpnet::experiments::{preset_by_name, run_preset as run_preset_rs, Manifest, MANIFEST_NAME};
use fpnet::network::{build_graph, metropolis_mixing, Topology};
use fpnet::operators::find_fixed_point;
use fpnet::report::Report;
use fpnet::rng::{Purpose, StreamKey};
use fpnet::scheduling::StepSchedule;

create_exception!(fpnet_py, FpnetError, PyException, "Simulator error; the message starts with `[kind]`.");

fn err(e: fpnet::Error) -> PyErr {
    FpnetError::new_err(format!("[{}] {}", e.kind(), e))
}

fn report_dict<'py>(py: Python<'py>, r: &Report) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("subject", &r.subject)?;
    d.set_item("status", r.status().to_string())?;
    let checks = PyDict::new(py);
    for c in &r.checks {
        let row = PyDict::new(py);
        row.set_item("status", c.status.to_string())?;
        row.set_item("value", c.value)?;
        row.set_item("bound", c.bound)?;
        row.set_item("margin", c.margin)?;
        row.set_item("note", &c.note)?;
        checks.set_item(&c.name, row)?;
    }
    d.set_item("checks", checks)?;
    Ok(d)
}

/// Run configuration parsed from TOML.
#[pyclass(name = "Config", module = "fpnet_py", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: Config,
}

#[pymethods]
impl PyConfig {
    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Config::from_toml_str(text).map(|inner| Self { inner }).map_err(err)
    }

    #[staticmethod]
    fn from_path(path: PathBuf) -> PyResult<Self> {
        Config::from_path(&path).map(|inner| Self { inner }).map_err(err)
    }

    /// Returns a copy with `{"section.key": "value"}` overrides applied.
    fn with_overrides(&self, overrides: Vec<(String, String)>) -> PyResult<Self> {
        self.inner.with_overrides(&overrides).map(|inner| Self { inner }).map_err(err)
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml_string().map_err(err)
    }

    /// Theorem-condition report for the resolved parameters.
    fn validate<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let built = self.inner.build().map_err(err)?;
        report_dict(py, &built.validation)
    }

    /// Derived header values (alpha, kappa, constants, ...).
    fn header<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let h = self.inner.build().map_err(err)?.header;
        let d = PyDict::new(py);
        for (k, v) in [
            ("alpha", h.alpha),
            ("kappa", h.kappa),
            ("lipschitz", h.lipschitz),
            ("heterogeneity_zeta", h.heterogeneity_zeta),
            ("d_bound", h.d_bound),
            ("r", h.r),
            ("phi", h.phi),
            ("delta_sq", h.delta_sq),
            ("bits_per_message_expected", h.bits_per_message_expected),
            ("gamma", h.gamma),
            ("psi", h.psi),
            ("zeta1", h.zeta1),
            ("zeta2", h.zeta2),
            ("consensus_constant", h.consensus_constant),
        ] {
            d.set_item(k, v)?;
        }
        d.set_item("h_max", h.h_max)?;
        d.set_item("comm_rounds_planned", h.comm_rounds_planned)?;
        Ok(d)
    }

    /// Runs the simulator. Releases the interpreter lock while iterating.
    fn run(&self, py: Python<'_>) -> PyResult<Trace> {
        let built = self.inner.build().map_err(err)?;
        let trace = py.detach(|| fpnet::engine::run(&built.run)).map_err(err)?;
        Ok(Trace { inner: trace })
    }

    #[pyo3(signature = (tol = 1e-10))]
    fn fixed_point(&self, tol: f64) -> PyResult<Vec<f64>> {
        let g = self.inner.build_operator().map_err(err)?;
        find_fixed_point(&g, tol).map(|f| f.x).map_err(err)
    }
}

/// Per-iteration metrics of one run.
#[pyclass(module = "fpnet_py")]
struct Trace {
    inner: RunTrace,
}

#[pymethods]
impl Trace {
    fn __len__(&self) -> usize {
        self.inner.rows.len()
    }

    fn csv(&self) -> String {
        self.inner.to_csv_string()
    }

    /// Column name to list of values, following the CSV header.
    fn columns<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let rows = &self.inner.rows;
        let d = PyDict::new(py);
        d.set_item("t", rows.iter().map(|r| r.t).collect::<Vec<_>>())?;
        d.set_item("residual", self.inner.column(|r| r.residual))?;
        d.set_item("consensus_error", self.inner.column(|r| r.consensus_error))?;
        d.set_item("dist_to_fixpoint", self.inner.column(|r| r.dist_to_fixpoint))?;
        d.set_item("bits_cumulative", rows.iter().map(|r| r.bits_cumulative).collect::<Vec<_>>())?;
        d.set_item("comm_rounds", rows.iter().map(|r| r.comm_rounds).collect::<Vec<_>>())?;
        d.set_item("eta_t", self.inner.column(|r| r.eta_t))?;
        Ok(d)
    }

    fn diagnostics<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let g = &self.inner.diagnostics;
        let d = PyDict::new(py);
        d.set_item("messages", g.messages)?;
        d.set_item("bits_per_message_total", g.bits_per_message_total)?;
        d.set_item("index_bits_per_edge_total", g.index_bits_per_edge_total)?;
        d.set_item("box_violations", g.box_violations)?;
        d.set_item("int_overflows", g.int_overflows)?;
        d.set_item("max_mean_drift", g.max_mean_drift)?;
        d.set_item("replica_mismatches", g.replica_mismatches)?;
        Ok(d)
    }
}

/// One of the unified compressors at a fixed dimension.
#[pyclass(module = "fpnet_py")]
struct Compressor {
    inner: CompressorSpec,
}

#[pymethods]
impl Compressor {
    /// `kind` is `c1`, `c2`, `c3` or `identity`.
    #[new]
    #[pyo3(signature = (kind, dim, l_bits = 2, delta_step = 1.0, p_keep = 0.75))]
    fn new(kind: &str, dim: usize, l_bits: u32, delta_step: f64, p_keep: f64) -> PyResult<Self> {
        let k = match kind {
            "c1" => CompressorKind::C1InfQuantizer { l_bits },
            "c2" => CompressorKind::C2Uniform { delta_step },
            "c3" => CompressorKind::C3SparsifyQuantize { p_keep, delta_step },
            "identity" => CompressorKind::Identity,
            other => {
                return Err(FpnetError::new_err(format!(
                    "[invalid-parameter] unknown compressor `{other}`"
                )))
            }
        };
        CompressorSpec::new(k, dim).map(|inner| Self { inner }).map_err(err)
    }

    #[getter]
    fn r(&self) -> f64 {
        self.inner.r()
    }

    #[getter]
    fn phi(&self) -> f64 {
        self.inner.phi()
    }

    #[getter]
    fn delta_sq(&self) -> f64 {
        self.inner.delta_sq()
    }

    /// Expected bits per message.
    fn bit_cost(&self) -> f64 {
        self.inner.bit_cost()
    }

    /// Compresses `x` and decodes it again. Returns `(decoded, bits)`.
    #[pyo3(signature = (x, seed = 0))]
    fn roundtrip(&self, x: Vec<f64>, seed: u64) -> PyResult<(Vec<f64>, u64)> {
        let mut rng = StreamKey::new(seed, Purpose::Compressor, 0, 0).rng();
        let msg = self.inner.compress(&x, &mut rng).map_err(err)?;
        Ok((self.inner.decode(&msg), msg.bits))
    }

    /// Monte-Carlo check of the unified inequality; returns a report dict.
    #[pyo3(signature = (trials = 10_000, points = 4, scale = 1.0, seed = 0))]
    fn certify<'py>(
        &self,
        py: Python<'py>,
        trials: usize,
        points: usize,
        scale: f64,
        seed: u64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let spec = self.inner.clone();
        let rep = py
            .detach(|| certify_compressor(&spec, trials, VectorSampler::Gaussian { scale }, points, seed))
            .map_err(err)?;
        report_dict(py, &rep)
    }
}

/// Metropolis weights for a topology. Returns `(W, alpha, kappa)`.
#[pyfunction]
#[pyo3(signature = (kind, n_agents, p = 0.5, seed = 0))]
fn mixing(kind: &str, n_agents: usize, p: f64, seed: u64) -> PyResult<(Vec<Vec<f64>>, f64, f64)> {
    let topo = match kind {
        "complete" => Topology::Complete,
        "ring" => Topology::Ring,
        "path" => Topology::Path,
        "random_connected" => Topology::RandomConnected { p, seed },
        other => return Err(FpnetError::new_err(format!("[config] unknown topology `{other}`"))),
    };
    let g = build_graph(&topo, n_agents).map_err(err)?;
    let m = metropolis_mixing(&g).map_err(err)?;
    let w = m.weights();
    let rows = (0..n_agents).map(|i| (0..n_agents).map(|j| w[(i, j)]).collect()).collect();
    Ok((rows, m.alpha(), m.kappa()))
}

/// Step size `eta_t` for `inv_sqrt`, `inv_linear` or `constant` schedules.
#[pyfunction]
fn step_size(kind: &str, a: f64, b: f64, t: usize) -> PyResult<f64> {
    let s = match kind {
        "inv_sqrt" => StepSchedule::inv_sqrt(a, b),
        "inv_linear" => StepSchedule::inv_linear(a, b),
        "constant" => StepSchedule::constant(b),
        other => return Err(FpnetError::new_err(format!("[config] unknown step kind `{other}`"))),
    };
    Ok(s.eta(t))
}

/// Runs a named preset and returns the manifest path.
#[pyfunction]
#[pyo3(signature = (name, seeds, out_dir, overrides = Vec::new()))]
fn run_preset(
    py: Python<'_>,
    name: &str,
    seeds: Vec<u64>,
    out_dir: PathBuf,
    overrides: Vec<(String, String)>,
) -> PyResult<PathBuf> {
    let mut p = preset_by_name(name).map_err(err)?;
    p.config = p.config.with_overrides(&overrides).map_err(err)?;
    let dir = out_dir.clone();
    py.detach(move || run_preset_rs(&p, &seeds, &dir)).map_err(err)?;
    Ok(out_dir.join(MANIFEST_NAME))
}

/// Relative paths whose checksum no longer matches the manifest.
#[pyfunction]
fn verify_manifest(path: PathBuf) -> PyResult<Vec<String>> {
    let text = std::fs::read_to_string(&path).map_err(|e| err(e.into()))?;
    let m = Manifest::parse(&text).map_err(err)?;
    let dir = path.parent().map(PathBuf::from).unwrap_or_default();
    m.verify(&dir).map_err(err)
}

#[pymodule]
fn fpnet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("FpnetError", m.py().get_type::<FpnetError>())?;
    m.add_class::<PyConfig>()?;
    m.add_class::<Trace>()?;
    m.add_class::<Compressor>()?;
    m.add_function(wrap_pyfunction!(mixing, m)?)?;
    m.add_function(wrap_pyfunction!(step_size, m)?)?;
    m.add_function(wrap_pyfunction!(run_preset, m)?)?;
    m.add_function(wrap_pyfunction!(verify_manifest, m)?)?;
    Ok(())
}
