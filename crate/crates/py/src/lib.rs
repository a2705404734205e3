use std::sync::Arc;

use pyo3::create_exception;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use gwwalk_core::lab::{self, AnnealedParams, OracleParams, Outcome, PilotParams, QuenchedParams, SpeedParams, TrapParams, VarianceParams};
use gwwalk_core::stats;
use gwwalk_core::walk::{self, WalkOptions};

create_exception!(gwwalk, GwwalkError, PyValueError);

fn err(e: gwwalk_core::Error) -> PyErr {
    GwwalkError::new_err(e.to_string())
}

/// Round-trips through the `json` module so results arrive as plain dicts and lists.
fn to_py<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<PyObject> {
    let text = serde_json::to_string(value).map_err(|e| GwwalkError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

#[pyclass(name = "OffspringLaw", module = "gwwalk", frozen)]
#[derive(Clone)]
struct PyOffspringLaw(gwwalk_core::OffspringLaw);

#[pymethods]
impl PyOffspringLaw {
    /// `pairs` is a list of `(k, p_k)`; probabilities must sum to one.
    #[new]
    fn new(pairs: Vec<(u32, f64)>) -> PyResult<Self> {
        gwwalk_core::OffspringLaw::new(pairs).map(Self).map_err(err)
    }

    /// Parse the JSON form used by config files, e.g. `[[0, "1/4"], [2, "3/4"]]`.
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        serde_json::from_str(text).map(Self).map_err(|e| GwwalkError::new_err(e.to_string()))
    }

    fn atoms(&self) -> Vec<(u32, f64)> {
        self.0.atoms().to_vec()
    }

    fn mean(&self) -> f64 {
        self.0.mean()
    }

    fn f(&self, s: f64) -> f64 {
        self.0.f(s)
    }

    fn f_prime(&self, s: f64) -> f64 {
        self.0.f_prime(s)
    }

    fn extinction_probability(&self) -> f64 {
        self.0.extinction_probability()
    }

    fn __repr__(&self) -> String {
        let atoms: Vec<String> = self.0.atoms().iter().map(|(k, p)| format!("{k}: {p}")).collect();
        format!("OffspringLaw({{{}}})", atoms.join(", "))
    }
}

#[pyclass(name = "DerivedLaws", module = "gwwalk", frozen)]
struct PyDerivedLaws(Arc<gwwalk_core::DerivedLaws>);

#[pymethods]
impl PyDerivedLaws {
    /// Fails unless the law is supercritical.
    #[new]
    fn new(law: &PyOffspringLaw) -> PyResult<Self> {
        gwwalk_core::DerivedLaws::new(&law.0).map(|d| Self(Arc::new(d))).map_err(err)
    }

    #[getter]
    fn law(&self) -> PyOffspringLaw {
        PyOffspringLaw(self.0.law.clone())
    }

    #[getter]
    fn q(&self) -> f64 {
        self.0.q
    }

    #[getter]
    fn mu(&self) -> f64 {
        self.0.mu
    }

    #[getter]
    fn fprime_q(&self) -> f64 {
        self.0.fprime_q
    }

    #[getter]
    fn trap_law(&self) -> Option<PyOffspringLaw> {
        self.0.trap.clone().map(PyOffspringLaw)
    }

    #[getter]
    fn conditioned_root_law(&self) -> PyOffspringLaw {
        PyOffspringLaw(self.0.conditioned.clone())
    }

    /// `((k, j), probability)` pairs of total and backbone child counts.
    fn backbone_joint(&self) -> Vec<((u32, u32), f64)> {
        self.0.backbone_joint.entries().to_vec()
    }

    /// `(recurrence, clt, speed)` thresholds in β.
    fn thresholds(&self) -> (f64, f64, f64) {
        let t = self.0.thresholds();
        (t.recurrence, t.clt, t.speed)
    }

    fn regime(&self, beta: f64) -> PyResult<&'static str> {
        self.0.classify_regime(beta).map(|r| r.regime.as_str()).map_err(err)
    }
}

#[pyclass(name = "Tree", module = "gwwalk", frozen)]
struct PyTree(gwwalk_core::TreeHandle);

#[pymethods]
impl PyTree {
    #[new]
    fn new(laws: &PyDerivedLaws, seed: u64) -> Self {
        Self(gwwalk_core::TreeHandle::new(seed, laws.0.clone()))
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.0.seed()
    }

    /// Record of the vertex reached by following child indices from the root.
    fn expand<'py>(&self, py: Python<'py>, path: Vec<u32>) -> PyResult<Bound<'py, PyDict>> {
        let r = self.0.expand(&gwwalk_core::VertexId::from_path(path)).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("total_children", r.total_children)?;
        d.set_item("backbone_children", r.backbone_children)?;
        d.set_item("is_backbone", r.is_backbone)?;
        d.set_item("level", r.level)?;
        Ok(d)
    }

    /// `(height, exact)`; `exact` is false when the search stopped at `cap`.
    fn branch_height(&self, path: Vec<u32>, cap: u32) -> PyResult<(u32, bool)> {
        let h = self.0.branch_height(&gwwalk_core::VertexId::from_path(path), cap).map_err(err)?;
        Ok((h.value(), matches!(h, gwwalk_core::tree::Height::Exact(_))))
    }

    fn generation_sizes(&self, depth: u32) -> Vec<usize> {
        self.0.truncate(depth).generation_sizes()
    }

    fn canonical_shape(&self, depth: u32) -> String {
        self.0.truncate(depth).canonical_shape()
    }

    /// The first `depth` generations in the line-based text format.
    fn to_text(&self, depth: u32) -> String {
        self.0.truncate(depth).to_text()
    }
}

#[pyclass(name = "Trajectory", module = "gwwalk", frozen)]
struct PyTrajectory(gwwalk_core::Trajectory);

#[pymethods]
impl PyTrajectory {
    #[getter]
    fn beta(&self) -> f64 {
        self.0.beta
    }

    #[getter]
    fn levels(&self) -> Vec<u32> {
        self.0.levels.clone()
    }

    #[getter]
    fn on_backbone(&self) -> Vec<bool> {
        self.0.on_backbone.clone()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    /// Vertex paths `X_0, X_1, ...`; only available when moves were recorded.
    fn vertices(&self) -> Option<Vec<Vec<u32>>> {
        self.0.vertices().map(|vs| vs.into_iter().map(|v| v.path().to_vec()).collect())
    }

    fn regenerations<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let rec = walk::regenerations(&self.0).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("zeta_y", rec.zeta_y)?;
        d.set_item("zeta_x", rec.zeta_x)?;
        d.set_item("levels", rec.levels)?;
        d.set_item("increments", rec.increments.iter().map(|i| (i.dt, i.dlevel)).collect::<Vec<_>>())?;
        d.set_item("unconfirmed_tail", rec.unconfirmed_tail)?;
        Ok(d)
    }

    fn to_text(&self) -> String {
        self.0.to_text()
    }
}

#[pyfunction]
fn derive_seed(master: u64, label: &str, index: u64) -> u64 {
    gwwalk_core::derive_seed(master, label, index)
}

#[pyfunction]
#[pyo3(signature = (tree, beta, steps, walk_seed, record_moves = false))]
fn run_walk(py: Python<'_>, tree: &PyTree, beta: f64, steps: usize, walk_seed: u64, record_moves: bool) -> PyTrajectory {
    let opts = WalkOptions { record_moves };
    PyTrajectory(py.allow_threads(|| walk::run_walk(&tree.0, beta, steps, walk_seed, opts)))
}

/// `(confirmed indices, unconfirmed tail)` of a nearest-neighbour level path.
#[pyfunction]
fn detect_regenerations(levels: Vec<i64>) -> PyResult<(Vec<usize>, Option<usize>)> {
    let rec = walk::detect_regenerations(&levels).map_err(err)?;
    Ok((rec.zeta_y, rec.unconfirmed_tail))
}

#[pyfunction]
fn ks_normal(py: Python<'_>, samples: Vec<f64>) -> PyResult<PyObject> {
    let report = stats::ks_test(&samples, stats::standard_normal_cdf).map_err(err)?;
    to_py(py, &report)
}

#[pyfunction]
fn chi_square_test(py: Python<'_>, observed: Vec<u64>, expected_pmf: Vec<f64>) -> PyResult<PyObject> {
    let report = stats::chi_square_test(&observed, &expected_pmf).map_err(err)?;
    to_py(py, &report)
}

#[pyfunction]
#[pyo3(signature = (samples, censored = 0, order = 2))]
fn moment_trend(py: Python<'_>, samples: Vec<f64>, censored: usize, order: i32) -> PyResult<PyObject> {
    let report = stats::moment_trend(&samples, censored, order).map_err(err)?;
    to_py(py, &report)
}

/// Speed, variance and start-up offset of the annealed limit from pilot walks.
#[pyfunction]
#[pyo3(signature = (laws, beta, walks = 500, steps = 200_000, seed = lab::DEFAULT_SEED))]
fn estimate_constants(py: Python<'_>, laws: &PyDerivedLaws, beta: f64, walks: usize, steps: usize, seed: u64) -> PyResult<PyObject> {
    let laws = laws.0.clone();
    let c = py
        .allow_threads(|| lab::estimate_constants(&laws, beta, PilotParams { walks, steps }, seed))
        .map_err(err)?;
    to_py(py, &c)
}

fn params<T: serde::de::DeserializeOwned + Default>(text: Option<&str>) -> PyResult<T> {
    match text {
        None => Ok(T::default()),
        Some(t) => serde_json::from_str(t).map_err(|e| GwwalkError::new_err(format!("invalid params: {e}"))),
    }
}

/// Run one experiment and return its summary, checks and CSV tables.
///
/// `params` is a JSON object overriding the experiment's defaults, as in the
/// `params` field of a CLI config file.
#[pyfunction]
#[pyo3(signature = (name, laws, betas, seed = lab::DEFAULT_SEED, params = None))]
fn experiment(py: Python<'_>, name: &str, laws: &PyDerivedLaws, betas: Vec<f64>, seed: u64, params: Option<&str>) -> PyResult<PyObject> {
    let laws = laws.0.clone();
    let outcome: gwwalk_core::Result<Outcome> = match name {
        "regimes" => lab::regimes(&laws, &betas),
        "speed" => {
            let p: SpeedParams = self::params(params)?;
            py.allow_threads(|| lab::speed(&laws, &betas, p, seed))
        }
        "annealed-clt" => {
            let p: AnnealedParams = self::params(params)?;
            py.allow_threads(|| lab::annealed_clt_experiment(&laws, &betas, p, seed))
        }
        "quenched-clt" => {
            let p: QuenchedParams = self::params(params)?;
            py.allow_threads(|| lab::quenched_clt_experiment(&laws, &betas, p, seed))
        }
        "trap-moments" => {
            let p: TrapParams = self::params(params)?;
            py.allow_threads(|| lab::trap_moments_experiment(&laws, &betas, p, seed))
        }
        "oracle-compare" => {
            let p: OracleParams = self::params(params)?;
            py.allow_threads(|| lab::oracle_compare(&laws, &betas, &p, seed))
        }
        "quenched-variance" => {
            let p: VarianceParams = self::params(params)?;
            py.allow_threads(|| lab::quenched_variance_experiment(&laws, &betas, &p, seed))
        }
        other => return Err(GwwalkError::new_err(format!("unknown experiment `{other}`"))),
    };
    let outcome = outcome.map_err(err)?;
    let tables: serde_json::Map<String, serde_json::Value> =
        outcome.tables.iter().map(|(name, t)| (name.clone(), t.to_csv().into())).collect();
    let checks: Vec<serde_json::Value> = outcome
        .checks
        .iter()
        .map(|c| serde_json::json!({ "name": c.name, "pass": c.pass, "detail": c.detail }))
        .collect();
    to_py(
        py,
        &serde_json::json!({
            "experiment": outcome.experiment,
            "pass": outcome.passed(),
            "checks": checks,
            "results": outcome.summary,
            "tables": tables,
        }),
    )
}

#[pymodule]
fn gwwalk(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("GwwalkError", m.py().get_type::<GwwalkError>())?;
    m.add("DEFAULT_SEED", lab::DEFAULT_SEED)?;
    m.add_class::<PyOffspringLaw>()?;
    m.add_class::<PyDerivedLaws>()?;
    m.add_class::<PyTree>()?;
    m.add_class::<PyTrajectory>()?;
    m.add_function(wrap_pyfunction!(derive_seed, m)?)?;
    m.add_function(wrap_pyfunction!(run_walk, m)?)?;
    m.add_function(wrap_pyfunction!(detect_regenerations, m)?)?;
    m.add_function(wrap_pyfunction!(ks_normal, m)?)?;
    m.add_function(wrap_pyfunction!(chi_square_test, m)?)?;
    m.add_function(wrap_pyfunction!(moment_trend, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_constants, m)?)?;
    m.add_function(wrap_pyfunction!(experiment, m)?)?;
    Ok(())
}
