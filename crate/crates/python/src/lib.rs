//! Python bindings: divergence and metric helpers, the association solvers,
//! a uniform-intensity tracker and the experiment runner.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use pmbtrack::association::{self, AssociationProblem, LbpConfig};
use pmbtrack::experiments::{self, ExperimentConfig, GridContext, TraceRequest};
use pmbtrack::intensity::{steady_state_uniform, DetectionField, IntensityModel, Region};
use pmbtrack::linalg::{LinearMeasModel, Vec2, Vec4};
use pmbtrack::metrics::{self, OspaParams};
use pmbtrack::tracker::{self, FilterParams, FilterState, IntensityDynamics, Models, PruneMode};

type State4 = (f64, f64, f64, f64);

fn py_err(e: pmbtrack::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_vec4(s: &[State4]) -> Vec<Vec4> {
    s.iter().map(|&(a, b, c, d)| Vec4::new(a, b, c, d)).collect()
}

fn from_vec4(x: &Vec4) -> State4 {
    (x[0], x[1], x[2], x[3])
}

/// KL divergence from a Bernoulli component with existence `q` to its Poisson projection.
#[pyfunction]
fn bernoulli_poisson_kl(q: f64) -> PyResult<f64> {
    pmbtrack::divergence::bernoulli_poisson_kl(q).map_err(py_err)
}

/// OSPA distance between two sets of `(p_x, v_x, p_y, v_y)` states.
#[pyfunction]
#[pyo3(signature = (a, b, order = 2.0, cutoff = 10.0))]
fn ospa(a: Vec<State4>, b: Vec<State4>, order: f64, cutoff: f64) -> PyResult<f64> {
    if !(order >= 1.0 && cutoff > 0.0) {
        return Err(PyValueError::new_err("need order >= 1 and cutoff > 0"));
    }
    Ok(metrics::ospa(&to_vec4(&a), &to_vec4(&b), &OspaParams { order, cutoff }))
}

#[pyclass(get_all, frozen)]
struct Marginals {
    p: Vec<Vec<f64>>,
    p_miss: Vec<f64>,
    p_new: Vec<f64>,
    iterations: usize,
    converged: bool,
}

#[pymethods]
impl Marginals {
    fn __repr__(&self) -> String {
        format!(
            "Marginals(tracks={}, measurements={}, converged={})",
            self.p_miss.len(),
            self.p_new.len(),
            self.converged
        )
    }
}

impl From<association::AssociationMarginals> for Marginals {
    fn from(m: association::AssociationMarginals) -> Self {
        Self {
            p: m.p,
            p_miss: m.p_miss,
            p_new: m.p_new,
            iterations: m.iterations,
            converged: m.converged,
        }
    }
}

/// Exact association marginals by enumeration (small problems only).
#[pyfunction]
fn exact_marginals(w_miss: Vec<f64>, w: Vec<Vec<f64>>, kappa: Vec<f64>) -> PyResult<Marginals> {
    let prob = AssociationProblem::new(w_miss, w, kappa).map_err(py_err)?;
    Ok(association::exact_marginals(&prob).map_err(py_err)?.into())
}

/// Association marginals by loopy belief propagation.
#[pyfunction]
#[pyo3(signature = (w_miss, w, kappa, tolerance = 1e-6, max_iterations = 200, damping = 0.0))]
fn lbp_marginals(
    w_miss: Vec<f64>,
    w: Vec<Vec<f64>>,
    kappa: Vec<f64>,
    tolerance: f64,
    max_iterations: usize,
    damping: f64,
) -> PyResult<Marginals> {
    let prob = AssociationProblem::new(w_miss, w, kappa).map_err(py_err)?;
    let config = LbpConfig {
        tolerance,
        max_iterations,
        damping,
    };
    Ok(association::lbp_marginals(&prob, &config).map_err(py_err)?.into())
}

/// Tracker on the standard region with a spatially uniform undetected intensity.
#[pyclass]
struct UniformTracker {
    state: Option<FilterState>,
    models: Models,
    params: FilterParams,
    estimates: Vec<Vec4>,
}

#[pymethods]
impl UniformTracker {
    #[new]
    #[pyo3(signature = (
        birth_total = 0.05,
        survival = 0.999,
        detection = 0.3,
        clutter_total = 10.0,
        process_noise = 0.01,
        measurement_noise = 1.0,
        prune_threshold = 1e-3,
        initial_mass = None,
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        birth_total: f64,
        survival: f64,
        detection: f64,
        clutter_total: f64,
        process_noise: f64,
        measurement_noise: f64,
        prune_threshold: f64,
        initial_mass: Option<f64>,
    ) -> PyResult<Self> {
        let region = Region::STANDARD;
        let initial = match initial_mass {
            Some(m) => IntensityModel::uniform_with_mass(m, region),
            None => steady_state_uniform(birth_total, survival, region).map_err(py_err)?,
        };
        let models = Models {
            dynamics: pmbtrack::linalg::CvDynamics::new(1.0, process_noise),
            measurement: LinearMeasModel::position(measurement_noise),
            detection: DetectionField::Constant(detection),
            intensity: IntensityDynamics::Uniform {
                birth: IntensityModel::uniform_with_mass(birth_total, region),
            },
        };
        let params = FilterParams {
            clutter_density: clutter_total / region.pos_area(),
            survival,
            prune: PruneMode::Delete {
                threshold: prune_threshold,
            },
            ..FilterParams::default()
        };
        Ok(Self {
            state: Some(FilterState::new(initial)),
            models,
            params,
            estimates: Vec::new(),
        })
    }

    /// Process one scan of `(x, y)` measurements and return the confirmed estimates.
    fn step(&mut self, scan: Vec<(f64, f64)>) -> PyResult<Vec<State4>> {
        let scan: Vec<Vec2> = scan.into_iter().map(|(x, y)| Vec2::new(x, y)).collect();
        let state = self.state.take().expect("tracker state is always present");
        match tracker::step(state.clone(), &scan, &self.models, &self.params) {
            Ok(out) => {
                self.state = Some(out.state);
                self.estimates = out.estimates;
                Ok(self.estimates.iter().map(from_vec4).collect())
            }
            Err(e) => {
                self.state = Some(state);
                Err(py_err(e))
            }
        }
    }

    #[getter]
    fn time(&self) -> u32 {
        self.state.as_ref().map_or(0, |s| s.time)
    }

    /// Expected number of targets not yet detected.
    #[getter]
    fn undetected_mass(&self) -> f64 {
        self.state.as_ref().map_or(0.0, |s| s.intensity.total_mass())
    }

    /// `(id, existence, state)` for every live track.
    #[getter]
    fn tracks(&self) -> Vec<(u64, f64, State4)> {
        self.state
            .as_ref()
            .map(|s| {
                s.tracks
                    .iter()
                    .map(|t| (t.id, t.existence, from_vec4(&t.kin.mean)))
                    .collect()
            })
            .unwrap_or_default()
    }
}

#[pyfunction]
fn presets() -> Vec<&'static str> {
    experiments::PRESETS.to_vec()
}

/// A preset's full configuration as TOML.
#[pyfunction]
fn preset_toml(name: &str) -> PyResult<String> {
    experiments::preset(name)
        .and_then(|c| c.to_toml_string())
        .map_err(py_err)
}

/// Run an experiment given a preset name or a TOML config string. Returns
/// `{variant: {"time", "mospa_mean", "mospa_stderr", "undetected_mass", "track_count_mean"}}`.
#[pyfunction]
#[pyo3(signature = (preset = None, config = None, runs = None, seed = None, variants = None, kernel_cache = None))]
fn run_experiment(
    py: Python<'_>,
    preset: Option<&str>,
    config: Option<&str>,
    runs: Option<usize>,
    seed: Option<u64>,
    variants: Option<Vec<String>>,
    kernel_cache: Option<PathBuf>,
) -> PyResult<BTreeMap<String, BTreeMap<String, Vec<f64>>>> {
    let mut cfg = match (preset, config) {
        (Some(name), None) => experiments::preset(name),
        (None, Some(text)) => ExperimentConfig::from_toml_str(text),
        _ => return Err(PyValueError::new_err("pass exactly one of preset or config")),
    }
    .map_err(py_err)?;
    if let Some(names) = variants {
        cfg.select_variants(&names).map_err(py_err)?;
    }
    if let Some(r) = runs {
        cfg.runs = r;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(py_err)?;

    let table = py
        .detach(|| {
            let grid = if cfg.uses_grid() {
                Some(GridContext::prepare(&cfg, kernel_cache.as_deref())?)
            } else {
                None
            };
            experiments::run_experiment(&cfg, grid.as_ref(), &TraceRequest::default())
        })
        .map_err(py_err)?;

    Ok(table
        .variants
        .into_iter()
        .map(|v| {
            let n = v.mospa.mean.len();
            let columns = BTreeMap::from([
                ("time".to_string(), (0..n).map(|t| t as f64).collect()),
                ("mospa_mean".to_string(), v.mospa.mean),
                ("mospa_stderr".to_string(), v.mospa.stderr),
                ("undetected_mass".to_string(), v.undetected_mass),
                ("track_count_mean".to_string(), v.track_count),
            ]);
            (v.name, columns)
        })
        .collect())
}

#[pymodule]
pub fn _pmbtrack(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<Marginals>()?;
    m.add_class::<UniformTracker>()?;
    m.add_function(wrap_pyfunction!(bernoulli_poisson_kl, m)?)?;
    m.add_function(wrap_pyfunction!(ospa, m)?)?;
    m.add_function(wrap_pyfunction!(exact_marginals, m)?)?;
    m.add_function(wrap_pyfunction!(lbp_marginals, m)?)?;
    m.add_function(wrap_pyfunction!(presets, m)?)?;
    m.add_function(wrap_pyfunction!(preset_toml, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
