//! Monte Carlo experiment harness: presets, variants, aggregation and output files.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::association::LbpConfig;
use crate::error::{Error, Result};
use crate::intensity::{
    balance_for_steady_state, steady_state_uniform, GridSpec, IntensityModel, KernelMethod, KernelRequest,
    TransitionKernel,
};
use crate::linalg::{LinearMeasModel, Vec4};
use crate::metrics::{coverage_filtered, mospa_curve, ospa, MospaCurve, OspaParams};
use crate::rng::{stream_rng, streams};
use crate::simulator::{generate_scans_with, simulate_truth_with, Hotspot, ScenarioConfig, SensorConfig};
use crate::tracker::{step, FilterParams, FilterState, IntensityDynamics, Models, PruneMode, TrackLogWriter};

pub const PRESETS: [&str; 3] = ["fig1", "fig3", "fig5"];

/// Undetected-target intensity used by a filter variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum IntensityKind {
    /// Uniform intensity of constant mass.
    Fixed { mass: f64 },
    /// Uniform intensity predicted and updated every scan.
    DynamicUniform,
    /// Gridded intensity propagated by a transition kernel.
    DynamicGrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantSpec {
    pub name: String,
    pub intensity: IntensityKind,
    pub prune: PruneMode,
}

/// Tracker settings shared by every variant; the scenario supplies the rest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackerSettings {
    pub gate: f64,
    pub confirm_existence: f64,
    pub max_cov_trace: f64,
    pub lbp: LbpConfig,
}

impl Default for TrackerSettings {
    fn default() -> Self {
        let p = FilterParams::default();
        Self {
            gate: p.gate,
            confirm_existence: p.confirm_existence,
            max_cov_trace: p.max_cov_trace,
            lbp: p.lbp,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scoring {
    /// OSPA against all targets.
    Full,
    /// OSPA restricted to targets and estimates inside the sensor's field of view.
    Coverage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub runs: usize,
    pub seed: u64,
    pub scoring: Scoring,
    pub ospa: OspaParams,
    pub scenario: ScenarioConfig,
    pub tracker: TrackerSettings,
    pub grid: GridSpec,
    pub kernel: KernelMethod,
    pub variants: Vec<VariantSpec>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::Config("runs must be at least 1".into()));
        }
        if self.variants.is_empty() {
            return Err(Error::Config("at least one variant is required".into()));
        }
        let mut names: Vec<&str> = self.variants.iter().map(|v| v.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("variant names must be unique".into()));
        }
        if names.iter().any(|n| n.is_empty() || n.contains(['/', '\\', ','])) {
            return Err(Error::Config(
                "variant names must be non-empty and free of '/', '\\', ','".into(),
            ));
        }
        for v in &self.variants {
            if v.prune.recycles() && !matches!(v.intensity, IntensityKind::DynamicGrid) {
                return Err(Error::Config(format!(
                    "variant {}: recycling needs a grid intensity",
                    v.name
                )));
            }
            let ok = match v.prune {
                PruneMode::Delete { threshold } | PruneMode::Recycle { threshold } => threshold >= 0.0,
                PruneMode::RecycleBudget { budget } => budget >= 0.0,
            };
            if !ok {
                return Err(Error::Config(format!("variant {}: negative pruning threshold", v.name)));
            }
        }
        self.scenario.validate()
    }

    /// Keep only the named variants, in the given order.
    pub fn select_variants(&mut self, names: &[String]) -> Result<()> {
        if names.is_empty() {
            return Ok(());
        }
        let mut chosen = Vec::with_capacity(names.len());
        for n in names {
            let v = self.variants.iter().find(|v| &v.name == n).ok_or_else(|| {
                let available: Vec<_> = self.variants.iter().map(|v| v.name.clone()).collect();
                Error::InvalidArgument(format!("unknown variant {n:?}; available: {}", available.join(", ")))
            })?;
            chosen.push(v.clone());
        }
        self.variants = chosen;
        Ok(())
    }

    pub fn filter_params(&self, prune: PruneMode) -> FilterParams {
        FilterParams {
            clutter_density: self.scenario.clutter_density(),
            survival: self.scenario.survival,
            prune,
            gate: self.tracker.gate,
            confirm_existence: self.tracker.confirm_existence,
            max_cov_trace: self.tracker.max_cov_trace,
            region: self.scenario.region,
            lbp: self.tracker.lbp,
        }
    }

    pub fn kernel_request(&self) -> KernelRequest {
        KernelRequest {
            spec: self.grid.clone(),
            dynamics: self.scenario.dynamics(),
            survival: self.scenario.survival,
            method: self.kernel,
        }
    }

    pub fn uses_grid(&self) -> bool {
        self.variants.iter().any(|v| v.intensity == IntensityKind::DynamicGrid)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        let json = serde_json::to_vec(self)?;
        Ok(hex::encode(Sha256::digest(&json)))
    }
}

fn base_scenario() -> ScenarioConfig {
    ScenarioConfig {
        region: crate::intensity::Region::STANDARD,
        birth_total: 0.05,
        hotspots: Vec::new(),
        boundary_entry: true,
        survival: 0.999,
        detection: 0.3,
        clutter_total: 10.0,
        process_noise: 0.01,
        measurement_noise: 1.0,
        duration: 100,
        initial_mean: 50.0,
        sensor: SensorConfig::Omni,
    }
}

/// Two single-cell hotspots, each adding 20% of the background birth rate.
fn default_hotspots(grid: &GridSpec, birth_total: f64) -> Vec<Hotspot> {
    [[-60.0, -60.0], [60.0, 40.0]]
        .into_iter()
        .map(|center| Hotspot {
            center,
            half_width: grid.position.step / 2.0,
            rate: birth_total / 5.0,
        })
        .collect()
}

fn fixed_variants(prune: PruneMode) -> Vec<VariantSpec> {
    [5.0, 1.0, 0.1663]
        .into_iter()
        .map(|mass| VariantSpec {
            name: format!("fixed-{mass}"),
            intensity: IntensityKind::Fixed { mass },
            prune,
        })
        .collect()
}

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let grid = GridSpec::standard();
    let delete = PruneMode::Delete { threshold: 1e-3 };
    let common = |name: &str, scenario, scoring, variants| ExperimentConfig {
        name: name.to_string(),
        runs: 100,
        seed: 1,
        scoring,
        ospa: OspaParams::default(),
        scenario,
        tracker: TrackerSettings::default(),
        grid: grid.clone(),
        kernel: KernelMethod::Quadrature { nodes: 1000 },
        variants,
    };
    match name {
        "fig1" => {
            let mut variants = vec![VariantSpec {
                name: "dynamic".into(),
                intensity: IntensityKind::DynamicUniform,
                prune: delete,
            }];
            variants.extend(fixed_variants(delete));
            Ok(common(name, base_scenario(), Scoring::Full, variants))
        }
        "fig3" => {
            let mut scenario = base_scenario();
            scenario.duration = 140;
            scenario.sensor = SensorConfig::default_path();
            scenario.hotspots = default_hotspots(&grid, scenario.birth_total);
            let mut variants = vec![VariantSpec {
                name: "dynamic-grid".into(),
                intensity: IntensityKind::DynamicGrid,
                prune: delete,
            }];
            variants.extend(fixed_variants(delete));
            Ok(common(name, scenario, Scoring::Coverage, variants))
        }
        "fig5" => {
            let mut scenario = base_scenario();
            scenario.hotspots = default_hotspots(&grid, scenario.birth_total);
            let variant = |name: &str, prune| VariantSpec {
                name: name.into(),
                intensity: IntensityKind::DynamicGrid,
                prune,
            };
            let variants = vec![
                variant("recycle-0.1", PruneMode::Recycle { threshold: 0.1 }),
                variant("delete-0.1", PruneMode::Delete { threshold: 0.1 }),
                variant("delete-0.001", delete),
            ];
            Ok(common(name, scenario, Scoring::Full, variants))
        }
        _ => Err(Error::UnknownPreset {
            name: name.to_string(),
            available: PRESETS.join(", "),
        }),
    }
}

/// Grid-side models shared by all runs and variants of an experiment.
#[derive(Debug, Clone)]
pub struct GridContext {
    pub spec: Arc<GridSpec>,
    pub kernel: Arc<TransitionKernel>,
    pub birth: Arc<IntensityModel>,
    pub initial: IntensityModel,
}

/// Per-cell birth density spreading `h.rate` uniformly over the hotspot patch.
fn hotspot_birth(spec: &GridSpec, h: &Hotspot) -> Vec<(usize, f64)> {
    let r = &spec.region;
    let (p, v) = (&spec.position, &spec.velocity);
    let mut cells = Vec::new();
    for ipx in 0..p.count {
        let ox = p.overlap(ipx, h.center[0] - h.half_width, h.center[0] + h.half_width);
        if ox <= 0.0 {
            continue;
        }
        for ipy in 0..p.count {
            let oy = p.overlap(ipy, h.center[1] - h.half_width, h.center[1] + h.half_width);
            if oy <= 0.0 {
                continue;
            }
            for ivx in 0..v.count {
                for ivy in 0..v.count {
                    let w = ox * oy * v.overlap(ivx, r.vel_min, r.vel_max) * v.overlap(ivy, r.vel_min, r.vel_max);
                    if w > 0.0 {
                        cells.push((spec.index(ipx, ipy, ivx, ivy), w));
                    }
                }
            }
        }
    }
    let total: f64 = cells.iter().map(|c| c.1).sum();
    let scale = if total > 0.0 {
        h.rate / total / spec.cell_volume()
    } else {
        0.0
    };
    cells.iter_mut().for_each(|c| c.1 *= scale);
    cells
}

impl GridContext {
    /// Balance `kernel` so the uniform steady state is a fixed point, then add
    /// hotspot births on top.
    pub fn new(config: &ExperimentConfig, kernel: TransitionKernel) -> Result<Self> {
        let sc = &config.scenario;
        let spec = Arc::new(config.grid.clone());
        let steady = steady_state_uniform(sc.birth_total, sc.survival, sc.region)?.total_mass();
        let initial = IntensityModel::grid_uniform(spec.clone(), steady / sc.region.volume());
        let target = initial.grid_values().expect("grid").to_vec();
        let (kernel, mut birth) = balance_for_steady_state(kernel, &target);
        for h in &sc.hotspots {
            for (c, d) in hotspot_birth(&spec, h) {
                birth[c] += d;
            }
        }
        Ok(Self {
            spec: spec.clone(),
            kernel: Arc::new(kernel),
            birth: Arc::new(IntensityModel::Grid { spec, values: birth }),
            initial,
        })
    }

    /// Build or load the kernel for `config`, caching in `cache_dir` when given.
    pub fn prepare(config: &ExperimentConfig, cache_dir: Option<&Path>) -> Result<Self> {
        let req = config.kernel_request();
        let kernel = match cache_dir {
            Some(dir) => req.load_or_build(dir)?,
            None => req.build(),
        };
        Self::new(config, kernel)
    }
}

fn variant_setup(
    config: &ExperimentConfig,
    variant: &VariantSpec,
    grid: Option<&GridContext>,
) -> Result<(Models, FilterState, FilterParams)> {
    let sc = &config.scenario;
    let (intensity, initial) = match &variant.intensity {
        IntensityKind::Fixed { mass } => (
            IntensityDynamics::Fixed,
            IntensityModel::uniform_with_mass(*mass, sc.region),
        ),
        IntensityKind::DynamicUniform => (
            IntensityDynamics::Uniform {
                birth: IntensityModel::uniform_with_mass(sc.birth_total, sc.region),
            },
            steady_state_uniform(sc.birth_total, sc.survival, sc.region)?,
        ),
        IntensityKind::DynamicGrid => {
            let g = grid.ok_or_else(|| Error::InvalidArgument("grid variant without a kernel".into()))?;
            (
                IntensityDynamics::Grid {
                    kernel: g.kernel.clone(),
                    birth: g.birth.clone(),
                },
                IntensityModel::Grid {
                    spec: g.spec.clone(),
                    values: g.initial.grid_values().expect("grid").to_vec(),
                },
            )
        }
    };
    let models = Models {
        dynamics: sc.dynamics(),
        measurement: LinearMeasModel::position(sc.measurement_noise),
        detection: sc.detection_field(0),
        intensity,
    };
    Ok((models, FilterState::new(initial), config.filter_params(variant.prune)))
}

/// Per-time series of one run of one variant, for `t = 0..=duration`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub ospa: Vec<f64>,
    /// Predicted (prior) undetected mass.
    pub undetected_mass: Vec<f64>,
    pub track_count: Vec<f64>,
}

/// Optional per-run outputs.
#[derive(Debug, Clone, Default)]
pub struct TraceRequest {
    pub track_log: bool,
    pub heatmap_times: Vec<u32>,
}

/// `(x, y, intensity)` per position cell.
pub type Heatmap = Vec<(f64, f64, f64)>;

#[derive(Debug, Clone, Default)]
pub struct RunArtifacts {
    pub track_log: Option<Vec<u8>>,
    pub heatmaps: Vec<(u32, Heatmap)>,
}

/// Filter one simulated run with one variant.
pub fn run_variant(
    config: &ExperimentConfig,
    variant: &VariantSpec,
    grid: Option<&GridContext>,
    run: u64,
    request: &TraceRequest,
) -> Result<(RunTrace, RunArtifacts)> {
    let sc = &config.scenario;
    let truth = simulate_truth_with(sc, &mut stream_rng(config.seed, streams::truth(run)))?;
    let scans = generate_scans_with(&truth, sc, &mut stream_rng(config.seed, streams::scans(run)));
    let (mut models, mut state, params) = variant_setup(config, variant, grid)?;

    let score = |t: u32, estimates: &[Vec4]| {
        let truth_t = truth.states(t as usize);
        match config.scoring {
            Scoring::Full => ospa(estimates, &truth_t, &config.ospa),
            Scoring::Coverage => {
                let fov = sc.detection_field(t);
                ospa(
                    &coverage_filtered(estimates, &fov),
                    &coverage_filtered(&truth_t, &fov),
                    &config.ospa,
                )
            }
        }
    };

    let mut trace = RunTrace {
        ospa: vec![score(0, &[])],
        undetected_mass: vec![state.intensity.total_mass()],
        track_count: vec![0.0],
    };
    let mut artifacts = RunArtifacts::default();
    let mut log = if request.track_log {
        Some(TrackLogWriter::new(Vec::new())?)
    } else {
        None
    };
    for (k, scan) in scans.scans.iter().enumerate() {
        let t = k as u32 + 1;
        models.detection = sc.detection_field(t);
        let out = step(state, scan, &models, &params)?;
        trace.ospa.push(score(t, &out.estimates));
        trace.undetected_mass.push(out.predicted_mass);
        trace.track_count.push(out.state.tracks.len() as f64);
        if let Some(w) = log.as_mut() {
            w.record(&out, params.prune.recycles())?;
        }
        if request.heatmap_times.contains(&t) && out.state.intensity.is_grid() {
            artifacts.heatmaps.push((t, out.state.intensity.position_marginal()?));
        }
        state = out.state;
    }
    artifacts.track_log = log.map(|w| w.into_inner());
    Ok((trace, artifacts))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantResult {
    pub name: String,
    pub mospa: MospaCurve,
    pub undetected_mass: Vec<f64>,
    pub track_count: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ResultTable {
    pub variants: Vec<VariantResult>,
    /// Outputs of run 0 per variant, when requested.
    pub artifacts: Vec<RunArtifacts>,
}

impl ResultTable {
    pub fn variant(&self, name: &str) -> Option<&VariantResult> {
        self.variants.iter().find(|v| v.name == name)
    }
}

fn mean_over_runs(traces: &[&RunTrace], f: impl Fn(&RunTrace) -> &Vec<f64>) -> Vec<f64> {
    let n = traces.len() as f64;
    let len = f(traces[0]).len();
    (0..len)
        .map(|t| traces.iter().map(|tr| f(tr)[t]).sum::<f64>() / n)
        .collect()
}

/// Run every variant on the same `config.runs` simulated runs.
///
/// Runs execute in parallel; results are gathered in run order, so the
/// output does not depend on scheduling.
pub fn run_experiment(
    config: &ExperimentConfig,
    grid: Option<&GridContext>,
    request: &TraceRequest,
) -> Result<ResultTable> {
    config.validate()?;
    let per_run: Vec<Vec<(RunTrace, RunArtifacts)>> = (0..config.runs as u64)
        .into_par_iter()
        .map(|run| {
            let none = TraceRequest::default();
            let req = if run == 0 { request } else { &none };
            config
                .variants
                .iter()
                .map(|v| run_variant(config, v, grid, run, req))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut variants = Vec::with_capacity(config.variants.len());
    let mut artifacts = Vec::with_capacity(config.variants.len());
    for (k, v) in config.variants.iter().enumerate() {
        let traces: Vec<&RunTrace> = per_run.iter().map(|r| &r[k].0).collect();
        let ospa_runs: Vec<Vec<f64>> = traces.iter().map(|t| t.ospa.clone()).collect();
        variants.push(VariantResult {
            name: v.name.clone(),
            mospa: mospa_curve(&ospa_runs)?,
            undetected_mass: mean_over_runs(&traces, |t| &t.undetected_mass),
            track_count: mean_over_runs(&traces, |t| &t.track_count),
        });
        artifacts.push(per_run[0][k].1.clone());
    }
    Ok(ResultTable { variants, artifacts })
}

pub const RESULT_HEADER: &str = "variant,time,mospa_mean,mospa_stderr,undetected_mass,track_count_mean";

pub fn write_variant_csv<W: Write>(result: &VariantResult, mut out: W) -> Result<()> {
    writeln!(out, "{RESULT_HEADER}")?;
    for t in 0..result.mospa.mean.len() {
        writeln!(
            out,
            "{},{t},{},{},{},{}",
            result.name, result.mospa.mean[t], result.mospa.stderr[t], result.undetected_mass[t], result.track_count[t]
        )?;
    }
    Ok(())
}

pub fn write_heatmap_csv<W: Write>(marginal: &[(f64, f64, f64)], mut out: W) -> Result<()> {
    writeln!(out, "p_x,p_y,intensity")?;
    for (x, y, v) in marginal {
        writeln!(out, "{x},{y},{v}")?;
    }
    Ok(())
}

/// Write the position-marginal intensity of a grid model as CSV.
pub fn export_intensity_heatmap(intensity: &IntensityModel, path: &Path) -> Result<()> {
    let marginal = intensity.position_marginal()?;
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_heatmap_csv(&marginal, &mut w)?;
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub name: String,
    pub version: String,
    pub seed: u64,
    pub runs: usize,
    pub config_hash: String,
    pub kernel_key: Option<String>,
    pub outputs: Vec<String>,
    pub config: ExperimentConfig,
}

/// Write one CSV per variant, any run-0 artifacts, and `manifest.json`.
/// Returns the paths written.
pub fn write_outputs(config: &ExperimentConfig, table: &ResultTable, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut save = |name: String, bytes: &[u8]| -> Result<()> {
        let path = dir.join(&name);
        fs::write(&path, bytes)?;
        written.push(path);
        Ok(())
    };
    for (result, art) in table.variants.iter().zip(&table.artifacts) {
        let mut buf = Vec::new();
        write_variant_csv(result, &mut buf)?;
        save(format!("{}.csv", result.name), &buf)?;
        if let Some(log) = &art.track_log {
            save(format!("{}-tracks.csv", result.name), log)?;
        }
        for (t, marginal) in &art.heatmaps {
            let mut buf = Vec::new();
            write_heatmap_csv(marginal, &mut buf)?;
            save(format!("{}-heatmap-t{t}.csv", result.name), &buf)?;
        }
    }
    let manifest = Manifest {
        name: config.name.clone(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: config.seed,
        runs: config.runs,
        config_hash: config.hash()?,
        kernel_key: config.uses_grid().then(|| config.kernel_request().cache_key()),
        outputs: written
            .iter()
            .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .collect(),
        config: config.clone(),
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    written.push(path);
    Ok(written)
}
