//! Marginal track filter: Bernoulli tracks alongside a Poisson intensity of
//! undetected targets, with recycling of weak tracks back into the intensity.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::association::{lbp_marginals, AssociationMarginals, AssociationProblem, LbpConfig};
use crate::divergence::bernoulli_poisson_kl;
use crate::error::{Error, Result};
use crate::intensity::{DetectionField, IntensityModel, Propagation, Region, TransitionKernel};
use crate::linalg::{kf_predict, kf_update, moment_match, CvDynamics, Gaussian, LinearMeasModel, Vec2, Vec4};

#[derive(Debug, Clone, PartialEq)]
pub struct BernoulliTrack {
    pub id: u64,
    /// Probability of existence.
    pub existence: f64,
    pub kin: Gaussian,
    pub birth_time: u32,
    /// Exact grid-cell weights of a track born this step (sums to one). Lets a
    /// newborn track be returned to the grid without a Gaussian approximation.
    pub birth_cells: Option<Arc<Vec<(usize, f64)>>>,
}

impl BernoulliTrack {
    pub fn cov_trace(&self) -> f64 {
        self.kin.cov.trace()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub tracks: Vec<BernoulliTrack>,
    pub intensity: IntensityModel,
    pub time: u32,
    pub next_id: u64,
}

impl FilterState {
    pub fn new(intensity: IntensityModel) -> Self {
        Self {
            tracks: Vec::new(),
            intensity,
            time: 0,
            next_id: 0,
        }
    }
}

/// What happens to tracks whose existence falls below a threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum PruneMode {
    Delete {
        threshold: f64,
    },
    /// Move the track's mass and shape onto the undetected intensity.
    Recycle {
        threshold: f64,
    },
    /// Recycle the weakest tracks while the summed divergence stays within `budget`.
    RecycleBudget {
        budget: f64,
    },
}

impl PruneMode {
    pub fn recycles(&self) -> bool {
        !matches!(self, PruneMode::Delete { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterParams {
    /// False-alarm intensity per unit measurement area.
    pub clutter_density: f64,
    pub survival: f64,
    pub prune: PruneMode,
    /// Squared-Mahalanobis gate on the innovation.
    pub gate: f64,
    pub confirm_existence: f64,
    pub max_cov_trace: f64,
    /// Tracks whose predicted position leaves this region are dropped.
    pub region: Region,
    pub lbp: LbpConfig,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self {
            clutter_density: 10.0 / Region::STANDARD.pos_area(),
            survival: 0.999,
            prune: PruneMode::Delete { threshold: 1e-3 },
            gate: 25.0,
            confirm_existence: 0.8,
            max_cov_trace: 10.0,
            region: Region::STANDARD,
            lbp: LbpConfig::default(),
        }
    }
}

/// Evolution of the undetected-target intensity between scans.
#[derive(Debug, Clone)]
pub enum IntensityDynamics {
    /// Intensity held constant; neither predicted nor updated.
    Fixed,
    Uniform {
        birth: IntensityModel,
    },
    Grid {
        kernel: Arc<TransitionKernel>,
        birth: Arc<IntensityModel>,
    },
}

#[derive(Debug, Clone)]
pub struct Models {
    pub dynamics: CvDynamics,
    pub measurement: LinearMeasModel,
    pub detection: DetectionField,
    pub intensity: IntensityDynamics,
}

/// New-target quantities for one measurement.
#[derive(Debug, Clone)]
pub struct BirthTerm {
    /// Intensity of measurements from undetected targets at this measurement.
    pub mu: f64,
    pub density: Option<Gaussian>,
    pub cells: Option<Arc<Vec<(usize, f64)>>>,
}

/// Predict the undetected intensity one step.
pub fn predict_intensity(
    intensity: &IntensityModel,
    dynamics: &IntensityDynamics,
    survival: f64,
) -> Result<IntensityModel> {
    match dynamics {
        IntensityDynamics::Fixed => Ok(intensity.clone()),
        IntensityDynamics::Uniform { birth } => intensity.predict(Propagation::Uniform { survival }, birth),
        IntensityDynamics::Grid { kernel, birth } => intensity.predict(Propagation::Grid(kernel), birth),
    }
}

pub fn predict_tracks(
    tracks: Vec<BernoulliTrack>,
    dynamics: &CvDynamics,
    survival: f64,
    region: &Region,
) -> Vec<BernoulliTrack> {
    tracks
        .into_iter()
        .filter_map(|t| {
            let kin = kf_predict(&t.kin, dynamics);
            let inside = region.contains_position(&kin.position());
            inside.then_some(BernoulliTrack {
                existence: survival * t.existence,
                kin,
                birth_cells: None,
                ..t
            })
        })
        .collect()
}

pub fn build_association_problem(
    tracks: &[BernoulliTrack],
    intensity: &IntensityModel,
    scan: &[Vec2],
    models: &Models,
    params: &FilterParams,
) -> Result<(AssociationProblem, Vec<BirthTerm>)> {
    let meas = &models.measurement;
    let pd = &models.detection;
    let mut w_miss = Vec::with_capacity(tracks.len());
    let mut w = Vec::with_capacity(tracks.len());
    for t in tracks {
        let p = pd.eval(&t.kin.position());
        w_miss.push(1.0 - t.existence * p);
        let (zhat, s) = meas.project(&t.kin);
        let s_inv = s.try_inverse().ok_or(Error::Singular("innovation covariance"))?;
        let norm = 1.0 / (2.0 * std::f64::consts::PI * s.determinant().sqrt());
        let row = scan
            .iter()
            .map(|z| {
                let nu = z - zhat;
                let d2 = nu.dot(&(s_inv * nu));
                if d2 <= params.gate && t.existence > 0.0 && p > 0.0 {
                    t.existence * p * norm * (-0.5 * d2).exp()
                } else {
                    0.0
                }
            })
            .collect();
        w.push(row);
    }

    let mut kappa = Vec::with_capacity(scan.len());
    let mut births = Vec::with_capacity(scan.len());
    for z in scan {
        let term = birth_term(intensity, pd, meas, z)?;
        kappa.push(params.clutter_density + term.mu);
        births.push(term);
    }
    Ok((AssociationProblem::new(w_miss, w, kappa)?, births))
}

fn birth_term(intensity: &IntensityModel, pd: &DetectionField, meas: &LinearMeasModel, z: &Vec2) -> Result<BirthTerm> {
    let empty = BirthTerm {
        mu: 0.0,
        density: None,
        cells: None,
    };
    match intensity {
        IntensityModel::Uniform { .. } => {
            let mu = intensity.measurement_intensity(pd, meas, z);
            if mu <= 0.0 {
                return Ok(empty);
            }
            Ok(BirthTerm {
                mu,
                density: Some(intensity.birth_density_from_measurement(pd, meas, z)?),
                cells: None,
            })
        }
        IntensityModel::Grid { .. } => {
            let mut cells = intensity.measurement_cell_weights(pd, meas, z)?;
            let mu: f64 = cells.iter().map(|(_, w)| w).sum();
            if mu <= 0.0 {
                return Ok(empty);
            }
            let density = intensity.birth_density_from_measurement(pd, meas, z)?;
            cells.iter_mut().for_each(|(_, w)| *w /= mu);
            Ok(BirthTerm {
                mu,
                density: Some(density),
                cells: Some(Arc::new(cells)),
            })
        }
    }
}

/// Existence after a missed detection: `q (1 - P^d) / (1 - q P^d)`.
pub fn miss_existence(q: f64, pd: f64) -> f64 {
    let denom = 1.0 - q * pd;
    if denom <= 0.0 {
        0.0
    } else {
        q * (1.0 - pd) / denom
    }
}

pub fn update_tracks(
    tracks: Vec<BernoulliTrack>,
    marginals: &AssociationMarginals,
    scan: &[Vec2],
    models: &Models,
) -> Result<Vec<BernoulliTrack>> {
    tracks
        .into_iter()
        .enumerate()
        .map(|(i, t)| {
            let pd = models.detection.eval(&t.kin.position());
            let q_miss = miss_existence(t.existence, pd);
            let miss_weight = marginals.p_miss[i] * q_miss;
            let mut components = vec![(miss_weight, t.kin)];
            let mut existence = miss_weight;
            for (j, z) in scan.iter().enumerate() {
                let pij = marginals.p[i][j];
                if pij > 0.0 {
                    let (post, _) = kf_update(&t.kin, &models.measurement, z)?;
                    components.push((pij, post));
                    existence += pij;
                }
            }
            let existence = existence.clamp(0.0, 1.0);
            let kin = if existence > 0.0 {
                moment_match(&components)?
            } else {
                t.kin
            };
            Ok(BernoulliTrack {
                existence,
                kin,
                birth_cells: None,
                ..t
            })
        })
        .collect()
}

/// One candidate track per measurement, with existence
/// `p_new * mu / (clutter + mu)`.
pub fn spawn_new_tracks(
    births: &[BirthTerm],
    marginals: &AssociationMarginals,
    params: &FilterParams,
    time: u32,
    next_id: &mut u64,
) -> Vec<BernoulliTrack> {
    let mut out = Vec::new();
    for (j, b) in births.iter().enumerate() {
        let Some(density) = b.density else { continue };
        let q = marginals.p_new[j] * b.mu / (params.clutter_density + b.mu);
        if !(q > 0.0) {
            continue;
        }
        out.push(BernoulliTrack {
            id: *next_id,
            existence: q.min(1.0),
            kin: density,
            birth_time: time,
            birth_cells: b.cells.clone(),
        });
        *next_id += 1;
    }
    out
}

/// Return a track's existence mass to the intensity with its own shape.
fn recycle_into(intensity: &mut IntensityModel, track: &BernoulliTrack) -> Result<()> {
    match &track.birth_cells {
        Some(cells) => intensity.deposit_cells(track.existence, cells),
        None => intensity.deposit(track.existence, &track.kin),
    }
}

/// Remove weak tracks, depositing them on the intensity when recycling.
/// Returns the removed tracks.
pub fn recycle_and_prune(state: &mut FilterState, params: &FilterParams) -> Result<Vec<BernoulliTrack>> {
    if params.prune.recycles() && !state.intensity.is_grid() {
        return Err(Error::NotGrid("recycling"));
    }
    let tracks = std::mem::take(&mut state.tracks);
    let (keep, removed): (Vec<_>, Vec<_>) = match params.prune {
        PruneMode::Delete { threshold } | PruneMode::Recycle { threshold } => {
            tracks.into_iter().partition(|t| t.existence >= threshold)
        }
        PruneMode::RecycleBudget { budget } => {
            let mut order: Vec<_> = tracks.into_iter().collect();
            order.sort_by(|a, b| a.existence.total_cmp(&b.existence));
            let mut spent = 0.0;
            let mut cut = 0;
            for t in &order {
                let d = bernoulli_poisson_kl(t.existence)?;
                if spent + d > budget {
                    break;
                }
                spent += d;
                cut += 1;
            }
            let keep = order.split_off(cut);
            let mut keep = keep;
            keep.sort_by_key(|t| t.id);
            (keep, order)
        }
    };
    if params.prune.recycles() {
        for t in &removed {
            recycle_into(&mut state.intensity, t)?;
        }
    }
    state.tracks = keep;
    Ok(removed)
}

/// Means of tracks that are confident and well localised.
pub fn extract_estimates(tracks: &[BernoulliTrack], params: &FilterParams) -> Vec<Vec4> {
    tracks
        .iter()
        .filter(|t| t.existence >= params.confirm_existence && t.cov_trace() < params.max_cov_trace)
        .map(|t| t.kin.mean)
        .collect()
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub state: FilterState,
    /// Estimates taken after the update, before pruning.
    pub estimates: Vec<Vec4>,
    pub removed: Vec<BernoulliTrack>,
    pub lbp_converged: bool,
    /// Undetected mass after prediction, before the missed-detection update.
    pub predicted_mass: f64,
}

/// One full filter cycle for the scan at `state.time + 1`.
pub fn step(state: FilterState, scan: &[Vec2], models: &Models, params: &FilterParams) -> Result<StepOutput> {
    let time = state.time + 1;
    let mut next_id = state.next_id;

    let predicted = predict_intensity(&state.intensity, &models.intensity, params.survival)?;
    let predicted_mass = predicted.total_mass();
    let tracks = predict_tracks(state.tracks, &models.dynamics, params.survival, &params.region);

    let (problem, births) = build_association_problem(&tracks, &predicted, scan, models, params)?;
    let marginals = lbp_marginals(&problem, &params.lbp)?;
    if !marginals.converged {
        log::info!(
            "t={time}: association did not converge in {} iterations",
            marginals.iterations
        );
    }

    let mut tracks = update_tracks(tracks, &marginals, scan, models)?;
    tracks.extend(spawn_new_tracks(&births, &marginals, params, time, &mut next_id));
    debug_assert!(tracks.iter().all(|t| (0.0..=1.0).contains(&t.existence)));

    let intensity = match models.intensity {
        IntensityDynamics::Fixed => predicted,
        _ => predicted.miss_update(&models.detection)?,
    };

    let estimates = extract_estimates(&tracks, params);
    let mut state = FilterState {
        tracks,
        intensity,
        time,
        next_id,
    };
    let removed = recycle_and_prune(&mut state, params)?;
    Ok(StepOutput {
        state,
        estimates,
        removed,
        lbp_converged: marginals.converged,
        predicted_mass,
    })
}

/// Writes one CSV row per live or removed track after each step.
pub struct TrackLogWriter<W: Write> {
    out: W,
}

impl<W: Write> TrackLogWriter<W> {
    pub const HEADER: &'static str = "time,track_id,q,p_x,v_x,p_y,v_y,cov_trace,recycled";

    pub fn new(mut out: W) -> std::io::Result<Self> {
        writeln!(out, "{}", Self::HEADER)?;
        Ok(Self { out })
    }

    pub fn record(&mut self, output: &StepOutput, recycled: bool) -> std::io::Result<()> {
        let t = output.state.time;
        let rows = output
            .state
            .tracks
            .iter()
            .map(|tr| (tr, false))
            .chain(output.removed.iter().map(|tr| (tr, recycled)));
        for (tr, flag) in rows {
            let m = tr.kin.mean;
            writeln!(
                self.out,
                "{t},{},{},{},{},{},{},{},{}",
                tr.id,
                tr.existence,
                m[0],
                m[1],
                m[2],
                m[3],
                tr.cov_trace(),
                u8::from(flag)
            )?;
        }
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}
