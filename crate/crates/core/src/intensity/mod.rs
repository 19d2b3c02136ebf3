//! Poisson intensity of undetected targets, as a uniform scalar or a 4-D grid.
//!
//! Grid values are densities (targets per unit state hypervolume) averaged over
//! each cell; the mass of a cell is `value * cell_volume`. Measurement
//! likelihoods are averaged over each position cell rather than sampled at its
//! centre, which keeps the coarse grid (spacing 4 against unit measurement
//! noise) free of aliasing.

mod detection;
mod grid;
mod kernel;

use std::sync::Arc;

pub use detection::{ConeFov, DetectionField};
pub use grid::{Axis, GridSpec, Region};
pub(crate) use kernel::reflect;
pub use kernel::{
    balance_for_steady_state, build_kernel_monte_carlo, build_kernel_quadrature, KernelMethod, KernelRequest,
    TransitionKernel, KERNEL_FORMAT_VERSION,
};

use crate::error::{Error, Result};
use crate::linalg::{moment_match, Gaussian, LinearMeasModel, Mat4, Vec2, Vec4};

/// Velocity variance of the Gaussian used to approximate a uniform intensity
/// when initialising a track from a measurement.
pub const UNIFORM_PRIOR_VELOCITY_VAR: f64 = 1.0 / 12.0;

/// Gate half-width in standard deviations of the measurement noise.
pub const MEASUREMENT_GATE_SIGMAS: f64 = 6.0;

/// Truncation radius for deposits, in standard deviations per axis.
pub const DEPOSIT_SIGMAS: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub enum IntensityModel {
    /// Constant density over `region`.
    Uniform {
        density: f64,
        region: Region,
    },
    Grid {
        spec: Arc<GridSpec>,
        values: Vec<f64>,
    },
}

/// How the intensity moves from one step to the next.
#[derive(Debug, Clone, Copy)]
pub enum Propagation<'a> {
    Uniform {
        survival: f64,
    },
    /// Kernel entries already include survival.
    Grid(&'a TransitionKernel),
}

impl IntensityModel {
    pub fn uniform_with_mass(mass: f64, region: Region) -> Self {
        IntensityModel::Uniform {
            density: mass / region.volume(),
            region,
        }
    }

    pub fn zero_grid(spec: Arc<GridSpec>) -> Self {
        let n = spec.n_cells();
        IntensityModel::Grid {
            spec,
            values: vec![0.0; n],
        }
    }

    /// Grid carrying `density` throughout the grid's region (edge cells hold
    /// their inside fraction).
    pub fn grid_uniform(spec: Arc<GridSpec>, density: f64) -> Self {
        let values = (0..spec.n_cells())
            .map(|c| density * spec.overlap_fraction(c))
            .collect();
        IntensityModel::Grid { spec, values }
    }

    pub fn grid_spec(&self) -> Option<&Arc<GridSpec>> {
        match self {
            IntensityModel::Grid { spec, .. } => Some(spec),
            IntensityModel::Uniform { .. } => None,
        }
    }

    pub fn grid_values(&self) -> Option<&[f64]> {
        match self {
            IntensityModel::Grid { values, .. } => Some(values),
            IntensityModel::Uniform { .. } => None,
        }
    }

    pub fn is_grid(&self) -> bool {
        matches!(self, IntensityModel::Grid { .. })
    }

    /// Expected number of undetected targets.
    pub fn total_mass(&self) -> f64 {
        match self {
            IntensityModel::Uniform { density, region } => density * region.volume(),
            IntensityModel::Grid { spec, values } => values.iter().sum::<f64>() * spec.cell_volume(),
        }
    }

    fn check_compatible(&self, other: &IntensityModel) -> Result<()> {
        match (self, other) {
            (IntensityModel::Uniform { .. }, IntensityModel::Uniform { .. }) => Ok(()),
            (IntensityModel::Grid { spec: a, .. }, IntensityModel::Grid { spec: b, .. })
                if Arc::ptr_eq(a, b) || a == b =>
            {
                Ok(())
            }
            _ => Err(Error::GridMismatch),
        }
    }

    /// `λ' = birth + Σ kernel · λ` (uniform: `λ' = birth + P^s λ`).
    pub fn predict(&self, propagation: Propagation<'_>, birth: &IntensityModel) -> Result<Self> {
        self.check_compatible(birth)?;
        match (self, propagation, birth) {
            (
                IntensityModel::Uniform { density, region },
                Propagation::Uniform { survival },
                IntensityModel::Uniform { density: b, .. },
            ) => Ok(IntensityModel::Uniform {
                density: b + survival * density,
                region: *region,
            }),
            (
                IntensityModel::Grid { spec, values },
                Propagation::Grid(kernel),
                IntensityModel::Grid { values: b, .. },
            ) => {
                if kernel.n_cells() != values.len() {
                    return Err(Error::GridMismatch);
                }
                let mut out = b.clone();
                kernel.accumulate(values, &mut out);
                Ok(IntensityModel::Grid {
                    spec: spec.clone(),
                    values: out,
                })
            }
            _ => Err(Error::GridMismatch),
        }
    }

    /// `λ' = (1 - P^d) λ`, with `P^d` evaluated at each cell's position centre.
    ///
    /// A uniform model is a single scalar, so it only accepts a constant field.
    pub fn miss_update(&self, pd: &DetectionField) -> Result<Self> {
        match self {
            IntensityModel::Uniform { density, region } => {
                let DetectionField::Constant(p) = pd else {
                    return Err(Error::InvalidArgument(
                        "uniform intensity needs a constant detection probability".into(),
                    ));
                };
                Ok(IntensityModel::Uniform {
                    density: (1.0 - p) * density,
                    region: *region,
                })
            }
            IntensityModel::Grid { spec, values } => {
                let mut out = values.clone();
                let nv = spec.n_velocity_cells();
                for ipx in 0..spec.position.count {
                    for ipy in 0..spec.position.count {
                        let pos = Vec2::new(spec.position.center(ipx), spec.position.center(ipy));
                        let keep = 1.0 - pd.eval(&pos);
                        let base = spec.position_block(ipx, ipy);
                        out[base..base + nv].iter_mut().for_each(|v| *v *= keep);
                    }
                }
                Ok(IntensityModel::Grid {
                    spec: spec.clone(),
                    values: out,
                })
            }
        }
    }

    /// Intensity of measurements at `z` originating from undetected targets,
    /// `∫ f(z|x) P^d(x) λ(x) dx`.
    pub fn measurement_intensity(&self, pd: &DetectionField, meas: &LinearMeasModel, z: &Vec2) -> f64 {
        match self {
            IntensityModel::Uniform { density, region } => pd.eval(z) * density * region.vel_area(),
            IntensityModel::Grid { spec, values } => gated_cells(spec, pd, meas, z)
                .map(|gc| {
                    let block = &values[gc.block..gc.block + spec.n_velocity_cells()];
                    gc.weight * block.iter().sum::<f64>() * spec.cell_volume()
                })
                .sum(),
        }
    }

    /// Per-cell contributions to [`measurement_intensity`](Self::measurement_intensity),
    /// as `(cell, mass)` with mass in units of targets per unit measurement area.
    pub fn measurement_cell_weights(
        &self,
        pd: &DetectionField,
        meas: &LinearMeasModel,
        z: &Vec2,
    ) -> Result<Vec<(usize, f64)>> {
        let IntensityModel::Grid { spec, values } = self else {
            return Err(Error::NotGrid("measurement_cell_weights"));
        };
        let nv = spec.n_velocity_cells();
        let vol = spec.cell_volume();
        let mut out = Vec::new();
        for gc in gated_cells(spec, pd, meas, z) {
            for (k, &v) in values[gc.block..gc.block + nv].iter().enumerate() {
                let w = gc.weight * v * vol;
                if w > 0.0 {
                    out.push((gc.block + k, w));
                }
            }
        }
        Ok(out)
    }

    /// Kinematic density of a target first detected at `z`:
    /// `f(z|x) P^d(x) λ(x)` normalised and collapsed to a Gaussian.
    pub fn birth_density_from_measurement(
        &self,
        pd: &DetectionField,
        meas: &LinearMeasModel,
        z: &Vec2,
    ) -> Result<Gaussian> {
        match self {
            IntensityModel::Uniform { region, density } => {
                if !(pd.eval(z) * density > 0.0) {
                    return Err(Error::ZeroIntensity);
                }
                let prior = uniform_prior(region);
                Ok(crate::linalg::kf_update(&prior, meas, z)?.0)
            }
            IntensityModel::Grid { spec, values } => {
                let nv = spec.n_velocity_cells();
                let vel_var = spec.velocity.step.powi(2) / 12.0;
                let mut components = Vec::new();
                for gc in gated_cells(spec, pd, meas, z) {
                    for (k, &v) in values[gc.block..gc.block + nv].iter().enumerate() {
                        let w = gc.weight * v;
                        if w <= 0.0 {
                            continue;
                        }
                        let c = spec.center(gc.block + k);
                        let mean = Vec4::new(gc.mean[0], c[1], gc.mean[1], c[3]);
                        let cov = Mat4::from_diagonal(&Vec4::new(gc.var[0], vel_var, gc.var[1], vel_var));
                        components.push((w, Gaussian::new(mean, cov)));
                    }
                }
                if components.is_empty() {
                    return Err(Error::ZeroIntensity);
                }
                moment_match(&components)
            }
        }
    }

    /// Add `mass` distributed as `g` (evaluated at cell centres within
    /// [`DEPOSIT_SIGMAS`] per axis, renormalised to exactly `mass`).
    pub fn deposit(&mut self, mass: f64, g: &Gaussian) -> Result<()> {
        let IntensityModel::Grid { spec, values } = self else {
            return Err(Error::NotGrid("deposit"));
        };
        if !(mass >= 0.0) {
            return Err(Error::InvalidArgument(format!("deposit mass {mass}")));
        }
        if mass == 0.0 {
            return Ok(());
        }
        let weights = gaussian_cell_weights(spec, g);
        let vol = spec.cell_volume();
        if weights.is_empty() {
            values[spec.nearest_cell(&g.mean)] += mass / vol;
            return Ok(());
        }
        let total: f64 = weights.iter().map(|(_, w)| w).sum();
        for (c, w) in weights {
            values[c] += mass * (w / total) / vol;
        }
        Ok(())
    }

    /// Add `mass` spread over explicit cells with weights summing to one.
    pub fn deposit_cells(&mut self, mass: f64, cells: &[(usize, f64)]) -> Result<()> {
        let IntensityModel::Grid { spec, values } = self else {
            return Err(Error::NotGrid("deposit_cells"));
        };
        let vol = spec.cell_volume();
        for &(c, w) in cells {
            values[c] += mass * w / vol;
        }
        Ok(())
    }

    /// Position-marginal intensity (targets per unit area) for each position cell,
    /// as `(p_x, p_y, intensity)`.
    pub fn position_marginal(&self) -> Result<Vec<(f64, f64, f64)>> {
        let IntensityModel::Grid { spec, values } = self else {
            return Err(Error::NotGrid("position_marginal"));
        };
        let nv = spec.n_velocity_cells();
        let vel_cell_area = spec.velocity.step.powi(2);
        let mut out = Vec::with_capacity(spec.position.count.pow(2));
        for ipx in 0..spec.position.count {
            for ipy in 0..spec.position.count {
                let b = spec.position_block(ipx, ipy);
                let s: f64 = values[b..b + nv].iter().sum();
                out.push((spec.position.center(ipx), spec.position.center(ipy), s * vel_cell_area));
            }
        }
        Ok(out)
    }
}

/// Moment-matched Gaussian of the uniform density on `region`, with the fixed
/// velocity variance [`UNIFORM_PRIOR_VELOCITY_VAR`].
pub fn uniform_prior(region: &Region) -> Gaussian {
    let pos_var = region.pos_span().powi(2) / 12.0;
    Gaussian::new(
        region.center(),
        Mat4::from_diagonal(&Vec4::new(
            pos_var,
            UNIFORM_PRIOR_VELOCITY_VAR,
            pos_var,
            UNIFORM_PRIOR_VELOCITY_VAR,
        )),
    )
}

/// `λ^b / (1 - P^s)` spread uniformly over `region`.
pub fn steady_state_uniform(birth_total: f64, survival: f64, region: Region) -> Result<IntensityModel> {
    if !(0.0..1.0).contains(&survival) {
        return Err(Error::InvalidProbability(survival));
    }
    if !(birth_total >= 0.0) {
        return Err(Error::InvalidArgument(format!("birth_total {birth_total}")));
    }
    Ok(IntensityModel::uniform_with_mass(
        birth_total / (1.0 - survival),
        region,
    ))
}

/// A position cell inside the measurement gate, with its cell-averaged
/// likelihood times detection probability and the truncated-normal moments of
/// the position posterior within the cell.
struct GatedCell {
    block: usize,
    weight: f64,
    mean: [f64; 2],
    var: [f64; 2],
}

fn gated_cells<'a>(
    spec: &'a GridSpec,
    pd: &'a DetectionField,
    meas: &LinearMeasModel,
    z: &'a Vec2,
) -> impl Iterator<Item = GatedCell> + 'a {
    let radius = MEASUREMENT_GATE_SIGMAS * meas.max_noise_eigenvalue().sqrt() + spec.half_position_diagonal();
    let sx = meas.r[(0, 0)].sqrt();
    let sy = meas.r[(1, 1)].sqrt();
    let diagonal = meas.r[(0, 1)] == 0.0 && meas.r[(1, 0)] == 0.0;
    let r = meas.r;
    let xs = spec.position.centers_within(z[0] - radius, z[0] + radius);
    let ys = spec.position.centers_within(z[1] - radius, z[1] + radius);
    xs.flat_map(move |ipx| ys.clone().map(move |ipy| (ipx, ipy)))
        .filter_map(move |(ipx, ipy)| {
            let center = Vec2::new(spec.position.center(ipx), spec.position.center(ipy));
            if (center - z).norm() > radius {
                return None;
            }
            let p = pd.eval(&center);
            if p <= 0.0 {
                return None;
            }
            let (weight, mean, var) = if diagonal {
                let ax = cell_axis(z[0], sx, spec.position.lower(ipx), spec.position.upper(ipx));
                let ay = cell_axis(z[1], sy, spec.position.lower(ipy), spec.position.upper(ipy));
                let area = spec.cell_area();
                (ax.mass * ay.mass / area, [ax.mean, ay.mean], [ax.var, ay.var])
            } else {
                let l = crate::linalg::normal_pdf2(z, &r, &center).unwrap_or(0.0);
                let h = spec.position.step.powi(2) / 12.0;
                (l, [center[0], center[1]], [h, h])
            };
            (weight > 0.0).then(|| GatedCell {
                block: spec.position_block(ipx, ipy),
                weight: weight * p,
                mean,
                var,
            })
        })
}

struct AxisMoments {
    mass: f64,
    mean: f64,
    var: f64,
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Upper tail `P(N(0,1) > x)`.
fn std_normal_sf(x: f64) -> f64 {
    0.5 * libm::erfc(x / std::f64::consts::SQRT_2)
}

/// Mass and truncated-normal moments of `N(mu, sigma^2)` on `[lo, hi]`.
fn cell_axis(mu: f64, sigma: f64, lo: f64, hi: f64) -> AxisMoments {
    let a = (lo - mu) / sigma;
    let b = (hi - mu) / sigma;
    // difference of tails on whichever side avoids cancellation
    let mass = if a >= 0.0 {
        std_normal_sf(a) - std_normal_sf(b)
    } else if b <= 0.0 {
        std_normal_sf(-b) - std_normal_sf(-a)
    } else {
        1.0 - std_normal_sf(b) - std_normal_sf(-a)
    };
    if !(mass > 1e-300) {
        let mid = 0.5 * (lo + hi);
        return AxisMoments {
            mass: 0.0,
            mean: mid,
            var: (hi - lo).powi(2) / 12.0,
        };
    }
    let (pa, pb) = (std_normal_pdf(a), std_normal_pdf(b));
    let shift = (pa - pb) / mass;
    let mean = (mu + sigma * shift).clamp(lo, hi);
    let var = sigma * sigma * (1.0 + (a * pa - b * pb) / mass - shift * shift);
    AxisMoments {
        mass,
        mean,
        var: var.clamp(0.0, (hi - lo).powi(2) / 4.0),
    }
}

/// Unnormalised weights of `g` at cell centres within the truncation box.
fn gaussian_cell_weights(spec: &GridSpec, g: &Gaussian) -> Vec<(usize, f64)> {
    let Some(chol) = g.cov.cholesky() else {
        return Vec::new();
    };
    let sd: Vec<f64> = (0..4).map(|k| g.cov[(k, k)].max(0.0).sqrt()).collect();
    let range = |axis: &Axis, k: usize| {
        axis.centers_within(g.mean[k] - DEPOSIT_SIGMAS * sd[k], g.mean[k] + DEPOSIT_SIGMAS * sd[k])
    };
    let xs = range(&spec.position, 0);
    let vxs = range(&spec.velocity, 1);
    let ys = range(&spec.position, 2);
    let vys = range(&spec.velocity, 3);
    let mut out = Vec::new();
    for ipx in xs {
        for ipy in ys.clone() {
            for ivx in vxs.clone() {
                for ivy in vys.clone() {
                    let c = spec.index(ipx, ipy, ivx, ivy);
                    let d = spec.center(c) - g.mean;
                    let maha = d.dot(&chol.solve(&d));
                    let w = (-0.5 * maha).exp();
                    if w > 0.0 {
                        out.push((c, w));
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn standard_grid() -> Arc<GridSpec> {
        Arc::new(GridSpec::standard())
    }

    #[test]
    fn steady_state_examples() {
        let m = steady_state_uniform(0.05, 0.999, Region::STANDARD).unwrap();
        assert_relative_eq!(m.total_mass(), 50.0, max_relative = 1e-12);
        let m = steady_state_uniform(0.0, 0.999, Region::STANDARD).unwrap();
        assert_eq!(m.total_mass(), 0.0);
        assert!(steady_state_uniform(0.05, 1.0, Region::STANDARD).is_err());
        // detected steady state in closed form
        let detected: f64 = 0.05 / (1.0 - 0.999 * 0.7);
        assert!((detected - 0.1663).abs() < 5e-5);
    }

    #[test]
    fn uniform_predict_examples() {
        let region = Region::STANDARD;
        let ss = steady_state_uniform(0.05, 0.999, region).unwrap();
        let birth = IntensityModel::uniform_with_mass(0.05, region);
        let out = ss.predict(Propagation::Uniform { survival: 0.999 }, &birth).unwrap();
        assert_relative_eq!(out.total_mass(), 50.0, max_relative = 1e-12);

        let zero = IntensityModel::uniform_with_mass(0.0, region);
        let out = zero.predict(Propagation::Uniform { survival: 0.999 }, &birth).unwrap();
        assert_relative_eq!(out.total_mass(), 0.05, max_relative = 1e-12);

        let grid_birth = IntensityModel::zero_grid(standard_grid());
        assert!(matches!(
            ss.predict(Propagation::Uniform { survival: 0.9 }, &grid_birth),
            Err(Error::GridMismatch)
        ));
    }

    #[test]
    fn uniform_miss_update_examples() {
        let m = IntensityModel::uniform_with_mass(50.0, Region::STANDARD);
        assert_eq!(
            m.miss_update(&DetectionField::Constant(0.0)).unwrap().total_mass(),
            50.0
        );
        assert_eq!(m.miss_update(&DetectionField::Constant(1.0)).unwrap().total_mass(), 0.0);
        assert_relative_eq!(
            m.miss_update(&DetectionField::Constant(0.3)).unwrap().total_mass(),
            35.0
        );
    }

    #[test]
    fn uniform_closed_loop_converges_to_detected_steady_state() {
        let region = Region::STANDARD;
        let birth = IntensityModel::uniform_with_mass(0.05, region);
        let mut m = steady_state_uniform(0.05, 0.999, region).unwrap();
        for _ in 0..200 {
            m = m
                .predict(Propagation::Uniform { survival: 0.999 }, &birth)
                .unwrap()
                .miss_update(&DetectionField::Constant(0.3))
                .unwrap();
        }
        // fixed point of the predicted mass: b / (1 - P^s (1 - P^d))
        let predicted = m.predict(Propagation::Uniform { survival: 0.999 }, &birth).unwrap();
        assert!((predicted.total_mass() - 0.16628).abs() < 1e-5);
    }

    #[test]
    fn uniform_measurement_intensity() {
        let meas = LinearMeasModel::position(1.0);
        let pd = DetectionField::Constant(0.3);
        let z = Vec2::new(10.0, -40.0);
        let m = IntensityModel::uniform_with_mass(50.0, Region::STANDARD);
        assert_relative_eq!(m.measurement_intensity(&pd, &meas, &z), 3.75e-4, max_relative = 1e-12);
        let m = IntensityModel::uniform_with_mass(0.1663, Region::STANDARD);
        assert_relative_eq!(m.measurement_intensity(&pd, &meas, &z), 1.247e-6, max_relative = 1e-3);
        let m = IntensityModel::uniform_with_mass(0.0, Region::STANDARD);
        assert_eq!(m.measurement_intensity(&pd, &meas, &z), 0.0);
    }

    #[test]
    fn uniform_birth_density() {
        let meas = LinearMeasModel::position(1.0);
        let pd = DetectionField::Constant(0.3);
        let z = Vec2::new(10.0, -40.0);
        let m = IntensityModel::uniform_with_mass(50.0, Region::STANDARD);
        let g = m.birth_density_from_measurement(&pd, &meas, &z).unwrap();
        // shrinks towards the region centre by var / (var + 1)
        let shrink = (100.0f64.powi(2) / 3.0) / (100.0f64.powi(2) / 3.0 + 1.0);
        assert!((g.position() - z * shrink).norm() < 1e-9);
        assert_eq!(g.mean[1], 0.0);
        assert_eq!(g.mean[3], 0.0);
        assert_relative_eq!(g.cov[(1, 1)], 1.0 / 12.0, max_relative = 1e-12);

        let p = uniform_prior(&Region::STANDARD);
        assert_relative_eq!(p.cov[(0, 0)], 100.0f64.powi(2) / 3.0, max_relative = 1e-12);
        assert_relative_eq!(p.cov[(3, 3)], 1.0 / 12.0);

        let zero = IntensityModel::uniform_with_mass(0.0, Region::STANDARD);
        assert!(matches!(
            zero.birth_density_from_measurement(&pd, &meas, &z),
            Err(Error::ZeroIntensity)
        ));
    }

    #[test]
    fn grid_uniform_fill_mass() {
        let density = 50.0 / Region::STANDARD.volume();
        let m = IntensityModel::grid_uniform(standard_grid(), density);
        assert!((m.total_mass() - 50.0).abs() <= 0.02 * 50.0);
        assert_eq!(IntensityModel::zero_grid(standard_grid()).total_mass(), 0.0);
    }

    #[test]
    fn grid_measurement_intensity_matches_uniform_in_interior() {
        let meas = LinearMeasModel::position(1.0);
        let pd = DetectionField::Constant(0.3);
        let density = 50.0 / Region::STANDARD.volume();
        let grid = IntensityModel::grid_uniform(standard_grid(), density);
        let uniform = IntensityModel::uniform_with_mass(50.0, Region::STANDARD);
        for z in [Vec2::new(0.0, 0.0), Vec2::new(1.3, -7.9), Vec2::new(31.0, 2.0)] {
            let g = grid.measurement_intensity(&pd, &meas, &z);
            let u = uniform.measurement_intensity(&pd, &meas, &z);
            assert_relative_eq!(g, u, max_relative = 1e-7);
        }
        let zero = IntensityModel::zero_grid(standard_grid());
        assert_eq!(zero.measurement_intensity(&pd, &meas, &Vec2::zeros()), 0.0);
    }

    #[test]
    fn grid_birth_density_centres_on_measurement() {
        let meas = LinearMeasModel::position(1.0);
        let pd = DetectionField::Constant(0.3);
        let density = 50.0 / Region::STANDARD.volume();
        let grid = IntensityModel::grid_uniform(standard_grid(), density);
        let z = Vec2::new(1.3, -7.9);
        let g = grid.birth_density_from_measurement(&pd, &meas, &z).unwrap();
        assert!((g.position() - z).norm() < 1e-6);
        assert!((g.cov[(0, 0)] - 1.0).abs() < 1e-6);
        assert!(g.mean[1].abs() < 1e-12);
        // centres at -1.0..=1.0, end cells half inside the region, plus in-cell spread
        let centres = 2.0 * (0.5 * 1.0 + 0.36 + 0.04) / 5.0;
        assert_relative_eq!(g.cov[(1, 1)], centres + 0.4f64.powi(2) / 12.0, max_relative = 1e-9);
    }

    #[test]
    fn deposit_adds_exact_mass() {
        let mut m = IntensityModel::zero_grid(standard_grid());
        let g = Gaussian::new(Vec4::new(3.0, 0.1, -7.0, -0.3), Mat4::identity());
        m.deposit(0.0, &g).unwrap();
        assert_eq!(m.total_mass(), 0.0);
        m.deposit(0.05, &g).unwrap();
        assert!((m.total_mass() - 0.05).abs() < 1e-12);
        let spec = m.grid_spec().unwrap().clone();
        let values = m.grid_values().unwrap();
        let near: f64 = (0..spec.n_cells())
            .filter(|&c| (spec.center(c) - g.mean).norm() <= 4.0 * 2.0)
            .map(|c| values[c] * spec.cell_volume())
            .sum();
        assert!(near >= 0.99 * 0.05);

        let mut u = IntensityModel::uniform_with_mass(1.0, Region::STANDARD);
        assert!(u.deposit(0.1, &g).is_err());
    }

    #[test]
    fn narrow_deposit_falls_back_to_nearest_cell() {
        let mut m = IntensityModel::zero_grid(standard_grid());
        let g = Gaussian::new(Vec4::new(1.9, 0.4, 0.0, 0.0), Mat4::identity() * 1e-6);
        m.deposit(0.2, &g).unwrap();
        assert!((m.total_mass() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn truncated_normal_moments() {
        let a = cell_axis(0.0, 1.0, -50.0, 50.0);
        assert!((a.mass - 1.0).abs() < 1e-15);
        assert!(a.mean.abs() < 1e-12);
        assert!((a.var - 1.0).abs() < 1e-12);
        let b = cell_axis(0.0, 1.0, 0.0, 50.0);
        assert!((b.mass - 0.5).abs() < 1e-15);
        assert!((b.mean - (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-12);
        let far = cell_axis(0.0, 1.0, 8.0, 12.0);
        assert!(far.mass > 0.0 && far.mass < 1e-14);
        assert!((8.0..=12.0).contains(&far.mean));
    }

    #[test]
    fn position_marginal_of_uniform_grid_is_flat_inside() {
        let density = 50.0 / Region::STANDARD.volume();
        let m = IntensityModel::grid_uniform(standard_grid(), density);
        let rows = m.position_marginal().unwrap();
        let inner: Vec<f64> = rows
            .iter()
            .filter(|(x, y, _)| x.abs() < 100.0 && y.abs() < 100.0)
            .map(|r| r.2)
            .collect();
        let expected = 50.0 / Region::STANDARD.pos_area();
        assert!(inner.iter().all(|v| (v - expected).abs() < 1e-15));
    }
}
