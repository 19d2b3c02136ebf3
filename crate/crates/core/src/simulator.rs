//! Ground truth and measurement generation for the tracking scenarios.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intensity::{reflect, ConeFov, DetectionField, Region};
use crate::linalg::{position, CvDynamics, Vec2, Vec4};

/// Extra birth rate concentrated on a square patch of the position space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hotspot {
    pub center: [f64; 2],
    pub half_width: f64,
    /// Expected births per step.
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SensorConfig {
    /// Constant detection probability everywhere.
    Omni,
    /// Cone-limited sensor moving at constant speed along a polyline.
    Path {
        start: [f64; 2],
        waypoints: Vec<[f64; 2]>,
        speed: f64,
        half_angle_deg: f64,
    },
}

impl SensorConfig {
    /// Path starting at (-20, -20) heading south, then sweeping the region.
    pub fn default_path() -> Self {
        SensorConfig::Path {
            start: [-20.0, -20.0],
            waypoints: vec![[-20.0, -70.0], [50.0, -70.0], [50.0, 40.0], [-30.0, 40.0]],
            speed: 2.0,
            half_angle_deg: 45.0,
        }
    }

    /// Position and heading at time `t`, if the sensor moves.
    pub fn state(&self, t: u32) -> Option<SensorState> {
        let SensorConfig::Path {
            start,
            waypoints,
            speed,
            ..
        } = self
        else {
            return None;
        };
        let mut from = Vec2::from(*start);
        let mut left = speed * t as f64;
        let mut heading = -std::f64::consts::FRAC_PI_2;
        for wp in waypoints {
            let to = Vec2::from(*wp);
            let seg = to - from;
            let len = seg.norm();
            if len > 0.0 {
                heading = seg[1].atan2(seg[0]);
                if left <= len {
                    return Some(SensorState {
                        position: from + seg * (left / len),
                        heading,
                    });
                }
                left -= len;
            }
            from = to;
        }
        Some(SensorState {
            position: from,
            heading,
        })
    }

    /// Times at which the sensor reaches an interior waypoint and turns.
    pub fn manoeuvre_times(&self, duration: u32) -> Vec<u32> {
        let SensorConfig::Path {
            start,
            waypoints,
            speed,
            ..
        } = self
        else {
            return Vec::new();
        };
        let mut from = Vec2::from(*start);
        let mut dist = 0.0;
        let mut out = Vec::new();
        for wp in waypoints.iter().take(waypoints.len().saturating_sub(1)) {
            let to = Vec2::from(*wp);
            dist += (to - from).norm();
            let t = (dist / speed).round() as u32;
            if t > 0 && t < duration {
                out.push(t);
            }
            from = to;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorState {
    pub position: Vec2,
    pub heading: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub region: Region,
    /// Expected uniform births per step over the whole region.
    pub birth_total: f64,
    #[serde(default)]
    pub hotspots: Vec<Hotspot>,
    /// Targets also enter across the region edge at the rate that keeps the
    /// uniform steady-state density.
    pub boundary_entry: bool,
    pub survival: f64,
    /// Detection probability inside the field of view.
    pub detection: f64,
    /// Expected false alarms per scan, uniform on the position square.
    pub clutter_total: f64,
    /// Diffusion strength of the constant-velocity model.
    pub process_noise: f64,
    /// Per-axis measurement noise variance.
    pub measurement_noise: f64,
    pub duration: u32,
    /// Expected number of targets at time zero, uniform over the region.
    pub initial_mean: f64,
    pub sensor: SensorConfig,
}

impl ScenarioConfig {
    pub fn dynamics(&self) -> CvDynamics {
        CvDynamics::new(1.0, self.process_noise)
    }

    pub fn clutter_density(&self) -> f64 {
        self.clutter_total / self.region.pos_area()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("survival", self.survival), ("detection", self.detection)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is not a probability")));
            }
        }
        let rates = [
            ("birth_total", self.birth_total),
            ("clutter_total", self.clutter_total),
            ("process_noise", self.process_noise),
            ("initial_mean", self.initial_mean),
        ];
        for (name, r) in rates {
            if !(r >= 0.0 && r.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} = {r} must be a finite non-negative rate"
                )));
            }
        }
        if self.hotspots.iter().any(|h| !(h.rate >= 0.0 && h.half_width > 0.0)) {
            return Err(Error::Config("hotspot rate must be >= 0 and half_width > 0".into()));
        }
        if !(self.measurement_noise > 0.0) {
            return Err(Error::Config("measurement_noise must be positive".into()));
        }
        if let SensorConfig::Path { speed, .. } = self.sensor {
            if !(speed > 0.0) {
                return Err(Error::Config("sensor speed must be positive".into()));
            }
        }
        Ok(())
    }

    /// Detection probability field at time `t`.
    pub fn detection_field(&self, t: u32) -> DetectionField {
        match (&self.sensor, self.sensor.state(t)) {
            (SensorConfig::Path { half_angle_deg, .. }, Some(s)) => DetectionField::Cone(ConeFov {
                origin: s.position,
                heading: s.heading,
                half_angle: half_angle_deg.to_radians(),
                pd: self.detection,
            }),
            _ => DetectionField::Constant(self.detection),
        }
    }

    /// Expected entries per step across each edge when the boundary is open.
    pub fn boundary_entry_rate(&self) -> f64 {
        if !self.boundary_entry || self.survival >= 1.0 {
            return 0.0;
        }
        let density = self.birth_total / (1.0 - self.survival) / self.region.volume();
        // ∫ v_n dv_n over [0, vmax] times the tangential span and edge length
        let r = &self.region;
        density * r.pos_span() * r.vel_max.powi(2) / 2.0 * r.vel_span()
    }
}

/// Detection probability of the configured sensor at `pos` and time `t`.
pub fn sensor_fov(config: &ScenarioConfig, t: u32, pos: &Vec2) -> f64 {
    config.detection_field(t).eval(pos)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TruthRecord {
    /// Labelled target states for `t = 0..=duration`.
    pub steps: Vec<Vec<(u64, Vec4)>>,
}

impl TruthRecord {
    pub fn states(&self, t: usize) -> Vec<Vec4> {
        self.steps[t].iter().map(|(_, x)| *x).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScanRecord {
    /// Unlabelled measurements; index `t - 1` holds the scan at time `t`.
    pub scans: Vec<Vec<Vec2>>,
}

fn poisson<R: Rng>(rng: &mut R, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).map(|d| d.sample(rng) as u64).unwrap_or(0)
}

fn uniform_state<R: Rng>(rng: &mut R, r: &Region) -> Vec4 {
    Vec4::new(
        rng.random_range(r.pos_min..r.pos_max),
        rng.random_range(r.vel_min..r.vel_max),
        rng.random_range(r.pos_min..r.pos_max),
        rng.random_range(r.vel_min..r.vel_max),
    )
}

/// A target crossing edge `edge` (0..4) during the last step.
fn boundary_entrant<R: Rng>(rng: &mut R, r: &Region, edge: usize) -> Vec4 {
    let vn = r.vel_max * rng.random::<f64>().sqrt();
    let depth = vn * rng.random::<f64>();
    let along = rng.random_range(r.pos_min..r.pos_max);
    let vt = rng.random_range(r.vel_min..r.vel_max);
    match edge {
        0 => Vec4::new(r.pos_min + depth, vn, along, vt),
        1 => Vec4::new(r.pos_max - depth, -vn, along, vt),
        2 => Vec4::new(along, vt, r.pos_min + depth, vn),
        _ => Vec4::new(along, vt, r.pos_max - depth, -vn),
    }
}

fn move_target<R: Rng>(rng: &mut R, x: &Vec4, dyn_: &CvDynamics, r: &Region) -> Option<Vec4> {
    let f = dyn_.transition();
    let l = dyn_
        .axis_noise()
        .cholesky()
        .map(|c| c.l())
        .unwrap_or_else(crate::linalg::Mat2::zeros);
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    let mut next = f * x;
    for axis in 0..2 {
        let (a, b) = (n.sample(rng), n.sample(rng));
        next[2 * axis] += l[(0, 0)] * a;
        next[2 * axis + 1] += l[(1, 0)] * a + l[(1, 1)] * b;
        next[2 * axis + 1] = reflect(next[2 * axis + 1], r.vel_min, r.vel_max);
    }
    r.contains_position(&position(&next)).then_some(next)
}

pub fn simulate_truth_with<R: Rng>(config: &ScenarioConfig, rng: &mut R) -> Result<TruthRecord> {
    config.validate()?;
    let r = &config.region;
    let dyn_ = config.dynamics();
    let entry = config.boundary_entry_rate();
    let mut next_id = 0u64;
    let mut label = || {
        next_id += 1;
        next_id - 1
    };

    let mut current: Vec<(u64, Vec4)> = (0..poisson(rng, config.initial_mean))
        .map(|_| (label(), uniform_state(rng, r)))
        .collect();
    let mut steps = Vec::with_capacity(config.duration as usize + 1);
    steps.push(current.clone());
    for _ in 0..config.duration {
        let mut next = Vec::with_capacity(current.len() + 4);
        for (id, x) in &current {
            if rng.random::<f64>() < config.survival {
                if let Some(moved) = move_target(rng, x, &dyn_, r) {
                    next.push((*id, moved));
                }
            }
        }
        for _ in 0..poisson(rng, config.birth_total) {
            next.push((label(), uniform_state(rng, r)));
        }
        for h in &config.hotspots {
            for _ in 0..poisson(rng, h.rate) {
                let lo = |c: f64| (c - h.half_width).max(r.pos_min);
                let hi = |c: f64| (c + h.half_width).min(r.pos_max);
                let x = Vec4::new(
                    rng.random_range(lo(h.center[0])..hi(h.center[0])),
                    rng.random_range(r.vel_min..r.vel_max),
                    rng.random_range(lo(h.center[1])..hi(h.center[1])),
                    rng.random_range(r.vel_min..r.vel_max),
                );
                next.push((label(), x));
            }
        }
        for edge in 0..4 {
            for _ in 0..poisson(rng, entry) {
                next.push((label(), boundary_entrant(rng, r, edge)));
            }
        }
        steps.push(next.clone());
        current = next;
    }
    Ok(TruthRecord { steps })
}

/// Ground truth for `t = 0..=duration` from a fixed seed.
pub fn simulate_truth(config: &ScenarioConfig, seed: u64) -> Result<TruthRecord> {
    simulate_truth_with(config, &mut crate::rng::stream_rng(seed, crate::rng::streams::truth(0)))
}

pub fn generate_scan<R: Rng>(truth: &[Vec4], pd: &DetectionField, config: &ScenarioConfig, rng: &mut R) -> Vec<Vec2> {
    let sd = config.measurement_noise.sqrt();
    let noise = Normal::new(0.0, sd).expect("positive noise");
    let r = &config.region;
    let mut scan = Vec::new();
    for x in truth {
        let p = position(x);
        if rng.random::<f64>() < pd.eval(&p) {
            scan.push(Vec2::new(p[0] + noise.sample(rng), p[1] + noise.sample(rng)));
        }
    }
    for _ in 0..poisson(rng, config.clutter_total) {
        scan.push(Vec2::new(
            rng.random_range(r.pos_min..r.pos_max),
            rng.random_range(r.pos_min..r.pos_max),
        ));
    }
    scan.shuffle(rng);
    scan
}

pub fn generate_scans_with<R: Rng>(truth: &TruthRecord, config: &ScenarioConfig, rng: &mut R) -> ScanRecord {
    let scans = (1..truth.steps.len())
        .map(|t| {
            let pd = config.detection_field(t as u32);
            generate_scan(&truth.states(t), &pd, config, rng)
        })
        .collect();
    ScanRecord { scans }
}

/// Scans for `t = 1..=duration` from a fixed seed.
pub fn generate_scans(truth: &TruthRecord, config: &ScenarioConfig, seed: u64) -> ScanRecord {
    generate_scans_with(
        truth,
        config,
        &mut crate::rng::stream_rng(seed, crate::rng::streams::scans(0)),
    )
}

pub fn write_truth_csv<W: Write>(truth: &TruthRecord, mut out: W) -> Result<()> {
    writeln!(out, "time,target_id,p_x,v_x,p_y,v_y")?;
    for (t, step) in truth.steps.iter().enumerate() {
        for (id, x) in step {
            writeln!(out, "{t},{id},{},{},{},{}", x[0], x[1], x[2], x[3])?;
        }
    }
    Ok(())
}

pub fn write_scans_csv<W: Write>(scans: &ScanRecord, mut out: W) -> Result<()> {
    writeln!(out, "time,z_x,z_y")?;
    for (k, scan) in scans.scans.iter().enumerate() {
        for z in scan {
            writeln!(out, "{},{},{}", k + 1, z[0], z[1])?;
        }
    }
    Ok(())
}

fn parse_row(line: &str, lineno: usize, width: usize) -> Result<Vec<f64>> {
    let fields: Vec<f64> = line
        .split(',')
        .map(|f| f.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::InvalidArgument(format!("line {lineno}: {e}")))?;
    if fields.len() != width {
        return Err(Error::InvalidArgument(format!(
            "line {lineno}: expected {width} fields, found {}",
            fields.len()
        )));
    }
    Ok(fields)
}

/// Read a truth fixture; `duration` fixes the number of steps so that empty
/// trailing steps survive the round trip.
pub fn read_truth_csv<R: BufRead>(input: R, duration: u32) -> Result<TruthRecord> {
    let mut steps = vec![Vec::new(); duration as usize + 1];
    for (k, line) in input.lines().enumerate().skip(1) {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let f = parse_row(&line, k + 1, 6)?;
        let t = f[0] as usize;
        let step = steps
            .get_mut(t)
            .ok_or_else(|| Error::InvalidArgument(format!("line {}: time {t} out of range", k + 1)))?;
        step.push((f[1] as u64, Vec4::new(f[2], f[3], f[4], f[5])));
    }
    Ok(TruthRecord { steps })
}

pub fn read_scans_csv<R: BufRead>(input: R, duration: u32) -> Result<ScanRecord> {
    let mut scans = vec![Vec::new(); duration as usize];
    for (k, line) in input.lines().enumerate().skip(1) {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let f = parse_row(&line, k + 1, 3)?;
        let t = f[0] as usize;
        let scan = t
            .checked_sub(1)
            .and_then(|i| scans.get_mut(i))
            .ok_or_else(|| Error::InvalidArgument(format!("line {}: time {t} out of range", k + 1)))?;
        scan.push(Vec2::new(f[1], f[2]));
    }
    Ok(ScanRecord { scans })
}
