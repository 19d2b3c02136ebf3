//! Sparse cell-to-cell transition kernel of the constant-velocity model on the grid.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::grid::{Axis, GridSpec};
use crate::error::{Error, Result};
use crate::linalg::CvDynamics;
use crate::rng::stream_rng;

const MAGIC: &[u8; 8] = b"PMBKRNL\0";
pub const KERNEL_FORMAT_VERSION: u32 = 1;

/// Entries of a quadrature kernel below this probability are dropped.
const QUADRATURE_PRUNE: f64 = 1e-10;

/// Compressed-row map `source cell -> [(destination cell, probability)]`.
///
/// Row sums are at most one; the deficit is mass that died or left the region.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionKernel {
    row_ptr: Vec<usize>,
    dst: Vec<u32>,
    prob: Vec<f64>,
}

impl TransitionKernel {
    pub fn from_rows(rows: Vec<Vec<(u32, f64)>>) -> Self {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let nnz = rows.iter().map(Vec::len).sum();
        let mut dst = Vec::with_capacity(nnz);
        let mut prob = Vec::with_capacity(nnz);
        row_ptr.push(0);
        for row in rows {
            for (d, p) in row {
                dst.push(d);
                prob.push(p);
            }
            row_ptr.push(dst.len());
        }
        Self { row_ptr, dst, prob }
    }

    pub fn n_cells(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.dst.len()
    }

    pub fn row(&self, src: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[src]..self.row_ptr[src + 1];
        self.dst[r.clone()]
            .iter()
            .zip(&self.prob[r])
            .map(|(&d, &p)| (d as usize, p))
    }

    pub fn row_mass(&self, src: usize) -> f64 {
        self.prob[self.row_ptr[src]..self.row_ptr[src + 1]].iter().sum()
    }

    /// `out[d] += Σ_src K(src -> d) * values[src]`.
    pub fn accumulate(&self, values: &[f64], out: &mut [f64]) {
        for (src, &v) in values.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            for k in self.row_ptr[src]..self.row_ptr[src + 1] {
                out[self.dst[k] as usize] += self.prob[k] * v;
            }
        }
    }

    /// Multiply every entry by a constant survival probability.
    pub fn with_survival(mut self, survival: f64) -> Self {
        self.prob.iter_mut().for_each(|p| *p *= survival);
        self
    }

    /// Multiply every entry arriving in cell `d` by `factor[d]`.
    pub fn scale_destinations(&mut self, factor: &[f64]) {
        for (p, &d) in self.prob.iter_mut().zip(&self.dst) {
            *p *= factor[d as usize];
        }
    }

    pub fn write_to(&self, key: &str, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&KERNEL_FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&key_digest(key))?;
        w.write_all(&(self.n_cells() as u64).to_le_bytes())?;
        w.write_all(&(self.nnz() as u64).to_le_bytes())?;
        for &p in &self.row_ptr {
            w.write_all(&(p as u64).to_le_bytes())?;
        }
        for &d in &self.dst {
            w.write_all(&d.to_le_bytes())?;
        }
        for &p in &self.prob {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    /// Read a kernel, verifying the format version and cache key.
    pub fn read_from(key: &str, mut r: impl Read) -> std::result::Result<Self, String> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| e.to_string())?;
        if &magic != MAGIC {
            return Err("not a kernel file".into());
        }
        let version = read_u32(&mut r)?;
        if version != KERNEL_FORMAT_VERSION {
            return Err(format!("format version {version}, expected {KERNEL_FORMAT_VERSION}"));
        }
        let mut digest = [0u8; 32];
        r.read_exact(&mut digest).map_err(|e| e.to_string())?;
        if digest != key_digest(key) {
            return Err("cache key mismatch".into());
        }
        let n = read_u64(&mut r)? as usize;
        let nnz = read_u64(&mut r)? as usize;
        let mut row_ptr = Vec::with_capacity(n + 1);
        for _ in 0..=n {
            row_ptr.push(read_u64(&mut r)? as usize);
        }
        let mut dst = Vec::with_capacity(nnz);
        for _ in 0..nnz {
            dst.push(read_u32(&mut r)?);
        }
        let mut prob = Vec::with_capacity(nnz);
        for _ in 0..nnz {
            prob.push(f64::from_bits(read_u64(&mut r)?));
        }
        if row_ptr.last() != Some(&nnz) || dst.iter().any(|&d| d as usize >= n) {
            return Err("corrupt kernel structure".into());
        }
        Ok(Self { row_ptr, dst, prob })
    }
}

fn read_u32(r: &mut impl Read) -> std::result::Result<u32, String> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| e.to_string())?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> std::result::Result<u64, String> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| e.to_string())?;
    Ok(u64::from_le_bytes(b))
}

fn key_digest(key: &str) -> [u8; 32] {
    Sha256::digest(key.as_bytes()).into()
}

/// How kernel entries are computed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelMethod {
    /// Push uniform samples from each cell through the dynamics.
    MonteCarlo { samples_per_cell: usize, seed: u64 },
    /// Per-axis integration, with `nodes` points for the velocity noise.
    Quadrature { nodes: usize },
}

/// Parameters that determine a kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelRequest {
    pub spec: GridSpec,
    pub dynamics: CvDynamics,
    pub survival: f64,
    pub method: KernelMethod,
}

impl KernelRequest {
    pub fn cache_key(&self) -> String {
        let method = match self.method {
            KernelMethod::MonteCarlo { samples_per_cell, seed } => format!("mc;n={samples_per_cell};seed={seed}"),
            KernelMethod::Quadrature { nodes } => format!("quad;nodes={nodes};prune={QUADRATURE_PRUNE:e}"),
        };
        format!(
            "v{};{};dt={:e};q={:e};ps={:e};{method}",
            KERNEL_FORMAT_VERSION,
            self.spec.cache_key(),
            self.dynamics.dt,
            self.dynamics.q,
            self.survival,
        )
    }

    pub fn cache_path(&self, dir: &Path) -> PathBuf {
        let digest = hex::encode(&key_digest(&self.cache_key())[..12]);
        dir.join(format!("kernel-{digest}.bin"))
    }

    pub fn build(&self) -> TransitionKernel {
        match self.method {
            KernelMethod::MonteCarlo { samples_per_cell, seed } => {
                build_kernel_monte_carlo(&self.spec, &self.dynamics, self.survival, samples_per_cell, seed)
            }
            KernelMethod::Quadrature { nodes } => {
                build_kernel_quadrature(&self.spec, &self.dynamics, self.survival, nodes)
            }
        }
    }

    /// Load from `dir` if a valid cached copy exists, otherwise build and store it.
    pub fn load_or_build(&self, dir: &Path) -> Result<TransitionKernel> {
        let path = self.cache_path(dir);
        let key = self.cache_key();
        if path.exists() {
            let file = fs::File::open(&path)?;
            match TransitionKernel::read_from(&key, BufReader::new(file)) {
                Ok(k) if k.n_cells() == self.spec.n_cells() => return Ok(k),
                Ok(_) => log::warn!("kernel cache {} has wrong size; rebuilding", path.display()),
                Err(reason) => log::warn!("kernel cache {} unusable ({reason}); rebuilding", path.display()),
            }
        }
        let kernel = self.build();
        fs::create_dir_all(dir)?;
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(fs::File::create(&tmp)?);
            kernel
                .write_to(&key, &mut w)
                .and_then(|_| w.flush())
                .map_err(|e| Error::KernelCache {
                    path: tmp.clone(),
                    reason: e.to_string(),
                })?;
        }
        fs::rename(&tmp, &path)?;
        Ok(kernel)
    }
}

/// Lower Cholesky factor of a 2x2 PSD matrix, tolerating singular input.
fn chol2(a: f64, b: f64, c: f64) -> [f64; 3] {
    let l11 = a.max(0.0).sqrt();
    let l21 = if l11 > 0.0 { b / l11 } else { 0.0 };
    let l22 = (c - l21 * l21).max(0.0).sqrt();
    [l11, l21, l22]
}

/// Reflect `v` into `[lo, hi]`.
pub(crate) fn reflect(mut v: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    if span <= 0.0 {
        return lo;
    }
    // Fold onto a period of 2*span, then mirror the upper half.
    let t = (v - lo).rem_euclid(2.0 * span);
    v = if t <= span { lo + t } else { hi - (t - span) };
    v
}

/// Estimate the transition kernel by pushing `samples_per_cell` uniform draws from
/// each cell (restricted to the region) through one step of the dynamics.
///
/// Velocities reflect at the region's velocity bounds; samples whose position
/// leaves the region are lost. Each cell uses its own RNG stream so the result
/// does not depend on evaluation order.
pub fn build_kernel_monte_carlo(
    spec: &GridSpec,
    dynamics: &CvDynamics,
    survival: f64,
    samples_per_cell: usize,
    seed: u64,
) -> TransitionKernel {
    assert!(samples_per_cell >= 1, "samples_per_cell must be at least 1");
    let q = dynamics.axis_noise();
    let l = chol2(q[(0, 0)], q[(1, 0)], q[(1, 1)]);
    let dt = dynamics.dt;
    let r = spec.region;
    let weight = survival / samples_per_cell as f64;
    let rows = (0..spec.n_cells())
        .into_par_iter()
        .map_init(Vec::new, |dests: &mut Vec<u32>, cell| {
            let [ipx, ipy, ivx, ivy] = spec.unravel(cell);
            let bounds = |axis: &Axis, i: usize, lo: f64, hi: f64| (axis.lower(i).max(lo), axis.upper(i).min(hi));
            let px = bounds(&spec.position, ipx, r.pos_min, r.pos_max);
            let py = bounds(&spec.position, ipy, r.pos_min, r.pos_max);
            let vx = bounds(&spec.velocity, ivx, r.vel_min, r.vel_max);
            let vy = bounds(&spec.velocity, ivy, r.vel_min, r.vel_max);
            if px.0 >= px.1 || py.0 >= py.1 || vx.0 >= vx.1 || vy.0 >= vy.1 {
                return Vec::new();
            }
            let mut rng: ChaCha8Rng = stream_rng(seed, cell as u64);
            dests.clear();
            for _ in 0..samples_per_cell {
                let step = |rng: &mut ChaCha8Rng, p: (f64, f64), v: (f64, f64)| {
                    let p0 = rng.random_range(p.0..p.1);
                    let v0 = rng.random_range(v.0..v.1);
                    let n1: f64 = rng.sample(StandardNormal);
                    let n2: f64 = rng.sample(StandardNormal);
                    let p1 = p0 + dt * v0 + l[0] * n1;
                    let v1 = v0 + l[1] * n1 + l[2] * n2;
                    (p1, reflect(v1, r.vel_min, r.vel_max))
                };
                let (x, vxn) = step(&mut rng, px, vx);
                let (y, vyn) = step(&mut rng, py, vy);
                if !(r.pos_min..=r.pos_max).contains(&x) || !(r.pos_min..=r.pos_max).contains(&y) {
                    continue;
                }
                let d = spec.index(
                    spec.position.nearest_clamped(x),
                    spec.position.nearest_clamped(y),
                    spec.velocity.nearest_clamped(vxn),
                    spec.velocity.nearest_clamped(vyn),
                );
                dests.push(d as u32);
            }
            dests.sort_unstable();
            let mut row: Vec<(u32, f64)> = Vec::new();
            for &d in dests.iter() {
                match row.last_mut() {
                    Some((last, p)) if *last == d => *p += weight,
                    _ => row.push((d, weight)),
                }
            }
            row
        })
        .collect();
    TransitionKernel::from_rows(rows)
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// `∫∫ 1{x' <= x}` smoothed by N(0, s^2): the second antiderivative
/// `s^2 Φ2(x / s)` of the normal CDF, with its `s -> 0` limit.
fn second_integral(x: f64, s: f64) -> f64 {
    if s == 0.0 {
        return 0.5 * x.max(0.0).powi(2);
    }
    let z = x / s;
    s * s * 0.5 * ((z * z + 1.0) * normal_cdf(z) + z * normal_pdf(z))
}

/// `∫_a^b ∫_{w0}^{w1} Φ((k - p - w) / s) dw dp`.
fn box_integral(k: f64, (a, b): (f64, f64), (w0, w1): (f64, f64), s: f64) -> f64 {
    second_integral(k - a - w0, s) - second_integral(k - a - w1, s) - second_integral(k - b - w0, s)
        + second_integral(k - b - w1, s)
}

/// Cell `i` of `axis` clipped to `[lo, hi]`, if nonempty.
fn clipped(axis: &Axis, i: usize, lo: f64, hi: f64) -> Option<(f64, f64)> {
    let (a, b) = (axis.lower(i).max(lo), axis.upper(i).min(hi));
    (a < b).then_some((a, b))
}

/// Intervals whose reflection into `[lo, hi]` lands in `[a, b]`.
fn reflection_preimages((a, b): (f64, f64), lo: f64, hi: f64) -> impl Iterator<Item = (f64, f64)> {
    let period = 2.0 * (hi - lo);
    (-2..=2).flat_map(move |k| {
        let shift = k as f64 * period;
        [(a + shift, b + shift), (2.0 * hi - b + shift, 2.0 * hi - a + shift)]
    })
}

/// Single-axis transition probabilities `(p, v) -> (p', v')`, rows indexed
/// `ip * nv + iv`. Sources are uniform on their cell within the region.
fn axis_kernel(spec: &GridSpec, dynamics: &CvDynamics, nodes: usize) -> Vec<Vec<(usize, f64)>> {
    let (pa, va, r) = (&spec.position, &spec.velocity, &spec.region);
    let nv = va.count;
    let dt = dynamics.dt;
    let q = dynamics.axis_noise();
    let (qpp, qpv, qvv) = (q[(0, 0)], q[(0, 1)], q[(1, 1)]);
    let sv = qvv.max(0.0).sqrt();
    // position noise given velocity noise e: mean gain * e, sd s
    let (gain, s) = if qvv > 0.0 {
        (qpv / qvv, (qpp - qpv * qpv / qvv).max(0.0).sqrt())
    } else {
        (0.0, qpp.max(0.0).sqrt())
    };
    let noise: Vec<(f64, f64)> = if sv == 0.0 {
        vec![(0.0, 1.0)]
    } else {
        let half = 8.0 * sv;
        let h = 2.0 * half / nodes as f64;
        (0..nodes)
            .map(|k| {
                let lo = -half + k as f64 * h;
                (lo + 0.5 * h, normal_cdf((lo + h) / sv) - normal_cdf(lo / sv))
            })
            .collect()
    };
    let dest_p: Vec<_> = (0..pa.count).map(|j| clipped(pa, j, r.pos_min, r.pos_max)).collect();
    let dest_v: Vec<_> = (0..nv).map(|j| clipped(va, j, r.vel_min, r.vel_max)).collect();
    let reach = 10.0 * s + pa.step;

    (0..pa.count * nv)
        .into_par_iter()
        .map(|src| {
            let (ip, iv) = (src / nv, src % nv);
            let (Some(p_src), Some(v_src)) = (dest_p[ip], dest_v[iv]) else {
                return Vec::new();
            };
            let norm = (p_src.1 - p_src.0) * (v_src.1 - v_src.0) * dt;
            let mut acc = vec![0.0; pa.count * nv];
            for &(e, w) in &noise {
                let mu = gain * e;
                for (jv, dv) in dest_v.iter().enumerate() {
                    let Some(dv) = dv else { continue };
                    for (alpha, beta) in reflection_preimages(*dv, r.vel_min, r.vel_max) {
                        let v0 = v_src.0.max(alpha - e);
                        let v1 = v_src.1.min(beta - e);
                        if v0 >= v1 {
                            continue;
                        }
                        let wr = (dt * v0, dt * v1);
                        let lo = p_src.0 + wr.0 + mu - reach;
                        let hi = p_src.1 + wr.1 + mu + reach;
                        for jp in pa.centers_within(lo, hi) {
                            let Some((l, u)) = dest_p[jp] else { continue };
                            let mass = box_integral(u - mu, p_src, wr, s) - box_integral(l - mu, p_src, wr, s);
                            acc[jp * nv + jv] += w * mass / norm;
                        }
                    }
                }
            }
            acc.into_iter()
                .enumerate()
                .filter(|&(_, p)| p > QUADRATURE_PRUNE * 1e-2)
                .collect()
        })
        .collect()
}

/// Kernel from per-axis integration of the dynamics: each axis row is
/// integrated in closed form over the source cell and position noise, and
/// numerically over the velocity noise. The two axes are independent, so the
/// 4-D kernel is their product times `survival`.
///
/// Velocities reflect at the region's velocity bounds; mass whose position
/// leaves the region is lost.
pub fn build_kernel_quadrature(
    spec: &GridSpec,
    dynamics: &CvDynamics,
    survival: f64,
    nodes: usize,
) -> TransitionKernel {
    assert!(nodes >= 1, "nodes must be at least 1");
    assert!(dynamics.dt > 0.0, "time step must be positive");
    let axis = axis_kernel(spec, dynamics, nodes);
    let nv = spec.velocity.count;
    let rows = (0..spec.n_cells())
        .into_par_iter()
        .map(|cell| {
            let [ipx, ipy, ivx, ivy] = spec.unravel(cell);
            let (rx, ry) = (&axis[ipx * nv + ivx], &axis[ipy * nv + ivy]);
            let mut row = Vec::with_capacity(rx.len() * ry.len());
            for &(dx, px) in rx {
                for &(dy, py) in ry {
                    let p = survival * px * py;
                    if p >= QUADRATURE_PRUNE {
                        let d = spec.index(dx / nv, dy / nv, dx % nv, dy % nv);
                        row.push((d as u32, p));
                    }
                }
            }
            row.sort_unstable_by_key(|e| e.0);
            row
        })
        .collect();
    TransitionKernel::from_rows(rows)
}

/// Rebalance `kernel` so that the uniform intensity `target` (per-cell density)
/// is an exact fixed point of prediction, returning the adjusted kernel and the
/// birth density that compensates boundary outflow and death.
///
/// Cells whose inflow exceeds the target have their arriving entries thinned
/// (a local survival adjustment); all others receive the shortfall as birth.
pub fn balance_for_steady_state(mut kernel: TransitionKernel, target: &[f64]) -> (TransitionKernel, Vec<f64>) {
    let mut inflow = vec![0.0; target.len()];
    kernel.accumulate(target, &mut inflow);
    let mut factor = vec![1.0; target.len()];
    let mut birth = vec![0.0; target.len()];
    for c in 0..target.len() {
        if inflow[c] > target[c] {
            factor[c] = target[c] / inflow[c];
        } else {
            birth[c] = target[c] - inflow[c];
        }
    }
    kernel.scale_destinations(&factor);
    (kernel, birth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::intensity::grid::Region;

    fn small_spec(vel_bound: f64) -> GridSpec {
        GridSpec {
            position: Axis::new(-20.0, 4.0, 11),
            velocity: Axis::new(-1.0, 0.4, 6),
            region: Region {
                pos_min: -20.0,
                pos_max: 20.0,
                vel_min: -vel_bound,
                vel_max: vel_bound,
            },
        }
    }

    #[test]
    fn reflect_folds_into_interval() {
        assert_eq!(reflect(0.5, -1.0, 1.0), 0.5);
        assert!((reflect(1.25, -1.0, 1.0) - 0.75).abs() < 1e-12);
        assert!((reflect(-1.5, -1.0, 1.0) + 0.5).abs() < 1e-12);
        assert!((reflect(3.5, -1.0, 1.0) + 0.5).abs() < 1e-12);
    }

    #[test]
    fn rows_are_subprobability_and_deterministic() {
        let spec = small_spec(1.0);
        let dynamics = CvDynamics::new(1.0, 0.01);
        let a = build_kernel_monte_carlo(&spec, &dynamics, 0.999, 200, 7);
        let b = build_kernel_monte_carlo(&spec, &dynamics, 0.999, 200, 7);
        assert_eq!(a, b);
        for c in 0..spec.n_cells() {
            let m = a.row_mass(c);
            assert!((0.0..=0.999 + 1e-12).contains(&m), "row {c} mass {m}");
            assert!(a.row(c).all(|(_, p)| p >= 0.0));
        }
        let c = build_kernel_monte_carlo(&spec, &dynamics, 0.999, 200, 8);
        assert_ne!(a, c);
    }

    #[test]
    fn static_slow_cell_mostly_stays_put() {
        // velocity in [0, 0.4] on both axes: a sample leaves its position cell
        // with probability E[v]/4 = 0.05 per axis
        let spec = small_spec(1.2);
        let k = build_kernel_monte_carlo(&spec, &CvDynamics::new(1.0, 0.0), 1.0, 20_000, 1);
        let src = spec.index(5, 5, 3, 3);
        let stay: f64 = k.row(src).filter(|&(d, _)| d == src).map(|(_, p)| p).sum();
        assert!((stay - 0.9025).abs() < 0.01, "stay = {stay}");
        assert!((k.row_mass(src) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fast_cell_drifts_one_unit_per_step() {
        let spec = small_spec(1.2);
        let k = build_kernel_monte_carlo(&spec, &CvDynamics::new(1.0, 0.0), 1.0, 20_000, 3);
        let mut values = vec![0.0; spec.n_cells()];
        let start = spec.index(3, 5, 5, 2);
        values[start] = 1.0;
        for _ in 0..4 {
            let mut next = vec![0.0; spec.n_cells()];
            k.accumulate(&values, &mut next);
            values = next;
        }
        let mass: f64 = values.iter().sum();
        let mean_x: f64 = values
            .iter()
            .enumerate()
            .map(|(c, v)| v * spec.center(c)[0])
            .sum::<f64>()
            / mass;
        let drift = mean_x - spec.center(start)[0];
        assert!((drift - 4.0).abs() < 0.1, "drift = {drift}");
    }

    #[test]
    fn balancing_makes_target_a_fixed_point() {
        let spec = small_spec(1.0);
        let kernel = build_kernel_monte_carlo(&spec, &CvDynamics::new(1.0, 0.01), 0.999, 300, 5);
        let target: Vec<f64> = (0..spec.n_cells()).map(|c| 2.0 * spec.overlap_fraction(c)).collect();
        let (k, birth) = balance_for_steady_state(kernel, &target);
        assert!(birth.iter().all(|&b| b >= 0.0));
        let mut out = birth.clone();
        k.accumulate(&target, &mut out);
        for (o, t) in out.iter().zip(&target) {
            assert!((o - t).abs() <= 1e-12 * t.max(1.0));
        }
    }

    #[test]
    fn quadrature_noise_free_cases_are_exact() {
        let spec = small_spec(1.2);
        let k = build_kernel_quadrature(&spec, &CvDynamics::new(1.0, 0.0), 1.0, 1);
        let src = spec.index(5, 5, 3, 3);
        let stay: f64 = k.row(src).filter(|&(d, _)| d == src).map(|(_, p)| p).sum();
        assert!((stay - 0.9025).abs() < 1e-12, "stay = {stay}");
        assert!((k.row_mass(src) - 1.0).abs() < 1e-12);
        // zero velocity cell boundary straddles v = 0; the fast cell drifts v per step
        let fast = spec.index(3, 5, 5, 2);
        let mean_dx: f64 = k
            .row(fast)
            .map(|(d, p)| p * (spec.center(d)[0] - spec.center(fast)[0]))
            .sum();
        assert!((mean_dx - 1.0).abs() < 1e-9, "mean displacement {mean_dx}");
    }

    #[test]
    fn quadrature_agrees_with_monte_carlo() {
        let spec = small_spec(1.0);
        let dynamics = CvDynamics::new(1.0, 0.01);
        let quad = build_kernel_quadrature(&spec, &dynamics, 0.999, 400);
        let mc = build_kernel_monte_carlo(&spec, &dynamics, 0.999, 4000, 2);
        let mut worst: f64 = 0.0;
        for c in 0..spec.n_cells() {
            let mut dense = std::collections::BTreeMap::new();
            for (d, p) in quad.row(c) {
                *dense.entry(d).or_insert(0.0) += p;
            }
            for (d, p) in mc.row(c) {
                *dense.entry(d).or_insert(0.0) -= p;
            }
            worst = dense.values().fold(worst, |w, v: &f64| w.max(v.abs()));
            assert!((quad.row_mass(c) - mc.row_mass(c)).abs() < 0.04);
            assert!(quad.row_mass(c) <= 0.999 + 1e-9);
        }
        // binomial sd at 4000 samples is below 0.008
        assert!(worst < 0.04, "worst entry difference {worst}");
    }

    #[test]
    fn quadrature_balance_birth_is_death_plus_boundary_flux() {
        let spec = GridSpec::standard();
        let kernel = build_kernel_quadrature(&spec, &CvDynamics::new(1.0, 0.01), 0.999, 200);
        let density = 50.0 / spec.region.volume();
        let target: Vec<f64> = (0..spec.n_cells())
            .map(|c| density * spec.overlap_fraction(c))
            .collect();
        let (_, birth) = balance_for_steady_state(kernel, &target);
        let total = birth.iter().sum::<f64>() * spec.cell_volume();
        // 50 (1 - 0.999) deaths plus 4 edges x 0.0625 crossing, less deaths among them
        let expected = 0.05 + 0.999 * 0.25;
        assert!((total - expected).abs() < 0.01 * expected, "birth total {total}");
    }

    #[test]
    fn cache_round_trip_and_key_check() {
        let spec = small_spec(1.0);
        let req = KernelRequest {
            spec,
            dynamics: CvDynamics::new(1.0, 0.01),
            survival: 0.999,
            method: KernelMethod::MonteCarlo {
                samples_per_cell: 50,
                seed: 11,
            },
        };
        let dir = std::env::temp_dir().join(format!("pmbtrack-kernel-test-{}", std::process::id()));
        let built = req.load_or_build(&dir).unwrap();
        let loaded = req.load_or_build(&dir).unwrap();
        assert_eq!(built, loaded);

        let mut bytes = Vec::new();
        built.write_to("other key", &mut bytes).unwrap();
        assert!(TransitionKernel::read_from(&req.cache_key(), bytes.as_slice()).is_err());
        let _ = fs::remove_dir_all(dir);
    }
}
