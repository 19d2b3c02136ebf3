//! Marginal track-to-measurement association probabilities for a single scan.
//!
//! A joint hypothesis assigns each measurement to at most one track and each
//! track to at most one measurement. Its weight is the product of `w_miss[i]`
//! over unassigned tracks, `w[i][j]` over assigned pairs and `kappa[j]` over
//! measurements left to the false-alarm-or-new-target alternative.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest `tracks + measurements` accepted by [`exact_marginals`].
pub const EXACT_SIZE_LIMIT: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssociationProblem {
    pub w_miss: Vec<f64>,
    /// Row-major `n_tracks x n_measurements`; zero for gated-out pairs.
    pub w: Vec<Vec<f64>>,
    pub kappa: Vec<f64>,
}

impl AssociationProblem {
    pub fn new(w_miss: Vec<f64>, w: Vec<Vec<f64>>, kappa: Vec<f64>) -> Result<Self> {
        let p = Self { w_miss, w, kappa };
        p.validate()?;
        Ok(p)
    }

    pub fn n_tracks(&self) -> usize {
        self.w_miss.len()
    }

    pub fn n_measurements(&self) -> usize {
        self.kappa.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.n_measurements();
        if self.w.len() != self.n_tracks() || self.w.iter().any(|row| row.len() != m) {
            return Err(Error::InvalidArgument(
                "association weight matrix has wrong shape".into(),
            ));
        }
        let bad = |v: &f64| !v.is_finite() || *v < 0.0;
        if self.w_miss.iter().any(bad) || self.w.iter().flatten().any(bad) {
            return Err(Error::InvalidArgument(
                "association weights must be finite and nonnegative".into(),
            ));
        }
        if self.kappa.iter().any(|k| !k.is_finite() || *k <= 0.0) {
            return Err(Error::InvalidArgument("kappa must be finite and positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssociationMarginals {
    /// `p[i][j]`: track `i` generated measurement `j`.
    pub p: Vec<Vec<f64>>,
    pub p_miss: Vec<f64>,
    /// Measurement `j` is not claimed by any existing track.
    pub p_new: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl AssociationMarginals {
    /// Largest violation of the per-track and per-measurement normalisation.
    pub fn consistency_error(&self) -> f64 {
        let rows = self
            .p
            .iter()
            .zip(&self.p_miss)
            .map(|(row, pm)| (pm + row.iter().sum::<f64>() - 1.0).abs());
        let cols = self
            .p_new
            .iter()
            .enumerate()
            .map(|(j, pn)| (pn + self.p.iter().map(|row| row[j]).sum::<f64>() - 1.0).abs());
        rows.chain(cols).fold(0.0, f64::max)
    }
}

/// Exact marginals by enumerating every one-to-one partial matching.
pub fn exact_marginals(prob: &AssociationProblem) -> Result<AssociationMarginals> {
    prob.validate()?;
    let n = prob.n_tracks();
    let m = prob.n_measurements();
    if n + m > EXACT_SIZE_LIMIT {
        return Err(Error::ProblemTooLarge {
            tracks: n,
            measurements: m,
            limit: EXACT_SIZE_LIMIT,
        });
    }

    struct Walk<'a> {
        prob: &'a AssociationProblem,
        assignment: Vec<Option<usize>>,
        used: Vec<bool>,
        total: f64,
        pair: Vec<Vec<f64>>,
        miss: Vec<f64>,
        claimed: Vec<f64>,
    }

    impl Walk<'_> {
        fn recurse(&mut self, track: usize, weight: f64) {
            if weight == 0.0 {
                return;
            }
            if track == self.assignment.len() {
                let unclaimed: f64 = self
                    .used
                    .iter()
                    .zip(&self.prob.kappa)
                    .filter(|(u, _)| !**u)
                    .map(|(_, k)| k)
                    .product();
                let h = weight * unclaimed;
                self.total += h;
                for (i, a) in self.assignment.iter().enumerate() {
                    match a {
                        Some(j) => {
                            self.pair[i][*j] += h;
                            self.claimed[*j] += h;
                        }
                        None => self.miss[i] += h,
                    }
                }
                return;
            }
            self.assignment[track] = None;
            self.recurse(track + 1, weight * self.prob.w_miss[track]);
            for j in 0..self.used.len() {
                if !self.used[j] && self.prob.w[track][j] > 0.0 {
                    self.used[j] = true;
                    self.assignment[track] = Some(j);
                    self.recurse(track + 1, weight * self.prob.w[track][j]);
                    self.used[j] = false;
                }
            }
            self.assignment[track] = None;
        }
    }

    let mut walk = Walk {
        prob,
        assignment: vec![None; n],
        used: vec![false; m],
        total: 0.0,
        pair: vec![vec![0.0; m]; n],
        miss: vec![0.0; n],
        claimed: vec![0.0; m],
    };
    walk.recurse(0, 1.0);
    if !(walk.total > 0.0) {
        return Err(Error::ZeroWeights);
    }
    let z = walk.total;
    Ok(AssociationMarginals {
        p: walk
            .pair
            .iter()
            .map(|row| row.iter().map(|v| v / z).collect())
            .collect(),
        p_miss: walk.miss.iter().map(|v| v / z).collect(),
        p_new: walk.claimed.iter().map(|c| 1.0 - c / z).collect(),
        iterations: 0,
        converged: true,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LbpConfig {
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Fraction of the previous message retained at each iteration.
    pub damping: f64,
}

impl Default for LbpConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-6,
            max_iterations: 200,
            damping: 0.0,
        }
    }
}

/// Approximate marginals by loopy belief propagation on the bipartite
/// track/measurement graph.
///
/// Weights are normalised per track by `w_miss` and per measurement by
/// `kappa`, so that with `r[i][j] = w[i][j] / (w_miss[i] kappa[j])`:
///
/// ```text
/// mu[i->j] = r[i][j] / (1 + Σ_{j'≠j} r[i][j'] nu[j'->i])
/// nu[j->i] = 1 / (1 + Σ_{i'≠i} mu[i'->j])
/// ```
///
/// Only gated (nonzero) pairs carry messages.
pub fn lbp_marginals(prob: &AssociationProblem, config: &LbpConfig) -> Result<AssociationMarginals> {
    prob.validate()?;
    let n = prob.n_tracks();
    let m = prob.n_measurements();

    // sparse edge list, grouped by track
    let mut edges: Vec<(usize, usize, f64)> = Vec::new();
    let mut track_start = Vec::with_capacity(n + 1);
    for i in 0..n {
        track_start.push(edges.len());
        let miss = prob.w_miss[i].max(f64::MIN_POSITIVE);
        for j in 0..m {
            let w = prob.w[i][j];
            if w > 0.0 {
                edges.push((i, j, w / (miss * prob.kappa[j])));
            }
        }
    }
    track_start.push(edges.len());

    let mut meas_edges: Vec<Vec<usize>> = vec![Vec::new(); m];
    for (e, &(_, j, _)) in edges.iter().enumerate() {
        meas_edges[j].push(e);
    }

    let mut nu = vec![1.0; edges.len()];
    let mut mu = vec![0.0; edges.len()];
    let mut iterations = 0;
    let mut converged = edges.is_empty();

    while !converged && iterations < config.max_iterations {
        iterations += 1;
        // track -> measurement
        for i in 0..n {
            let range = track_start[i]..track_start[i + 1];
            let total: f64 = range.clone().map(|e| edges[e].2 * nu[e]).sum();
            for e in range {
                let rest = total - edges[e].2 * nu[e];
                mu[e] = edges[e].2 / (1.0 + rest.max(0.0));
            }
        }
        // measurement -> track
        let mut delta: f64 = 0.0;
        for list in &meas_edges {
            let total: f64 = list.iter().map(|&e| mu[e]).sum();
            for &e in list {
                let rest = (total - mu[e]).max(0.0);
                let fresh = 1.0 / (1.0 + rest);
                let next = config.damping * nu[e] + (1.0 - config.damping) * fresh;
                delta = delta.max((next - nu[e]).abs());
                nu[e] = next;
            }
        }
        converged = delta < config.tolerance;
    }
    if !converged {
        log::debug!("LBP stopped after {iterations} iterations without converging");
    }

    // track-side beliefs
    let mut p = vec![vec![0.0; m]; n];
    let mut p_miss = vec![1.0; n];
    for i in 0..n {
        let range = track_start[i]..track_start[i + 1];
        let denom = 1.0 + range.clone().map(|e| edges[e].2 * nu[e]).sum::<f64>();
        let mut claimed = 0.0;
        for e in range {
            let v = edges[e].2 * nu[e] / denom;
            p[i][edges[e].1] = v;
            claimed += v;
        }
        p_miss[i] = (1.0 - claimed).max(0.0);
    }
    // Enforce the measurement-side normalisation; only binds before convergence.
    let mut p_new = vec![1.0; m];
    for j in 0..m {
        let claimed: f64 = meas_edges[j].iter().map(|&e| p[edges[e].0][j]).sum();
        if claimed > 1.0 {
            for &e in &meas_edges[j] {
                let i = edges[e].0;
                let excess = p[i][j] - p[i][j] / claimed;
                p[i][j] -= excess;
                p_miss[i] += excess;
            }
            p_new[j] = 0.0;
        } else {
            p_new[j] = 1.0 - claimed;
        }
    }
    Ok(AssociationMarginals {
        p,
        p_miss,
        p_new,
        iterations,
        converged,
    })
}
