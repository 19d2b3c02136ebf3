//! OSPA distance between finite sets of states and its Monte Carlo average.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intensity::DetectionField;
use crate::linalg::{position, Vec4};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OspaParams {
    pub order: f64,
    pub cutoff: f64,
}

impl Default for OspaParams {
    fn default() -> Self {
        Self {
            order: 2.0,
            cutoff: 10.0,
        }
    }
}

/// Minimum-cost assignment of every row to a distinct column of a
/// `rows x cols` cost matrix (`rows <= cols`), by the Hungarian method with
/// potentials. Returns the column chosen for each row.
pub fn optimal_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    assert!(n <= m, "optimal_assignment expects rows <= cols");
    // 1-based arrays; column 0 is a sentinel
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

/// OSPA distance with Euclidean base distance on the full state vector.
pub fn ospa(a: &[Vec4], b: &[Vec4], params: &OspaParams) -> f64 {
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let n = large.len();
    if n == 0 {
        return 0.0;
    }
    let c = params.cutoff;
    let p = params.order;
    let cost: Vec<Vec<f64>> = small
        .iter()
        .map(|x| large.iter().map(|y| (x - y).norm().min(c).powf(p)).collect())
        .collect();
    let assignment = optimal_assignment(&cost);
    let matched: f64 = assignment.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
    let unmatched = c.powf(p) * (n - small.len()) as f64;
    ((matched + unmatched) / n as f64).powf(1.0 / p)
}

/// Per-time mean and standard error over Monte Carlo runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MospaCurve {
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
}

pub fn mospa_curve(runs: &[Vec<f64>]) -> Result<MospaCurve> {
    let Some(first) = runs.first() else {
        return Err(Error::InvalidArgument("no runs to average".into()));
    };
    let t = first.len();
    if t == 0 || runs.iter().any(|r| r.len() != t) {
        return Err(Error::InvalidArgument("runs must be non-empty and equally long".into()));
    }
    let n = runs.len() as f64;
    let mut mean = vec![0.0; t];
    let mut stderr = vec![0.0; t];
    for k in 0..t {
        let m = runs.iter().map(|r| r[k]).sum::<f64>() / n;
        mean[k] = m;
        if runs.len() > 1 {
            let var = runs.iter().map(|r| (r[k] - m).powi(2)).sum::<f64>() / (n - 1.0);
            stderr[k] = (var / n).sqrt();
        }
    }
    Ok(MospaCurve { mean, stderr })
}

/// States whose position has a nonzero detection probability.
pub fn coverage_filtered(states: &[Vec4], fov: &DetectionField) -> Vec<Vec4> {
    states
        .iter()
        .filter(|x| fov.eval(&position(x)) > 0.0)
        .copied()
        .collect()
}
