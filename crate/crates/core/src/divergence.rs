//! Kullback-Leibler machinery for replacing a Bernoulli component with a
//! Poisson one, plus exact set-integral computations on small discrete ground
//! spaces used to check the sub-additivity bound for superposed processes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Gaussian;

/// `D(Bernoulli(q, f) || Poisson(q f)) = q + (1 - q) ln(1 - q)` in nats.
pub fn bernoulli_poisson_kl(q: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidProbability(q));
    }
    if q == 1.0 {
        return Ok(f64::INFINITY);
    }
    if q < 1e-3 {
        // Σ_{k≥2} q^k / (k (k-1)), avoiding the cancellation between q and the log
        let mut term = q * q;
        let mut sum = 0.0;
        for k in 2..12 {
            sum += term / (k * (k - 1)) as f64;
            term *= q;
        }
        return Ok(sum);
    }
    Ok(q + (1.0 - q) * (-q).ln_1p())
}

/// KL divergence of a Poisson approximation with mass `mass` and the same
/// spatial density as the Bernoulli component.
pub fn bernoulli_poisson_kl_general(q: f64, mass: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&q) {
        return Err(Error::InvalidProbability(q));
    }
    if !(mass > 0.0) {
        return Err(Error::InvalidArgument(format!("Poisson mass {mass}")));
    }
    let miss = (1.0 - q) * (-q).ln_1p() + (1.0 - q) * mass;
    let hit = if q > 0.0 { q * (q.ln() + mass - mass.ln()) } else { 0.0 };
    Ok(miss + hit)
}

/// Poisson parameters minimising the divergence from a Bernoulli component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoissonProjection {
    pub mass: f64,
    pub shape: Gaussian,
}

pub fn project_bernoulli_to_poisson(q: f64, f: &Gaussian) -> Result<PoissonProjection> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidProbability(q));
    }
    Ok(PoissonProjection { mass: q, shape: *f })
}

/// Default cardinality cap for [`DiscreteSetDistribution`].
pub const DEFAULT_MAX_CARDINALITY: usize = 6;

/// Finite-set density on a ground space of `k` points, stored per multiset.
///
/// A multiset is a vector of multiplicities. The set integral is
/// `Σ_n 1/n! Σ_{tuples} f = Σ_multisets f / Π m_i!`, since a multiset with
/// multiplicities `m` corresponds to `n! / Π m_i!` ordered tuples.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteSetDistribution {
    ground: usize,
    max_cardinality: usize,
    values: BTreeMap<Vec<u8>, f64>,
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

fn multiplicity_weight(m: &[u8]) -> f64 {
    m.iter().map(|&c| factorial(c as usize)).product::<f64>().recip()
}

fn binomial(n: usize, k: usize) -> f64 {
    factorial(n) / (factorial(k) * factorial(n - k))
}

impl DiscreteSetDistribution {
    pub fn new(ground: usize, max_cardinality: usize) -> Self {
        assert!((1..=3).contains(&ground), "ground space holds 1 to 3 points");
        Self {
            ground,
            max_cardinality,
            values: BTreeMap::new(),
        }
    }

    pub fn ground(&self) -> usize {
        self.ground
    }

    pub fn max_cardinality(&self) -> usize {
        self.max_cardinality
    }

    /// All multisets of size at most `max_cardinality`.
    pub fn multisets(&self) -> Vec<Vec<u8>> {
        fn fill(prefix: &mut Vec<u8>, left: usize, slots: usize, out: &mut Vec<Vec<u8>>) {
            if slots == 0 {
                out.push(prefix.clone());
                return;
            }
            for c in 0..=left {
                prefix.push(c as u8);
                fill(prefix, left - c, slots - 1, out);
                prefix.pop();
            }
        }
        let mut out = Vec::new();
        fill(&mut Vec::new(), self.max_cardinality, self.ground, &mut out);
        out
    }

    pub fn get(&self, m: &[u8]) -> f64 {
        self.values.get(m).copied().unwrap_or(0.0)
    }

    pub fn set(&mut self, m: Vec<u8>, value: f64) {
        assert_eq!(m.len(), self.ground);
        assert!(
            value >= 0.0 && value.is_finite(),
            "density must be finite and nonnegative"
        );
        let n: usize = m.iter().map(|&c| c as usize).sum();
        assert!(n <= self.max_cardinality, "multiset exceeds cardinality cap");
        if value == 0.0 {
            self.values.remove(&m);
        } else {
            self.values.insert(m, value);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Vec<u8>, f64)> {
        self.values.iter().map(|(k, v)| (k, *v))
    }

    pub fn set_integral(&self) -> f64 {
        self.iter().map(|(m, v)| v * multiplicity_weight(m)).sum()
    }

    pub fn normalized(mut self) -> Self {
        let total = self.set_integral();
        assert!(total > 0.0, "cannot normalise a zero density");
        self.values.values_mut().for_each(|v| *v /= total);
        self
    }

    /// Bernoulli set with existence `q` and point distribution `point`.
    pub fn bernoulli(q: f64, point: &[f64], max_cardinality: usize) -> Self {
        let mut d = Self::new(point.len(), max_cardinality);
        d.set(vec![0; point.len()], 1.0 - q);
        for (i, &p) in point.iter().enumerate() {
            let mut m = vec![0; point.len()];
            m[i] = 1;
            d.set(m, q * p);
        }
        d
    }

    /// Poisson process with per-point intensity `rates`, truncated at the cap
    /// (not renormalised).
    pub fn poisson(rates: &[f64], max_cardinality: usize) -> Self {
        let total: f64 = rates.iter().sum();
        let mut d = Self::new(rates.len(), max_cardinality);
        for m in d.multisets() {
            let v = (-total).exp() * m.iter().zip(rates).map(|(&c, &r)| r.powi(c as i32)).product::<f64>();
            if v > 0.0 {
                d.set(m, v);
            }
        }
        d
    }

    /// Point mass on the empty set.
    pub fn empty_set(ground: usize, max_cardinality: usize) -> Self {
        let mut d = Self::new(ground, max_cardinality);
        d.set(vec![0; ground], 1.0);
        d
    }
}

/// `∫ f log(f / g) δX`; infinite when `f` has mass where `g` has none.
pub fn set_kl(f: &DiscreteSetDistribution, g: &DiscreteSetDistribution) -> Result<f64> {
    if f.ground != g.ground || f.max_cardinality != g.max_cardinality {
        return Err(Error::InvalidArgument(
            "set distributions live on different spaces".into(),
        ));
    }
    let mut total = 0.0;
    for (m, fv) in f.iter() {
        let gv = g.get(m);
        if gv == 0.0 {
            return Ok(f64::INFINITY);
        }
        total += multiplicity_weight(m) * fv * (fv / gv).ln();
    }
    Ok(total)
}

/// Superposition `f(X) = Σ_{W ⊆ X} g(W) h(X - W)`, truncated at the cap.
/// Returns the density and the set-integral mass dropped by truncation.
pub fn convolve(g: &DiscreteSetDistribution, h: &DiscreteSetDistribution) -> Result<(DiscreteSetDistribution, f64)> {
    if g.ground != h.ground || g.max_cardinality != h.max_cardinality {
        return Err(Error::InvalidArgument(
            "set distributions live on different spaces".into(),
        ));
    }
    let mut out = DiscreteSetDistribution::new(g.ground, g.max_cardinality);
    let mut acc: BTreeMap<Vec<u8>, f64> = BTreeMap::new();
    let mut dropped = 0.0;
    for (w, gv) in g.iter() {
        for (v, hv) in h.iter() {
            let m: Vec<u8> = w.iter().zip(v).map(|(a, b)| a + b).collect();
            // number of ways to pick which copies of each point belong to W
            let ways: f64 = m
                .iter()
                .zip(w)
                .map(|(&mi, &wi)| binomial(mi as usize, wi as usize))
                .product();
            let value = ways * gv * hv;
            let n: usize = m.iter().map(|&c| c as usize).sum();
            if n > g.max_cardinality {
                dropped += value * multiplicity_weight(&m);
            } else {
                *acc.entry(m).or_insert(0.0) += value;
            }
        }
    }
    for (m, v) in acc {
        out.set(m, v);
    }
    Ok((out, dropped))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubadditivityCheck {
    pub lhs: f64,
    pub rhs: f64,
}

impl SubadditivityCheck {
    pub fn holds(&self, tolerance: f64) -> bool {
        self.rhs.is_infinite() || self.lhs <= self.rhs + tolerance
    }
}

/// Divergence of two superpositions against the sum of the component divergences.
pub fn subadditivity_check(
    g: &DiscreteSetDistribution,
    g_approx: &DiscreteSetDistribution,
    h: &DiscreteSetDistribution,
    h_approx: &DiscreteSetDistribution,
) -> Result<SubadditivityCheck> {
    let (f, _) = convolve(g, h)?;
    let (f_approx, _) = convolve(g_approx, h_approx)?;
    let rhs = set_kl(g, g_approx)? + set_kl(h, h_approx)?;
    let lhs = set_kl(&f, &f_approx)?;
    Ok(SubadditivityCheck { lhs, rhs })
}
