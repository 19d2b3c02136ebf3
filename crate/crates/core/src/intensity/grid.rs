use serde::{Deserialize, Serialize};

use crate::linalg::{Vec2, Vec4};

/// Axis-aligned state-space region: a square in position times a square in velocity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    pub pos_min: f64,
    pub pos_max: f64,
    pub vel_min: f64,
    pub vel_max: f64,
}

impl Region {
    /// `[-100, 100]^2 x [-1, 1]^2`.
    pub const STANDARD: Region = Region {
        pos_min: -100.0,
        pos_max: 100.0,
        vel_min: -1.0,
        vel_max: 1.0,
    };

    pub fn pos_span(&self) -> f64 {
        self.pos_max - self.pos_min
    }

    pub fn vel_span(&self) -> f64 {
        self.vel_max - self.vel_min
    }

    /// Area of the position square.
    pub fn pos_area(&self) -> f64 {
        self.pos_span().powi(2)
    }

    pub fn vel_area(&self) -> f64 {
        self.vel_span().powi(2)
    }

    /// State-space hypervolume `|X|`.
    pub fn volume(&self) -> f64 {
        self.pos_area() * self.vel_area()
    }

    pub fn contains_position(&self, p: &Vec2) -> bool {
        (self.pos_min..=self.pos_max).contains(&p[0]) && (self.pos_min..=self.pos_max).contains(&p[1])
    }

    pub fn center(&self) -> Vec4 {
        let p = 0.5 * (self.pos_min + self.pos_max);
        let v = 0.5 * (self.vel_min + self.vel_max);
        Vec4::new(p, v, p, v)
    }
}

/// Uniformly spaced cell centres along one axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub first: f64,
    pub step: f64,
    pub count: usize,
}

impl Axis {
    pub fn new(first: f64, step: f64, count: usize) -> Self {
        assert!(step > 0.0 && count > 0, "axis needs positive step and count");
        Self { first, step, count }
    }

    pub fn center(&self, i: usize) -> f64 {
        self.first + self.step * i as f64
    }

    pub fn last(&self) -> f64 {
        self.center(self.count - 1)
    }

    pub fn lower(&self, i: usize) -> f64 {
        self.center(i) - 0.5 * self.step
    }

    pub fn upper(&self, i: usize) -> f64 {
        self.center(i) + 0.5 * self.step
    }

    /// Index of the nearest centre, clamped to the axis.
    pub fn nearest_clamped(&self, x: f64) -> usize {
        let k = ((x - self.first) / self.step).round();
        k.clamp(0.0, (self.count - 1) as f64) as usize
    }

    /// Index range whose centres lie within `[lo, hi]`.
    pub fn centers_within(&self, lo: f64, hi: f64) -> std::ops::Range<usize> {
        let start = ((lo - self.first) / self.step).ceil().max(0.0);
        let end = ((hi - self.first) / self.step).floor() + 1.0;
        let end = end.clamp(0.0, self.count as f64) as usize;
        let start = (start as usize).min(end);
        start..end
    }

    /// Length of cell `i` lying inside `[lo, hi]`.
    pub fn overlap(&self, i: usize, lo: f64, hi: f64) -> f64 {
        (self.upper(i).min(hi) - self.lower(i).max(lo)).max(0.0)
    }
}

/// Regular 4-D grid over `(p_x, p_y, v_x, v_y)`; velocity index varies fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub position: Axis,
    pub velocity: Axis,
    /// Modelled support; cells straddling its edge carry only their inside fraction.
    pub region: Region,
}

impl GridSpec {
    /// 51 position centres per axis at spacing 4 and 6 velocity centres at spacing 0.4.
    pub fn standard() -> Self {
        Self {
            position: Axis::new(-100.0, 4.0, 51),
            velocity: Axis::new(-1.0, 0.4, 6),
            region: Region::STANDARD,
        }
    }

    pub fn n_cells(&self) -> usize {
        self.position.count.pow(2) * self.velocity.count.pow(2)
    }

    pub fn n_velocity_cells(&self) -> usize {
        self.velocity.count.pow(2)
    }

    pub fn cell_volume(&self) -> f64 {
        self.position.step.powi(2) * self.velocity.step.powi(2)
    }

    pub fn cell_area(&self) -> f64 {
        self.position.step.powi(2)
    }

    pub fn index(&self, ipx: usize, ipy: usize, ivx: usize, ivy: usize) -> usize {
        let np = self.position.count;
        let nv = self.velocity.count;
        ((ipx * np + ipy) * nv + ivx) * nv + ivy
    }

    /// First index of the velocity block belonging to position cell `(ipx, ipy)`.
    pub fn position_block(&self, ipx: usize, ipy: usize) -> usize {
        (ipx * self.position.count + ipy) * self.n_velocity_cells()
    }

    pub fn unravel(&self, idx: usize) -> [usize; 4] {
        let np = self.position.count;
        let nv = self.velocity.count;
        let ivy = idx % nv;
        let rest = idx / nv;
        let ivx = rest % nv;
        let rest = rest / nv;
        let ipy = rest % np;
        let ipx = rest / np;
        [ipx, ipy, ivx, ivy]
    }

    /// Cell centre in state order `[p_x, v_x, p_y, v_y]`.
    pub fn center(&self, idx: usize) -> Vec4 {
        let [ipx, ipy, ivx, ivy] = self.unravel(idx);
        Vec4::new(
            self.position.center(ipx),
            self.velocity.center(ivx),
            self.position.center(ipy),
            self.velocity.center(ivy),
        )
    }

    /// Nearest cell to a state, clamping each coordinate onto the grid.
    pub fn nearest_cell(&self, x: &Vec4) -> usize {
        self.index(
            self.position.nearest_clamped(x[0]),
            self.position.nearest_clamped(x[2]),
            self.velocity.nearest_clamped(x[1]),
            self.velocity.nearest_clamped(x[3]),
        )
    }

    /// Fraction of the cell's hypervolume inside `region`.
    pub fn overlap_fraction(&self, idx: usize) -> f64 {
        let [ipx, ipy, ivx, ivy] = self.unravel(idx);
        let r = &self.region;
        let p = &self.position;
        let v = &self.velocity;
        p.overlap(ipx, r.pos_min, r.pos_max)
            * p.overlap(ipy, r.pos_min, r.pos_max)
            * v.overlap(ivx, r.vel_min, r.vel_max)
            * v.overlap(ivy, r.vel_min, r.vel_max)
            / self.cell_volume()
    }

    /// Half of a position cell's diagonal.
    pub fn half_position_diagonal(&self) -> f64 {
        self.position.step * std::f64::consts::SQRT_2 / 2.0
    }

    /// Stable textual key used for cache lookup.
    pub fn cache_key(&self) -> String {
        format!(
            "pos({:e},{:e},{})vel({:e},{:e},{})region({:e},{:e},{:e},{:e})",
            self.position.first,
            self.position.step,
            self.position.count,
            self.velocity.first,
            self.velocity.step,
            self.velocity.count,
            self.region.pos_min,
            self.region.pos_max,
            self.region.vel_min,
            self.region.vel_max
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_grid_layout() {
        let g = GridSpec::standard();
        assert_eq!(g.n_cells(), 93_636);
        assert!((g.cell_volume() - 2.56).abs() < 1e-12);
        assert_eq!(g.position.last(), 100.0);
        assert!((g.velocity.last() - 1.0).abs() < 1e-12);
        for idx in [0, 1, 37, 4_000, 93_635] {
            let [a, b, c, d] = g.unravel(idx);
            assert_eq!(g.index(a, b, c, d), idx);
            assert_eq!(g.nearest_cell(&g.center(idx)), idx);
        }
    }

    #[test]
    fn overlap_of_edge_cells() {
        let g = GridSpec::standard();
        let interior = g.index(25, 25, 2, 3);
        assert!((g.overlap_fraction(interior) - 1.0).abs() < 1e-12);
        // position edge on one axis, velocity edge on one axis
        let edge = g.index(0, 25, 5, 2);
        assert!((g.overlap_fraction(edge) - 0.25).abs() < 1e-12);
        let total: f64 = (0..g.n_cells()).map(|c| g.overlap_fraction(c)).sum::<f64>() * g.cell_volume();
        assert!((total - Region::STANDARD.volume()).abs() < 1e-6);
    }

    #[test]
    fn centers_within_range() {
        let a = Axis::new(-100.0, 4.0, 51);
        assert_eq!(a.centers_within(-3.0, 5.0), 25..27);
        assert_eq!(a.centers_within(-200.0, -99.0), 0..1);
        assert_eq!(a.centers_within(150.0, 200.0), 51..51);
        assert_eq!(a.nearest_clamped(1e9), 50);
    }
}
