use serde::{Deserialize, Serialize};

use crate::linalg::Vec2;

/// Angular tolerance so that points exactly on the cone edge count as inside.
const EDGE_TOLERANCE: f64 = 1e-12;

/// Sensor field of view: a cone about the heading, unbounded in range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConeFov {
    pub origin: Vec2,
    /// Heading angle in radians, measured from the +x axis.
    pub heading: f64,
    pub half_angle: f64,
    pub pd: f64,
}

impl ConeFov {
    pub fn contains(&self, pos: &Vec2) -> bool {
        let d = pos - self.origin;
        if d.norm_squared() == 0.0 {
            return true;
        }
        let bearing = d[1].atan2(d[0]);
        let mut off = (bearing - self.heading).rem_euclid(std::f64::consts::TAU);
        if off > std::f64::consts::PI {
            off = std::f64::consts::TAU - off;
        }
        off <= self.half_angle + EDGE_TOLERANCE
    }
}

/// Probability of detection as a function of target position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DetectionField {
    Constant(f64),
    Cone(ConeFov),
}

impl DetectionField {
    pub fn eval(&self, pos: &Vec2) -> f64 {
        match self {
            DetectionField::Constant(p) => *p,
            DetectionField::Cone(c) => {
                if c.contains(pos) {
                    c.pd
                } else {
                    0.0
                }
            }
        }
    }

    /// Upper bound of the field over all positions.
    pub fn max(&self) -> f64 {
        match self {
            DetectionField::Constant(p) => *p,
            DetectionField::Cone(c) => c.pd,
        }
    }
}
