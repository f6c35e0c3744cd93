//! Tip reference trajectories in the horizontal plane around the rest pose.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    Circle,
    FigureEight,
    /// Constant reference at the center.
    Hold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub shape: Shape,
    /// Radius (circle) or half-width (figure-eight), metres.
    pub radius: f64,
    /// Angular rate, rad/s.
    pub omega: f64,
    /// Radius ramps linearly from zero over this many seconds.
    pub ramp: f64,
    /// Rest position of the tracked point `[x, y, z]`.
    pub center: [f64; 3],
}

impl Reference {
    pub fn circle(center: [f64; 3], radius: f64, omega: f64) -> Self {
        Reference { shape: Shape::Circle, radius, omega, ramp: 1.0, center }
    }

    pub fn figure_eight(center: [f64; 3], radius: f64, omega: f64) -> Self {
        Reference { shape: Shape::FigureEight, radius, omega, ramp: 1.0, center }
    }

    pub fn hold(center: [f64; 3]) -> Self {
        Reference { shape: Shape::Hold, radius: 0.0, omega: 0.0, ramp: 0.0, center }
    }

    /// Reference point at time `t`.
    pub fn at(&self, t: f64) -> DVector<f64> {
        let scale = if self.ramp > 0.0 { (t / self.ramp).clamp(0.0, 1.0) } else { 1.0 };
        let r = self.radius * scale;
        let ph = self.omega * t;
        let (dx, dy) = match self.shape {
            Shape::Circle => (r * ph.cos(), r * ph.sin()),
            Shape::FigureEight => (r * ph.sin(), r * (2.0 * ph).sin() / 2.0),
            Shape::Hold => (0.0, 0.0),
        };
        DVector::from_vec(vec![self.center[0] + dx, self.center[1] + dy, self.center[2]])
    }

    /// `n + 1` samples starting at `t0` with spacing `dt`.
    pub fn window(&self, t0: f64, dt: f64, n: usize) -> Vec<DVector<f64>> {
        (0..=n).map(|k| self.at(t0 + k as f64 * dt)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn circle_has_constant_radius_after_ramp() {
        let r = Reference::circle([0.0, 0.0, -0.3], 0.05, 0.5);
        for k in 0..50 {
            let p = r.at(1.0 + 0.37 * k as f64);
            assert!(((p[0] * p[0] + p[1] * p[1]).sqrt() - 0.05).abs() < 1e-14);
            assert_eq!(p[2], -0.3);
        }
        assert_eq!(r.at(0.0), DVector::from_vec(vec![0.0, 0.0, -0.3]));
    }

    #[test]
    fn figure_eight_crosses_center_every_half_period() {
        let r = Reference::figure_eight([0.0; 3], 0.04, 1.0);
        let period = 2.0 * std::f64::consts::PI;
        let p = r.at(1.5 * period);
        assert!(p[0].abs() < 1e-12 && p[1].abs() < 1e-12);
        let q = r.at(2.0 * period);
        assert!(q[0].abs() < 1e-12 && q[1].abs() < 1e-12);
    }
}
