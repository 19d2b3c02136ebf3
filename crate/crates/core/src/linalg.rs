//! Fixed-size linear-Gaussian primitives for the constant-velocity model.
//!
//! State order is `[p_x, v_x, p_y, v_y]`; measurements are positions `[p_x, p_y]`.

use nalgebra::{Matrix2, Matrix2x4, Matrix4, SymmetricEigen, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec2 = Vector2<f64>;
pub type Vec4 = Vector4<f64>;
pub type Mat2 = Matrix2<f64>;
pub type Mat4 = Matrix4<f64>;
pub type Mat2x4 = Matrix2x4<f64>;

/// Tolerance on the smallest eigenvalue accepted as positive semidefinite.
pub const PSD_TOLERANCE: f64 = 1e-9;

/// Replace `m` by `(m + mᵀ) / 2`.
pub fn symmetrize4(m: &Mat4) -> Mat4 {
    (m + m.transpose()) * 0.5
}

pub fn symmetrize2(m: &Mat2) -> Mat2 {
    (m + m.transpose()) * 0.5
}

/// Largest absolute entry of `m - mᵀ`.
pub fn asymmetry(m: &Mat4) -> f64 {
    (m - m.transpose()).amax()
}

pub fn min_eigenvalue(m: &Mat4) -> f64 {
    SymmetricEigen::new(symmetrize4(m)).eigenvalues.min()
}

pub fn is_psd(m: &Mat4) -> bool {
    asymmetry(m) < 1e-10 && min_eigenvalue(m) >= -PSD_TOLERANCE * m.amax().max(1.0)
}

/// Position components of a state vector.
pub fn position(x: &Vec4) -> Vec2 {
    Vec2::new(x[0], x[2])
}

/// Multivariate Gaussian over the 4-D kinematic state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mean: Vec4,
    pub cov: Mat4,
}

impl Gaussian {
    pub fn new(mean: Vec4, cov: Mat4) -> Self {
        Self {
            mean,
            cov: symmetrize4(&cov),
        }
    }

    pub fn position(&self) -> Vec2 {
        position(&self.mean)
    }

    /// Density of the full 4-D Gaussian at `x`.
    pub fn pdf(&self, x: &Vec4) -> Result<f64> {
        let chol = self.cov.cholesky().ok_or(Error::Singular("state covariance"))?;
        let d = x - self.mean;
        let sol = chol.solve(&d);
        let maha = d.dot(&sol);
        let log_det: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        let norm = (2.0 * std::f64::consts::PI).powi(4);
        Ok((-0.5 * maha).exp() / (norm.sqrt() * (0.5 * log_det).exp()))
    }
}

/// Constant-velocity dynamics with white-noise acceleration of diffusion `q`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvDynamics {
    pub dt: f64,
    pub q: f64,
}

impl CvDynamics {
    pub fn new(dt: f64, q: f64) -> Self {
        Self { dt, q }
    }

    pub fn transition(&self) -> Mat4 {
        let t = self.dt;
        #[rustfmt::skip]
        let f = Mat4::new(
            1.0, t,   0.0, 0.0,
            0.0, 1.0, 0.0, 0.0,
            0.0, 0.0, 1.0, t,
            0.0, 0.0, 0.0, 1.0,
        );
        f
    }

    /// Per-axis `q * [[T^3/3, T^2/2], [T^2/2, T]]`.
    pub fn axis_noise(&self) -> Mat2 {
        let t = self.dt;
        Mat2::new(t.powi(3) / 3.0, t * t / 2.0, t * t / 2.0, t) * self.q
    }

    pub fn process_noise(&self) -> Mat4 {
        let a = self.axis_noise();
        let mut q = Mat4::zeros();
        q.fixed_view_mut::<2, 2>(0, 0).copy_from(&a);
        q.fixed_view_mut::<2, 2>(2, 2).copy_from(&a);
        q
    }
}

/// Linear-Gaussian position measurement `z = Hx + v`, `v ~ N(0, R)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearMeasModel {
    pub h: Mat2x4,
    pub r: Mat2,
}

impl LinearMeasModel {
    /// Position-only measurement with isotropic noise variance `var`.
    pub fn position(var: f64) -> Self {
        #[rustfmt::skip]
        let h = Mat2x4::new(
            1.0, 0.0, 0.0, 0.0,
            0.0, 0.0, 1.0, 0.0,
        );
        Self {
            h,
            r: Mat2::identity() * var,
        }
    }

    /// Predicted measurement mean and innovation covariance for `g`.
    pub fn project(&self, g: &Gaussian) -> (Vec2, Mat2) {
        let s = self.h * g.cov * self.h.transpose() + self.r;
        (self.h * g.mean, symmetrize2(&s))
    }

    /// Squared Mahalanobis distance of `z` from the predicted measurement of `g`.
    pub fn mahalanobis2(&self, g: &Gaussian, z: &Vec2) -> Result<f64> {
        let (zhat, s) = self.project(g);
        let inv = s.try_inverse().ok_or(Error::Singular("innovation covariance"))?;
        let nu = z - zhat;
        Ok(nu.dot(&(inv * nu)))
    }

    /// Largest eigenvalue of `R`.
    pub fn max_noise_eigenvalue(&self) -> f64 {
        nalgebra::SymmetricEigen::new(self.r).eigenvalues.max()
    }
}

/// Bivariate normal density `N(z; mean, cov)`.
pub fn normal_pdf2(mean: &Vec2, cov: &Mat2, z: &Vec2) -> Result<f64> {
    let det = cov.determinant();
    if !(det > 0.0) || !det.is_finite() {
        return Err(Error::Singular("2x2 covariance"));
    }
    let inv = cov.try_inverse().ok_or(Error::Singular("2x2 covariance"))?;
    let d = z - mean;
    let maha = d.dot(&(inv * d));
    Ok((-0.5 * maha).exp() / (2.0 * std::f64::consts::PI * det.sqrt()))
}

/// Measurement likelihood `N(z; H m, H P Hᵀ + R)`.
pub fn gaussian_eval(g: &Gaussian, model: &LinearMeasModel, z: &Vec2) -> Result<f64> {
    let (zhat, s) = model.project(g);
    normal_pdf2(&zhat, &s, z)
}

pub fn kf_predict(g: &Gaussian, dynamics: &CvDynamics) -> Gaussian {
    let f = dynamics.transition();
    let cov = f * g.cov * f.transpose() + dynamics.process_noise();
    Gaussian::new(f * g.mean, cov)
}

/// Kalman update; returns the posterior and the measurement likelihood.
pub fn kf_update(g: &Gaussian, model: &LinearMeasModel, z: &Vec2) -> Result<(Gaussian, f64)> {
    let (zhat, s) = model.project(g);
    let s_inv = s.try_inverse().ok_or(Error::Singular("innovation covariance"))?;
    let likelihood = normal_pdf2(&zhat, &s, z)?;
    let gain = g.cov * model.h.transpose() * s_inv;
    let mean = g.mean + gain * (z - zhat);
    // Joseph form keeps the result PSD.
    let ikh = Mat4::identity() - gain * model.h;
    let cov = ikh * g.cov * ikh.transpose() + gain * model.r * gain.transpose();
    Ok((Gaussian::new(mean, cov), likelihood))
}

/// Collapse a weighted Gaussian mixture onto its first two moments.
pub fn moment_match(components: &[(f64, Gaussian)]) -> Result<Gaussian> {
    let total: f64 = components.iter().map(|(w, _)| *w).sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::ZeroWeights);
    }
    if components.iter().any(|(w, _)| *w < 0.0) {
        return Err(Error::InvalidArgument("negative mixture weight".into()));
    }
    let mean = components
        .iter()
        .fold(Vec4::zeros(), |acc, (w, g)| acc + g.mean * (*w / total));
    let cov = components.iter().fold(Mat4::zeros(), |acc, (w, g)| {
        let d = g.mean - mean;
        acc + (g.cov + d * d.transpose()) * (*w / total)
    });
    Ok(Gaussian::new(mean, cov))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn isotropic(var: f64) -> Gaussian {
        Gaussian::new(Vec4::zeros(), Mat4::identity() * var)
    }

    #[test]
    fn eval_at_mode_of_standard_normal() {
        let v = normal_pdf2(&Vec2::zeros(), &Mat2::identity(), &Vec2::zeros()).unwrap();
        assert_relative_eq!(v, 1.0 / (2.0 * PI), epsilon = 1e-15);
        // same through a zero-covariance state projected by H with R = I
        let g = Gaussian::new(Vec4::zeros(), Mat4::zeros());
        let v = gaussian_eval(&g, &LinearMeasModel::position(1.0), &Vec2::zeros()).unwrap();
        assert_relative_eq!(v, 0.1592, epsilon = 1e-4);
    }

    #[test]
    fn eval_far_tail_is_zero() {
        let v = normal_pdf2(&Vec2::zeros(), &Mat2::identity(), &Vec2::new(1e6, 0.0)).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn eval_with_diagonal_covariance() {
        let s = Mat2::new(4.0, 0.0, 0.0, 1.0);
        let m = Vec2::new(1.0, 2.0);
        let v = normal_pdf2(&m, &s, &m).unwrap();
        assert_relative_eq!(v, 1.0 / (2.0 * PI * 2.0), epsilon = 1e-15);
        assert_relative_eq!(v, 0.0796, epsilon = 1e-4);
    }

    #[test]
    fn singular_innovation_is_an_error() {
        let model = LinearMeasModel {
            r: Mat2::zeros(),
            ..LinearMeasModel::position(1.0)
        };
        let g = Gaussian::new(Vec4::zeros(), Mat4::zeros());
        assert!(gaussian_eval(&g, &model, &Vec2::zeros()).is_err());
        assert!(kf_update(&g, &model, &Vec2::zeros()).is_err());
    }

    #[test]
    fn predict_examples() {
        let still = Gaussian::new(Vec4::new(3.0, 0.0, -2.0, 0.0), Mat4::identity());
        let out = kf_predict(&still, &CvDynamics::new(1.0, 0.0));
        assert_eq!(out.mean, still.mean);

        let moving = Gaussian::new(Vec4::new(0.0, 1.0, 0.0, 0.0), Mat4::zeros());
        let out = kf_predict(&moving, &CvDynamics::new(1.0, 0.0));
        assert_eq!(out.mean, Vec4::new(1.0, 1.0, 0.0, 0.0));

        let out = kf_predict(&still, &CvDynamics::new(1.0, 0.01));
        let base = kf_predict(&still, &CvDynamics::new(1.0, 0.0));
        assert!(out.cov.trace() > base.cov.trace());
        assert!(is_psd(&out.cov));
    }

    #[test]
    fn process_noise_is_psd_block_diagonal() {
        let q = CvDynamics::new(1.0, 0.01).process_noise();
        assert!(is_psd(&q));
        assert_eq!(q[(0, 2)], 0.0);
        assert_eq!(q[(1, 3)], 0.0);
        assert_relative_eq!(q[(0, 0)], 0.01 / 3.0);
        assert_relative_eq!(q[(0, 1)], 0.005);
        assert_relative_eq!(q[(1, 1)], 0.01);
    }

    #[test]
    fn update_examples() {
        // uninformative measurement
        let prior = isotropic(1.0);
        let (post, _) = kf_update(&prior, &LinearMeasModel::position(1e12), &Vec2::new(5.0, -5.0)).unwrap();
        assert!((post.mean - prior.mean).amax() < 1e-9);
        assert!((post.cov - prior.cov).amax() < 1e-9);

        // dogmatic prior
        let prior = Gaussian::new(Vec4::new(1.0, 0.0, 2.0, 0.0), Mat4::identity() * 1e-14);
        let (post, _) = kf_update(&prior, &LinearMeasModel::position(1.0), &Vec2::new(50.0, 50.0)).unwrap();
        assert!((post.mean - prior.mean).amax() < 1e-9);

        // gain 1/2 per axis
        let (post, lik) = kf_update(&isotropic(1.0), &LinearMeasModel::position(1.0), &Vec2::new(1.0, 1.0)).unwrap();
        assert_relative_eq!(post.mean[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(post.mean[2], 0.5, epsilon = 1e-12);
        assert_relative_eq!(post.cov[(0, 0)], 0.5, epsilon = 1e-12);
        let expected = normal_pdf2(&Vec2::zeros(), &(Mat2::identity() * 2.0), &Vec2::new(1.0, 1.0)).unwrap();
        assert_relative_eq!(lik, expected, epsilon = 1e-15);
        assert!(is_psd(&post.cov));
    }

    #[test]
    fn perfect_measurement_then_static_predict_recovers_position() {
        let prior = Gaussian::new(Vec4::new(3.0, 0.0, -1.0, 0.0), Mat4::identity() * 10.0);
        let model = LinearMeasModel::position(1e-14);
        let z = Vec2::new(7.25, 4.5);
        let (post, _) = kf_update(&prior, &model, &z).unwrap();
        let pred = kf_predict(&post, &CvDynamics::new(1.0, 0.0));
        // velocity mean stays zero so the position is unchanged by the shift
        assert!((pred.position() - z).amax() < 1e-9);
    }

    #[test]
    fn moment_match_examples() {
        let g = Gaussian::new(Vec4::new(1.0, 2.0, 3.0, 4.0), Mat4::identity() * 2.0);
        let out = moment_match(&[(0.3, g)]).unwrap();
        assert!((out.mean - g.mean).amax() < 1e-15);
        assert!((out.cov - g.cov).amax() < 1e-15);

        let at = |x: f64, var: f64| {
            let mut cov = Mat4::zeros();
            cov[(0, 0)] = var;
            Gaussian::new(Vec4::new(x, 0.0, 0.0, 0.0), cov)
        };
        let out = moment_match(&[(1.0, at(-1.0, 0.0)), (1.0, at(1.0, 0.0))]).unwrap();
        assert_relative_eq!(out.mean[0], 0.0);
        assert_relative_eq!(out.cov[(0, 0)], 1.0);

        let out = moment_match(&[(0.25, at(0.0, 1.0)), (0.75, at(4.0, 1.0))]).unwrap();
        assert_relative_eq!(out.mean[0], 3.0);
        assert_relative_eq!(out.cov[(0, 0)], 4.0);

        assert!(matches!(moment_match(&[(0.0, g), (0.0, g)]), Err(Error::ZeroWeights)));
    }

    #[test]
    fn full_state_pdf_matches_product_of_marginals() {
        let g = Gaussian::new(Vec4::zeros(), Mat4::from_diagonal(&Vec4::new(1.0, 4.0, 9.0, 0.25)));
        let x = Vec4::new(0.5, -1.0, 2.0, 0.1);
        let direct = g.pdf(&x).unwrap();
        let product: f64 = (0..4)
            .map(|k| {
                let v = g.cov[(k, k)];
                (-0.5 * x[k] * x[k] / v).exp() / (2.0 * PI * v).sqrt()
            })
            .product();
        assert_relative_eq!(direct, product, max_relative = 1e-12);
    }
}
