//! Discrete-time systems `x_{k+1} = F(x_k, u_k) + d_k`.
//!
//! All example systems are control-affine, `F(x, u) = f(x) + G(x) u`, which
//! keeps every barrier constraint `h(F(x, u) + c)` concave in `u` whenever
//! `h` is concave.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::jensen::GaussianDisturbance;

/// One-step mean dynamics that are affine in the input.
pub trait ControlAffine: Send + Sync + fmt::Debug {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    /// `f(x)`.
    fn drift(&self, x: &DVector<f64>) -> DVector<f64>;
    /// `G(x)`, a `state_dim x input_dim` matrix.
    fn input_matrix(&self, x: &DVector<f64>) -> DMatrix<f64>;

    /// `F(x, u) = f(x) + G(x) u`.
    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.drift(x) + self.input_matrix(x) * u
    }

    /// `(A, B)` when `F(x, u) = A x + B u`.
    fn linear(&self) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
        None
    }
}

/// `x + 2 + u`.
#[derive(Debug, Clone, Copy)]
pub struct DriftingLine;

impl ControlAffine for DriftingLine {
    fn state_dim(&self) -> usize {
        1
    }
    fn input_dim(&self) -> usize {
        1
    }
    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, x[0] + 2.0)
    }
    fn input_matrix(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, 1.0)
    }
}

/// Inverted pendulum about the upright equilibrium, explicit Euler,
/// normalized so the gravity term is `sin(theta)`.
#[derive(Debug, Clone, Copy)]
pub struct Pendulum {
    pub dt: f64,
}

impl ControlAffine for Pendulum {
    fn state_dim(&self) -> usize {
        2
    }
    fn input_dim(&self) -> usize {
        1
    }
    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(vec![x[0] + self.dt * x[1], x[1] + self.dt * x[0].sin()])
    }
    fn input_matrix(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_column_slice(2, 1, &[0.0, self.dt])
    }
}

/// Planar unit-mass double integrator with state `(p_x, p_y, v_x, v_y)`.
#[derive(Debug, Clone)]
pub struct DoubleIntegrator {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
}

impl DoubleIntegrator {
    pub fn new(dt: f64) -> Self {
        let mut a = DMatrix::identity(4, 4);
        a[(0, 2)] = dt;
        a[(1, 3)] = dt;
        let mut b = DMatrix::zeros(4, 2);
        b[(0, 0)] = 0.5 * dt * dt;
        b[(1, 1)] = 0.5 * dt * dt;
        b[(2, 0)] = dt;
        b[(3, 1)] = dt;
        Self { a, b }
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }
}

impl ControlAffine for DoubleIntegrator {
    fn state_dim(&self) -> usize {
        4
    }
    fn input_dim(&self) -> usize {
        2
    }
    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.a * x
    }
    fn input_matrix(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.b.clone()
    }
    fn linear(&self) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
        Some((self.a.clone(), self.b.clone()))
    }
}

/// Planar single integrator with heading, `(x, y, theta)`, driven by body-frame
/// velocities and a yaw rate `(v_x, v_y, omega)`.
#[derive(Debug, Clone, Copy)]
pub struct Unicycle {
    pub dt: f64,
}

impl ControlAffine for Unicycle {
    fn state_dim(&self) -> usize {
        3
    }
    fn input_dim(&self) -> usize {
        3
    }
    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        x.clone()
    }
    fn input_matrix(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let (s, c) = x[2].sin_cos();
        DMatrix::from_row_slice(3, 3, &[c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0]) * self.dt
    }
}

/// Mean dynamics plus the additive disturbance model.
#[derive(Debug, Clone)]
pub struct SystemModel {
    name: String,
    dynamics: Arc<dyn ControlAffine>,
    disturbance: GaussianDisturbance,
    dt: f64,
}

impl SystemModel {
    pub fn new(
        name: impl Into<String>,
        dynamics: Arc<dyn ControlAffine>,
        disturbance: GaussianDisturbance,
        dt: f64,
    ) -> Result<Self> {
        if disturbance.dim() != dynamics.state_dim() {
            return Err(Error::DimensionMismatch(format!(
                "disturbance dimension {} does not match state dimension {}",
                disturbance.dim(),
                dynamics.state_dim()
            )));
        }
        Ok(Self { name: name.into(), dynamics, disturbance, dt })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dynamics(&self) -> &dyn ControlAffine {
        self.dynamics.as_ref()
    }

    pub fn disturbance(&self) -> &GaussianDisturbance {
        &self.disturbance
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn state_dim(&self) -> usize {
        self.dynamics.state_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.dynamics.input_dim()
    }

    /// Mean next state `F(x, u)`.
    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.dynamics.step(x, u)
    }

    /// `F(x, u) + d`.
    pub fn step_with(&self, x: &DVector<f64>, u: &DVector<f64>, d: &DVector<f64>) -> DVector<f64> {
        self.dynamics.step(x, u) + d
    }

    /// Replaces the disturbance model.
    pub fn with_disturbance(self, disturbance: GaussianDisturbance) -> Result<Self> {
        Self::new(self.name, self.dynamics, disturbance, self.dt)
    }
}

fn require_positive_dt(dt: f64) -> Result<()> {
    if dt > 0.0 && dt.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParams(vec![format!("dt must be > 0 (got {dt})")]))
    }
}

/// `x_{k+1} = x_k + 2 + u_k + sigma d_k` with `d_k ~ N(0, 1)`.
pub fn linear_1d(sigma: f64) -> Result<SystemModel> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidParams(vec![format!("sigma must be >= 0 (got {sigma})")]));
    }
    SystemModel::new(
        "linear_1d",
        Arc::new(DriftingLine),
        GaussianDisturbance::diagonal(&[sigma * sigma])?,
        1.0,
    )
}

/// Pendulum with noise `N(0, diag(0.005^2, 0.025^2))`.
pub fn pendulum(dt: f64) -> Result<SystemModel> {
    require_positive_dt(dt)?;
    SystemModel::new(
        "pendulum",
        Arc::new(Pendulum { dt }),
        GaussianDisturbance::diagonal(&[0.005f64.powi(2), 0.025f64.powi(2)])?,
        dt,
    )
}

/// Double integrator with noise `N(0, B B^T)`, i.e. a unit Gaussian force.
pub fn double_integrator(dt: f64) -> Result<SystemModel> {
    require_positive_dt(dt)?;
    let dynamics = DoubleIntegrator::new(dt);
    let q = dynamics.b() * dynamics.b().transpose();
    SystemModel::new(
        "double_integrator",
        Arc::new(dynamics),
        GaussianDisturbance::new(DVector::zeros(4), q)?,
        dt,
    )
}

/// Disturbance mean fitted for the reduced-order walking model.
pub const UNICYCLE_NOISE_MEAN: [f64; 3] = [-0.0132, -0.0034, -0.0002];
/// Trace of the fitted disturbance covariance.
pub const UNICYCLE_NOISE_TRACE: f64 = 0.000548;

/// Unicycle with the fitted walking disturbance, realized isotropically.
pub fn unicycle(dt: f64) -> Result<SystemModel> {
    unicycle_with_noise(dt, &UNICYCLE_NOISE_MEAN, UNICYCLE_NOISE_TRACE)
}

/// Unicycle with an isotropic disturbance of the given mean and trace.
pub fn unicycle_with_noise(dt: f64, mean: &[f64; 3], trace: f64) -> Result<SystemModel> {
    require_positive_dt(dt)?;
    SystemModel::new(
        "unicycle",
        Arc::new(Unicycle { dt }),
        GaussianDisturbance::isotropic(DVector::from_column_slice(mean), trace)?,
        dt,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn linear_1d_examples() {
        let s = linear_1d(0.1).unwrap();
        assert_eq!(s.step(&v(&[0.0]), &v(&[0.0])), v(&[2.0]));
        assert_eq!(s.step(&v(&[0.0]), &v(&[-2.0])), v(&[0.0]));
        assert_eq!(s.step(&v(&[1.0]), &v(&[-2.0])), v(&[1.0]));
        assert_relative_eq!(s.disturbance().trace(), 0.01, max_relative = 1e-15);
        assert!(linear_1d(-0.1).is_err());
    }

    #[test]
    fn pendulum_examples() {
        let s = pendulum(0.01).unwrap();
        assert_eq!(s.step(&v(&[0.0, 0.0]), &v(&[0.0])), v(&[0.0, 0.0]));
        let next = s.step(&v(&[PI / 6.0, 0.0]), &v(&[0.0]));
        assert_relative_eq!(next, v(&[PI / 6.0, 0.005]), epsilon = 1e-15);
        assert_relative_eq!(s.step(&v(&[0.0, 1.0]), &v(&[0.0])), v(&[0.01, 1.0]), epsilon = 1e-15);
        assert_relative_eq!(s.step(&v(&[0.0, 0.0]), &v(&[2.0])), v(&[0.0, 0.02]), epsilon = 1e-15);
        assert_relative_eq!(s.disturbance().trace(), 6.5e-4, max_relative = 1e-12);
        assert!(pendulum(0.0).is_err());
    }

    #[test]
    fn double_integrator_examples() {
        let s = double_integrator(0.05).unwrap();
        let next = s.step(&DVector::zeros(4), &v(&[1.0, 0.0]));
        assert_relative_eq!(next, v(&[0.00125, 0.0, 0.05, 0.0]), epsilon = 1e-15);
        assert_eq!(s.step(&v(&[1.0, 0.0, 0.0, 0.0]), &v(&[0.0, 0.0])), v(&[1.0, 0.0, 0.0, 0.0]));
        assert_relative_eq!(s.disturbance().trace(), 2.0 * (1.5625e-6 + 2.5e-3), max_relative = 1e-12);
        assert_relative_eq!(s.disturbance().trace(), 5.0031e-3, epsilon = 1e-7);
        assert!(s.dynamics().linear().is_some());
    }

    #[test]
    fn unicycle_examples() {
        let dt = 0.1;
        let s = unicycle(dt).unwrap();
        let next = s.step(&v(&[0.0, 0.0, 0.0]), &v(&[0.2, 0.0, 0.0]));
        assert_relative_eq!(next, v(&[0.2 * dt, 0.0, 0.0]), epsilon = 1e-15);
        let next = s.step(&v(&[0.0, 0.0, PI / 2.0]), &v(&[0.2, 0.0, 0.0]));
        assert_relative_eq!(next, v(&[0.0, 0.2 * dt, PI / 2.0]), epsilon = 1e-15);
        assert_eq!(s.step(&v(&[1.0, 1.0, 0.3]), &v(&[0.0, 0.0, 0.0])), v(&[1.0, 1.0, 0.3]));
        assert_relative_eq!(s.disturbance().trace(), 0.000548, max_relative = 1e-12);
        assert_eq!(s.disturbance().mean(), &v(&UNICYCLE_NOISE_MEAN));
    }

    #[test]
    fn step_has_no_hidden_state() {
        let s = pendulum(0.01).unwrap();
        let x0 = v(&[0.1, -0.2]);
        let u = v(&[0.3]);
        let a = s.step(&s.step(&x0, &u), &u);
        let _ = s.step(&v(&[5.0, 5.0]), &u);
        let b = s.step(&s.step(&x0, &u), &u);
        assert_eq!(a, b);
    }

    #[test]
    fn dimension_checked() {
        let d = GaussianDisturbance::diagonal(&[1.0]).unwrap();
        assert!(SystemModel::new("bad", Arc::new(Pendulum { dt: 0.1 }), d, 0.1).is_err());
    }
}
