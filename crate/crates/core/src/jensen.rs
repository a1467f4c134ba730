//! Gaussian disturbances and the Jensen gap.
//!
//! For a concave barrier, certainty-equivalent constraints evaluate
//! `h(x + E[d])`, which overestimates `E[h(x + d)]`. The gap is bounded by
//! `(lambda_max / 2) tr(cov(d))` when the Hessian spectral norm of `h` is at
//! most `lambda_max`; it can also be estimated by sampling.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::barriers::Barrier;
use crate::error::{Error, Result};
use crate::linalg::{self, PSD_TOL};
use crate::rng::CounterRng;

/// Additive i.i.d. Gaussian disturbance `d ~ N(mean, covariance)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDisturbance {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    factor: DMatrix<f64>,
}

impl GaussianDisturbance {
    /// Validates symmetry (to 1e-12) and semidefiniteness (eigenvalues >= -1e-12).
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if covariance.nrows() != n || covariance.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "mean has length {n} but covariance is {}x{}",
                covariance.nrows(),
                covariance.ncols()
            )));
        }
        if mean.iter().chain(covariance.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidCovariance("entries must be finite".into()));
        }
        if !linalg::is_symmetric(&covariance, PSD_TOL) {
            return Err(Error::InvalidCovariance("covariance is not symmetric".into()));
        }
        let min = linalg::min_eigenvalue(&covariance);
        if min < -PSD_TOL {
            return Err(Error::InvalidCovariance(format!(
                "covariance has negative eigenvalue {min}"
            )));
        }
        let factor = linalg::psd_factor(&covariance);
        Ok(Self { mean, covariance, factor })
    }

    /// Zero-mean with covariance `diag(variances)`.
    pub fn diagonal(variances: &[f64]) -> Result<Self> {
        Self::new(
            DVector::zeros(variances.len()),
            DMatrix::from_diagonal(&DVector::from_column_slice(variances)),
        )
    }

    /// Given mean, isotropic covariance with the given trace.
    pub fn isotropic(mean: DVector<f64>, trace: f64) -> Result<Self> {
        let n = mean.len();
        let cov = DMatrix::identity(n, n) * (trace / n as f64);
        Self::new(mean, cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn trace(&self) -> f64 {
        self.covariance.trace()
    }

    /// Maps a vector of standard normals to a disturbance sample.
    pub fn transform(&self, standard: &[f64]) -> DVector<f64> {
        &self.mean + &self.factor * DVector::from_column_slice(standard)
    }

    /// The sample at `(stream, block)` of a counter-based generator.
    pub fn sample(&self, rng: &CounterRng, stream: u64, block: u64) -> DVector<f64> {
        let mut z = vec![0.0; self.dim()];
        rng.standard_normals(stream, block, &mut z);
        self.transform(&z)
    }
}

/// How a [`JensenGap`] was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GapMethod {
    Analytic,
    Empirical,
}

/// A value `psi >= 0` with `E[h(x + d)] >= h(x + E[d]) - psi`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JensenGap {
    pub psi: f64,
    pub method: GapMethod,
    /// Samples per center point; 0 for the analytic bound.
    pub sample_count: usize,
    /// Standard error at the worst center point; 0 for the analytic bound.
    pub std_error: f64,
}

/// `psi = (lambda_max / 2) tr(cov(d))`.
pub fn jensen_gap_hessian(lambda_max: f64, d: &GaussianDisturbance) -> Result<JensenGap> {
    if !(lambda_max >= 0.0) {
        return Err(Error::NegativeCurvatureBound(lambda_max));
    }
    Ok(JensenGap {
        psi: 0.5 * lambda_max * d.trace(),
        method: GapMethod::Analytic,
        sample_count: 0,
        std_error: 0.0,
    })
}

/// Sample estimate of `max_x [h(x + E[d]) - E h(x + d)]` over `centers`,
/// floored at 0.
///
/// Sample `i` uses stream `i` of a generator keyed by `seed`, and all
/// centers share the same draws.
pub fn jensen_gap_empirical(
    h: &Barrier,
    centers: &[DVector<f64>],
    d: &GaussianDisturbance,
    n_samples: usize,
    seed: u64,
) -> Result<JensenGap> {
    if n_samples < 100 {
        return Err(Error::InvalidParams(vec![format!(
            "n_samples must be >= 100 (got {n_samples})"
        )]));
    }
    if let Some(x) = centers.iter().find(|x| x.len() != d.dim()) {
        return Err(Error::DimensionMismatch(format!(
            "center of length {} for a disturbance of dimension {}",
            x.len(),
            d.dim()
        )));
    }
    let rng = CounterRng::new(seed);
    let samples: Vec<DVector<f64>> =
        (0..n_samples as u64).into_par_iter().map(|i| d.sample(&rng, i, 0)).collect();

    let mut worst = (f64::NEG_INFINITY, 0.0);
    for x in centers {
        let reference = h.value(&(x + d.mean()));
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for (i, s) in samples.iter().enumerate() {
            let gap = reference - h.value(&(x + s));
            if !gap.is_finite() {
                return Err(Error::DegenerateBarrier { sample: i });
            }
            sum += gap;
            sum_sq += gap * gap;
        }
        let n = n_samples as f64;
        let mean = sum / n;
        let var = ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
        if mean > worst.0 {
            worst = (mean, (var / n).sqrt());
        }
    }
    Ok(JensenGap {
        psi: worst.0.max(0.0),
        method: GapMethod::Empirical,
        sample_count: n_samples,
        std_error: worst.1,
    })
}

/// Expectation offset `delta = c_J - (lambda_max / 2) tr(cov(d))` achieved
/// by a margin `c_J`.
///
/// When `range = Some((m, alpha))`, `c_J` must also satisfy
/// `c_J <= (lambda_max / 2) tr(cov(d)) + M (1 - alpha)`.
pub fn delta_from_margin(
    c_j: f64,
    lambda_max: f64,
    d: &GaussianDisturbance,
    range: Option<(f64, f64)>,
) -> Result<f64> {
    let psi = jensen_gap_hessian(lambda_max, d)?.psi;
    if !(c_j >= 0.0) {
        return Err(Error::MarginOutOfRange { c_j, upper: f64::INFINITY });
    }
    if let Some((m, alpha)) = range {
        let upper = psi + m * (1.0 - alpha);
        if c_j > upper {
            return Err(Error::MarginOutOfRange { c_j, upper });
        }
    }
    Ok(c_j - psi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::barriers;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn scalar(var: f64) -> GaussianDisturbance {
        GaussianDisturbance::diagonal(&[var]).unwrap()
    }

    #[test]
    fn rejects_malformed_covariance() {
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        assert!(matches!(
            GaussianDisturbance::new(DVector::zeros(2), asym),
            Err(Error::InvalidCovariance(_))
        ));
        let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(GaussianDisturbance::new(DVector::zeros(2), indefinite).is_err());
        assert!(matches!(
            GaussianDisturbance::new(DVector::zeros(3), DMatrix::identity(2, 2)),
            Err(Error::DimensionMismatch(_))
        ));
        let nan = DMatrix::from_element(1, 1, f64::INFINITY);
        assert!(GaussianDisturbance::new(DVector::zeros(1), nan).is_err());
        // Singular but PSD is fine.
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(GaussianDisturbance::new(DVector::zeros(2), singular).is_ok());
    }

    #[test]
    fn analytic_gap_examples() {
        assert_eq!(jensen_gap_hessian(0.0, &scalar(3.0)).unwrap().psi, 0.0);
        let sigma2 = 0.01;
        assert_relative_eq!(jensen_gap_hessian(2.0, &scalar(sigma2)).unwrap().psi, sigma2);
        let a = 3f64.powf(-0.5);
        let lambda = 72.0 / (PI * PI) * (1.0 + a);
        assert_relative_eq!(lambda, 11.507, epsilon = 1e-3);
        let d = GaussianDisturbance::diagonal(&[0.005f64.powi(2), 0.025f64.powi(2)]).unwrap();
        let psi = jensen_gap_hessian(lambda, &d).unwrap().psi;
        assert_relative_eq!(psi, lambda / 2.0 * 6.5e-4, max_relative = 1e-12);
        assert_relative_eq!(psi, 3.74e-3, epsilon = 1e-5);
        assert!(matches!(jensen_gap_hessian(-1.0, &d), Err(Error::NegativeCurvatureBound(_))));
    }

    #[test]
    fn analytic_gap_is_linear() {
        let d = scalar(0.3);
        let g1 = jensen_gap_hessian(1.5, &d).unwrap().psi;
        assert_relative_eq!(jensen_gap_hessian(3.0, &d).unwrap().psi, 2.0 * g1);
        assert_relative_eq!(jensen_gap_hessian(1.5, &scalar(0.6)).unwrap().psi, 2.0 * g1);
    }

    #[test]
    fn delta_examples() {
        let d = scalar(0.01);
        assert_relative_eq!(delta_from_margin(0.01, 2.0, &d, None).unwrap(), 0.0, epsilon = 1e-18);
        assert_relative_eq!(delta_from_margin(0.0, 2.0, &d, None).unwrap(), -0.01);
        assert!(delta_from_margin(0.02, 2.0, &d, Some((1.0, 0.999))).is_err());
        assert!(delta_from_margin(0.0105, 2.0, &d, Some((1.0, 0.99))).is_ok());
        assert!(matches!(
            delta_from_margin(-0.1, 2.0, &d, None),
            Err(Error::MarginOutOfRange { .. })
        ));
    }

    #[test]
    fn empirical_gap_of_affine_barrier_vanishes() {
        let h = barriers::affine_barrier(DVector::from_vec(vec![0.3, -1.2]), 0.5);
        let d = GaussianDisturbance::diagonal(&[0.2, 0.5]).unwrap();
        let centers = vec![DVector::from_vec(vec![0.1, 0.2])];
        let g = jensen_gap_empirical(&h, &centers, &d, 20_000, 3).unwrap();
        // Exact zero up to rounding; the floor can only raise it.
        assert!(g.psi <= 3.0 * g.std_error + 1e-12);
        assert_eq!(g.method, GapMethod::Empirical);
    }

    #[test]
    fn empirical_gap_requires_enough_samples() {
        let h = barriers::affine_barrier(DVector::from_vec(vec![1.0]), 0.0);
        assert!(jensen_gap_empirical(&h, &[DVector::zeros(1)], &scalar(1.0), 99, 0).is_err());
    }

    #[test]
    fn empirical_gap_flags_non_finite_barrier() {
        let h = barriers::affine_barrier(DVector::from_vec(vec![f64::INFINITY]), 0.0);
        let r = jensen_gap_empirical(&h, &[DVector::zeros(1)], &scalar(1.0), 100, 0);
        assert!(matches!(r, Err(Error::DegenerateBarrier { .. })));
    }
}
