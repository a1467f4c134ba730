//! Barrier functions `h` whose 0-superlevel set `{x | h(x) >= 0}` is the
//! safe set.
//!
//! Three families are supported: affine, quadratic `offset - x^T P x`, and
//! polytopic `-max(C x - w)`. For the polytope, the expected margin under
//! Gaussian noise has no closed form, so [`lse_upper_bound`] provides the
//! log-sum-exp/moment-generating-function upper bound on `E[max_i r_i]`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{self, PSD_TOL};

/// Curvature class of a barrier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    /// Both concave and convex.
    Affine,
    Concave,
    Convex,
    Neither,
}

impl Shape {
    pub fn is_concave(&self) -> bool {
        matches!(self, Shape::Affine | Shape::Concave)
    }
}

/// Affine inequalities `C x <= w` describing a polytope.
#[derive(Debug, Clone, PartialEq)]
pub struct PolytopeSpec {
    c: DMatrix<f64>,
    w: DVector<f64>,
}

impl PolytopeSpec {
    pub fn new(c: DMatrix<f64>, w: DVector<f64>) -> Result<Self> {
        if c.nrows() == 0 || c.ncols() == 0 {
            return Err(Error::InvalidParams(vec!["polytope needs at least one row".into()]));
        }
        if c.nrows() != w.len() {
            return Err(Error::DimensionMismatch(format!(
                "C has {} rows but w has {} entries",
                c.nrows(),
                w.len()
            )));
        }
        if c.iter().chain(w.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams(vec!["polytope entries must be finite".into()]));
        }
        Ok(Self { c, w })
    }

    /// Square `|p_x| <= half_width`, `|p_y| <= half_width` on the first two
    /// coordinates of an `n`-dimensional state.
    pub fn square_on_positions(state_dim: usize, half_width: f64) -> Result<Self> {
        if state_dim < 2 {
            return Err(Error::DimensionMismatch("square needs two position coordinates".into()));
        }
        let mut c = DMatrix::zeros(4, state_dim);
        c[(0, 0)] = 1.0;
        c[(1, 0)] = -1.0;
        c[(2, 1)] = 1.0;
        c[(3, 1)] = -1.0;
        Self::new(c, DVector::from_element(4, half_width))
    }

    /// Unit square centered at the origin for a planar double integrator.
    pub fn unit_square() -> Self {
        Self::square_on_positions(4, 0.5).expect("static polytope")
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn w(&self) -> &DVector<f64> {
        &self.w
    }

    pub fn n_constraints(&self) -> usize {
        self.c.nrows()
    }

    pub fn state_dim(&self) -> usize {
        self.c.ncols()
    }

    /// Margins `C x - w`.
    pub fn margins(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.c * x - &self.w
    }

    /// Upper bound on `-max(C x - w)` implied by opposing rows
    /// (`c_j = -c_i` gives `h <= (w_i + w_j)/2`) or zero rows (`h <= w_i`).
    /// `None` when no row has a partner, in which case `h` may be unbounded.
    pub fn opposing_pair_bound(&self) -> Option<f64> {
        let n = self.n_constraints();
        let mut best: Option<f64> = None;
        let mut update = |v: f64| best = Some(best.map_or(v, |b: f64| b.min(v)));
        for i in 0..n {
            let ci = self.c.row(i);
            let scale = ci.amax();
            if scale == 0.0 {
                update(self.w[i]);
                continue;
            }
            for j in i + 1..n {
                let cj = self.c.row(j);
                if (ci + cj).amax() <= 1e-12 * scale {
                    update(0.5 * (self.w[i] + self.w[j]));
                }
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BarrierKind {
    /// `weights^T x + offset`.
    Affine { weights: DVector<f64>, offset: f64 },
    /// `offset - x^T P x` with `P` symmetric.
    Quadratic { p: DMatrix<f64>, offset: f64 },
    /// `-max(C x - w)`.
    Polytope(PolytopeSpec),
}

/// An evaluable barrier together with the metadata the bounds and filters need.
#[derive(Debug, Clone, PartialEq)]
pub struct Barrier {
    kind: BarrierKind,
    upper_bound: f64,
    hessian_norm_bound: f64,
    shape: Shape,
}

impl Barrier {
    pub fn kind(&self) -> &BarrierKind {
        &self.kind
    }

    /// `M` with `h(x) <= M` everywhere (`+inf` if unbounded or unknown).
    pub fn upper_bound(&self) -> f64 {
        self.upper_bound
    }

    /// `lambda_max`, a bound on the Hessian spectral norm (`+inf` if unavailable).
    pub fn hessian_norm_bound(&self) -> f64 {
        self.hessian_norm_bound
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn state_dim(&self) -> usize {
        match &self.kind {
            BarrierKind::Affine { weights, .. } => weights.len(),
            BarrierKind::Quadratic { p, .. } => p.nrows(),
            BarrierKind::Polytope(spec) => spec.state_dim(),
        }
    }

    /// Replaces the recorded upper bound.
    pub fn with_upper_bound(mut self, m: f64) -> Self {
        self.upper_bound = m;
        self
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        match &self.kind {
            BarrierKind::Affine { weights, offset } => weights.dot(x) + offset,
            BarrierKind::Quadratic { p, offset } => offset - x.dot(&(p * x)),
            BarrierKind::Polytope(spec) => -spec.margins(x).max(),
        }
    }

    /// Gradient of `h`; `None` where a polytope barrier has tied active rows.
    pub fn gradient(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        match &self.kind {
            BarrierKind::Affine { weights, .. } => Some(weights.clone()),
            BarrierKind::Quadratic { p, .. } => Some(-2.0 * (p * x)),
            BarrierKind::Polytope(spec) => {
                let m = spec.margins(x);
                let top = m.imax();
                if m.iter().enumerate().any(|(i, &v)| i != top && v == m[top]) {
                    None
                } else {
                    Some(-spec.c().row(top).transpose())
                }
            }
        }
    }

    /// `h(x) >= 0`.
    pub fn is_safe(&self, x: &DVector<f64>) -> bool {
        self.value(x) >= 0.0
    }

    pub fn as_quadratic(&self) -> Option<(&DMatrix<f64>, f64)> {
        match &self.kind {
            BarrierKind::Quadratic { p, offset } => Some((p, *offset)),
            _ => None,
        }
    }

    pub fn as_polytope(&self) -> Option<&PolytopeSpec> {
        match &self.kind {
            BarrierKind::Polytope(spec) => Some(spec),
            _ => None,
        }
    }

    /// Quadratic barrier with an arbitrary symmetric `P`; the shape is
    /// classified from the spectrum instead of being required concave.
    pub fn quadratic_any(p: DMatrix<f64>, offset: f64) -> Result<Self> {
        if !linalg::is_symmetric(&p, PSD_TOL) {
            return Err(Error::DimensionMismatch("P must be square and symmetric".into()));
        }
        let eig = linalg::symmetric_eigenvalues(&p);
        let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
        let max = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let shape = if min >= -PSD_TOL && max <= PSD_TOL {
            Shape::Affine
        } else if min >= -PSD_TOL {
            Shape::Concave
        } else if max <= PSD_TOL {
            Shape::Convex
        } else {
            Shape::Neither
        };
        let upper_bound = if min >= -PSD_TOL { offset } else { f64::INFINITY };
        let spectral = eig.iter().fold(0.0f64, |a, l| a.max(l.abs()));
        Ok(Self {
            kind: BarrierKind::Quadratic { p, offset },
            upper_bound,
            hessian_norm_bound: 2.0 * spectral,
            shape,
        })
    }
}

/// `h(x) = offset - x^T P x` for symmetric positive-semidefinite `P`;
/// `M = offset` and `lambda_max = 2 lambda_max(P)`.
pub fn quadratic_barrier(p: DMatrix<f64>, offset: f64) -> Result<Barrier> {
    linalg::require_psd(&p)?;
    let lambda = 2.0 * linalg::max_eigenvalue(&p).max(0.0);
    Ok(Barrier {
        kind: BarrierKind::Quadratic { p, offset },
        upper_bound: offset,
        hessian_norm_bound: lambda,
        shape: Shape::Concave,
    })
}

/// `h(x) = weights^T x + offset`.
pub fn affine_barrier(weights: DVector<f64>, offset: f64) -> Barrier {
    let upper_bound = if weights.iter().all(|&v| v == 0.0) { offset } else { f64::INFINITY };
    Barrier {
        kind: BarrierKind::Affine { weights, offset },
        upper_bound,
        hessian_norm_bound: 0.0,
        shape: Shape::Affine,
    }
}

/// `h(x) = -max(C x - w)`. `M` comes from [`PolytopeSpec::opposing_pair_bound`]
/// and is `+inf` when the rows admit no such bound.
pub fn polytope_barrier(spec: PolytopeSpec) -> Barrier {
    let upper_bound = spec.opposing_pair_bound().unwrap_or(f64::INFINITY);
    Barrier {
        kind: BarrierKind::Polytope(spec),
        upper_bound,
        hessian_norm_bound: f64::INFINITY,
        shape: Shape::Concave,
    }
}

/// The inverted-pendulum ellipse `1 - (36/pi^2) x^T [[1, a], [a, 1]] x`
/// with `a = 3^(-1/2)`.
pub fn pendulum_barrier() -> Barrier {
    let a = 3f64.powf(-0.5);
    let p = DMatrix::from_row_slice(2, 2, &[1.0, a, a, 1.0]) * (36.0 / (PI * PI));
    quadratic_barrier(p, 1.0).expect("static PSD matrix")
}

/// Corridor `half_width^2 - x[axis]^2` on an `n`-dimensional state.
pub fn corridor_barrier(state_dim: usize, axis: usize, half_width: f64) -> Result<Barrier> {
    if axis >= state_dim {
        return Err(Error::DimensionMismatch(format!(
            "axis {axis} out of range for state dimension {state_dim}"
        )));
    }
    let mut p = DMatrix::zeros(state_dim, state_dim);
    p[(axis, axis)] = 1.0;
    quadratic_barrier(p, half_width * half_width)
}

/// Numerically stable `log sum exp(z)` and the softmax weights.
pub(crate) fn log_sum_exp(z: &DVector<f64>) -> (f64, DVector<f64>) {
    let top = z.max();
    let mut weights = z.map(|v| (v - top).exp());
    let total: f64 = weights.sum();
    weights /= total;
    (top + total.ln(), weights)
}

/// `(1/t) log sum_i exp(t mu_i + (t^2/2) sigma_i)`, an upper bound on
/// `E[max_i r_i]` for `r_i ~ N(mu_i, sigma_i)`.
pub fn lse_upper_bound(mu: &DVector<f64>, sigma_diag: &DVector<f64>, t: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::NonPositiveTemperature(t));
    }
    check_lse_inputs(mu, sigma_diag)?;
    Ok(LseTerms::at(mu, sigma_diag, t).value)
}

fn check_lse_inputs(mu: &DVector<f64>, sigma_diag: &DVector<f64>) -> Result<()> {
    if mu.len() != sigma_diag.len() || mu.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "mu has {} entries, sigma has {}",
            mu.len(),
            sigma_diag.len()
        )));
    }
    if sigma_diag.iter().any(|&s| !(s >= 0.0)) {
        return Err(Error::InvalidParams(vec!["sigma entries must be >= 0".into()]));
    }
    Ok(())
}

/// The log-sum-exp bound at one temperature with its temperature derivatives.
#[derive(Debug, Clone)]
pub(crate) struct LseTerms {
    pub t: f64,
    /// `f = L(z)/t` with `z = t mu + t^2 sigma / 2`.
    pub value: f64,
    /// Softmax of `z`.
    pub weights: DVector<f64>,
    /// `s = mu + t sigma = dz/dt`.
    pub slopes: DVector<f64>,
    pub d_t: f64,
    pub d_tt: f64,
}

impl LseTerms {
    pub fn at(mu: &DVector<f64>, sigma: &DVector<f64>, t: f64) -> Self {
        let z = DVector::from_iterator(
            mu.len(),
            mu.iter().zip(sigma.iter()).map(|(m, s)| t * m + 0.5 * t * t * s),
        );
        let (log_sum, weights) = log_sum_exp(&z);
        let slopes = mu + sigma * t;
        let mean_slope = weights.dot(&slopes);
        let var_slope =
            weights.iter().zip(slopes.iter()).map(|(p, s)| p * (s - mean_slope).powi(2)).sum::<f64>();
        let mean_sigma = weights.dot(sigma);
        // Split L = z_j + ell around the largest entry so that the
        // O(t) pieces of L/t^2 and s/t cancel analytically.
        let j = z.imax();
        let ell = log_sum - z[j];
        let d_t = (weights.dot(mu) - mu[j]) / t + mean_sigma - 0.5 * sigma[j] - ell / (t * t);
        let d_tt = 2.0 * log_sum / (t * t * t) - 2.0 * mean_slope / (t * t)
            + (var_slope + mean_sigma) / t;
        Self { t, value: log_sum / t, weights, slopes, d_t, d_tt }
    }
}

/// Minimizer of the log-sum-exp bound over the temperature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemperatureOptimum {
    pub t: f64,
    pub value: f64,
    /// `d value / d ln t` at `t`; zero at an interior stationary point.
    pub log_derivative: f64,
}

const LN_T_MIN: f64 = -18.420680743952367; // ln 1e-8
const LN_T_MAX: f64 = 23.025850929940457; // ln 1e10
const GOLDEN_TOL: f64 = 1e-6;

/// Minimizes `t -> (1/t) L(t mu + (t^2/2) sigma)` over `t > 0`.
///
/// The bound is quasiconvex in `t`, so a derivative-sign bracket around
/// `hint` (or `t = 1`) followed by golden-section search in `ln t` to a
/// relative width of 1e-6 finds the minimizer; two Newton steps then polish
/// it to machine precision. The search is confined to `[1e-8, 1e10]`.
pub fn minimize_lse_temperature(
    mu: &DVector<f64>,
    sigma_diag: &DVector<f64>,
    hint: Option<f64>,
) -> Result<TemperatureOptimum> {
    check_lse_inputs(mu, sigma_diag)?;
    let terms = minimize_temperature_terms(mu, sigma_diag, hint);
    Ok(TemperatureOptimum { t: terms.t, value: terms.value, log_derivative: terms.t * terms.d_t })
}

pub(crate) fn minimize_temperature_terms(
    mu: &DVector<f64>,
    sigma: &DVector<f64>,
    hint: Option<f64>,
) -> LseTerms {
    let eval = |tau: f64| LseTerms::at(mu, sigma, tau.exp());
    let start = hint.filter(|t| t.is_finite() && *t > 0.0).map_or(0.0, f64::ln);
    let start = start.clamp(LN_T_MIN, LN_T_MAX);

    let mut lo = (start - 0.5).max(LN_T_MIN);
    let mut hi = (start + 0.5).min(LN_T_MAX);
    let mut step = 1.0;
    while lo > LN_T_MIN && eval(lo).d_t >= 0.0 {
        hi = lo;
        lo = (lo - step).max(LN_T_MIN);
        step *= 2.0;
    }
    step = 1.0;
    while hi < LN_T_MAX && eval(hi).d_t <= 0.0 {
        lo = hi;
        hi = (hi + step).min(LN_T_MAX);
        step *= 2.0;
    }

    let ratio = 0.5 * (5f64.sqrt() - 1.0);
    let mut a = lo;
    let mut b = hi;
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    let mut fc = eval(c).value;
    let mut fd = eval(d).value;
    while b - a > GOLDEN_TOL {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - ratio * (b - a);
            fc = eval(c).value;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + ratio * (b - a);
            fd = eval(d).value;
        }
    }

    let mut best = eval(0.5 * (a + b));
    for _ in 0..3 {
        if !(best.d_tt > 0.0) || best.d_t == 0.0 {
            break;
        }
        let t_new = best.t - best.d_t / best.d_tt;
        if !(t_new > 0.0) || (t_new.ln() - best.t.ln()).abs() > 2.0 * GOLDEN_TOL {
            break;
        }
        let cand = LseTerms::at(mu, sigma, t_new);
        if cand.d_t.abs() < best.d_t.abs() && cand.value <= best.value + 1e-15 * best.value.abs() {
            best = cand;
        } else {
            break;
        }
    }
    best
}

/// Mean and variance of each polytope margin `r_i = c_i^T x_next - w_i`
/// under `x_next = A x + B u + d`, `d ~ N(0, Q)`:
/// `mu = C (A x + B u) - w` and `sigma_i = c_i^T Q c_i`.
pub fn gaussian_pushforward_stats(
    spec: &PolytopeSpec,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let n = spec.state_dim();
    let consistent = a.nrows() == n
        && a.ncols() == n
        && b.nrows() == n
        && q.nrows() == n
        && q.ncols() == n
        && x.len() == n
        && u.len() == b.ncols();
    if !consistent {
        return Err(Error::DimensionMismatch(format!(
            "state dimension {n}: A {}x{}, B {}x{}, Q {}x{}, x {}, u {}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols(),
            q.nrows(),
            q.ncols(),
            x.len(),
            u.len()
        )));
    }
    linalg::require_psd(q)?;
    let mu = spec.margins(&(a * x + b * u));
    Ok((mu, margin_variances(spec, q)))
}

/// `diag(C Q C^T)`.
pub(crate) fn margin_variances(spec: &PolytopeSpec, q: &DMatrix<f64>) -> DVector<f64> {
    let c = spec.c();
    DVector::from_iterator(
        c.nrows(),
        (0..c.nrows()).map(|i| {
            let row = c.row(i);
            (row * q * row.transpose())[(0, 0)]
        }),
    )
}
