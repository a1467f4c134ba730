//! Minimal-deviation safety filters.
//!
//! Each filter returns `argmin ||u - k_nom(x, k)||^2` subject to one barrier
//! condition on the next state. The condition depends on the mode:
//!
//! | mode       | constraint                                              |
//! |------------|---------------------------------------------------------|
//! | `DtcbfOp`  | `h(F(x, u)) >= alpha h(x)`                              |
//! | `Ced`      | `h(F(x, u) + E[d]) >= alpha h(x)`                       |
//! | `Jed`      | `h(F(x, u) + E[d]) - c_J >= alpha h(x)`                 |
//! | `EdQuad`   | `h(F(x, u) + E[d]) - tr(P cov d) >= alpha h(x)`         |
//! | `EdLse`    | `min_t (1/t) L(t mu(u) + t^2 sigma / 2) <= -alpha h(x)` |
//!
//! `EdQuad` is the exact expectation for quadratic barriers. `EdLse` is a
//! convex upper bound on `E[max_i(c_i^T x_next - w_i)]` for polytope
//! barriers under linear dynamics.

use std::cell::Cell;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::barriers::{self, Barrier, BarrierKind, LseTerms};
use crate::error::{Error, Result};
use crate::solver::{self, ConcaveConstraint, ConstraintEval};
use crate::systems::SystemModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FilterMode {
    DtcbfOp,
    Ced,
    Jed,
    EdQuad,
    EdLse,
}

impl FilterMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            FilterMode::DtcbfOp => "dtcbf_op",
            FilterMode::Ced => "ced",
            FilterMode::Jed => "jed",
            FilterMode::EdQuad => "ed_quad",
            FilterMode::EdLse => "ed_lse",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "dtcbf_op" | "dtcbfop" => Some(FilterMode::DtcbfOp),
            "ced" => Some(FilterMode::Ced),
            "jed" => Some(FilterMode::Jed),
            "ed_quad" => Some(FilterMode::EdQuad),
            "ed_lse" => Some(FilterMode::EdLse),
            _ => None,
        }
    }
}

impl fmt::Display for FilterMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What to do when no input satisfies the constraint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InfeasiblePolicy {
    Error,
    /// Return the input maximizing the constraint and flag it.
    BestEffort,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterSpec {
    pub alpha: f64,
    /// Margin subtracted in `Jed` mode; ignored otherwise.
    pub c_j: f64,
    pub mode: FilterMode,
    pub solver_tol: f64,
    pub max_iter: usize,
    pub infeasible_policy: InfeasiblePolicy,
}

impl FilterSpec {
    /// Defaults: `solver_tol = 1e-8`, `max_iter = 200`, best effort.
    pub fn new(mode: FilterMode, alpha: f64, c_j: f64) -> Self {
        Self {
            alpha,
            c_j,
            mode,
            solver_tol: 1e-8,
            max_iter: 200,
            infeasible_policy: InfeasiblePolicy::BestEffort,
        }
    }

    pub fn with_policy(mut self, policy: InfeasiblePolicy) -> Self {
        self.infeasible_policy = policy;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            problems.push(format!("alpha must be in (0, 1] (got {})", self.alpha));
        }
        if !(self.c_j >= 0.0 && self.c_j.is_finite()) {
            problems.push(format!("c_J must be finite and >= 0 (got {})", self.c_j));
        }
        if !(self.solver_tol > 0.0) {
            problems.push(format!("solver_tol must be > 0 (got {})", self.solver_tol));
        }
        if self.max_iter < 1 {
            problems.push("max_iter must be >= 1".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidParams(problems))
        }
    }
}

type CommandFn = dyn Fn(&DVector<f64>, usize) -> DVector<f64> + Send + Sync;

/// A nominal feedback `k_nom(x, k)`.
#[derive(Clone)]
pub struct NominalController {
    name: String,
    command: Arc<CommandFn>,
}

impl fmt::Debug for NominalController {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NominalController").field("name", &self.name).finish()
    }
}

impl NominalController {
    pub fn from_fn(
        name: impl Into<String>,
        f: impl Fn(&DVector<f64>, usize) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        Self { name: name.into(), command: Arc::new(f) }
    }

    pub fn zero(input_dim: usize) -> Self {
        Self::from_fn("zero", move |_, _| DVector::zeros(input_dim))
    }

    pub fn constant(u: DVector<f64>) -> Self {
        Self::from_fn("constant", move |_, _| u.clone())
    }

    /// `[speed, 0, -theta]` for the unicycle state `(x, y, theta)`.
    pub fn unicycle_heading(speed: f64) -> Self {
        Self::from_fn("unicycle_heading", move |x, _| DVector::from_vec(vec![speed, 0.0, -x[2]]))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn command(&self, x: &DVector<f64>, k: usize) -> DVector<f64> {
        (self.command)(x, k)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterResult {
    pub input: DVector<f64>,
    /// Constraint left side minus right side at `input`.
    pub constraint_slack: f64,
    pub active: bool,
    /// `||input - k_nom(x, k)||`.
    pub deviation: f64,
    /// Optimal temperature, `EdLse` only.
    pub t_star: Option<f64>,
    /// Set when no feasible input exists and the constraint maximizer was returned.
    pub best_effort: bool,
}

/// `r - z^T P z` with `z = a + G u`.
struct QuadraticInInput {
    a: DVector<f64>,
    g: DMatrix<f64>,
    p: DMatrix<f64>,
    r: f64,
}

impl ConcaveConstraint for QuadraticInInput {
    fn value(&self, u: &DVector<f64>) -> f64 {
        let z = &self.a + &self.g * u;
        self.r - z.dot(&(&self.p * &z))
    }

    fn evaluate(&self, u: &DVector<f64>) -> ConstraintEval {
        let z = &self.a + &self.g * u;
        let pz = &self.p * &z;
        let gt = self.g.transpose();
        ConstraintEval {
            value: self.r - z.dot(&pz),
            gradient: -2.0 * &gt * pz,
            hessian: -2.0 * &gt * &self.p * &self.g,
        }
    }
}

/// `bound - min_t f(u, t)` where `f` is the log-sum-exp bound for margins
/// with mean `D u + m0` and variances `sigma`.
struct LseInInput {
    d: DMatrix<f64>,
    m0: DVector<f64>,
    sigma: DVector<f64>,
    bound: f64,
    hint: Cell<f64>,
}

impl LseInInput {
    fn terms(&self, u: &DVector<f64>) -> LseTerms {
        let mu = &self.d * u + &self.m0;
        let terms = barriers::minimize_temperature_terms(&mu, &self.sigma, Some(self.hint.get()));
        self.hint.set(terms.t);
        terms
    }
}

impl ConcaveConstraint for LseInInput {
    fn value(&self, u: &DVector<f64>) -> f64 {
        self.bound - self.terms(u).value
    }

    fn evaluate(&self, u: &DVector<f64>) -> ConstraintEval {
        let terms = self.terms(u);
        let p = &terms.weights;
        // Softmax covariance times D and times the slopes.
        let dp = self.d.transpose() * p;
        let mut cov_d = self.d.clone();
        for (i, mut row) in cov_d.row_iter_mut().enumerate() {
            row *= p[i];
        }
        let cov_d = cov_d - p * dp.transpose();
        let h_uu = self.d.transpose() * &cov_d * terms.t;
        let ps = p.dot(&terms.slopes);
        let weighted = DVector::from_iterator(
            p.len(),
            p.iter().zip(terms.slopes.iter()).map(|(pi, si)| pi * (si - ps)),
        );
        let h_ut = self.d.transpose() * weighted;
        let mut hess = h_uu;
        if terms.d_tt > 0.0 {
            hess -= &h_ut * h_ut.transpose() / terms.d_tt;
        }
        ConstraintEval { value: self.bound - terms.value, gradient: -dp, hessian: -hess }
    }
}

enum Prepared {
    Quadratic(QuadraticInInput),
    Lse(LseInInput),
    /// `D u <= e`; the slack is `min(e - D u)`.
    Linear { d: DMatrix<f64>, e: DVector<f64> },
}

impl Prepared {
    fn slack(&self, u: &DVector<f64>) -> f64 {
        match self {
            Prepared::Quadratic(c) => c.value(u),
            Prepared::Lse(c) => c.value(u),
            Prepared::Linear { d, e } => (e - d * u).min(),
        }
    }
}

fn prepare(
    spec: &FilterSpec,
    system: &SystemModel,
    barrier: &Barrier,
    x: &DVector<f64>,
) -> Result<Prepared> {
    spec.validate()?;
    let n = system.state_dim();
    if x.len() != n || barrier.state_dim() != n {
        return Err(Error::DimensionMismatch(format!(
            "state has length {}, system dimension {n}, barrier dimension {}",
            x.len(),
            barrier.state_dim()
        )));
    }
    if !barrier.shape().is_concave() {
        return Err(Error::NonConcaveConstraint);
    }
    let dynamics = system.dynamics();
    let noise = system.disturbance();
    let rhs_state = spec.alpha * barrier.value(x);

    if spec.mode == FilterMode::EdLse {
        let Some(poly) = barrier.as_polytope() else {
            return Err(Error::IncompatibleBarrier("ed_lse requires a polytope barrier".into()));
        };
        let Some((a, b)) = dynamics.linear() else {
            return Err(Error::IncompatibleBarrier("ed_lse requires linear dynamics".into()));
        };
        let c = poly.c();
        return Ok(Prepared::Lse(LseInInput {
            d: c * b,
            m0: poly.margins(&(a * x + noise.mean())),
            sigma: barriers::margin_variances(poly, noise.covariance()),
            bound: -rhs_state,
            hint: Cell::new(1.0),
        }));
    }

    let shift = match spec.mode {
        FilterMode::DtcbfOp => DVector::zeros(n),
        _ => noise.mean().clone(),
    };
    let a = dynamics.drift(x) + shift;
    let g = dynamics.input_matrix(x);
    let margin = match spec.mode {
        FilterMode::Jed => spec.c_j,
        FilterMode::EdQuad => {
            let Some((p, _)) = barrier.as_quadratic() else {
                return Err(Error::IncompatibleBarrier("ed_quad requires a quadratic barrier".into()));
            };
            (p * noise.covariance()).trace()
        }
        _ => 0.0,
    };
    let rhs = margin + rhs_state;

    Ok(match barrier.kind() {
        BarrierKind::Quadratic { p, offset } => {
            Prepared::Quadratic(QuadraticInInput { a, g, p: p.clone(), r: offset - rhs })
        }
        BarrierKind::Affine { weights, offset } => Prepared::Linear {
            d: DMatrix::from_rows(&[-(weights.transpose() * &g)]),
            e: DVector::from_element(1, weights.dot(&a) + offset - rhs),
        },
        BarrierKind::Polytope(poly) => {
            let e = DVector::from_iterator(
                poly.n_constraints(),
                (0..poly.n_constraints()).map(|i| poly.w()[i] - (poly.c().row(i) * &a)[(0, 0)] - rhs),
            );
            Prepared::Linear { d: poly.c() * &g, e }
        }
    })
}

/// Constraint left side minus right side for input `u` at state `x`.
pub fn constraint_value(
    spec: &FilterSpec,
    system: &SystemModel,
    barrier: &Barrier,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<f64> {
    if u.len() != system.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "input has length {}, expected {}",
            u.len(),
            system.input_dim()
        )));
    }
    Ok(prepare(spec, system, barrier, x)?.slack(u))
}

/// Applies the safety filter at state `x` and step `k`.
pub fn filter(
    spec: &FilterSpec,
    system: &SystemModel,
    barrier: &Barrier,
    nominal: &NominalController,
    x: &DVector<f64>,
    k: usize,
) -> Result<FilterResult> {
    let prepared = prepare(spec, system, barrier, x)?;
    let u_nom = nominal.command(x, k);
    if u_nom.len() != system.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "nominal command has length {}, expected {}",
            u_nom.len(),
            system.input_dim()
        )));
    }
    let tol = spec.solver_tol;
    let (input, slack, active, feasible) = match &prepared {
        Prepared::Linear { d, e } => {
            let p = solver::project_onto_polyhedron(&u_nom, d, e, tol)?;
            (p.point, p.slack, !p.active_rows.is_empty() || !p.feasible, p.feasible)
        }
        Prepared::Quadratic(c) => {
            let p = solver::solve_scalar_constrained_projection(&u_nom, c, tol, spec.max_iter)?;
            (p.point, p.slack, p.active, p.feasible)
        }
        Prepared::Lse(c) => {
            let p = solver::solve_scalar_constrained_projection(&u_nom, c, tol, spec.max_iter)?;
            (p.point, p.slack, p.active, p.feasible)
        }
    };
    if !feasible && spec.infeasible_policy == InfeasiblePolicy::Error {
        return Err(Error::Infeasible { max_slack: slack });
    }
    let t_star = match &prepared {
        Prepared::Lse(c) => Some(c.terms(&input).t),
        _ => None,
    };
    Ok(FilterResult {
        deviation: (&input - &u_nom).norm(),
        input,
        constraint_slack: slack,
        active,
        t_star,
        best_effort: !feasible,
    })
}
