//! Minimal-deviation projections onto a single concave constraint.
//!
//! Every filter mode solves `min ||u - c||^2 s.t. g(u) >= 0` with `g`
//! concave. For smooth `g` the problem is solved on the one-dimensional dual:
//! for a multiplier `lambda >= 0` the point `u(lambda)` minimizes
//! `||u - c||^2 / 2 - lambda g(u)`, and `phi(lambda) = g(u(lambda))` is
//! nondecreasing. A safeguarded Newton iteration on `phi` (bisection when the
//! Newton step leaves the bracket) locates the root. When `g` is a minimum of
//! affine functions, [`project_onto_polyhedron`] solves the projection
//! exactly by active-set enumeration.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Multipliers above this are treated as the limit of the dual path.
const LAMBDA_CAP: f64 = 1e12;
const INNER_MAX_ITER: usize = 60;

/// Value, gradient and Hessian of a constraint at a point.
#[derive(Debug, Clone)]
pub struct ConstraintEval {
    pub value: f64,
    pub gradient: DVector<f64>,
    /// Negative semidefinite for a concave constraint.
    pub hessian: DMatrix<f64>,
}

/// A smooth constraint `g(u) >= 0` with `g` concave.
pub trait ConcaveConstraint {
    fn value(&self, u: &DVector<f64>) -> f64;
    fn evaluate(&self, u: &DVector<f64>) -> ConstraintEval;
    /// Metadata check; non-concave constraints are rejected by the solver.
    fn is_concave(&self) -> bool {
        true
    }
}

/// Outcome of a projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub point: DVector<f64>,
    /// `g(point)`.
    pub slack: f64,
    /// False when the center itself was feasible.
    pub active: bool,
    /// False when no point reaches `g >= -tol`; `point` then maximizes `g`.
    pub feasible: bool,
    pub multiplier: f64,
    pub iterations: usize,
}

struct DualPoint {
    lambda: f64,
    u: DVector<f64>,
    eval: ConstraintEval,
    /// `d phi / d lambda`.
    slope: f64,
}

fn solve_spd(m: DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    match m.clone().cholesky() {
        Some(ch) => Some(ch.solve(rhs)),
        None => m.lu().solve(rhs),
    }
}

/// `u(lambda)`, warm-started from `start`.
fn dual_point(
    center: &DVector<f64>,
    g: &dyn ConcaveConstraint,
    lambda: f64,
    start: &DVector<f64>,
) -> DualPoint {
    let n = center.len();
    let merit = |u: &DVector<f64>, val: f64| 0.5 * (u - center).norm_squared() - lambda * val;
    let mut u = start.clone();
    let mut eval = g.evaluate(&u);
    for _ in 0..INNER_MAX_ITER {
        let residual = &u - center - &eval.gradient * lambda;
        if residual.norm() <= 1e-14 * (1.0 + u.norm() + lambda * eval.gradient.norm()) {
            break;
        }
        let jac = DMatrix::identity(n, n) - &eval.hessian * lambda;
        let Some(step) = solve_spd(jac, &residual) else { break };
        let current = merit(&u, eval.value);
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = &u - &step * scale;
            let val = g.value(&cand);
            if merit(&cand, val) <= current + 1e-15 * current.abs() {
                u = cand;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        eval = g.evaluate(&u);
        if !accepted || step.norm() * scale <= 1e-15 * (1.0 + u.norm()) {
            break;
        }
    }
    let jac = DMatrix::identity(n, n) - &eval.hessian * lambda;
    let slope = solve_spd(jac, &eval.gradient).map_or(0.0, |du| eval.gradient.dot(&du));
    DualPoint { lambda, u, eval, slope }
}

/// Damped Newton ascent on `g` from `start`, using the pseudo-inverse of the
/// Hessian so that the ascent moves the least distance along flat directions.
fn maximize_constraint(g: &dyn ConcaveConstraint, start: &DVector<f64>) -> (DVector<f64>, f64) {
    let mut u = start.clone();
    let mut eval = g.evaluate(&u);
    for _ in 0..100 {
        let grad_norm = eval.gradient.norm();
        if grad_norm <= 1e-15 {
            break;
        }
        let neg_h = -&eval.hessian;
        let step = match neg_h.clone().svd(true, true).pseudo_inverse(1e-12 * neg_h.norm().max(1e-300)) {
            Ok(pinv) if neg_h.norm() > 0.0 => pinv * &eval.gradient,
            _ => eval.gradient.clone(),
        };
        let mut scale = 1.0;
        let mut improved = false;
        for _ in 0..60 {
            let cand = &u + &step * scale;
            let val = g.value(&cand);
            if val > eval.value {
                u = cand;
                improved = true;
                break;
            }
            scale *= 0.5;
        }
        if !improved {
            break;
        }
        let prev = eval.value;
        eval = g.evaluate(&u);
        if (eval.value - prev).abs() <= 1e-15 * (1.0 + eval.value.abs()) {
            break;
        }
    }
    (u, eval.value)
}

/// Projects `center` onto `{u | g(u) >= 0}` for a smooth concave `g`.
///
/// On success the returned point is `center` when it is feasible, and
/// otherwise a point with `0 <= g <= tol` at which `u - center` is
/// antiparallel to `grad g`. When the feasible set has no interior (its
/// supremum of `g` lies in `[-tol, 0]`) the maximizer of `g` nearest the
/// center is returned. When `sup g < -tol` the result has `feasible = false`
/// and carries the maximizer of `g`.
pub fn solve_scalar_constrained_projection(
    center: &DVector<f64>,
    constraint: &dyn ConcaveConstraint,
    tol: f64,
    max_iter: usize,
) -> Result<Projection> {
    if !constraint.is_concave() {
        return Err(Error::NonConcaveConstraint);
    }
    let at_center = constraint.evaluate(center);
    if at_center.value >= 0.0 {
        return Ok(Projection {
            point: center.clone(),
            slack: at_center.value,
            active: false,
            feasible: true,
            multiplier: 0.0,
            iterations: 0,
        });
    }

    let limit = |iterations: usize| {
        let (u, val) = maximize_constraint(constraint, center);
        Ok(Projection {
            point: u,
            slack: val,
            active: true,
            feasible: val >= -tol,
            multiplier: f64::INFINITY,
            iterations,
        })
    };

    let grad_sq = at_center.gradient.norm_squared();
    if grad_sq == 0.0 {
        return limit(0);
    }
    let mut lo = DualPoint { lambda: 0.0, u: center.clone(), slope: grad_sq, eval: at_center };
    let mut lambda = (-lo.eval.value / grad_sq).max(1e-300);
    let mut iterations = 0;
    let mut hi = loop {
        iterations += 1;
        let p = dual_point(center, constraint, lambda, &lo.u);
        if p.eval.value >= 0.0 {
            break p;
        }
        lo = p;
        lambda *= 10.0;
        if lambda > LAMBDA_CAP {
            return limit(iterations);
        }
    };

    let mut last_is_hi = true;
    while iterations < max_iter {
        let target = tol * hi.eval.gradient.norm().min(1.0);
        if hi.eval.value <= target || hi.lambda - lo.lambda <= 1e-15 * hi.lambda {
            return Ok(Projection {
                slack: hi.eval.value,
                point: hi.u,
                active: true,
                feasible: true,
                multiplier: hi.lambda,
                iterations,
            });
        }
        // Aim at the middle of the acceptance window: on a concave phi the
        // iterates approach from below and would never become feasible.
        let recent = if last_is_hi { &hi } else { &lo };
        let aim = 0.5 * tol * recent.eval.gradient.norm().min(1.0);
        let newton = if recent.slope > 0.0 {
            recent.lambda - (recent.eval.value - aim) / recent.slope
        } else {
            f64::NAN
        };
        let candidate = if newton > lo.lambda && newton < hi.lambda {
            newton
        } else if lo.lambda > 0.0 && hi.lambda > 4.0 * lo.lambda {
            (lo.lambda * hi.lambda).sqrt()
        } else {
            0.5 * (lo.lambda + hi.lambda)
        };
        iterations += 1;
        let start = if last_is_hi { hi.u.clone() } else { lo.u.clone() };
        let p = dual_point(center, constraint, candidate, &start);
        if p.eval.value >= 0.0 {
            hi = p;
            last_is_hi = true;
        } else {
            lo = p;
            last_is_hi = false;
        }
    }
    Err(Error::MaxIterExceeded(max_iter))
}

/// Outcome of a projection onto `{u | D u <= e}`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyhedralProjection {
    pub point: DVector<f64>,
    /// `min_i (e_i - d_i^T u)`.
    pub slack: f64,
    pub active_rows: Vec<usize>,
    /// False when the polyhedron is empty; `point` then maximizes the slack.
    pub feasible: bool,
}

fn polyhedral_slack(d: &DMatrix<f64>, e: &DVector<f64>, u: &DVector<f64>) -> f64 {
    (e - d * u).min()
}

/// Calls `f` with every subset of `0..n` of size at most `k`, smallest first.
fn for_each_subset(n: usize, k: usize, f: &mut dyn FnMut(&[usize])) {
    fn rec(start: usize, n: usize, size: usize, cur: &mut Vec<usize>, f: &mut dyn FnMut(&[usize])) {
        if cur.len() == size {
            f(cur);
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, size, cur, f);
            cur.pop();
        }
    }
    let mut cur = Vec::with_capacity(k);
    for size in 0..=k.min(n) {
        rec(0, n, size, &mut cur, f);
    }
}

/// Exact projection of `center` onto `{u | D u <= e}` when it is nonempty.
fn exact_polyhedral(
    center: &DVector<f64>,
    d: &DMatrix<f64>,
    e: &DVector<f64>,
    feas_tol: f64,
) -> Option<(DVector<f64>, Vec<usize>)> {
    let m = center.len();
    let mut best: Option<(f64, DVector<f64>, Vec<usize>)> = None;
    for_each_subset(d.nrows(), m, &mut |rows| {
        let (u, ok) = if rows.is_empty() {
            (center.clone(), true)
        } else {
            let ds = d.select_rows(rows.iter());
            let es = e.select_rows(rows.iter());
            let gram = &ds * ds.transpose();
            let Some(chol) = gram.clone().cholesky() else { return };
            // Reject nearly dependent active sets.
            let diag_min = chol.l().diagonal().min();
            if !(diag_min > 1e-10 * gram.diagonal().max().sqrt()) {
                return;
            }
            let nu = chol.solve(&(&ds * center - es));
            let ok = nu.iter().all(|&v| v >= -1e-12 * (1.0 + nu.amax()));
            (center - ds.transpose() * nu, ok)
        };
        if !ok || polyhedral_slack(d, e, &u) < -feas_tol {
            return;
        }
        let dist = (&u - center).norm_squared();
        if best.as_ref().map_or(true, |b| dist < b.0) {
            best = Some((dist, u, rows.to_vec()));
        }
    });
    best.map(|(_, u, rows)| (u, rows))
}

/// Projects `center` onto `{u | D u <= e}`.
///
/// The optimum has an active set of at most `dim(u)` linearly independent
/// rows, so enumerating those subsets and keeping the closest KKT point
/// with nonnegative multipliers is exact. Intended for the handful of rows
/// a polytopic barrier produces. When the polyhedron is empty, the returned
/// point projects `center` onto the smallest uniform relaxation
/// `D u <= e + s` that is nonempty, found by bisection on `s`.
pub fn project_onto_polyhedron(
    center: &DVector<f64>,
    d: &DMatrix<f64>,
    e: &DVector<f64>,
    tol: f64,
) -> Result<PolyhedralProjection> {
    if d.nrows() != e.len() || d.ncols() != center.len() {
        return Err(Error::DimensionMismatch(format!(
            "D is {}x{}, e has {} entries, u has {}",
            d.nrows(),
            d.ncols(),
            e.len(),
            center.len()
        )));
    }
    let feas_tol = tol * 1e-3;
    if let Some((u, rows)) = exact_polyhedral(center, d, e, feas_tol) {
        let slack = polyhedral_slack(d, e, &u);
        return Ok(PolyhedralProjection { point: u, slack, active_rows: rows, feasible: true });
    }
    let mut lo = 0.0;
    let mut hi = (-polyhedral_slack(d, e, center)).max(tol);
    let relaxed = |s: f64| exact_polyhedral(center, d, &e.add_scalar(s), feas_tol);
    while relaxed(hi).is_none() {
        lo = hi;
        hi *= 2.0;
        if hi > 1e15 {
            return Err(Error::Infeasible { max_slack: f64::NEG_INFINITY });
        }
    }
    for _ in 0..200 {
        if hi - lo <= 1e-14 * hi.max(1.0) {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if relaxed(mid).is_some() {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let (u, rows) = relaxed(hi).expect("feasible at the upper end");
    let slack = polyhedral_slack(d, e, &u);
    Ok(PolyhedralProjection { point: u, slack, active_rows: rows, feasible: slack >= -tol })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// `g(u) = r - (a + G u)^T P (a + G u)`.
    struct QuadraticConstraint {
        a: DVector<f64>,
        g: DMatrix<f64>,
        p: DMatrix<f64>,
        r: f64,
    }

    impl ConcaveConstraint for QuadraticConstraint {
        fn value(&self, u: &DVector<f64>) -> f64 {
            let z = &self.a + &self.g * u;
            self.r - z.dot(&(&self.p * &z))
        }
        fn evaluate(&self, u: &DVector<f64>) -> ConstraintEval {
            let z = &self.a + &self.g * u;
            let pz = &self.p * &z;
            ConstraintEval {
                value: self.r - z.dot(&pz),
                gradient: -2.0 * self.g.transpose() * pz,
                hessian: -2.0 * self.g.transpose() * &self.p * &self.g,
            }
        }
    }

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn scalar_quadratic(a: f64, r: f64) -> QuadraticConstraint {
        QuadraticConstraint {
            a: v(&[a]),
            g: DMatrix::from_element(1, 1, 1.0),
            p: DMatrix::from_element(1, 1, 1.0),
            r,
        }
    }

    #[test]
    fn feasible_center_is_returned() {
        let c = scalar_quadratic(0.0, 1.0);
        let p = solve_scalar_constrained_projection(&v(&[0.5]), &c, 1e-8, 200).unwrap();
        assert_eq!(p.point, v(&[0.5]));
        assert!(!p.active);
    }

    #[test]
    fn single_point_feasible_set() {
        // 1 - (2 + u)^2 - 1 >= 0 only at u = -2.
        let c = scalar_quadratic(2.0, 0.0);
        let p = solve_scalar_constrained_projection(&v(&[0.0]), &c, 1e-8, 200).unwrap();
        assert_eq!(p.point, v(&[-2.0]));
        assert!(p.feasible && p.active);
    }

    #[test]
    fn ball_projection_is_radial() {
        let c = QuadraticConstraint {
            a: DVector::zeros(2),
            g: DMatrix::identity(2, 2),
            p: DMatrix::identity(2, 2),
            r: 1.0,
        };
        let p = solve_scalar_constrained_projection(&v(&[3.0, 4.0]), &c, 1e-10, 200).unwrap();
        assert_relative_eq!(p.point, v(&[0.6, 0.8]), epsilon = 1e-9);
        assert!(p.slack >= 0.0 && p.slack <= 1e-10);
    }

    #[test]
    fn degenerate_curvature_ellipse() {
        // Only the first coordinate is constrained.
        let c = QuadraticConstraint {
            a: v(&[1.0, 0.0]),
            g: DMatrix::identity(2, 2),
            p: DMatrix::from_diagonal(&v(&[4.0, 0.0])),
            r: 1.0,
        };
        let p = solve_scalar_constrained_projection(&v(&[2.0, 7.0]), &c, 1e-10, 200).unwrap();
        assert_relative_eq!(p.point, v(&[-0.5, 7.0]), epsilon = 1e-8);
    }

    #[test]
    fn infeasible_returns_maximizer() {
        let c = scalar_quadratic(2.0, -0.5);
        let p = solve_scalar_constrained_projection(&v(&[1.0]), &c, 1e-8, 200).unwrap();
        assert!(!p.feasible);
        assert_relative_eq!(p.point, v(&[-2.0]), epsilon = 1e-12);
        assert_relative_eq!(p.slack, -0.5, epsilon = 1e-12);
    }

    struct Convex;
    impl ConcaveConstraint for Convex {
        fn value(&self, u: &DVector<f64>) -> f64 {
            u.norm_squared() - 1.0
        }
        fn evaluate(&self, u: &DVector<f64>) -> ConstraintEval {
            ConstraintEval {
                value: self.value(u),
                gradient: 2.0 * u,
                hessian: DMatrix::identity(u.len(), u.len()) * 2.0,
            }
        }
        fn is_concave(&self) -> bool {
            false
        }
    }

    #[test]
    fn non_concave_is_rejected() {
        let r = solve_scalar_constrained_projection(&v(&[0.0]), &Convex, 1e-8, 10);
        assert!(matches!(r, Err(Error::NonConcaveConstraint)));
    }

    #[test]
    fn polyhedron_corner_and_face() {
        // Unit box in the plane.
        let d = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]);
        let e = DVector::from_element(4, 1.0);
        let p = project_onto_polyhedron(&v(&[3.0, 0.5]), &d, &e, 1e-9).unwrap();
        assert_relative_eq!(p.point, v(&[1.0, 0.5]), epsilon = 1e-14);
        assert_eq!(p.active_rows, vec![0]);
        let p = project_onto_polyhedron(&v(&[3.0, -4.0]), &d, &e, 1e-9).unwrap();
        assert_relative_eq!(p.point, v(&[1.0, -1.0]), epsilon = 1e-14);
        let p = project_onto_polyhedron(&v(&[0.2, 0.1]), &d, &e, 1e-9).unwrap();
        assert!(p.active_rows.is_empty());
    }

    #[test]
    fn empty_polyhedron_relaxes_uniformly() {
        // u <= -1 and -u <= -1 cannot both hold; the best is u = 0, slack -1.
        let d = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let e = v(&[-1.0, -1.0]);
        let p = project_onto_polyhedron(&v(&[5.0]), &d, &e, 1e-9).unwrap();
        assert!(!p.feasible);
        assert_relative_eq!(p.point[0], 0.0, epsilon = 1e-9);
        assert_relative_eq!(p.slack, -1.0, epsilon = 1e-9);
    }

    #[test]
    fn subsets_are_enumerated_by_size() {
        let mut seen = Vec::new();
        for_each_subset(3, 2, &mut |s| seen.push(s.to_vec()));
        assert_eq!(seen.len(), 1 + 3 + 3);
        assert!(seen[0].is_empty());
    }
}
