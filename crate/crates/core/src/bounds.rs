//! K-step exit-probability bounds.
//!
//! Given a barrier `h <= M` whose closed loop satisfies
//! `E[h(x_{k+1}) | x_k] >= alpha * h(x_k) + delta`, the process
//! `W_k = (M - h_k) theta^k + phi * sum_{i=k+1..K} theta^i` with
//! `phi = M(1 - alpha) - delta` is a nonnegative supermartingale for every
//! `theta` in `[1, 1/alpha]`. Ville's inequality applied to `W` at the
//! threshold `lambda* = min_k lambda_k` bounds the probability that
//! `min_k h(x_k) < -gamma` within `K` steps.

use crate::error::{Error, Result};

/// Below this distance from 1, geometric sums in `alpha` are summed term by term.
const NEAR_ONE: f64 = 1e-12;

/// Inputs to the exit-probability bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExitBoundParams {
    /// Upper bound `M` on the barrier.
    pub m: f64,
    /// Decay rate.
    pub alpha: f64,
    /// Expectation offset.
    pub delta: f64,
    /// Level-set relaxation; exits are counted below `-gamma`.
    pub gamma: f64,
    /// Barrier value at the known initial state.
    pub h0: f64,
    /// Horizon in steps.
    pub horizon: u32,
}

impl ExitBoundParams {
    pub fn new(m: f64, alpha: f64, delta: f64, gamma: f64, h0: f64, horizon: u32) -> Self {
        Self { m, alpha, delta, gamma, h0, horizon }
    }

    /// Checks every invariant and names each one that fails.
    ///
    /// `alpha = 1` is accepted as the limiting case in which the only
    /// admissible scaling is `theta = 1`; both closed forms extend to it
    /// continuously.
    pub fn validate(&self) -> Result<()> {
        let mut violated = Vec::new();
        for (name, v) in [
            ("M", self.m),
            ("alpha", self.alpha),
            ("delta", self.delta),
            ("gamma", self.gamma),
            ("h0", self.h0),
        ] {
            if !v.is_finite() {
                violated.push(format!("{name} must be finite (got {v})"));
            }
        }
        if !violated.is_empty() {
            return Err(Error::InvalidParams(violated));
        }
        if self.m <= 0.0 {
            violated.push(format!("M must be > 0 (got {})", self.m));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            violated.push(format!("alpha must lie in (0, 1] (got {})", self.alpha));
        }
        if self.delta > self.m * (1.0 - self.alpha) {
            violated.push(format!(
                "delta must be <= M(1 - alpha) = {} (got {})",
                self.m * (1.0 - self.alpha),
                self.delta
            ));
        }
        if self.h0 > self.m {
            violated.push(format!("h0 must be <= M = {} (got {})", self.m, self.h0));
        }
        if self.gamma < 0.0 {
            violated.push(format!("gamma must be >= 0 (got {})", self.gamma));
        }
        if violated.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidParams(violated))
        }
    }

    /// `phi = M(1 - alpha) - delta`, nonnegative for valid parameters.
    pub fn phi(&self) -> f64 {
        self.m * (1.0 - self.alpha) - self.delta
    }

    /// The switching threshold `-gamma (1 - alpha)` on `delta`.
    pub fn switching_delta(&self) -> f64 {
        -self.gamma * (1.0 - self.alpha)
    }

    /// Which closed form applies. The comparison is exact.
    pub fn case(&self) -> BoundCase {
        let threshold = self.switching_delta();
        if self.delta < threshold {
            BoundCase::Case1
        } else if self.delta == threshold {
            BoundCase::Boundary
        } else {
            BoundCase::Case2
        }
    }
}

/// Which branch of the bound produced a [`BoundResult`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BoundCase {
    /// `delta < -gamma (1 - alpha)`: the threshold is attained at the final step.
    Case1,
    /// `delta > -gamma (1 - alpha)`: the threshold is attained at the initial step.
    Case2,
    /// `delta == -gamma (1 - alpha)`; both closed forms agree here.
    Boundary,
    /// The `theta = 1` bound, valid for every parameter set.
    ThetaOne,
}

impl BoundCase {
    pub fn as_str(&self) -> &'static str {
        match self {
            BoundCase::Case1 => "case1",
            BoundCase::Case2 => "case2",
            BoundCase::Boundary => "boundary",
            BoundCase::ThetaOne => "theta_one",
        }
    }
}

impl std::fmt::Display for BoundCase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// An evaluated bound on the K-step exit probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundResult {
    /// `raw` clamped to `[0, 1]`.
    pub probability: f64,
    /// Unclamped closed-form value; may exceed 1 when the bound is vacuous.
    pub raw: f64,
    pub case: BoundCase,
    /// Supermartingale scaling that realizes the bound.
    pub theta_star: f64,
    pub phi: f64,
}

impl BoundResult {
    fn new(raw: f64, case: BoundCase, theta_star: f64, phi: f64) -> Self {
        Self { probability: raw.clamp(0.0, 1.0), raw, case, theta_star, phi }
    }
}

/// `alpha^K`, computed as `exp(K ln alpha)`.
fn alpha_pow(alpha: f64, k: u32) -> f64 {
    if k == 0 {
        return 1.0;
    }
    (k as f64 * (alpha - 1.0).ln_1p()).exp()
}

/// `sum_{i=1..K} alpha^(i-1)`.
pub(crate) fn geometric_sum(alpha: f64, k: u32) -> f64 {
    if k == 0 {
        return 0.0;
    }
    if (1.0 - alpha).abs() < NEAR_ONE {
        // Compensated summation of the terms; the closed form cancels here.
        let mut sum = 0.0f64;
        let mut comp = 0.0;
        let mut term = 1.0f64;
        for _ in 0..k {
            let t = sum + term;
            if sum.abs() >= term.abs() {
                comp += (sum - t) + term;
            } else {
                comp += (term - t) + sum;
            }
            sum = t;
            term *= alpha;
        }
        return sum + comp;
    }
    // 1 - alpha^K = -expm1(K ln alpha); alpha - 1 is exact near 1.
    -(k as f64 * (alpha - 1.0).ln_1p()).exp_m1() / (1.0 - alpha)
}

/// The K-step exit-probability bound.
///
/// For `delta < -gamma (1 - alpha)` the bound is
/// `((M - h0)/(M + gamma)) alpha^K + (phi/(M + gamma)) sum_{i=1..K} alpha^(i-1)`;
/// otherwise it is
/// `1 - ((h0 + gamma)/(M + gamma)) ((M alpha + gamma + delta)/(M + gamma))^K`.
pub fn exit_probability_bound(p: &ExitBoundParams) -> Result<BoundResult> {
    p.validate()?;
    let phi = p.phi();
    let scale = p.m + p.gamma;
    let case = p.case();
    match case {
        BoundCase::Case1 => {
            let raw = (p.m - p.h0) / scale * alpha_pow(p.alpha, p.horizon)
                + phi / scale * geometric_sum(p.alpha, p.horizon);
            Ok(BoundResult::new(raw, case, 1.0 / p.alpha, phi))
        }
        _ => {
            // With b = (M - h0)/(M + gamma) and e = q^K - 1 (q <= 1), the bound
            // is 1 - (1 - b)(1 + e) = b - e (1 - b).
            let b = (p.m - p.h0) / scale;
            let e = if p.horizon == 0 {
                0.0
            } else {
                (p.horizon as f64 * (-phi / scale).ln_1p()).exp_m1()
            };
            let raw = b - e * (1.0 - b);
            Ok(BoundResult::new(raw, case, scale / (scale - phi), phi))
        }
    }
}

/// The bound obtained with the fixed scaling `theta = 1`:
/// `1 - (h0 + gamma - phi K)/(M + gamma)`.
pub fn exit_probability_bound_theta_one(p: &ExitBoundParams) -> Result<BoundResult> {
    p.validate()?;
    let phi = p.phi();
    let raw = 1.0 - (p.h0 + p.gamma - phi * p.horizon as f64) / (p.m + p.gamma);
    Ok(BoundResult::new(raw, BoundCase::ThetaOne, 1.0, phi))
}

/// The supermartingale `W_k` evaluated along a barrier trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct SupermartingaleTrace {
    /// `W_0 .. W_K`.
    pub w_values: Vec<f64>,
    pub theta: f64,
    /// Per-step thresholds `lambda_k`: `W_k` with `h_k` replaced by `-gamma`.
    pub thresholds: Vec<f64>,
    /// `min_k lambda_k`.
    pub lambda_star: f64,
    /// Index attaining `lambda_star`.
    pub k_star: usize,
}

impl SupermartingaleTrace {
    /// Ville's bound `W_0 / lambda*` on the probability of `max_k W_k > lambda*`.
    pub fn ville_bound(&self) -> f64 {
        self.w_values[0] / self.lambda_star
    }

    /// True if every `W_k` stays at or below `lambda*`.
    pub fn stays_below_threshold(&self) -> bool {
        self.w_values.iter().all(|&w| w <= self.lambda_star)
    }
}

fn check_theta(alpha: f64, theta: f64) -> Result<()> {
    let upper = 1.0 / alpha;
    if !(theta >= 1.0 && theta <= upper) {
        return Err(Error::InvalidTheta { theta, upper });
    }
    Ok(())
}

/// Builds `W_k = (M - h_k) theta^k + phi sum_{i=k+1..K} theta^i` for
/// `k = 0..=K` and the Ville threshold
/// `lambda* = min_k [(M + gamma) theta^k + phi sum_{i=k+1..K} theta^i]`.
///
/// The tail sums are accumulated backwards, which covers `theta = 1`
/// without the geometric-series fraction.
pub fn supermartingale_witness(
    p: &ExitBoundParams,
    theta: f64,
    h_sequence: &[f64],
) -> Result<SupermartingaleTrace> {
    p.validate()?;
    check_theta(p.alpha, theta)?;
    let k_len = p.horizon as usize + 1;
    if h_sequence.len() != k_len {
        return Err(Error::DimensionMismatch(format!(
            "expected {} barrier values for horizon {}, got {}",
            k_len,
            p.horizon,
            h_sequence.len()
        )));
    }
    let bad: Vec<String> = h_sequence
        .iter()
        .enumerate()
        .filter(|(_, &h)| !(h <= p.m))
        .map(|(k, h)| format!("h[{k}] = {h} exceeds M = {}", p.m))
        .collect();
    if !bad.is_empty() {
        return Err(Error::InvalidParams(bad));
    }

    let phi = p.phi();
    let powers: Vec<f64> = (0..k_len).map(|k| theta.powi(k as i32)).collect();
    // tail[k] = sum_{i=k+1..K} theta^i
    let mut tail = vec![0.0; k_len];
    for k in (0..k_len - 1).rev() {
        tail[k] = tail[k + 1] + powers[k + 1];
    }
    let w_values: Vec<f64> = (0..k_len)
        .map(|k| (p.m - h_sequence[k]) * powers[k] + phi * tail[k])
        .collect();
    let thresholds: Vec<f64> =
        (0..k_len).map(|k| (p.m + p.gamma) * powers[k] + phi * tail[k]).collect();
    let (k_star, lambda_star) = thresholds
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::INFINITY), |best, (k, l)| if l < best.1 { (k, l) } else { best });

    Ok(SupermartingaleTrace { w_values, theta, thresholds, lambda_star, k_star })
}

/// `phi * sum_{i=1..K} theta^i`, i.e. `phi theta (theta^K - 1)/(theta - 1)`.
fn scaled_power_sum(phi: f64, theta: f64, k: u32) -> f64 {
    if k == 0 {
        return 0.0;
    }
    let step = theta - 1.0;
    if step.abs() < NEAR_ONE {
        return phi * (1..=k).map(|i| theta.powi(i as i32)).sum::<f64>();
    }
    phi * theta * (k as f64 * step.ln_1p()).exp_m1() / step
}

/// Ville ratio `W_0 / lambda_K` as a function of `theta`:
/// `(M - h0 + phi theta (theta^K - 1)/(theta - 1)) / ((M + gamma) theta^K)`.
///
/// Nonincreasing in `theta > 1` whenever `phi >= 0`, `h0 >= -gamma` and `K >= 1`.
pub fn ville_ratio_final_threshold(p: &ExitBoundParams, theta: f64) -> f64 {
    let num = p.m - p.h0 + scaled_power_sum(p.phi(), theta, p.horizon);
    num / ((p.m + p.gamma) * theta.powi(p.horizon as i32))
}

/// Ville ratio `W_0 / lambda_0` as a function of `theta`:
/// `1 - (h0 + gamma) / (M + gamma + phi theta (theta^K - 1)/(theta - 1))`.
///
/// Nondecreasing in `theta > 1` under the same conditions.
pub fn ville_ratio_initial_threshold(p: &ExitBoundParams, theta: f64) -> f64 {
    1.0 - (p.h0 + p.gamma) / (p.m + p.gamma + scaled_power_sum(p.phi(), theta, p.horizon))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn params(m: f64, alpha: f64, delta: f64, gamma: f64, h0: f64, k: u32) -> ExitBoundParams {
        ExitBoundParams::new(m, alpha, delta, gamma, h0, k)
    }

    #[test]
    fn zero_horizon_is_distance_to_top() {
        for delta in [-0.5, -0.01, 0.0, 0.05] {
            let r = exit_probability_bound(&params(1.0, 0.9, delta, 0.0, 0.5, 0)).unwrap();
            assert_relative_eq!(r.raw, 0.5, epsilon = 1e-15);
        }
    }

    #[test]
    fn case_two_at_zero_offset() {
        let p = params(1.0, 0.9, 0.0, 0.0, 1.0, 10);
        let r = exit_probability_bound(&p).unwrap();
        assert_eq!(r.case, BoundCase::Boundary);
        assert_relative_eq!(r.raw, 1.0 - 0.9f64.powi(10), max_relative = 1e-13);
        assert_relative_eq!(r.raw, 0.6513215599, epsilon = 1e-10);
        // Case 1 transcription at the same point.
        let case1 = (p.m - p.h0) / p.m * 0.9f64.powi(10)
            + p.phi() / p.m * (0..10).map(|i| 0.9f64.powi(i)).sum::<f64>();
        assert_relative_eq!(r.raw, case1, max_relative = 1e-12);
    }

    #[test]
    fn branch_selection() {
        assert_eq!(params(1.0, 0.99, -0.0132, 0.1, 0.8, 100).case(), BoundCase::Case1);
        assert_eq!(params(1.0, 0.99, -0.0009, 0.1, 0.8, 100).case(), BoundCase::Case2);
        let r = exit_probability_bound(&params(1.0, 0.99, -0.0132, 0.1, 0.8, 100)).unwrap();
        assert_relative_eq!(r.theta_star, 1.0 / 0.99);
    }

    #[test]
    fn theta_one_examples() {
        let r = exit_probability_bound_theta_one(&params(1.0, 1.0, 0.0, 0.0, 1.0, 5)).unwrap();
        assert_eq!(r.raw, 0.0);
        let p = params(1.0, 0.9, 0.0, 0.0, 1.0, 10);
        let r = exit_probability_bound_theta_one(&p).unwrap();
        assert_relative_eq!(r.raw, 1.0, epsilon = 1e-12);
        assert!(r.probability >= exit_probability_bound(&p).unwrap().probability);
        let r = exit_probability_bound_theta_one(&params(2.0, 0.5, 1.0, 1.0, 0.0, 0)).unwrap();
        assert_relative_eq!(r.raw, 2.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn vacuous_bound_is_clamped() {
        // h0 far below -gamma makes the raw value exceed 1.
        let r = exit_probability_bound(&params(1.0, 0.9, -0.5, 0.0, -3.0, 4)).unwrap();
        assert!(r.raw > 1.0);
        assert_eq!(r.probability, 1.0);
    }

    #[test]
    fn invalid_params_name_each_violation() {
        let err = exit_probability_bound(&params(-1.0, 1.5, 0.0, -0.1, 0.0, 3)).unwrap_err();
        match err {
            Error::InvalidParams(v) => {
                let joined = v.join("|");
                assert!(joined.contains("M must be > 0"));
                assert!(joined.contains("alpha"));
                assert!(joined.contains("gamma"));
            }
            e => panic!("unexpected {e:?}"),
        }
        assert!(matches!(
            exit_probability_bound(&params(1.0, 0.9, 0.2, 0.0, 0.5, 3)),
            Err(Error::InvalidParams(_))
        ));
        assert!(matches!(
            exit_probability_bound(&params(1.0, 0.9, 0.0, 0.0, 1.5, 3)),
            Err(Error::InvalidParams(_))
        ));
        assert!(exit_probability_bound(&params(1.0, f64::NAN, 0.0, 0.0, 0.5, 3)).is_err());
    }

    #[test]
    fn geometric_sum_near_one_falls_back() {
        assert_eq!(geometric_sum(1.0, 7), 7.0);
        let a = 1.0 - 1e-13;
        // 1 - a is exact; the series in e = 1 - a converges after three terms.
        let e = 1.0 - a;
        let expected = 1000.0 - e * 499_500.0 + e * e * 166_167_000.0;
        assert_relative_eq!(geometric_sum(a, 1000), expected, max_relative = 1e-14);
        assert_relative_eq!(geometric_sum(0.5, 3), 1.75, max_relative = 1e-15);
    }

    #[test]
    fn witness_with_barrier_at_top() {
        let p = params(1.0, 0.9, -0.05, 0.2, 1.0, 4);
        let theta = 1.05;
        let trace = supermartingale_witness(&p, theta, &[1.0; 5]).unwrap();
        for (k, w) in trace.w_values.iter().enumerate() {
            let expected: f64 = p.phi() * (k + 1..=4).map(|i| theta.powi(i as i32)).sum::<f64>();
            assert_relative_eq!(*w, expected, max_relative = 1e-14, epsilon = 1e-15);
            assert!(*w >= 0.0);
        }
    }

    #[test]
    fn witness_hand_substitution() {
        let p = params(1.0, 0.9, 0.0, 0.0, 1.0, 1);
        let theta = 1.0 / 0.9;
        let trace = supermartingale_witness(&p, theta, &[1.0, 0.5]).unwrap();
        // W0 = 0 + phi * theta, W1 = 0.5 * theta
        assert_relative_eq!(trace.w_values[0], 0.1 * theta, max_relative = 1e-14);
        assert_relative_eq!(trace.w_values[1], 0.5 * theta, max_relative = 1e-14);
    }

    #[test]
    fn witness_threshold_matches_closed_form() {
        let p = params(1.3, 0.95, -0.2, 0.4, 0.3, 12);
        let phi = p.phi();
        for theta in [1.0 + 1e-3, 1.02, 1.0 / 0.95] {
            let trace = supermartingale_witness(&p, theta, &[0.3; 13]).unwrap();
            let c = phi * theta / (theta - 1.0);
            let closed = (0..=12)
                .map(|k| (p.gamma + p.m - c) * theta.powi(k) + c * theta.powi(12))
                .fold(f64::INFINITY, f64::min);
            assert_relative_eq!(trace.lambda_star, closed, max_relative = 1e-10);
        }
        let trace = supermartingale_witness(&p, 1.0, &[0.3; 13]).unwrap();
        assert_relative_eq!(trace.lambda_star, p.m + p.gamma, max_relative = 1e-15);
        assert_eq!(trace.k_star, 12);
    }

    #[test]
    fn witness_at_optimal_theta_reproduces_bound() {
        for p in [
            params(1.0, 0.99, -0.0132, 0.1, 0.8, 100),
            params(1.0, 0.99, 0.0, 0.1, 0.8, 100),
            params(2.0, 0.8, -0.3, 0.5, 1.2, 7),
        ] {
            let r = exit_probability_bound(&p).unwrap();
            let h = vec![p.h0; p.horizon as usize + 1];
            let trace = supermartingale_witness(&p, r.theta_star, &h).unwrap();
            assert_relative_eq!(trace.ville_bound(), r.raw, max_relative = 1e-9);
        }
        let p = params(1.0, 0.9, 0.0, 0.0, 0.6, 9);
        let h = vec![p.h0; 10];
        let trace = supermartingale_witness(&p, 1.0, &h).unwrap();
        let r = exit_probability_bound_theta_one(&p).unwrap();
        assert_relative_eq!(trace.ville_bound(), r.raw, max_relative = 1e-12);
    }

    #[test]
    fn witness_rejects_bad_inputs() {
        let p = params(1.0, 0.9, 0.0, 0.0, 1.0, 2);
        assert!(matches!(
            supermartingale_witness(&p, 0.99, &[1.0; 3]),
            Err(Error::InvalidTheta { .. })
        ));
        assert!(matches!(
            supermartingale_witness(&p, 1.2, &[1.0; 3]),
            Err(Error::InvalidTheta { .. })
        ));
        assert!(matches!(
            supermartingale_witness(&p, 1.1, &[1.0; 2]),
            Err(Error::DimensionMismatch(_))
        ));
        assert!(matches!(
            supermartingale_witness(&p, 1.1, &[1.0, 1.5, 0.0]),
            Err(Error::InvalidParams(_))
        ));
    }

    fn valid_params() -> impl Strategy<Value = ExitBoundParams> {
        (0.1f64..5.0, 0.3f64..0.999, 0.0f64..1.0, 0.0f64..2.0, 0.0f64..1.0, 0u32..200).prop_map(
            |(m, alpha, dfrac, gamma, hfrac, k)| {
                let delta = m * (1.0 - alpha) - dfrac * (m + 1.0);
                let h0 = -gamma + hfrac * (m + gamma);
                ExitBoundParams::new(m, alpha, delta, gamma, h0, k)
            },
        )
    }

    proptest! {
        #[test]
        fn result_invariants(p in valid_params()) {
            let r = exit_probability_bound(&p).unwrap();
            prop_assert!((0.0..=1.0).contains(&r.probability));
            prop_assert_eq!(r.probability, r.raw.clamp(0.0, 1.0));
            if r.phi > 0.0 {
                prop_assert!(r.theta_star > 1.0 && r.theta_star <= 1.0 / p.alpha * (1.0 + 1e-12));
            }
        }

        #[test]
        fn nondecreasing_in_horizon(p in valid_params()) {
            let a = exit_probability_bound(&p).unwrap().probability;
            let b = exit_probability_bound(&ExitBoundParams { horizon: p.horizon + 1, ..p }).unwrap().probability;
            prop_assert!(b >= a - 1e-12);
        }

        #[test]
        fn nonincreasing_in_h0(p in valid_params(), frac in 0.0f64..1.0) {
            let higher = p.h0 + frac * (p.m - p.h0);
            let a = exit_probability_bound(&p).unwrap().probability;
            let b = exit_probability_bound(&ExitBoundParams { h0: higher, ..p }).unwrap().probability;
            prop_assert!(b <= a + 1e-12);
        }

        #[test]
        fn nonincreasing_in_gamma(p in valid_params(), extra in 0.0f64..2.0) {
            let a = exit_probability_bound(&p).unwrap().probability;
            let b = exit_probability_bound(&ExitBoundParams { gamma: p.gamma + extra, ..p }).unwrap().probability;
            prop_assert!(b <= a + 1e-12);
        }

        #[test]
        fn witness_is_nonnegative(p in valid_params(), tfrac in 0.0f64..1.0, seed in 0u64..1000) {
            let theta = 1.0 + tfrac * (1.0 / p.alpha - 1.0);
            let k = p.horizon.min(50);
            let p = ExitBoundParams { horizon: k, ..p };
            let h: Vec<f64> = (0..=k as u64)
                .map(|i| p.m - ((seed * 31 + i * 17) % 97) as f64 / 10.0)
                .collect();
            let trace = supermartingale_witness(&p, theta, &h).unwrap();
            prop_assert!(trace.w_values.iter().all(|&w| w >= 0.0));
            prop_assert!(trace.lambda_star > 0.0);
        }
    }
}
