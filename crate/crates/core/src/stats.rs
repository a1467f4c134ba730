//! Exact binomial confidence limits and a one-sided two-sample KS test.

use statrs::distribution::{Beta, ContinuousCDF};

use crate::error::{Error, Result};

fn check(successes: u64, trials: u64, confidence: f64) -> Result<()> {
    if trials == 0 || successes > trials {
        return Err(Error::InvalidCounts { successes, trials });
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::InvalidConfidence(confidence));
    }
    Ok(())
}

/// One-sided Clopper-Pearson upper limit on a binomial proportion.
pub fn clopper_pearson_upper(successes: u64, trials: u64, confidence: f64) -> Result<f64> {
    check(successes, trials, confidence)?;
    if successes == trials {
        return Ok(1.0);
    }
    if successes == 0 {
        return Ok(-(((1.0 - confidence).ln() / trials as f64).exp_m1()));
    }
    let beta = Beta::new((successes + 1) as f64, (trials - successes) as f64)
        .expect("positive shape parameters");
    Ok(beta.inverse_cdf(confidence))
}

/// One-sided Clopper-Pearson lower limit on a binomial proportion.
pub fn clopper_pearson_lower(successes: u64, trials: u64, confidence: f64) -> Result<f64> {
    check(successes, trials, confidence)?;
    if successes == 0 {
        return Ok(0.0);
    }
    if successes == trials {
        return Ok((1.0 - confidence).powf(1.0 / trials as f64));
    }
    let beta = Beta::new(successes as f64, (trials - successes + 1) as f64)
        .expect("positive shape parameters");
    Ok(beta.inverse_cdf(1.0 - confidence))
}

/// Result of [`ks_dominance`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsDominance {
    /// `sup_x (F_lower(x) - F_upper(x))`.
    pub statistic: f64,
    pub critical_value: f64,
    /// Evidence at the requested level that `upper` is stochastically larger.
    pub significant: bool,
}

fn ecdf_at(sorted: &[f64], x: f64) -> f64 {
    sorted.partition_point(|&v| v <= x) as f64 / sorted.len() as f64
}

/// One-sided two-sample Kolmogorov-Smirnov test of whether `upper` is
/// stochastically larger than `lower`, using the asymptotic critical value
/// `sqrt(ln(1/level) / 2) sqrt((n + m) / (n m))`.
pub fn ks_dominance(upper: &[f64], lower: &[f64], level: f64) -> Result<KsDominance> {
    if upper.is_empty() || lower.is_empty() {
        return Err(Error::InvalidParams(vec!["samples must be nonempty".into()]));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidConfidence(level));
    }
    let sort = |s: &[f64]| {
        let mut v = s.to_vec();
        v.sort_by(f64::total_cmp);
        v
    };
    let (u, l) = (sort(upper), sort(lower));
    let statistic = u
        .iter()
        .chain(l.iter())
        .map(|&x| ecdf_at(&l, x) - ecdf_at(&u, x))
        .fold(0.0f64, f64::max);
    let (n, m) = (u.len() as f64, l.len() as f64);
    let critical_value = (level.recip().ln() / 2.0).sqrt() * ((n + m) / (n * m)).sqrt();
    Ok(KsDominance { statistic, critical_value, significant: statistic > critical_value })
}

/// Median of a sample (mean of the two middle values for even lengths).
pub fn median(sample: &[f64]) -> f64 {
    if sample.is_empty() {
        return f64::NAN;
    }
    let mut v = sample.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
