//! Seeded Monte Carlo estimation of K-step exit probabilities.
//!
//! The disturbance at step `k` of trial `i` is read from stream `i`, block
//! `k` of a counter-based generator keyed by the master seed. Each draw is
//! therefore fixed by its coordinates, and results do not depend on how
//! trials are scheduled across threads.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::barriers::Barrier;
use crate::controllers::{self, FilterSpec, NominalController};
use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::stats;
use crate::systems::SystemModel;

/// How inputs are chosen during a rollout.
#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    /// Apply `k_nom` unfiltered.
    Nominal,
    Filter(FilterSpec),
}

#[derive(Debug, Clone)]
pub struct TrialConfig {
    pub system: SystemModel,
    pub barrier: Barrier,
    pub policy: Policy,
    pub nominal: NominalController,
    pub x0: DVector<f64>,
    /// Number of steps `K`.
    pub horizon: usize,
    pub n_trials: usize,
    /// Exit level: a trial exits when `h(x_k) < -gamma` for some `k <= K`.
    pub gamma: f64,
    pub master_seed: u64,
    pub record_trajectories: bool,
}

impl TrialConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n_trials < 1 {
            problems.push("n_trials must be >= 1".to_string());
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            problems.push(format!("gamma must be finite and >= 0 (got {})", self.gamma));
        }
        if self.x0.len() != self.system.state_dim() {
            problems.push(format!(
                "x0 has length {}, system state dimension is {}",
                self.x0.len(),
                self.system.state_dim()
            ));
        }
        if self.barrier.state_dim() != self.system.state_dim() {
            problems.push("barrier and system state dimensions differ".into());
        }
        if let Policy::Filter(spec) = &self.policy {
            if let Err(Error::InvalidParams(p)) = spec.validate() {
                problems.extend(p);
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidParams(problems))
        }
    }
}

/// States `x_0..=x_K` and barrier values of one rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub h: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialBatch {
    pub n_trials: usize,
    pub horizon: usize,
    pub exit_count: usize,
    pub exit_frequency: f64,
    pub cp_upper_99: f64,
    pub min_h_per_trial: Vec<f64>,
    pub first_exit_step: Vec<Option<usize>>,
    pub trajectories: Option<Vec<Trajectory>>,
    /// Filter calls that returned a best-effort input, over all trials.
    pub best_effort_steps: usize,
}

impl TrialBatch {
    /// Fraction of trials that exited at or before step `k`.
    pub fn exit_frequency_at(&self, k: usize) -> f64 {
        let exits = self.first_exit_step.iter().filter(|s| matches!(s, Some(j) if *j <= k)).count();
        exits as f64 / self.n_trials as f64
    }

    /// Fraction of trials still safe after each step `0..=K`.
    pub fn survival_curve(&self) -> Vec<f64> {
        (0..=self.horizon).map(|k| 1.0 - self.exit_frequency_at(k)).collect()
    }
}

struct TrialOutcome {
    min_h: f64,
    first_exit: Option<usize>,
    best_effort: usize,
    trajectory: Option<Trajectory>,
}

fn run_trial(cfg: &TrialConfig, rng: &CounterRng, trial: usize) -> Result<TrialOutcome> {
    let threshold = -cfg.gamma;
    let mut x = cfg.x0.clone();
    let mut h = cfg.barrier.value(&x);
    let mut min_h = h;
    let mut first_exit = (h < threshold).then_some(0);
    let mut best_effort = 0;
    let mut trajectory = cfg.record_trajectories.then(|| Trajectory {
        states: vec![x.clone()],
        h: vec![h],
    });
    for k in 0..cfg.horizon {
        let u = match &cfg.policy {
            Policy::Nominal => cfg.nominal.command(&x, k),
            Policy::Filter(spec) => {
                match controllers::filter(spec, &cfg.system, &cfg.barrier, &cfg.nominal, &x, k) {
                    Ok(r) => {
                        best_effort += r.best_effort as usize;
                        r.input
                    }
                    Err(Error::Infeasible { max_slack }) => {
                        return Err(Error::ControllerInfeasible { trial, step: k, max_slack })
                    }
                    Err(e) => return Err(e),
                }
            }
        };
        let d = cfg.system.disturbance().sample(rng, trial as u64, k as u64);
        x = cfg.system.step_with(&x, &u, &d);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { trial, step: k + 1 });
        }
        h = cfg.barrier.value(&x);
        min_h = min_h.min(h);
        if first_exit.is_none() && h < threshold {
            first_exit = Some(k + 1);
        }
        if let Some(t) = trajectory.as_mut() {
            t.states.push(x.clone());
            t.h.push(h);
        }
    }
    Ok(TrialOutcome { min_h, first_exit, best_effort, trajectory })
}

/// Runs `n_trials` closed-loop rollouts in parallel.
///
/// If any trial fails, the error of the lowest-indexed failing trial is
/// returned.
pub fn run_batch(cfg: &TrialConfig) -> Result<TrialBatch> {
    cfg.validate()?;
    let rng = CounterRng::new(cfg.master_seed);
    let outcomes: Vec<Result<TrialOutcome>> =
        (0..cfg.n_trials).into_par_iter().map(|i| run_trial(cfg, &rng, i)).collect();
    let outcomes = outcomes.into_iter().collect::<Result<Vec<_>>>()?;

    let exit_count = outcomes.iter().filter(|o| o.first_exit.is_some()).count();
    let cp_upper_99 = stats::clopper_pearson_upper(exit_count as u64, cfg.n_trials as u64, 0.99)?;
    let record = cfg.record_trajectories;
    let best_effort_steps = outcomes.iter().map(|o| o.best_effort).sum();
    let min_h_per_trial = outcomes.iter().map(|o| o.min_h).collect();
    let first_exit_step = outcomes.iter().map(|o| o.first_exit).collect();
    let trajectories = record.then(|| outcomes.into_iter().filter_map(|o| o.trajectory).collect());
    Ok(TrialBatch {
        n_trials: cfg.n_trials,
        horizon: cfg.horizon,
        exit_count,
        exit_frequency: exit_count as f64 / cfg.n_trials as f64,
        cp_upper_99,
        min_h_per_trial,
        first_exit_step,
        trajectories,
        best_effort_steps,
    })
}
