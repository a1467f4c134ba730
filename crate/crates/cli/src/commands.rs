//! The `bound`, `simulate` and `compare` subcommands.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use stochbarrier::bounds::{self, ExitBoundParams};
use stochbarrier::montecarlo::{self, Policy, TrialBatch, TrialConfig};
use stochbarrier::stats;

use crate::config::{self, Config, ControllerSection, GridPoint, RuleContext};
use crate::error::CliError;

/// Flags shared by all subcommands.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub trajectories: bool,
    pub certify: bool,
}

/// Applies command-line overrides and writes `resolved_config.toml`.
pub fn resolve(mut cfg: Config, opts: &RunOptions) -> Result<(Config, PathBuf), CliError> {
    if let Some(dir) = &opts.out_dir {
        cfg.output.dir = Some(dir.display().to_string());
    }
    if let Some(seed) = opts.seed {
        if let Some(t) = cfg.trials.as_mut() {
            t.seed = seed;
        }
    }
    if opts.trajectories {
        cfg.output.trajectories = true;
    }
    if opts.certify {
        for c in &mut cfg.controllers {
            if c.mode != "nominal" {
                c.infeasible_policy = Some("error".into());
            }
        }
    }
    let dir = PathBuf::from(cfg.output.dir.clone().unwrap_or_else(|| "out".into()));
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("resolved_config.toml"), cfg.to_toml())?;
    Ok((cfg, dir))
}

fn csv_writer(path: &Path, schema: &str) -> Result<csv::Writer<File>, CliError> {
    let mut file = File::create(path)?;
    writeln!(file, "# stochbarrier {schema} v1")?;
    Ok(csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(file))
}

fn rule_sigma(cfg: &Config, point: &GridPoint) -> Option<f64> {
    point.sigma.or_else(|| cfg.system.as_ref().and_then(|s| s.sigma))
}

/// One row per grid point of the `[bound]` section.
pub fn cmd_bound(cfg: &Config, dir: &Path) -> Result<PathBuf, CliError> {
    let base = cfg.bound_section()?;
    if cfg.sweep.x0.is_some() || cfg.sweep.c_j.is_some() {
        return Err(CliError::Config("sweep.x0 and sweep.c_j do not apply to bound".into()));
    }
    let path = dir.join("bound.csv");
    let mut out = csv_writer(&path, "bound")?;
    out.write_record(["M", "alpha", "delta", "gamma", "h0", "K", "case", "raw", "probability"])?;
    for point in cfg.sweep.grid()? {
        let psi = match (&cfg.system, &cfg.barrier) {
            (Some(_), Some(_)) => {
                let system = cfg.build_system(point.sigma)?;
                let barrier = cfg.build_barrier(system.state_dim())?;
                config::psi(&system, &barrier)
            }
            _ => None,
        };
        let ctx = RuleContext { sigma: rule_sigma(cfg, &point), psi };
        let params = ExitBoundParams::new(
            base.m,
            match point.alpha {
                Some(a) => a,
                None => base.alpha.resolve("bound.alpha", ctx)?,
            },
            base.delta.resolve("bound.delta", ctx)?,
            point.gamma.unwrap_or(base.gamma),
            point.h0.unwrap_or(base.h0),
            point.horizon.unwrap_or(base.horizon),
        );
        let r = bounds::exit_probability_bound(&params)
            .map_err(|e| CliError::Config(format!("bound at {}: {e}", point.label())))?;
        out.write_record([
            params.m.to_string(),
            params.alpha.to_string(),
            params.delta.to_string(),
            params.gamma.to_string(),
            params.h0.to_string(),
            params.horizon.to_string(),
            r.case.to_string(),
            r.raw.to_string(),
            r.probability.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(path)
}

/// A fully resolved experiment for one controller at one grid point.
struct Experiment {
    id: String,
    trial: TrialConfig,
    bound: Option<ExitBoundParams>,
}

fn build_experiment(
    cfg: &Config,
    controller: &ControllerSection,
    point: &GridPoint,
    certify: bool,
) -> Result<Experiment, CliError> {
    let trials = cfg.trials()?;
    let system = cfg.build_system(point.sigma)?;
    let barrier = cfg.build_barrier(system.state_dim())?;
    let nominal = cfg.build_nominal(system.input_dim())?;
    let psi = config::psi(&system, &barrier);
    let ctx = RuleContext { sigma: rule_sigma(cfg, point), psi };
    let spec = controller.filter_spec(point, ctx, certify)?;
    let x0 = DVector::from_vec(point.x0.clone().unwrap_or_else(|| trials.x0.clone()));
    let horizon = point.horizon.unwrap_or(trials.horizon);
    let gamma = point.gamma.unwrap_or(trials.gamma);

    let bound = spec.as_ref().and_then(|s| config::certified_delta(s, psi)).map(|delta| {
        ExitBoundParams::new(
            barrier.upper_bound(),
            spec.as_ref().map_or(1.0, |s| s.alpha),
            delta,
            gamma,
            barrier.value(&x0),
            horizon,
        )
    });
    let bound = bound.filter(|p| p.validate().is_ok());
    let label = point.label();
    let id = if label.is_empty() { controller.id.clone() } else { format!("{}/{label}", controller.id) };
    let trial = TrialConfig {
        system,
        barrier,
        policy: spec.map_or(Policy::Nominal, Policy::Filter),
        nominal,
        x0,
        horizon: horizon as usize,
        n_trials: trials.n_trials,
        gamma,
        master_seed: trials.seed,
        record_trajectories: cfg.output.trajectories,
    };
    trial.validate().map_err(|e| CliError::Config(format!("{id}: {e}")))?;
    Ok(Experiment { id, trial, bound })
}

fn file_stem(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' }).collect()
}

fn write_trajectories(dir: &Path, id: &str, batch: &TrialBatch, cfg: &TrialConfig) -> Result<PathBuf, CliError> {
    let path = dir.join(format!("trajectories_{}.csv", file_stem(id)));
    let mut out = csv_writer(&path, "trajectories")?;
    let mut header = vec!["trial".to_string(), "step".to_string()];
    header.extend((0..cfg.system.state_dim()).map(|i| format!("x_{i}")));
    header.push("h".into());
    out.write_record(&header)?;
    for (trial, t) in batch.trajectories.iter().flatten().enumerate() {
        for (step, (x, h)) in t.states.iter().zip(&t.h).enumerate() {
            let mut row = vec![trial.to_string(), step.to_string()];
            row.extend(x.iter().map(|v| v.to_string()));
            row.push(h.to_string());
            out.write_record(&row)?;
        }
    }
    out.flush()?;
    Ok(path)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Runs every controller at every grid point and writes `summary.csv`.
///
/// With `certify`, rows whose exit frequency exceeds the bound plus the
/// Clopper-Pearson margin turn into [`CliError::Unsound`] after the files
/// are written.
pub fn cmd_simulate(cfg: &Config, dir: &Path, certify: bool) -> Result<Vec<PathBuf>, CliError> {
    cfg.validate_controllers()?;
    if cfg.controllers.is_empty() {
        return Err(CliError::Config("simulate needs at least one [[controllers]] entry".into()));
    }
    if cfg.sweep.h0.is_some() {
        return Err(CliError::Config("sweep.h0 applies to bound only; sweep x0 instead".into()));
    }
    let summary = dir.join("summary.csv");
    let mut out = csv_writer(&summary, "simulate-summary")?;
    out.write_record([
        "config_id",
        "n_trials",
        "exit_count",
        "exit_frequency",
        "cp_upper_99",
        "bound_probability",
        "sound",
        "median_min_h",
        "mean_min_h",
    ])?;
    let mut written = vec![summary.clone()];
    let mut unsound = Vec::new();
    for controller in &cfg.controllers {
        for point in cfg.sweep.grid()? {
            let exp = build_experiment(cfg, controller, &point, false)?;
            let batch = montecarlo::run_batch(&exp.trial)?;
            let bound = match &exp.bound {
                Some(p) => Some(bounds::exit_probability_bound(p)?.probability),
                None => None,
            };
            let sound = bound.map(|b| batch.exit_frequency <= b + (batch.cp_upper_99 - batch.exit_frequency));
            if sound == Some(false) {
                unsound.push(exp.id.clone());
            }
            out.write_record([
                exp.id.clone(),
                batch.n_trials.to_string(),
                batch.exit_count.to_string(),
                batch.exit_frequency.to_string(),
                batch.cp_upper_99.to_string(),
                bound.map_or(String::new(), |b| b.to_string()),
                sound.map_or(String::new(), |s| s.to_string()),
                stats::median(&batch.min_h_per_trial).to_string(),
                mean(&batch.min_h_per_trial).to_string(),
            ])?;
            if exp.trial.record_trajectories {
                written.push(write_trajectories(dir, &exp.id, &batch, &exp.trial)?);
            }
        }
    }
    out.flush()?;
    if certify && !unsound.is_empty() {
        return Err(CliError::Unsound(unsound));
    }
    Ok(written)
}

/// Per-step survival fractions for each controller on a shared noise stream.
pub fn cmd_compare(cfg: &Config, dir: &Path) -> Result<PathBuf, CliError> {
    cfg.validate_controllers()?;
    if cfg.controllers.len() < 2 {
        return Err(CliError::Config("compare needs at least two [[controllers]] entries".into()));
    }
    if !cfg.sweep.is_empty() {
        return Err(CliError::Config("compare does not take sweep axes".into()));
    }
    let point = GridPoint::default();
    let mut curves = Vec::new();
    let mut bound_curves = Vec::new();
    let mut horizon = 0;
    for controller in &cfg.controllers {
        let exp = build_experiment(cfg, controller, &point, false)?;
        horizon = exp.trial.horizon;
        let batch = montecarlo::run_batch(&exp.trial)?;
        curves.push((exp.id.clone(), batch.survival_curve()));
        if let Some(p) = exp.bound {
            let per_step = (0..=horizon as u32)
                .map(|k| bounds::exit_probability_bound(&ExitBoundParams { horizon: k, ..p }).map(|r| r.probability))
                .collect::<Result<Vec<_>, _>>()?;
            bound_curves.push((exp.id, per_step));
        }
    }
    let path = dir.join("compare.csv");
    let mut out = csv_writer(&path, "compare")?;
    let mut header = vec!["step".to_string()];
    header.extend(curves.iter().map(|(id, _)| format!("survival_{id}")));
    header.extend(bound_curves.iter().map(|(id, _)| format!("bound_{id}")));
    out.write_record(&header)?;
    for k in 0..=horizon {
        let mut row = vec![k.to_string()];
        row.extend(curves.iter().map(|(_, c)| c[k].to_string()));
        row.extend(bound_curves.iter().map(|(_, c)| c[k].to_string()));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(path)
}
