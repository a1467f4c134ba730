//! Experiment configuration files.
//!
//! A config is TOML with the sections `system`, `barrier`, `nominal`,
//! `controllers` (an array of tables), `trials`, `bound`, `sweep` and
//! `output`. Scalar controller and bound parameters may be given as numbers
//! or as one of the rules in [`Param`].

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use stochbarrier::barriers::{self, Barrier, PolytopeSpec};
use stochbarrier::controllers::{FilterMode, FilterSpec, InfeasiblePolicy, NominalController};
use stochbarrier::jensen;
use stochbarrier::systems::{self, SystemModel};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<SystemSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub barrier: Option<BarrierSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nominal: Option<NominalSection>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub controllers: Vec<ControllerSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trials: Option<TrialsSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound: Option<BoundSection>,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    /// `linear_1d`, `pendulum`, `double_integrator` or `unicycle`.
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_mean: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_trace: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BarrierSection {
    /// `interval`, `pendulum`, `corridor`, `unit_square`, `quadratic`,
    /// `affine` or `polytope`.
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub half_width: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NominalSection {
    /// `zero`, `constant` or `unicycle_heading`.
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speed: Option<f64>,
}

/// A number, or a rule evaluated per grid point:
/// `psi` (the Jensen gap bound of the system and barrier), `one_minus_psi`,
/// `sigma_sq` and `one_minus_sigma_sq`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Param {
    Value(f64),
    Rule(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSection {
    pub id: String,
    /// `nominal` or a filter mode: `dtcbf_op`, `ced`, `jed`, `ed_quad`, `ed_lse`.
    pub mode: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<Param>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_j: Option<Param>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solver_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iter: Option<usize>,
    /// `error` or `best_effort`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub infeasible_policy: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialsSection {
    pub x0: Vec<f64>,
    pub horizon: u32,
    pub n_trials: usize,
    #[serde(default)]
    pub gamma: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundSection {
    pub m: f64,
    pub alpha: Param,
    pub delta: Param,
    #[serde(default)]
    pub gamma: f64,
    pub h0: f64,
    pub horizon: u32,
}

/// Grid axes; every listed axis must be nonempty. The grid is their
/// Cartesian product in the field order below.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_j: Option<Vec<f64>>,
    /// Bound sweeps only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h0: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<String>,
    #[serde(default)]
    pub trajectories: bool,
}

/// One point of the sweep grid. `None` means the axis is not swept.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GridPoint {
    pub sigma: Option<f64>,
    pub gamma: Option<f64>,
    pub horizon: Option<u32>,
    pub x0: Option<Vec<f64>>,
    pub alpha: Option<f64>,
    pub c_j: Option<f64>,
    pub h0: Option<f64>,
}

fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| x.to_string()).collect();
    format!("[{}]", parts.join(";"))
}

impl GridPoint {
    /// `axis=value` pairs joined by `/`; empty for the base point.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if let Some(v) = self.sigma {
            parts.push(format!("sigma={v}"));
        }
        if let Some(v) = self.gamma {
            parts.push(format!("gamma={v}"));
        }
        if let Some(v) = self.horizon {
            parts.push(format!("K={v}"));
        }
        if let Some(v) = &self.x0 {
            parts.push(format!("x0={}", fmt_vec(v)));
        }
        if let Some(v) = self.alpha {
            parts.push(format!("alpha={v}"));
        }
        if let Some(v) = self.c_j {
            parts.push(format!("c_j={v}"));
        }
        if let Some(v) = self.h0 {
            parts.push(format!("h0={v}"));
        }
        parts.join("/")
    }
}

fn axis<T: Clone>(name: &str, values: &Option<Vec<T>>) -> Result<Vec<Option<T>>, CliError> {
    match values {
        None => Ok(vec![None]),
        Some(v) if v.is_empty() => Err(CliError::Config(format!("sweep.{name}: axis is empty"))),
        Some(v) => Ok(v.iter().cloned().map(Some).collect()),
    }
}

impl SweepSection {
    pub fn is_empty(&self) -> bool {
        *self == SweepSection::default()
    }

    pub fn grid(&self) -> Result<Vec<GridPoint>, CliError> {
        let mut points = Vec::new();
        for sigma in axis("sigma", &self.sigma)? {
            for gamma in axis("gamma", &self.gamma)? {
                for horizon in axis("horizon", &self.horizon)? {
                    for x0 in axis("x0", &self.x0)? {
                        for alpha in axis("alpha", &self.alpha)? {
                            for c_j in axis("c_j", &self.c_j)? {
                                for h0 in axis("h0", &self.h0)? {
                                    points.push(GridPoint {
                                        sigma,
                                        gamma,
                                        horizon,
                                        x0: x0.clone(),
                                        alpha,
                                        c_j,
                                        h0,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(points)
    }
}

/// Quantities the parameter rules refer to.
#[derive(Debug, Clone, Copy, Default)]
pub struct RuleContext {
    pub sigma: Option<f64>,
    pub psi: Option<f64>,
}

impl Param {
    pub fn resolve(&self, field: &str, ctx: RuleContext) -> Result<f64, CliError> {
        let need = |v: Option<f64>, what: &str| {
            v.ok_or_else(|| CliError::Config(format!("{field}: rule needs {what}, which is not defined here")))
        };
        match self {
            Param::Value(v) => Ok(*v),
            Param::Rule(rule) => match rule.as_str() {
                "psi" => need(ctx.psi, "psi"),
                "one_minus_psi" => Ok(1.0 - need(ctx.psi, "psi")?),
                "sigma_sq" => need(ctx.sigma, "sigma").map(|s| s * s),
                "one_minus_sigma_sq" => need(ctx.sigma, "sigma").map(|s| 1.0 - s * s),
                other => Err(CliError::Config(format!(
                    "{field}: unknown rule {other:?} (expected psi, one_minus_psi, sigma_sq or one_minus_sigma_sq)"
                ))),
            },
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    fn section<'a, T>(value: &'a Option<T>, name: &str) -> Result<&'a T, CliError> {
        value.as_ref().ok_or_else(|| CliError::Config(format!("missing [{name}] section")))
    }

    pub fn trials(&self) -> Result<&TrialsSection, CliError> {
        Self::section(&self.trials, "trials")
    }

    pub fn bound_section(&self) -> Result<&BoundSection, CliError> {
        Self::section(&self.bound, "bound")
    }

    /// Builds the system, with `sigma` overriding `system.sigma`.
    pub fn build_system(&self, sigma: Option<f64>) -> Result<SystemModel, CliError> {
        let s = Self::section(&self.system, "system")?;
        let dt = || s.dt.ok_or_else(|| CliError::Config(format!("system.dt is required for {}", s.kind)));
        if sigma.is_some() && s.kind != "linear_1d" {
            return Err(CliError::Config(format!("sweep.sigma applies only to linear_1d, not {}", s.kind)));
        }
        let model = match s.kind.as_str() {
            "linear_1d" => {
                let sigma = sigma.or(s.sigma).ok_or_else(|| {
                    CliError::Config("system.sigma is required for linear_1d".into())
                })?;
                systems::linear_1d(sigma)?
            }
            "pendulum" => systems::pendulum(dt()?)?,
            "double_integrator" => systems::double_integrator(dt()?)?,
            "unicycle" => {
                let dt = dt()?;
                match (&s.noise_mean, s.noise_trace) {
                    (None, None) => systems::unicycle(dt)?,
                    (mean, trace) => {
                        let mean = mean.clone().unwrap_or_else(|| systems::UNICYCLE_NOISE_MEAN.to_vec());
                        let mean: [f64; 3] = mean.try_into().map_err(|_| {
                            CliError::Config("system.noise_mean must have 3 entries".into())
                        })?;
                        systems::unicycle_with_noise(dt, &mean, trace.unwrap_or(systems::UNICYCLE_NOISE_TRACE))?
                    }
                }
            }
            other => {
                return Err(CliError::Config(format!(
                    "system.kind: unknown system {other:?} (expected linear_1d, pendulum, double_integrator or unicycle)"
                )))
            }
        };
        Ok(model)
    }

    pub fn build_barrier(&self, state_dim: usize) -> Result<Barrier, CliError> {
        let b = Self::section(&self.barrier, "barrier")?;
        let missing = |field: &str| CliError::Config(format!("barrier.{field} is required for {}", b.kind));
        let matrix = |rows: &Vec<Vec<f64>>, field: &str| -> Result<DMatrix<f64>, CliError> {
            let ncols = rows.first().map_or(0, Vec::len);
            if rows.iter().any(|r| r.len() != ncols) {
                return Err(CliError::Config(format!("barrier.{field}: rows have different lengths")));
            }
            Ok(DMatrix::from_row_iterator(rows.len(), ncols, rows.iter().flatten().copied()))
        };
        let barrier = match b.kind.as_str() {
            "interval" => {
                let hw = b.half_width.unwrap_or(1.0);
                let mut p = DMatrix::zeros(state_dim, state_dim);
                p[(0, 0)] = 1.0 / (hw * hw);
                barriers::quadratic_barrier(p, 1.0)?
            }
            "pendulum" => barriers::pendulum_barrier(),
            "corridor" => barriers::corridor_barrier(
                state_dim,
                b.axis.ok_or_else(|| missing("axis"))?,
                b.half_width.ok_or_else(|| missing("half_width"))?,
            )?,
            "unit_square" => barriers::polytope_barrier(PolytopeSpec::square_on_positions(
                state_dim,
                b.half_width.unwrap_or(0.5),
            )?),
            "quadratic" => barriers::quadratic_barrier(
                matrix(b.p.as_ref().ok_or_else(|| missing("p"))?, "p")?,
                b.offset.ok_or_else(|| missing("offset"))?,
            )?,
            "affine" => barriers::affine_barrier(
                DVector::from_vec(b.weights.clone().ok_or_else(|| missing("weights"))?),
                b.offset.unwrap_or(0.0),
            ),
            "polytope" => barriers::polytope_barrier(PolytopeSpec::new(
                matrix(b.c.as_ref().ok_or_else(|| missing("c"))?, "c")?,
                DVector::from_vec(b.w.clone().ok_or_else(|| missing("w"))?),
            )?),
            other => {
                return Err(CliError::Config(format!(
                    "barrier.kind: unknown barrier {other:?} (expected interval, pendulum, corridor, unit_square, quadratic, affine or polytope)"
                )))
            }
        };
        if barrier.state_dim() != state_dim {
            return Err(CliError::Config(format!(
                "barrier has state dimension {}, system has {state_dim}",
                barrier.state_dim()
            )));
        }
        Ok(barrier)
    }

    pub fn build_nominal(&self, input_dim: usize) -> Result<NominalController, CliError> {
        let Some(n) = &self.nominal else {
            return Ok(NominalController::zero(input_dim));
        };
        let nominal = match n.kind.as_str() {
            "zero" => NominalController::zero(input_dim),
            "constant" => {
                let v = n.value.clone().ok_or_else(|| {
                    CliError::Config("nominal.value is required for constant".into())
                })?;
                if v.len() != input_dim {
                    return Err(CliError::Config(format!(
                        "nominal.value has {} entries, the system has {input_dim} inputs",
                        v.len()
                    )));
                }
                NominalController::constant(DVector::from_vec(v))
            }
            "unicycle_heading" => {
                if input_dim != 3 {
                    return Err(CliError::Config("unicycle_heading needs a 3-input system".into()));
                }
                NominalController::unicycle_heading(n.speed.unwrap_or(0.2))
            }
            other => {
                return Err(CliError::Config(format!(
                    "nominal.kind: unknown controller {other:?} (expected zero, constant or unicycle_heading)"
                )))
            }
        };
        Ok(nominal)
    }

    /// Checks everything that does not depend on a grid point.
    pub fn validate_controllers(&self) -> Result<(), CliError> {
        let mut seen = std::collections::HashSet::new();
        for c in &self.controllers {
            if !seen.insert(c.id.as_str()) {
                return Err(CliError::Config(format!("controllers: duplicate id {:?}", c.id)));
            }
            if c.mode != "nominal" && FilterMode::parse(&c.mode).is_none() {
                return Err(CliError::Config(format!(
                    "controllers[{}].mode: unknown mode {:?} (expected nominal, dtcbf_op, ced, jed, ed_quad or ed_lse)",
                    c.id, c.mode
                )));
            }
            if let Some(p) = &c.infeasible_policy {
                if p != "error" && p != "best_effort" {
                    return Err(CliError::Config(format!(
                        "controllers[{}].infeasible_policy: expected error or best_effort, got {p:?}",
                        c.id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// `(lambda_max / 2) tr(cov d)` when the barrier has a finite curvature bound.
pub fn psi(system: &SystemModel, barrier: &Barrier) -> Option<f64> {
    let lambda = barrier.hessian_norm_bound();
    if !lambda.is_finite() {
        return None;
    }
    jensen::jensen_gap_hessian(lambda, system.disturbance()).ok().map(|g| g.psi)
}

impl ControllerSection {
    /// `None` for the unfiltered nominal controller.
    pub fn filter_spec(
        &self,
        point: &GridPoint,
        ctx: RuleContext,
        certify: bool,
    ) -> Result<Option<FilterSpec>, CliError> {
        if self.mode == "nominal" {
            return Ok(None);
        }
        let mode = FilterMode::parse(&self.mode)
            .ok_or_else(|| CliError::Config(format!("controllers[{}].mode: unknown mode", self.id)))?;
        let alpha = match (point.alpha, &self.alpha) {
            (Some(a), _) => a,
            (None, Some(p)) => p.resolve(&format!("controllers[{}].alpha", self.id), ctx)?,
            (None, None) => {
                return Err(CliError::Config(format!("controllers[{}].alpha is required", self.id)))
            }
        };
        let c_j = match (point.c_j, &self.c_j) {
            (Some(c), _) => c,
            (None, Some(p)) => p.resolve(&format!("controllers[{}].c_j", self.id), ctx)?,
            (None, None) => 0.0,
        };
        let mut spec = FilterSpec::new(mode, alpha, c_j);
        if let Some(tol) = self.solver_tol {
            spec.solver_tol = tol;
        }
        if let Some(it) = self.max_iter {
            spec.max_iter = it;
        }
        spec.infeasible_policy = match (certify, self.infeasible_policy.as_deref()) {
            (true, _) | (false, Some("error")) => InfeasiblePolicy::Error,
            _ => InfeasiblePolicy::BestEffort,
        };
        spec.validate().map_err(|e| CliError::Config(format!("controllers[{}]: {e}", self.id)))?;
        Ok(Some(spec))
    }
}

/// Offset `delta` certified by a filter mode, when one is available.
pub fn certified_delta(spec: &FilterSpec, psi: Option<f64>) -> Option<f64> {
    match spec.mode {
        FilterMode::EdQuad | FilterMode::EdLse => Some(0.0),
        FilterMode::Jed => psi.map(|p| spec.c_j - p),
        FilterMode::Ced => psi.map(|p| -p),
        FilterMode::DtcbfOp => None,
    }
}
