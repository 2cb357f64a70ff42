//! Run configuration: a TOML file with one table per pipeline stage.

use crate::error::CliError;
use nalgebra::DMatrix;
use oclab_core::costs::CostSpec;
use oclab_core::field::UniformGrid;
use oclab_core::solvers::SolverConfig;
use oclab_core::systems::{
    cart_pole, discretize, double_integrator, CartPoleParams, ControlAffineSystem, DiscreteSystem, Scheme,
};
use oclab_core::trajopt::ShootingSettings;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Output directory used when `--out` is not given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<String>,
    pub system: SystemConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub discretization: Option<DiscretizationConfig>,
    pub clf: ClfConfig,
    #[serde(default)]
    pub costs: Vec<CostConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solver: Option<SolverConfig>,
    #[serde(default)]
    pub rollouts: RolloutConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shooting: Option<ShootingConfig>,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub robustness: Option<RobustnessConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemConfig {
    DoubleIntegrator {
        #[serde(default = "default_u_max")]
        u_max: f64,
    },
    CartPole {
        #[serde(default)]
        params: CartPoleParams,
    },
}

fn default_u_max() -> f64 {
    3.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscretizationConfig {
    pub h: f64,
    #[serde(default = "default_scheme")]
    pub scheme: Scheme,
}

fn default_scheme() -> Scheme {
    Scheme::Euler
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClfConfig {
    /// Row-major state weight.
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub certify_radius: Option<f64>,
    #[serde(default = "default_samples")]
    pub samples: usize,
}

fn default_samples() -> usize {
    4000
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostVariant {
    NominalCt,
    NominalDt,
    PracticalDt,
}

/// One cost specification; `lambda` may be absolute or a fraction of the
/// certified `α`, resolved after synthesis.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    pub variant: CostVariant,
    #[serde(default = "one")]
    pub beta: f64,
    pub rho: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_sq: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_vdot: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_u: Option<f64>,
}

fn one() -> f64 {
    1.0
}

impl CostConfig {
    pub fn label(&self) -> &'static str {
        match self.variant {
            CostVariant::NominalCt => "nominal_ct",
            CostVariant::NominalDt => "nominal_dt",
            CostVariant::PracticalDt => "practical_dt",
        }
    }

    /// Builds the core cost spec and checks it against the certified rate.
    pub fn resolve(&self, index: usize, alpha: f64) -> Result<CostSpec, CliError> {
        let field = |name: &str| format!("costs[{index}].{name}");
        let need = |v: Option<f64>, name: &str| {
            v.ok_or_else(|| CliError::Config(format!("{}: required for variant {}", field(name), self.label())))
        };
        let lambda = match (self.lambda, self.lambda_fraction) {
            (Some(l), None) => l,
            (None, Some(f)) => {
                if !(f > 0.0 && f <= 1.0) {
                    return Err(CliError::Config(format!("{}: must lie in (0, 1], got {f}", field("lambda_fraction"))));
                }
                f * alpha
            }
            _ => {
                return Err(CliError::Config(format!(
                    "{}: give exactly one of `lambda` and `lambda_fraction`",
                    field("lambda")
                )))
            }
        };
        let spec = match self.variant {
            CostVariant::NominalCt => CostSpec::NominalCt {
                beta: self.beta,
                rho: self.rho,
                lambda,
                gamma: need(self.gamma, "gamma")?,
            },
            CostVariant::NominalDt => CostSpec::NominalDt {
                beta: self.beta,
                rho: self.rho,
                lambda,
                delta: need(self.delta, "delta")?,
            },
            CostVariant::PracticalDt => CostSpec::PracticalDt {
                beta: self.beta,
                rho: self.rho,
                lambda,
                delta: need(self.delta, "delta")?,
                sigma_sq: need(self.sigma_sq, "sigma_sq")?,
                sigma_vdot: need(self.sigma_vdot, "sigma_vdot")?,
                w_u: need(self.w_u, "w_u")?,
            },
        };
        spec.validate(alpha)
            .map_err(|e| CliError::Config(format!("costs[{index}]: {e}")))?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutConfig {
    pub count: usize,
    /// Initial states sit on `V = level_fraction·c`.
    pub level_fraction: f64,
    /// Continuous time: simulated seconds and RK4 step.
    pub duration: f64,
    pub h: f64,
    /// Discrete time: number of steps.
    pub steps: usize,
    /// Golden-section refinement of the greedy control.
    pub refine: bool,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            count: 20,
            level_fraction: 0.95,
            duration: 10.0,
            h: 0.02,
            steps: 100,
            refine: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShootingConfig {
    pub x0: Vec<f64>,
    pub horizon: f64,
    pub n_segments: usize,
    pub substeps_per_segment: usize,
    pub penalty_weight: f64,
    pub budget: usize,
    #[serde(default = "default_defect_tol")]
    pub defect_tol: f64,
    #[serde(default = "default_rounds")]
    pub penalty_rounds: usize,
}

fn default_defect_tol() -> f64 {
    1e-4
}

fn default_rounds() -> usize {
    5
}

impl ShootingConfig {
    pub fn settings(&self) -> ShootingSettings {
        ShootingSettings {
            horizon: self.horizon,
            n_segments: self.n_segments,
            substeps_per_segment: self.substeps_per_segment,
            penalty_weight: self.penalty_weight,
            budget: self.budget,
            defect_tol: self.defect_tol,
            penalty_rounds: self.penalty_rounds,
        }
    }
}

/// Slacks and pass thresholds for the scans.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub grid_slack: f64,
    pub trajectory_slack: f64,
    pub step_slack: f64,
    pub lipschitz_pairs: usize,
    pub max_value_violation_fraction: f64,
    pub max_trajectory_violation_fraction: f64,
    pub min_step_fraction: f64,
    pub cost_to_go_slack: f64,
    pub terminal_clf_ratio: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            grid_slack: 0.05,
            trajectory_slack: 1.10,
            step_slack: 1.05,
            lipschitz_pairs: 100_000,
            max_value_violation_fraction: 0.01,
            max_trajectory_violation_fraction: 0.0,
            min_step_fraction: 0.99,
            cost_to_go_slack: 1.10,
            terminal_clf_ratio: 0.01,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobustnessConfig {
    /// Additive disturbance magnitudes.
    pub d_bar: Vec<f64>,
    /// Control perturbation magnitudes; defaults to `d_bar / ‖B_d‖`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy_d_bar: Option<Vec<f64>>,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_tail")]
    pub tail_fraction: f64,
    #[serde(default = "default_candidates")]
    pub candidates: usize,
    #[serde(default = "default_monotone_tol")]
    pub monotone_tolerance: f64,
    #[serde(default = "default_alpha_zero")]
    pub max_bound_at_zero: f64,
    #[serde(default = "default_lyap_fraction")]
    pub min_lyapunov_fraction: f64,
    #[serde(default = "default_rate_tol")]
    pub rate_tolerance: f64,
}

fn default_horizon() -> usize {
    300
}

fn default_tail() -> f64 {
    0.5
}

fn default_candidates() -> usize {
    8
}

fn default_monotone_tol() -> f64 {
    0.05
}

fn default_alpha_zero() -> f64 {
    1e-3
}

fn default_lyap_fraction() -> f64 {
    0.99
}

fn default_rate_tol() -> f64 {
    0.10
}

fn matrix(rows: &[Vec<f64>], name: &str) -> Result<DMatrix<f64>, CliError> {
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(CliError::Config(format!("{name}: must be a nonempty square matrix")));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

fn positive(v: f64, name: &str) -> Result<(), CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{name}: must be positive, got {v}")))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Checks everything that does not depend on the synthesized CLF.
    pub fn validate(&self) -> Result<(), CliError> {
        let sys = self.system()?;
        let n = sys.state_dim();
        let q = matrix(&self.clf.q, "clf.q")?;
        if q.nrows() != n {
            return Err(CliError::Config(format!("clf.q: expected {n}x{n}")));
        }
        let r = matrix(&self.clf.r, "clf.r")?;
        if r.nrows() != sys.control_dim() {
            return Err(CliError::Config(format!("clf.r: expected {0}x{0}", sys.control_dim())));
        }
        if let Some(rad) = self.clf.certify_radius {
            positive(rad, "clf.certify_radius")?;
            if self.clf.samples == 0 {
                return Err(CliError::Config("clf.samples: must be positive".into()));
            }
        }
        if let Some(d) = &self.discretization {
            positive(d.h, "discretization.h")?;
        }
        if let Some(g) = &self.grid {
            if g.lo.len() != n || g.hi.len() != n || g.counts.len() != n {
                return Err(CliError::Config(format!("grid: lo, hi and counts need {n} entries")));
            }
            self.uniform_grid()?;
        }
        if let Some(s) = &self.solver {
            s.validate(sys.control_dim()).map_err(|e| CliError::Config(format!("solver: {e}")))?;
        }
        for (i, c) in self.costs.iter().enumerate() {
            positive(c.beta, &format!("costs[{i}].beta"))?;
            positive(c.rho, &format!("costs[{i}].rho"))?;
            let ct = c.variant == CostVariant::NominalCt;
            if ct != self.discretization.is_none() {
                return Err(CliError::Config(format!(
                    "costs[{i}].variant: {} does not match the {} system",
                    c.label(),
                    if ct { "discretized" } else { "continuous" }
                )));
            }
        }
        let ro = &self.rollouts;
        positive(ro.level_fraction, "rollouts.level_fraction")?;
        if ro.level_fraction > 1.0 {
            return Err(CliError::Config("rollouts.level_fraction: must be at most 1".into()));
        }
        positive(ro.duration, "rollouts.duration")?;
        positive(ro.h, "rollouts.h")?;
        if let Some(s) = &self.shooting {
            if s.x0.len() != n {
                return Err(CliError::Config(format!("shooting.x0: expected {n} entries")));
            }
            s.settings()
                .validate()
                .map_err(|e| CliError::Config(format!("shooting: {e}")))?;
        }
        let a = &self.analysis;
        positive(a.grid_slack + 1.0, "analysis.grid_slack")?;
        positive(a.trajectory_slack, "analysis.trajectory_slack")?;
        positive(a.step_slack, "analysis.step_slack")?;
        positive(a.cost_to_go_slack, "analysis.cost_to_go_slack")?;
        if a.lipschitz_pairs == 0 {
            return Err(CliError::Config("analysis.lipschitz_pairs: must be positive".into()));
        }
        if let Some(rb) = &self.robustness {
            for (name, list) in [("d_bar", Some(&rb.d_bar)), ("policy_d_bar", rb.policy_d_bar.as_ref())] {
                let Some(list) = list else { continue };
                if list.is_empty() {
                    return Err(CliError::Config(format!("robustness.{name}: must not be empty")));
                }
                if let Some(bad) = list.iter().find(|d| !(**d >= 0.0) || !d.is_finite()) {
                    return Err(CliError::Config(format!(
                        "robustness.{name}: magnitudes must be finite and nonnegative, got {bad}"
                    )));
                }
            }
            if let Some(p) = &rb.policy_d_bar {
                if p.len() != rb.d_bar.len() {
                    return Err(CliError::Config("robustness.policy_d_bar: must match d_bar in length".into()));
                }
            }
            if rb.horizon == 0 || rb.candidates == 0 {
                return Err(CliError::Config("robustness: horizon and candidates must be positive".into()));
            }
            if !(rb.tail_fraction >= 0.0 && rb.tail_fraction < 1.0) {
                return Err(CliError::Config("robustness.tail_fraction: must lie in [0, 1)".into()));
            }
        }
        Ok(())
    }

    pub fn system(&self) -> Result<ControlAffineSystem, CliError> {
        let sys = match &self.system {
            SystemConfig::DoubleIntegrator { u_max } => double_integrator(*u_max),
            SystemConfig::CartPole { params } => cart_pole(*params),
        };
        sys.map_err(|e| CliError::Config(format!("system: {e}")))
    }

    pub fn discrete_system(&self, sys: &ControlAffineSystem) -> Result<Option<DiscreteSystem>, CliError> {
        self.discretization
            .as_ref()
            .map(|d| discretize(sys, d.h, d.scheme).map_err(|e| CliError::Config(format!("discretization: {e}"))))
            .transpose()
    }

    pub fn weights(&self) -> Result<(DMatrix<f64>, DMatrix<f64>), CliError> {
        Ok((matrix(&self.clf.q, "clf.q")?, matrix(&self.clf.r, "clf.r")?))
    }

    pub fn uniform_grid(&self) -> Result<UniformGrid, CliError> {
        let g = self.grid.as_ref().ok_or_else(|| CliError::Config("grid: section required".into()))?;
        UniformGrid::new(g.lo.clone(), g.hi.clone(), g.counts.clone())
            .map_err(|e| CliError::Config(format!("grid: {e}")))
    }

    pub fn solver_config(&self) -> Result<&SolverConfig, CliError> {
        self.solver.as_ref().ok_or_else(|| CliError::Config("solver: section required".into()))
    }

    pub fn shooting_config(&self) -> Result<&ShootingConfig, CliError> {
        self.shooting.as_ref().ok_or_else(|| CliError::Config("shooting: section required".into()))
    }

    pub fn robustness_config(&self) -> Result<&RobustnessConfig, CliError> {
        self.robustness
            .as_ref()
            .ok_or_else(|| CliError::Config("robustness: section required".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [system]
        kind = "double_integrator"
        [clf]
        q = [[1.0, 0.0], [0.0, 1.0]]
        r = [[1.0]]
    "#;

    #[test]
    fn minimal_config_loads() {
        let cfg = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg.rollouts.count, 20);
        assert_eq!(cfg.analysis.grid_slack, 0.05);
    }

    #[test]
    fn unknown_field_is_named() {
        let text = MINIMAL.replace("r = [[1.0]]", "r = [[1.0]]\nradius = 2.0");
        let err = RunConfig::from_toml(&text).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains("radius"), "{err}");
    }

    #[test]
    fn wrong_weight_shape_is_rejected() {
        let text = MINIMAL.replace("r = [[1.0]]", "r = [[1.0, 0.0], [0.0, 1.0]]");
        assert!(RunConfig::from_toml(&text).unwrap_err().to_string().contains("clf.r"));
    }

    #[test]
    fn lambda_is_resolved_against_alpha() {
        let c = CostConfig {
            variant: CostVariant::NominalCt,
            beta: 1.0,
            rho: 10.0,
            lambda: None,
            lambda_fraction: Some(0.5),
            gamma: Some(0.5),
            delta: None,
            sigma_sq: None,
            sigma_vdot: None,
            w_u: None,
        };
        assert_eq!(c.resolve(0, 0.4).unwrap().lambda(), 0.2);
        let too_fast = CostConfig {
            lambda: Some(0.5),
            lambda_fraction: None,
            ..c.clone()
        };
        assert!(too_fast.resolve(0, 0.4).unwrap_err().to_string().contains("lambda"));
        let missing = CostConfig { gamma: None, ..c };
        assert!(missing.resolve(3, 0.4).unwrap_err().to_string().contains("costs[3].gamma"));
    }

    #[test]
    fn negative_disturbance_is_rejected() {
        let text = format!("{MINIMAL}\n[robustness]\nd_bar = [0.0, -0.01]\n");
        let err = RunConfig::from_toml(&text).unwrap_err();
        assert!(err.to_string().contains("robustness.d_bar"), "{err}");
    }
}
