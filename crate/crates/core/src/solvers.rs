//! Value iteration for the discounted problems on a uniform grid.
//!
//! Continuous time uses the semi-Lagrangian scheme
//! `J(x) ← min_u h·ℓ(x,u) + e^{−γh}·J(x + h(f + gu))`; discrete time uses the
//! Bellman operator `J(x) ← min_u ℓ(x,u) + δ·J(F(x,u))`. Both share one
//! precomputed table of stage costs and interpolation stencils, so a sweep is
//! a gather over flat arrays.

use serde::{Deserialize, Serialize};

use crate::clf::QuadraticCLF;
use crate::costs::{stage_cost_ct, stage_cost_discrete, CostSpec};
use crate::error::{invalid, Error, Result};
use crate::field::{ClfScaledValue, PolicyField, UniformGrid, ValueField};
use crate::systems::{euler_raw, rk4_raw, ControlAffineSystem, Control, DiscreteSystem, State};
use crate::{par_fill, par_map};

/// One-step propagation used inside the semi-Lagrangian update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Propagation {
    #[default]
    Euler,
    Rk4,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    /// Lattice points per control dimension (0 is added when missing).
    pub control_samples: Vec<usize>,
    /// Semi-Lagrangian step `h` in seconds; ignored in discrete time.
    #[serde(default = "default_sl_step")]
    pub sl_step: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default)]
    pub propagation: Propagation,
}

fn default_sl_step() -> f64 {
    0.02
}

fn default_tol() -> f64 {
    1e-6
}

fn default_max_iters() -> usize {
    100_000
}

impl SolverConfig {
    pub fn new(control_samples: Vec<usize>) -> Self {
        Self {
            control_samples,
            sl_step: default_sl_step(),
            tol: default_tol(),
            max_iters: default_max_iters(),
            propagation: Propagation::Euler,
        }
    }

    pub fn validate(&self, control_dim: usize) -> Result<()> {
        if self.control_samples.len() != control_dim {
            return Err(invalid(
                "control_samples",
                format!("expected {control_dim} entries, got {}", self.control_samples.len()),
            ));
        }
        if self.control_samples.iter().any(|&n| n < 2) {
            return Err(invalid("control_samples", "need at least 2 samples per dimension"));
        }
        if !(self.sl_step > 0.0) || !self.sl_step.is_finite() {
            return Err(invalid("sl_step", "must be positive"));
        }
        if !(self.tol > 0.0) {
            return Err(invalid("tol", "must be positive"));
        }
        if self.max_iters == 0 {
            return Err(invalid("max_iters", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub final_residual: f64,
    #[serde(skip)]
    pub residual_history: Vec<f64>,
    pub wall_time_s: f64,
    /// False when `max_iters` ran out before the tolerance was met.
    pub converged: bool,
    /// Per-iteration discount factor of the operator.
    pub discount: f64,
    /// Largest ratio of consecutive sup-norm residuals after the first sweep.
    pub max_contraction_ratio: f64,
    /// Sweeps whose residual ratio exceeded `discount + 1e-9` by more than
    /// floating-point rounding of the backup can explain.
    pub contraction_violations: usize,
    /// Node updates that decreased a value (must be 0 from `J₀ ≡ 0`).
    pub monotone_violations: usize,
    pub nodes: usize,
    pub controls: usize,
}

/// Uniform per-dimension lattice over the box `[lo, hi]`, with 0 inserted in
/// any dimension that misses it. Returned in lexicographic order.
pub fn control_lattice(lo: &Control, hi: &Control, samples: &[usize]) -> Vec<Control> {
    let axes: Vec<Vec<f64>> = samples
        .iter()
        .enumerate()
        .map(|(d, &n)| {
            let mut axis: Vec<f64> = (0..n)
                .map(|i| lo[d] + i as f64 * (hi[d] - lo[d]) / (n - 1) as f64)
                .collect();
            let scale = hi[d] - lo[d];
            if let Some(z) = axis.iter_mut().find(|v| v.abs() <= 1e-12 * scale) {
                *z = 0.0;
            } else {
                axis.push(0.0);
                axis.sort_by(f64::total_cmp);
            }
            axis
        })
        .collect();
    let mut out = vec![Vec::new()];
    for axis in &axes {
        out = out
            .into_iter()
            .flat_map(|prefix: Vec<f64>| {
                axis.iter().map(move |&v| {
                    let mut p = prefix.clone();
                    p.push(v);
                    p
                })
            })
            .collect();
    }
    out.into_iter().map(Control::from_vec).collect()
}

type StageFn<'a> = dyn Fn(&State, &Control) -> f64 + Send + Sync + 'a;
type TargetFn<'a> = dyn Fn(&State, &Control) -> State + Send + Sync + 'a;

/// A discounted fixed-point problem `J(x) = min_u c(x,u) + κ·J(T(x,u))` over a
/// box of controls.
pub struct DiscountedProblem<'a> {
    discount: f64,
    stage: Box<StageFn<'a>>,
    target: Box<TargetFn<'a>>,
    control_lo: Control,
    control_hi: Control,
}

impl<'a> DiscountedProblem<'a> {
    pub fn new(
        discount: f64,
        control_lo: Control,
        control_hi: Control,
        stage: impl Fn(&State, &Control) -> f64 + Send + Sync + 'a,
        target: impl Fn(&State, &Control) -> State + Send + Sync + 'a,
    ) -> Result<Self> {
        if !(discount > 0.0 && discount < 1.0) {
            return Err(invalid("discount", "must lie in (0, 1)"));
        }
        Ok(Self {
            discount,
            stage: Box::new(stage),
            target: Box::new(target),
            control_lo,
            control_hi,
        })
    }

    /// Semi-Lagrangian problem for the continuous-time nominal cost.
    pub fn continuous(
        sys: &'a ControlAffineSystem,
        clf: &'a QuadraticCLF,
        spec: &'a CostSpec,
        cfg: &SolverConfig,
    ) -> Result<Self> {
        let CostSpec::NominalCt { gamma, .. } = *spec else {
            return Err(Error::VariantMismatch {
                expected: "nominal_ct",
                actual: spec.variant_name(),
            });
        };
        spec.validate(clf.alpha())?;
        cfg.validate(sys.control_dim())?;
        let h = cfg.sl_step;
        let prop = cfg.propagation;
        Self::new(
            (-gamma * h).exp(),
            sys.control_lo().clone(),
            sys.control_hi().clone(),
            move |x, u| h * stage_cost_ct(spec, clf, sys, x, u).unwrap_or(f64::NAN),
            move |x, u| match prop {
                Propagation::Euler => euler_raw(sys, x, u, h),
                Propagation::Rk4 => rk4_raw(sys, x, u, h),
            },
        )
    }

    /// Bellman problem for a discrete-time cost.
    pub fn discrete(
        dsys: &'a DiscreteSystem,
        clf: &'a QuadraticCLF,
        spec: &'a CostSpec,
        cfg: &SolverConfig,
    ) -> Result<Self> {
        let Some(delta) = spec.delta() else {
            return Err(Error::VariantMismatch {
                expected: "nominal_dt or practical_dt",
                actual: spec.variant_name(),
            });
        };
        spec.validate(clf.alpha())?;
        cfg.validate(dsys.control_dim())?;
        Self::new(
            delta,
            dsys.base().control_lo().clone(),
            dsys.base().control_hi().clone(),
            move |x, u| stage_cost_discrete(spec, clf, dsys, x, u).unwrap_or(f64::NAN),
            move |x, u| dsys.step(x, u),
        )
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn stage(&self, x: &State, u: &Control) -> f64 {
        (self.stage)(x, u)
    }

    pub fn target(&self, x: &State, u: &Control) -> State {
        (self.target)(x, u)
    }

    pub fn controls(&self, cfg: &SolverConfig) -> Vec<Control> {
        control_lattice(&self.control_lo, &self.control_hi, &cfg.control_samples)
    }
}

/// Stage costs and stencils for every (node, control) pair.
struct Table {
    controls: usize,
    corners: usize,
    discount: f64,
    cost: Vec<f64>,
    node: Vec<u32>,
    weight: Vec<f64>,
}

impl Table {
    fn build(problem: &DiscountedProblem<'_>, grid: &UniformGrid, controls: &[Control]) -> Result<Self> {
        if grid.len() > u32::MAX as usize {
            return Err(invalid("grid", "too many nodes"));
        }
        let nc = controls.len();
        let corners = 1usize << grid.dim();
        let rows = par_map(grid.len(), |i| {
            let x = grid.node(i);
            let mut cost = Vec::with_capacity(nc);
            let mut node = Vec::with_capacity(nc * corners);
            let mut weight = Vec::with_capacity(nc * corners);
            for u in controls {
                cost.push(problem.stage(&x, u));
                let st = grid.stencil(&problem.target(&x, u));
                node.extend(st.nodes.iter().map(|&n| n as u32));
                weight.extend(st.weights);
            }
            (cost, node, weight)
        });
        let mut table = Table {
            controls: nc,
            corners,
            discount: problem.discount,
            cost: Vec::with_capacity(grid.len() * nc),
            node: Vec::with_capacity(grid.len() * nc * corners),
            weight: Vec::with_capacity(grid.len() * nc * corners),
        };
        for (c, n, w) in rows {
            table.cost.extend(c);
            table.node.extend(n);
            table.weight.extend(w);
        }
        if table.cost.iter().any(|c| !c.is_finite()) || table.weight.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("stage cost or successor state"));
        }
        Ok(table)
    }

    #[inline]
    fn q(&self, i: usize, c: usize, j: &[f64]) -> f64 {
        let row = i * self.controls + c;
        let base = row * self.corners;
        let mut acc = 0.0;
        for k in base..base + self.corners {
            let w = self.weight[k];
            if w != 0.0 {
                acc += w * j[self.node[k] as usize];
            }
        }
        self.cost[row] + self.discount * acc
    }

    /// Minimum over controls; strict `<` keeps the first (lexicographically
    /// smallest) minimizer.
    #[inline]
    fn best(&self, i: usize, j: &[f64]) -> (f64, usize) {
        let mut best = (f64::INFINITY, 0);
        for c in 0..self.controls {
            let v = self.q(i, c, j);
            if v < best.0 {
                best = (v, c);
            }
        }
        best
    }

    fn argmins(&self, n: usize, j: &[f64]) -> Vec<usize> {
        par_map(n, |i| self.best(i, j).1)
    }
}

#[cfg(not(target_arch = "wasm32"))]
fn now() -> Option<std::time::Instant> {
    Some(std::time::Instant::now())
}

#[cfg(target_arch = "wasm32")]
fn now() -> Option<std::time::Instant> {
    None
}

/// Runs value iteration from `J₀ ≡ 0`.
///
/// The returned policy is the argmin of the last sweep, i.e. greedy with
/// respect to the second-to-last iterate.
pub fn solve_discounted(
    problem: &DiscountedProblem<'_>,
    grid: &UniformGrid,
    cfg: &SolverConfig,
) -> Result<(ValueField, PolicyField, SolveReport)> {
    let start = now();
    let controls = problem.controls(cfg);
    let table = Table::build(problem, grid, &controls)?;
    let n = grid.len();
    let mut old = vec![0.0; n];
    let mut new = vec![0.0; n];
    let mut history = Vec::new();
    let mut monotone_violations = 0;
    let mut max_ratio: f64 = 0.0;
    let mut contraction_violations = 0;
    let mut converged = false;
    let eps_round = 4.0 * table.corners as f64 * f64::EPSILON;
    for _ in 0..cfg.max_iters {
        par_fill(&mut new, |i| table.best(i, &old).0);
        let mut residual: f64 = 0.0;
        let mut top: f64 = 0.0;
        for (a, b) in new.iter().zip(&old) {
            if !a.is_finite() {
                return Err(Error::NonFinite("value iteration sweep"));
            }
            if a < b {
                monotone_violations += 1;
            }
            residual = residual.max((a - b).abs());
            top = top.max(a.abs());
        }
        if let Some(&prev) = history.last() {
            if prev > 0.0 {
                let ratio = residual / prev;
                max_ratio = max_ratio.max(ratio);
                if residual > (table.discount + 1e-9) * prev + eps_round * top {
                    contraction_violations += 1;
                }
            }
        }
        history.push(residual);
        std::mem::swap(&mut old, &mut new);
        if residual <= cfg.tol {
            converged = true;
            break;
        }
    }
    // `old` now holds the final iterate and `new` the one before it.
    let policy_idx = table.argmins(n, &new);
    let policy = PolicyField {
        grid: grid.clone(),
        controls: policy_idx.iter().map(|&c| controls[c].clone()).collect(),
    };
    let report = SolveReport {
        iterations: history.len(),
        final_residual: history.last().copied().unwrap_or(0.0),
        residual_history: history,
        wall_time_s: start.map_or(0.0, |s| s.elapsed().as_secs_f64()),
        converged,
        discount: table.discount,
        max_contraction_ratio: max_ratio,
        contraction_violations,
        monotone_violations,
        nodes: n,
        controls: controls.len(),
    };
    Ok((ValueField::new(grid.clone(), old)?, policy, report))
}

/// Semi-Lagrangian value iteration for the continuous-time HJB equation.
pub fn solve_hjb_ct(
    sys: &ControlAffineSystem,
    clf: &QuadraticCLF,
    spec: &CostSpec,
    grid: &UniformGrid,
    cfg: &SolverConfig,
) -> Result<(ValueField, PolicyField, SolveReport)> {
    check_grid(grid, sys.state_dim())?;
    let problem = DiscountedProblem::continuous(sys, clf, spec, cfg)?;
    solve_discounted(&problem, grid, cfg)
}

/// Bellman value iteration for a discrete-time cost.
pub fn solve_dp_dt(
    dsys: &DiscreteSystem,
    clf: &QuadraticCLF,
    spec: &CostSpec,
    grid: &UniformGrid,
    cfg: &SolverConfig,
) -> Result<(ValueField, PolicyField, SolveReport)> {
    check_grid(grid, dsys.state_dim())?;
    let problem = DiscountedProblem::discrete(dsys, clf, spec, cfg)?;
    solve_discounted(&problem, grid, cfg)
}

fn check_grid(grid: &UniformGrid, n: usize) -> Result<()> {
    if grid.dim() != n {
        return Err(Error::Dimension {
            context: "grid dimension",
            expected: n,
            actual: grid.dim(),
        });
    }
    Ok(())
}

/// Nearest-node lookup of a tabulated policy.
pub fn extract_policy_fn(policy: &PolicyField) -> impl Fn(&State) -> Control + '_ {
    move |x| policy.nearest(x)
}

/// One greedy sweep against a fixed value field.
pub fn greedy_policy_improve(
    field: &ValueField,
    problem: &DiscountedProblem<'_>,
    cfg: &SolverConfig,
) -> Result<PolicyField> {
    let controls = problem.controls(cfg);
    let table = Table::build(problem, &field.grid, &controls)?;
    let idx = table.argmins(field.grid.len(), &field.values);
    Ok(PolicyField {
        grid: field.grid.clone(),
        controls: idx.iter().map(|&c| controls[c].clone()).collect(),
    })
}

/// Per-node one-step residual `|c(x,π(x)) + κ·J(T(x,π(x))) − J(x)|`.
pub fn bellman_residuals(
    field: &ValueField,
    policy: &PolicyField,
    problem: &DiscountedProblem<'_>,
) -> Vec<f64> {
    par_map(field.grid.len(), |i| {
        let x = field.grid.node(i);
        let u = &policy.controls[i];
        let next = problem.target(&x, u);
        (problem.stage(&x, u) + problem.discount * field.interpolate(&next) - field.values[i]).abs()
    })
}

/// State feedback that minimizes the one-step right-hand side online at the
/// query state, against a CLF-scaled reconstruction of the value field.
///
/// Nodal policies are piecewise constant at grid scale, which leaves the
/// closed loop cycling at grid scale near the origin; evaluating the argmin at
/// the actual state avoids that. With `refine`, each control coordinate is
/// further polished by golden-section search within one lattice step.
pub struct GreedyPolicy<'a> {
    problem: DiscountedProblem<'a>,
    value: ClfScaledValue,
    controls: Vec<Control>,
    steps: Vec<f64>,
    refine: bool,
}

impl<'a> GreedyPolicy<'a> {
    pub fn new(
        problem: DiscountedProblem<'a>,
        field: ValueField,
        clf: &QuadraticCLF,
        cfg: &SolverConfig,
        refine: bool,
    ) -> Self {
        let controls = problem.controls(cfg);
        let steps = cfg
            .control_samples
            .iter()
            .enumerate()
            .map(|(d, &n)| (problem.control_hi[d] - problem.control_lo[d]) / (n - 1) as f64)
            .collect();
        Self {
            problem,
            value: ClfScaledValue::new(field, clf),
            controls,
            steps,
            refine,
        }
    }

    pub fn value(&self, x: &State) -> f64 {
        self.value.evaluate(x)
    }

    pub fn problem(&self) -> &DiscountedProblem<'a> {
        &self.problem
    }

    /// `c(x,u) + κ·Ĵ(T(x,u))`
    pub fn rhs(&self, x: &State, u: &Control) -> f64 {
        let v = self.problem.stage(x, u) + self.problem.discount * self.value.evaluate(&self.problem.target(x, u));
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    }

    pub fn control(&self, x: &State) -> Control {
        let mut best_u = self.controls[0].clone();
        let mut best = f64::INFINITY;
        for u in &self.controls {
            let v = self.rhs(x, u);
            if v < best {
                best = v;
                best_u = u.clone();
            }
        }
        if !self.refine {
            return best_u;
        }
        for d in 0..best_u.len() {
            let lo = (best_u[d] - self.steps[d]).max(self.problem.control_lo[d]);
            let hi = (best_u[d] + self.steps[d]).min(self.problem.control_hi[d]);
            let mut probe = best_u.clone();
            let (u_star, v_star) = golden_section(lo, hi, 60, |s| {
                probe[d] = s;
                self.rhs(x, &probe)
            });
            if v_star < best {
                best = v_star;
                best_u[d] = u_star;
            }
        }
        best_u
    }
}

/// Minimizes `f` on `[a, b]`, returning the best point seen and its value.
fn golden_section(mut a: f64, mut b: f64, iters: usize, mut f: impl FnMut(f64) -> f64) -> (f64, f64) {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..iters {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    if fc <= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}
