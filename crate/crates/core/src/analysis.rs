//! Bound constants, violation scanners, Lipschitz estimation and E-ISS
//! experiments.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::clf::QuadraticCLF;
use crate::costs::{zeta_constants, CostSpec};
use crate::error::{invalid, Error, Result};
use crate::field::{largest_interior_value_level, largest_omega_c_inside, SublevelSet, UniformGrid, ValueField};
use crate::par_map;
use crate::systems::{ControlAffineSystem, Control, DiscreteSystem, State, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    CtNominal,
    DtNominal,
    DtPractical,
}

impl Regime {
    pub fn is_discrete(self) -> bool {
        !matches!(self, Regime::CtNominal)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    /// State at which the bound failed.
    pub location: Vec<f64>,
    /// Sample time, for trajectory checks.
    pub time: Option<f64>,
    pub quantity: &'static str,
    pub bound: f64,
    pub observed: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundReport {
    pub regime: Regime,
    pub constants: BTreeMap<String, f64>,
    pub value_lower_coeff: f64,
    pub value_upper_coeff: f64,
    pub state_envelope_coeff: f64,
    /// `λ/2` per second in continuous time, `√(decay factor)` per step in
    /// discrete time.
    pub state_envelope_rate: f64,
    /// `λ` per second in continuous time; `1 − λ` or `q_c̄` per step.
    pub value_decay: f64,
    /// The theorem's hypotheses hold for these constants.
    pub feasible: bool,
    pub flags: Vec<String>,
    pub violations: Vec<Violation>,
}

impl BoundReport {
    fn new(regime: Regime) -> Self {
        Self {
            regime,
            constants: BTreeMap::new(),
            value_lower_coeff: 0.0,
            value_upper_coeff: 0.0,
            state_envelope_coeff: 0.0,
            state_envelope_rate: 0.0,
            value_decay: 0.0,
            feasible: true,
            flags: Vec::new(),
            violations: Vec::new(),
        }
    }

    fn set(&mut self, key: &str, v: f64) {
        self.constants.insert(key.to_string(), v);
    }

    pub fn constant(&self, key: &str) -> Option<f64> {
        self.constants.get(key).copied()
    }

    /// `(lower, upper)` quadratic value bounds at `x`, without slack.
    pub fn value_bounds(&self, x: &State) -> (f64, f64) {
        let n2 = x.norm_squared();
        (self.value_lower_coeff * n2, self.value_upper_coeff * n2)
    }

    /// Multiplier of `‖x₀‖` at time `t` (continuous) or step `k` (discrete).
    pub fn state_envelope(&self, t: f64, k: usize) -> f64 {
        if self.regime.is_discrete() {
            self.state_envelope_coeff * self.state_envelope_rate.powi(k as i32)
        } else {
            self.state_envelope_coeff * (-self.state_envelope_rate * t).exp()
        }
    }

    /// Multiplier of `J(x₀)`.
    pub fn value_envelope(&self, t: f64, k: usize) -> f64 {
        if self.regime.is_discrete() {
            self.value_decay.powi(k as i32)
        } else {
            (-self.value_decay * t).exp()
        }
    }

    /// One-step value contraction factor (`e^{−λh}` for a continuous sample
    /// spacing `h`).
    pub fn step_decay(&self, h: f64) -> f64 {
        if self.regime.is_discrete() {
            self.value_decay
        } else {
            (-self.value_decay * h).exp()
        }
    }
}

/// Theorem constants for the continuous-time nominal cost.
pub fn ct_bounds(clf: &QuadraticCLF, spec: &CostSpec, lipschitz: f64) -> Result<BoundReport> {
    let CostSpec::NominalCt {
        beta,
        rho,
        lambda,
        gamma,
    } = *spec
    else {
        return Err(Error::VariantMismatch {
            expected: "nominal_ct",
            actual: spec.variant_name(),
        });
    };
    if !(lipschitz >= 0.0) {
        return Err(invalid("lipschitz", "must be nonnegative"));
    }
    let (c1, c2) = (clf.c1(), clf.c2());
    let mut r = BoundReport::new(Regime::CtNominal);
    for (k, v) in [
        ("c1", c1),
        ("c2", c2),
        ("alpha", clf.alpha()),
        ("lambda", lambda),
        ("beta", beta),
        ("rho", rho),
        ("gamma", gamma),
        ("L", lipschitz),
    ] {
        r.set(k, v);
    }
    r.value_lower_coeff = beta * c1 / (gamma + 2.0 * lipschitz);
    r.value_upper_coeff = beta * c2 / (gamma + lambda);
    r.state_envelope_coeff = (c2 * (gamma + 2.0 * lipschitz) / (c1 * (gamma + lambda))).sqrt();
    r.state_envelope_rate = lambda / 2.0;
    r.value_decay = lambda;
    if r.value_lower_coeff > r.value_upper_coeff {
        r.flags
            .push("lower value coefficient exceeds upper (2L < lambda)".to_string());
    }
    Ok(r)
}

/// Theorem constants for the discrete-time nominal cost.
pub fn dt_bounds(clf: &QuadraticCLF, spec: &CostSpec) -> Result<BoundReport> {
    let CostSpec::NominalDt {
        beta,
        rho,
        lambda,
        delta,
    } = *spec
    else {
        return Err(Error::VariantMismatch {
            expected: "nominal_dt",
            actual: spec.variant_name(),
        });
    };
    let denom = 1.0 - delta * (1.0 - lambda);
    if !(denom > 0.0) {
        return Err(invalid("delta", "requires delta·(1 − lambda) < 1"));
    }
    let (c1, c2) = (clf.c1(), clf.c2());
    let mut r = BoundReport::new(Regime::DtNominal);
    for (k, v) in [
        ("c1", c1),
        ("c2", c2),
        ("alpha", clf.alpha()),
        ("lambda", lambda),
        ("beta", beta),
        ("rho", rho),
        ("delta", delta),
    ] {
        r.set(k, v);
    }
    r.value_lower_coeff = beta * c1;
    r.value_upper_coeff = beta * c2 / denom;
    r.state_envelope_coeff = (c2 / (c1 * denom)).sqrt();
    r.value_decay = 1.0 - lambda;
    r.state_envelope_rate = r.value_decay.sqrt();
    Ok(r)
}

/// `q_c̄ = δ⁻¹(1 − (1 − δ(1−λ))·ζ₋(c̄)/(ζ₊ + c_reg))`
pub fn q_cbar(spec: &CostSpec, c_bar: f64, c_reg: f64) -> Result<f64> {
    let delta = spec.delta().ok_or(Error::VariantMismatch {
        expected: "practical_dt",
        actual: spec.variant_name(),
    })?;
    let z = zeta_constants(spec, c_bar)?;
    let denom = 1.0 - delta * (1.0 - spec.lambda());
    Ok((1.0 - denom * z.minus / (z.plus + c_reg)) / delta)
}

/// Theorem constants for the practical reward; flagged infeasible when
/// `q_c̄ ≥ 1`.
pub fn dt_practical_bounds(
    clf: &QuadraticCLF,
    spec: &CostSpec,
    c_bar: f64,
    c_reg: f64,
) -> Result<BoundReport> {
    let CostSpec::PracticalDt {
        beta,
        rho,
        lambda,
        delta,
        sigma_sq,
        sigma_vdot,
        w_u,
    } = *spec
    else {
        return Err(Error::VariantMismatch {
            expected: "practical_dt",
            actual: spec.variant_name(),
        });
    };
    if !(c_reg >= 0.0) {
        return Err(invalid("c_reg", "must be nonnegative"));
    }
    let z = zeta_constants(spec, c_bar)?;
    let q = q_cbar(spec, c_bar, c_reg)?;
    let denom = 1.0 - delta * (1.0 - lambda);
    let (c1, c2) = (clf.c1(), clf.c2());
    let mut r = BoundReport::new(Regime::DtPractical);
    for (k, v) in [
        ("c1", c1),
        ("c2", c2),
        ("alpha", clf.alpha()),
        ("lambda", lambda),
        ("beta", beta),
        ("rho", rho),
        ("delta", delta),
        ("sigma_sq", sigma_sq),
        ("sigma_vdot", sigma_vdot),
        ("w_u", w_u),
        ("c_bar", c_bar),
        ("zeta_minus", z.minus),
        ("zeta_plus", z.plus),
        ("c_reg", c_reg),
        ("q_cbar", q),
    ] {
        r.set(k, v);
    }
    r.value_lower_coeff = z.minus * c1;
    r.value_upper_coeff = (z.plus + c_reg) * c2 / denom;
    r.state_envelope_coeff = ((z.plus + c_reg) * c2 / (z.minus * c1 * denom)).sqrt();
    r.value_decay = q;
    r.state_envelope_rate = q.max(0.0).sqrt();
    if !(q < 1.0) {
        r.feasible = false;
        r.flags.push(format!("q_cbar = {q} >= 1: contraction hypothesis fails"));
    }
    Ok(r)
}

/// Largest finite-difference slope of the closed loop `f*(x) = f(x) + g(x)π(x)`
/// over node pairs of `set`, together with `max ‖f*(x)‖/‖x‖`.
///
/// Uses all pairs when the set has at most 2000 nodes, otherwise `n_pairs`
/// seeded random pairs.
pub fn estimate_lipschitz(
    policy: &(dyn Fn(&State) -> Control + Sync),
    sys: &ControlAffineSystem,
    set: &SublevelSet,
    grid: &UniformGrid,
    n_pairs: usize,
    seed: u64,
) -> Result<f64> {
    let nodes: Vec<usize> = set.indices().collect();
    if nodes.is_empty() {
        return Err(Error::EmptySet("lipschitz sublevel set"));
    }
    let xs: Vec<State> = nodes.iter().map(|&i| grid.node(i)).collect();
    let fs: Vec<State> = par_map(xs.len(), |i| {
        let (u, _) = sys.clamp_control(&policy(&xs[i]));
        sys.vector_field(&xs[i], &u)
    });
    let slope = |a: usize, b: usize| -> f64 {
        let dx = (&xs[a] - &xs[b]).norm();
        if dx > 0.0 {
            (&fs[a] - &fs[b]).norm() / dx
        } else {
            0.0
        }
    };
    let n = xs.len();
    let mut best = xs
        .iter()
        .zip(&fs)
        .filter(|(x, _)| x.norm() > 0.0)
        .map(|(x, f)| f.norm() / x.norm())
        .fold(0.0, f64::max);
    if n <= 2000 {
        let rows = par_map(n, |a| ((a + 1)..n).map(|b| slope(a, b)).fold(0.0, f64::max));
        best = rows.into_iter().fold(best, f64::max);
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..n_pairs {
            let a = rng.gen_range(0..n);
            let b = rng.gen_range(0..n);
            best = best.max(slope(a, b));
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ScanResult {
    pub checked: usize,
    pub violations: Vec<Violation>,
}

impl ScanResult {
    pub fn fraction(&self) -> f64 {
        if self.checked == 0 {
            0.0
        } else {
            self.violations.len() as f64 / self.checked as f64
        }
    }
}

/// Checks `lower·‖x‖² ≤ J(x) ≤ upper·‖x‖²·(1 + eps_grid)` at every interior
/// member of `restrict_to`.
pub fn scan_value_bounds(
    field: &ValueField,
    report: &BoundReport,
    restrict_to: &SublevelSet,
    eps_grid: f64,
) -> ScanResult {
    let grid = &field.grid;
    let mut out = ScanResult::default();
    for i in restrict_to.interior_indices(grid) {
        let x = grid.node(i);
        let j = field.values[i];
        let (lo, hi) = report.value_bounds(&x);
        out.checked += 1;
        let loc = || x.iter().copied().collect::<Vec<_>>();
        if j < lo {
            out.violations.push(Violation {
                location: loc(),
                time: None,
                quantity: "value_lower",
                bound: lo,
                observed: j,
            });
        } else if j > hi * (1.0 + eps_grid) {
            out.violations.push(Violation {
                location: loc(),
                time: None,
                quantity: "value_upper",
                bound: hi * (1.0 + eps_grid),
                observed: j,
            });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryMode {
    /// `J(x(t)) ≤ decay(t)·J(x₀)`
    ValueDecay,
    /// `‖x(t)‖ ≤ coeff·rate(t)·‖x₀‖`
    StateEnvelope,
    /// `V(x(t)) ≤ (c2/c1)·decay(t)·V(x₀)`
    ClfDecay,
}

impl TrajectoryMode {
    fn label(self) -> &'static str {
        match self {
            TrajectoryMode::ValueDecay => "value_decay",
            TrajectoryMode::StateEnvelope => "state_envelope",
            TrajectoryMode::ClfDecay => "clf_decay",
        }
    }
}

/// Pointwise envelope comparison along a trajectory with multiplicative
/// `slack`.
pub fn scan_trajectory_bounds(
    traj: &Trajectory,
    report: &BoundReport,
    mode: TrajectoryMode,
    slack: f64,
) -> Result<ScanResult> {
    let series: Vec<f64> = match mode {
        TrajectoryMode::ValueDecay => {
            if traj.values.len() != traj.len() {
                return Err(Error::MissingField {
                    mode: mode.label(),
                    field: "values",
                });
            }
            traj.values.clone()
        }
        TrajectoryMode::StateEnvelope => traj.state_norms(),
        TrajectoryMode::ClfDecay => {
            if traj.clf_values.len() != traj.len() {
                return Err(Error::MissingField {
                    mode: mode.label(),
                    field: "clf_values",
                });
            }
            traj.clf_values.clone()
        }
    };
    let mut out = ScanResult::default();
    let Some(&s0) = series.first() else {
        return Ok(out);
    };
    let ratio = match mode {
        TrajectoryMode::ClfDecay => {
            let c1 = report.constant("c1").unwrap_or(1.0);
            let c2 = report.constant("c2").unwrap_or(1.0);
            c2 / c1
        }
        _ => 1.0,
    };
    for (k, (&s, &t)) in series.iter().zip(&traj.times).enumerate() {
        let envelope = match mode {
            TrajectoryMode::StateEnvelope => report.state_envelope(t, k),
            _ => ratio * report.value_envelope(t, k),
        };
        let bound = envelope * s0 * slack;
        out.checked += 1;
        if s > bound {
            out.violations.push(Violation {
                location: traj.states[k].iter().copied().collect(),
                time: Some(t),
                quantity: mode.label(),
                bound,
                observed: s,
            });
        }
    }
    Ok(out)
}

/// Checks `J(x_{k+1}) ≤ decay·J(x_k)·slack` at every step that starts inside
/// the region accepted by `inside`. `decay` is per sample (see
/// [`BoundReport::step_decay`]).
pub fn scan_step_decay(
    traj: &Trajectory,
    decay: f64,
    slack: f64,
    inside: &dyn Fn(&State) -> bool,
) -> Result<ScanResult> {
    if traj.values.len() != traj.len() {
        return Err(Error::MissingField {
            mode: "step_decay",
            field: "values",
        });
    }
    let mut out = ScanResult::default();
    for k in 0..traj.len().saturating_sub(1) {
        let (j0, j1) = (traj.values[k], traj.values[k + 1]);
        if j0 <= 0.0 || !inside(&traj.states[k]) {
            continue;
        }
        out.checked += 1;
        if j1 > decay * j0 * slack {
            out.violations.push(Violation {
                location: traj.states[k].iter().copied().collect(),
                time: Some(traj.times[k]),
                quantity: "step_decay",
                bound: decay * j0 * slack,
                observed: j1,
            });
        }
    }
    Ok(out)
}

/// Region levels used by the scans.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Regions {
    /// Value level whose sublevel set avoids the outermost grid layer.
    pub d: f64,
    /// CLF level with `Ω_c ⊆ S_d` on the grid and inside the certified level.
    pub c: f64,
    /// `largest_omega_c_inside(field, clf, d)`
    pub c_inside: f64,
    pub c_certified: f64,
}

/// CLF level on which the CLF claims hold: the unprojected feedback stays in
/// `U`, the set stays inside the certification ball (if any) and inside the
/// grid box.
pub fn certified_level(clf: &QuadraticCLF, control_lo: &Control, control_hi: &Control, grid: &UniformGrid) -> f64 {
    let mut c = clf.admissible_level(control_lo, control_hi);
    if let Some(r) = clf.certified_radius() {
        c = c.min(clf.level_inside_ball(r));
    }
    // Ω_c ⊂ box when c ≤ min_d half_width_d² / (P⁻¹)_dd.
    if let Some(p_inv) = clf.p().clone().try_inverse() {
        for d in 0..grid.dim() {
            let half = grid.hi()[d].min(-grid.lo()[d]).max(0.0);
            c = c.min(half * half / p_inv[(d, d)]);
        }
    }
    c
}

pub fn select_regions(
    field: &ValueField,
    clf: &QuadraticCLF,
    control_lo: &Control,
    control_hi: &Control,
) -> Result<Regions> {
    let d = largest_interior_value_level(field);
    if !(d > 0.0) {
        return Err(invalid("d", "value field has no positive interior level"));
    }
    let c_inside = largest_omega_c_inside(field, clf, d)?;
    let c_certified = certified_level(clf, control_lo, control_hi, &field.grid);
    Ok(Regions {
        d,
        c: c_inside.min(c_certified),
        c_inside,
        c_certified,
    })
}

/// Settings shared by both E-ISS experiments.
#[derive(Debug, Clone, Serialize)]
pub struct IssConfig {
    pub d_bar: f64,
    pub horizon: usize,
    /// Tail start as a fraction of the horizon, for the ultimate bound.
    pub tail_fraction: f64,
    /// Per-step Lyapunov decay factor `c3`.
    pub c3: f64,
    /// Candidate directions for the worst-case-seeking disturbance.
    pub candidates: usize,
    pub seed: u64,
}

impl IssConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.d_bar >= 0.0) || !self.d_bar.is_finite() {
            return Err(invalid("d_bar", "must be finite and nonnegative"));
        }
        if self.horizon == 0 {
            return Err(invalid("horizon", "must be positive"));
        }
        if !(self.tail_fraction >= 0.0 && self.tail_fraction < 1.0) {
            return Err(invalid("tail_fraction", "must lie in [0, 1)"));
        }
        if self.candidates == 0 {
            return Err(invalid("candidates", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct IssResult {
    pub d_bar: f64,
    pub rollouts: usize,
    /// `α̂(d̄)`: largest state norm over the tails of all rollouts.
    pub ultimate_bound: f64,
    /// Fitted `‖x_k‖ ≤ M·λ_fit^k·‖x₀‖` on the transient.
    pub m_fit: f64,
    pub lambda_fit: f64,
    /// Excess `max(J(x⁺) − c3·J(x), 0)` fitted on a first batch of rollouts.
    pub sigma_hat: f64,
    /// Fraction of held-out transitions with `J(x⁺) ≤ c3·J(x) + σ̂`.
    pub lyapunov_fraction: f64,
    pub transitions: usize,
    /// No state left the grid box.
    pub bounded: bool,
    pub max_state_norm: f64,
    #[serde(skip)]
    pub trajectories: Vec<Vec<State>>,
}

fn unit_direction(rng: &mut ChaCha8Rng, n: usize) -> State {
    loop {
        let v = State::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = v.norm();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

/// Where the bounded perturbation enters.
#[derive(Clone, Copy)]
enum Channel {
    State,
    Control,
}

struct IssRun {
    states: Vec<State>,
}

#[allow(clippy::too_many_arguments)]
fn iss_rollout(
    dsys: &DiscreteSystem,
    policy: &(dyn Fn(&State) -> Control + Sync),
    value: &(dyn Fn(&State) -> f64 + Sync),
    x0: &State,
    cfg: &IssConfig,
    channel: Channel,
    worst_case: bool,
    seed: u64,
) -> IssRun {
    let base = dsys.base();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = x0.clone();
    let mut states = vec![x.clone()];
    for _ in 0..cfg.horizon {
        let u = policy(&x);
        let next = match channel {
            Channel::State => {
                let nominal = dsys.step(&x, &base.clamp_control(&u).0);
                if cfg.d_bar == 0.0 {
                    nominal
                } else {
                    let n = x.len();
                    let tries = if worst_case { cfg.candidates } else { 1 };
                    let mut best: Option<(f64, State)> = None;
                    for _ in 0..tries {
                        let cand = &nominal + unit_direction(&mut rng, n) * cfg.d_bar;
                        let j = value(&cand);
                        if best.as_ref().is_none_or(|(bj, _)| j > *bj) {
                            best = Some((j, cand));
                        }
                    }
                    best.map(|(_, s)| s).unwrap_or(nominal)
                }
            }
            Channel::Control => {
                if cfg.d_bar == 0.0 {
                    dsys.step(&x, &base.clamp_control(&u).0)
                } else {
                    let m = u.len();
                    let tries = if worst_case { cfg.candidates } else { 1 };
                    let mut best: Option<(f64, State)> = None;
                    for _ in 0..tries {
                        let pert = &u + unit_direction(&mut rng, m) * cfg.d_bar;
                        let cand = dsys.step(&x, &base.clamp_control(&pert).0);
                        let j = value(&cand);
                        if best.as_ref().is_none_or(|(bj, _)| j > *bj) {
                            best = Some((j, cand));
                        }
                    }
                    best.map(|(_, s)| s).expect("at least one candidate")
                }
            }
        };
        if !next.iter().all(|v| v.is_finite()) {
            break;
        }
        x = next;
        states.push(x.clone());
    }
    IssRun { states }
}

#[allow(clippy::too_many_arguments)]
fn iss_experiment(
    dsys: &DiscreteSystem,
    policy: &(dyn Fn(&State) -> Control + Sync),
    value: &(dyn Fn(&State) -> f64 + Sync),
    grid: &UniformGrid,
    x0s: &[State],
    cfg: &IssConfig,
    channel: Channel,
) -> Result<IssResult> {
    cfg.validate()?;
    if x0s.is_empty() {
        return Err(invalid("initial_states", "need at least one rollout"));
    }
    let n = x0s.len();
    // Rollout r and its held-out twin n + r share x₀ but not the noise.
    let runs = par_map(2 * n, |r| {
        let x0 = &x0s[r % n];
        let worst = r % 2 == 1;
        let seed = cfg.seed.wrapping_mul(0x9E37_79B9).wrapping_add(r as u64);
        iss_rollout(dsys, policy, value, x0, cfg, channel, worst, seed)
    });
    let (fit, held_out) = runs.split_at(n);

    let tail_start = ((cfg.horizon as f64) * cfg.tail_fraction).floor() as usize;
    let mut ultimate: f64 = 0.0;
    let mut bounded = true;
    let mut max_norm: f64 = 0.0;
    for run in runs.iter() {
        for (k, x) in run.states.iter().enumerate() {
            max_norm = max_norm.max(x.norm());
            bounded &= grid.contains(x);
            if k >= tail_start {
                ultimate = ultimate.max(x.norm());
            }
        }
        bounded &= run.states.len() == cfg.horizon + 1;
    }

    let (m_fit, lambda_fit) = fit_exponential(fit, ultimate);

    let excess = |run: &IssRun| -> Vec<f64> {
        run.states
            .windows(2)
            .map(|w| value(&w[1]) - cfg.c3 * value(&w[0]))
            .collect()
    };
    let sigma_hat = fit
        .iter()
        .flat_map(excess)
        .fold(0.0, f64::max);
    let held: Vec<f64> = held_out.iter().flat_map(excess).collect();
    let ok = held.iter().filter(|&&e| e <= sigma_hat).count();
    Ok(IssResult {
        d_bar: cfg.d_bar,
        rollouts: n,
        ultimate_bound: ultimate,
        m_fit,
        lambda_fit,
        sigma_hat,
        lyapunov_fraction: if held.is_empty() {
            1.0
        } else {
            ok as f64 / held.len() as f64
        },
        transitions: held.len(),
        bounded,
        max_state_norm: max_norm,
        trajectories: runs.into_iter().map(|r| r.states).collect(),
    })
}

/// Least-squares fit of `log(‖x_k‖/‖x₀‖) ≈ log M + k·log λ` over samples above
/// `max(2·floor, 1e-8)`; `M` is then raised so the fit envelopes every sample.
fn fit_exponential(runs: &[IssRun], floor: f64) -> (f64, f64) {
    let cutoff = (2.0 * floor).max(1e-8);
    let mut pts = Vec::new();
    for run in runs {
        let n0 = run.states[0].norm();
        if n0 <= cutoff {
            continue;
        }
        for (k, x) in run.states.iter().enumerate() {
            let nx = x.norm();
            if nx <= cutoff {
                break;
            }
            pts.push((k as f64, (nx / n0).ln()));
        }
    }
    if pts.len() < 2 {
        return (1.0, 0.0);
    }
    let m = pts.len() as f64;
    let (sx, sy) = pts.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let (mx, my) = (sx / m, sy / m);
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return (1.0, 0.0);
    }
    let slope = sxy / sxx;
    let log_m = pts
        .iter()
        .map(|(k, y)| y - slope * k)
        .fold(f64::NEG_INFINITY, f64::max);
    (log_m.exp(), slope.exp())
}

/// Rollouts of `x_{k+1} = F(x_k, π(x_k)) + d_k` with `‖d_k‖ = d̄`: even
/// rollouts draw random directions, odd ones keep the `J`-maximizing of
/// `candidates` random directions.
pub fn iss_additive_experiment(
    dsys: &DiscreteSystem,
    policy: &(dyn Fn(&State) -> Control + Sync),
    value: &(dyn Fn(&State) -> f64 + Sync),
    grid: &UniformGrid,
    x0s: &[State],
    cfg: &IssConfig,
) -> Result<IssResult> {
    iss_experiment(dsys, policy, value, grid, x0s, cfg, Channel::State)
}

/// Rollouts of the perturbed policy `clamp(π(x) + p)` with `‖p‖ = d̄`, using the
/// same direction scheme.
pub fn iss_suboptimal_policy_experiment(
    dsys: &DiscreteSystem,
    policy: &(dyn Fn(&State) -> Control + Sync),
    value: &(dyn Fn(&State) -> f64 + Sync),
    grid: &UniformGrid,
    x0s: &[State],
    cfg: &IssConfig,
) -> Result<IssResult> {
    iss_experiment(dsys, policy, value, grid, x0s, cfg, Channel::Control)
}

/// `‖∂F/∂u‖₂` at the origin: the factor turning a control perturbation bound
/// into a state disturbance bound for control-affine maps with constant `g`.
pub fn control_lipschitz(dsys: &DiscreteSystem) -> f64 {
    crate::linalg::spectral_norm(&dsys.linearize().1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clf::{ClfKind, QuadraticCLF};
    use crate::field::{extract_sublevel, SetKind};
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    fn clf_sqrt3(kind: ClfKind, alpha: f64) -> QuadraticCLF {
        let s = 3f64.sqrt();
        QuadraticCLF::from_parts(
            DMatrix::from_row_slice(2, 2, &[s, 1.0, 1.0, s]),
            DMatrix::from_row_slice(1, 2, &[1.0, s]),
            alpha,
            kind,
        )
        .unwrap()
    }

    #[test]
    fn ct_bound_plug_in() {
        let clf = clf_sqrt3(ClfKind::Continuous, 0.9);
        let spec = CostSpec::NominalCt {
            beta: 1.0,
            rho: 1.0,
            lambda: 0.5,
            gamma: 0.1,
        };
        let r = ct_bounds(&clf, &spec, 2.0).unwrap();
        let (c1, c2) = (3f64.sqrt() - 1.0, 3f64.sqrt() + 1.0);
        assert_relative_eq!(r.value_lower_coeff, c1 / 4.1, epsilon = 1e-12);
        assert_relative_eq!(r.value_upper_coeff, c2 / 0.6, epsilon = 1e-12);
        assert!((r.value_lower_coeff - 0.1786).abs() < 1e-4);
        assert!((r.value_upper_coeff - 4.5535).abs() < 1e-4);
        assert!((r.state_envelope_coeff - 5.050).abs() < 5e-4);
        assert_eq!(r.state_envelope_rate, 0.25);
        assert!(r.flags.is_empty());
    }

    #[test]
    fn ct_envelope_degenerates_to_one() {
        let clf = QuadraticCLF::from_parts(
            DMatrix::identity(2, 2),
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            1.0,
            ClfKind::Continuous,
        )
        .unwrap();
        let spec = CostSpec::NominalCt {
            beta: 1.0,
            rho: 1.0,
            lambda: 0.3,
            gamma: 0.3,
        };
        // With c1 = c2 the coefficient is 1 exactly when 2L = λ.
        let r = ct_bounds(&clf, &spec, 0.15).unwrap();
        assert_relative_eq!(r.state_envelope_coeff, 1.0, epsilon = 1e-15);
        assert!(r.flags.is_empty());
        let r = ct_bounds(&clf, &spec, 0.0).unwrap();
        assert_relative_eq!(r.state_envelope_coeff, 0.5f64.sqrt(), epsilon = 1e-15);
        assert!(!r.flags.is_empty(), "2L < lambda is flagged");
    }

    #[test]
    fn dt_bound_plug_in() {
        let clf = clf_sqrt3(ClfKind::Discrete, 0.9);
        let spec = CostSpec::NominalDt {
            beta: 1.0,
            rho: 1.0,
            lambda: 0.3,
            delta: 0.95,
        };
        let r = dt_bounds(&clf, &spec).unwrap();
        let (c1, c2) = (3f64.sqrt() - 1.0, 3f64.sqrt() + 1.0);
        assert_relative_eq!(r.state_envelope_coeff, (c2 / (c1 * 0.335)).sqrt(), epsilon = 1e-12);
        assert!((r.state_envelope_coeff - 3.338).abs() < 5e-4);
        assert_relative_eq!(r.value_lower_coeff, c1, epsilon = 1e-15);
        assert_relative_eq!(r.value_decay, 0.7, epsilon = 1e-15);

        let one = dt_bounds(&clf.clone().with_alpha(1.0).unwrap(), &spec.with_lambda(1.0)).unwrap();
        assert_relative_eq!(one.value_upper_coeff, c2, epsilon = 1e-15);
        assert_eq!(one.value_decay, 0.0);
        assert_eq!(one.value_lower_coeff, r.value_lower_coeff);
    }

    fn practical(lambda: f64, delta: f64) -> CostSpec {
        CostSpec::PracticalDt {
            beta: 1.0,
            rho: 1.0,
            lambda,
            delta,
            sigma_sq: 1.0,
            sigma_vdot: 1.0,
            w_u: 0.0,
        }
    }

    #[test]
    fn practical_feasibility() {
        let clf = clf_sqrt3(ClfKind::Discrete, 0.9);
        let r = dt_practical_bounds(&clf, &practical(0.3, 0.95), 0.1, 0.0).unwrap();
        let q = (1.0 - 0.335 * (-0.1f64).exp()) / 0.95;
        assert_relative_eq!(r.constant("q_cbar").unwrap(), q, epsilon = 1e-14);
        assert!((q - 0.7336).abs() < 5e-5);
        assert!(r.feasible);

        let r = dt_practical_bounds(&clf, &practical(0.01, 0.99), 1.0, 0.0).unwrap();
        let q = (1.0 - (1.0 - 0.99 * 0.99) * (-1f64).exp()) / 0.99;
        assert_relative_eq!(r.constant("q_cbar").unwrap(), q, epsilon = 1e-14);
        assert!((q - 1.0027).abs() < 5e-5);
        assert!(!r.feasible);

        let big = q_cbar(&practical(0.3, 0.95), 0.1, 1e12).unwrap();
        assert!(big > 1.0 && (big - 1.0 / 0.95).abs() < 1e-9);
    }

    fn unit_grid() -> UniformGrid {
        UniformGrid::new(vec![-1.0, -1.0], vec![1.0, 1.0], vec![11, 11]).unwrap()
    }

    #[test]
    fn value_scan_detects_violations() {
        let grid = unit_grid();
        let clf = clf_sqrt3(ClfKind::Discrete, 0.9);
        let spec = CostSpec::NominalDt {
            beta: 1.0,
            rho: 1.0,
            lambda: 0.3,
            delta: 0.95,
        };
        let r = dt_bounds(&clf, &spec).unwrap();
        let all = extract_sublevel(&vec![0.0; grid.len()], 1.0, &grid, SetKind::ClfSet).unwrap();
        let exact: Vec<f64> = grid.nodes().map(|x| r.value_upper_coeff * x.norm_squared()).collect();
        let f = ValueField::new(grid.clone(), exact.clone()).unwrap();
        assert!(scan_value_bounds(&f, &r, &all, 0.05).violations.is_empty());

        let zero = ValueField::zeros(grid.clone());
        let scan = scan_value_bounds(&zero, &r, &all, 0.05);
        assert_eq!(scan.violations.len(), scan.checked - 1);

        let mut spiked = exact;
        let i = grid.flat_index(&[3, 6]);
        spiked[i] *= 10.0;
        let f = ValueField::new(grid.clone(), spiked).unwrap();
        let scan = scan_value_bounds(&f, &r, &all, 0.05);
        assert_eq!(scan.violations.len(), 1);
        assert_eq!(scan.violations[0].quantity, "value_upper");
    }

    #[test]
    fn trajectory_scans() {
        let clf = clf_sqrt3(ClfKind::Discrete, 0.9);
        let spec = CostSpec::NominalDt {
            beta: 1.0,
            rho: 1.0,
            lambda: 0.3,
            delta: 0.95,
        };
        let r = dt_bounds(&clf, &spec).unwrap();
        let still = Trajectory {
            times: vec![0.0, 0.1, 0.2],
            states: vec![State::zeros(2); 3],
            controls: vec![Control::zeros(1); 2],
            values: vec![0.0; 3],
            clf_values: vec![0.0; 3],
            ..Default::default()
        };
        for mode in [
            TrajectoryMode::ValueDecay,
            TrajectoryMode::StateEnvelope,
            TrajectoryMode::ClfDecay,
        ] {
            assert!(scan_trajectory_bounds(&still, &r, mode, 1.1).unwrap().violations.is_empty());
        }
        let growing = Trajectory {
            times: (0..5).map(|k| k as f64).collect(),
            states: (0..5).map(|k| State::from_element(2, 1.5f64.powi(k))).collect(),
            ..Default::default()
        };
        let scan = scan_trajectory_bounds(&growing, &r, TrajectoryMode::StateEnvelope, 1.1).unwrap();
        assert!(!scan.violations.is_empty());
        assert!(matches!(
            scan_trajectory_bounds(&growing, &r, TrajectoryMode::ValueDecay, 1.1),
            Err(Error::MissingField { .. })
        ));
    }

    #[test]
    fn lipschitz_of_linear_loop() {
        let sys = crate::systems::double_integrator(100.0).unwrap();
        let grid = unit_grid();
        let all = extract_sublevel(&vec![0.0; grid.len()], 1.0, &grid, SetKind::ClfSet).unwrap();
        let k = [1.0, 3f64.sqrt()];
        let pi = move |x: &State| Control::from_element(1, -k[0] * x[0] - k[1] * x[1]);
        let l = estimate_lipschitz(&pi, &sys, &all, &grid, 1000, 1).unwrap();
        let m = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -k[0], -k[1]]);
        let norm = crate::linalg::spectral_norm(&m);
        assert!(l <= norm * (1.0 + 1e-9) && l >= 0.98 * norm, "L = {l}, |M| = {norm}");

        let zero_sys = ControlAffineSystem::new(
            "null",
            2,
            1,
            std::sync::Arc::new(|_: &State| State::zeros(2)),
            std::sync::Arc::new(|_: &State| DMatrix::zeros(2, 1)),
            Control::from_element(1, -1.0),
            Control::from_element(1, 1.0),
        )
        .unwrap();
        assert_eq!(estimate_lipschitz(&pi, &zero_sys, &all, &grid, 10, 1).unwrap(), 0.0);
        let empty = extract_sublevel(&vec![1.0; grid.len()], 0.5, &grid, SetKind::ClfSet).unwrap();
        assert!(estimate_lipschitz(&pi, &sys, &empty, &grid, 10, 1).is_err());
    }

    #[test]
    fn exponential_fit_recovers_rate() {
        let runs = vec![IssRun {
            states: (0..50).map(|k| State::from_element(1, 2.0 * 0.9f64.powi(k))).collect(),
        }];
        let (m, l) = fit_exponential(&runs, 0.0);
        assert_relative_eq!(l, 0.9, epsilon = 1e-12);
        assert_relative_eq!(m, 1.0, epsilon = 1e-9);
    }
}
