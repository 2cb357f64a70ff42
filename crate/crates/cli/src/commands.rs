//! Experiment pipelines behind the subcommands. Each returns a typed report
//! (also written as `bounds.json`) whose checks decide the exit status.

use crate::artifacts::{num, Artifacts, Csv};
use crate::config::{CostVariant, RunConfig};
use crate::error::CliError;
use crate::svg::{render, Mark, Panel};
use oclab_core::analysis::{
    certified_level, control_lipschitz, ct_bounds, dt_bounds, dt_practical_bounds, estimate_lipschitz,
    iss_additive_experiment, iss_suboptimal_policy_experiment, scan_step_decay, scan_trajectory_bounds,
    scan_value_bounds, select_regions, BoundReport, IssConfig, IssResult, Regions, ScanResult, TrajectoryMode,
};
use oclab_core::clf::{certify_region, synthesize_ct, synthesize_dt, Plant, QuadraticCLF};
use oclab_core::costs::{c_reg_bound, stage_cost_ct, stage_cost_discrete, CostSpec};
use oclab_core::field::{clf_sublevel, SublevelSet, UniformGrid, ValueField};
use oclab_core::solvers::{solve_dp_dt, solve_hjb_ct, DiscountedProblem, GreedyPolicy, SolveReport};
use oclab_core::systems::{rollout_ct, rollout_dt, ControlAffineSystem, DiscreteSystem, Probes, State, Trajectory};
use oclab_core::trajopt::{cost_to_go, solve_shooting, PenaltyRound, ShootingProblem};
use serde::Serialize;
use std::path::Path;

/// Violations kept verbatim in a report; the rest are only counted.
const MAX_LISTED_VIOLATIONS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Passed,
    ScanFailed,
    Infeasible,
}

impl Status {
    pub fn exit_code(self) -> i32 {
        match self {
            Status::Passed => 0,
            Status::ScanFailed => 3,
            Status::Infeasible => 4,
        }
    }

    fn from_checks(checks: &[Check]) -> Self {
        if checks.iter().all(|c| c.passed) {
            Status::Passed
        } else {
            Status::ScanFailed
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub observed: f64,
    pub limit: f64,
    /// `"<="` or `">="`
    pub relation: &'static str,
    pub passed: bool,
}

impl Check {
    pub fn at_most(name: &str, observed: f64, limit: f64) -> Self {
        Self {
            name: name.into(),
            observed,
            limit,
            relation: "<=",
            passed: observed <= limit,
        }
    }

    pub fn at_least(name: &str, observed: f64, limit: f64) -> Self {
        Self {
            name: name.into(),
            observed,
            limit,
            relation: ">=",
            passed: observed >= limit,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CertificateSummary {
    pub radius: f64,
    pub n_samples: usize,
    pub alpha_observed: f64,
    pub violations: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClfSummary {
    pub system: String,
    pub kind: &'static str,
    pub p: Vec<Vec<f64>>,
    pub gain: Vec<Vec<f64>>,
    pub c1: f64,
    pub c2: f64,
    /// Certified rate (the smaller of the linear and sampled rates).
    pub alpha: f64,
    pub alpha_linear: f64,
    pub riccati_residual: f64,
    pub certified_radius: Option<f64>,
    pub certificate: Option<CertificateSummary>,
}

fn rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Riccati synthesis followed by sampled certification when a radius is set.
fn synthesize(
    cfg: &RunConfig,
    sys: &ControlAffineSystem,
    dsys: Option<&DiscreteSystem>,
) -> Result<(QuadraticCLF, ClfSummary), CliError> {
    let (q, r) = cfg.weights()?;
    let linear = match dsys {
        Some(d) => synthesize_dt(d, &q, &r),
        None => synthesize_ct(sys, &q, &r),
    }
    .map_err(CliError::solve)?;
    let (clf, certificate) = match cfg.clf.certify_radius {
        Some(radius) => {
            let plant = match dsys {
                Some(d) => Plant::Discrete(d),
                None => Plant::Continuous(sys),
            };
            let (clf, cert) =
                certify_region(&linear, plant, radius, cfg.clf.samples, cfg.seed).map_err(CliError::solve)?;
            let summary = CertificateSummary {
                radius,
                n_samples: cert.n_samples,
                alpha_observed: cert.alpha_observed,
                violations: cert.violations.len(),
            };
            (clf, Some(summary))
        }
        None => (linear.clone(), None),
    };
    let summary = ClfSummary {
        system: sys.name().to_string(),
        kind: if dsys.is_some() { "discrete" } else { "continuous" },
        p: rows(clf.p()),
        gain: rows(clf.gain()),
        c1: clf.c1(),
        c2: clf.c2(),
        alpha: clf.alpha(),
        alpha_linear: linear.alpha(),
        riccati_residual: clf.riccati_residual(),
        certified_radius: clf.certified_radius(),
        certificate,
    };
    Ok((clf, summary))
}

#[derive(Debug, Clone, Serialize)]
pub struct SynthesizeReport {
    pub config: serde_json::Value,
    pub clf: ClfSummary,
}

pub fn synthesize_cmd(cfg: &RunConfig, out: &Path) -> Result<(SynthesizeReport, Status), CliError> {
    let sys = cfg.system()?;
    let dsys = cfg.discrete_system(&sys)?;
    let (_, clf) = synthesize(cfg, &sys, dsys.as_ref())?;
    let report = SynthesizeReport {
        config: cfg.to_json(),
        clf,
    };
    Artifacts::new(out)?.json("clf.json", &report)?;
    Ok((report, Status::Passed))
}

#[derive(Debug, Clone, Serialize)]
pub struct ScanSummary {
    pub checked: usize,
    pub violations: usize,
    pub fraction: f64,
}

impl From<&ScanResult> for ScanSummary {
    fn from(s: &ScanResult) -> Self {
        Self {
            checked: s.checked,
            violations: s.violations.len(),
            fraction: s.fraction(),
        }
    }
}

impl ScanSummary {
    fn merge(parts: &[&ScanResult]) -> Self {
        let checked = parts.iter().map(|s| s.checked).sum();
        let violations = parts.iter().map(|s| s.violations.len()).sum();
        Self {
            checked,
            violations,
            fraction: if checked == 0 {
                0.0
            } else {
                violations as f64 / checked as f64
            },
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RolloutScan {
    pub x0: Vec<f64>,
    pub final_norm: f64,
    pub saturated: bool,
    pub diverged: bool,
    pub state: ScanSummary,
    pub value: ScanSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step: Option<ScanSummary>,
}

fn attach(report: &mut BoundReport, scans: &[&ScanResult]) {
    for s in scans {
        for v in &s.violations {
            if report.violations.len() >= MAX_LISTED_VIOLATIONS {
                return;
            }
            report.violations.push(v.clone());
        }
    }
}

/// Rollout starts on the CLF level set `V = level`, spread over directions.
pub fn level_starts(clf: &QuadraticCLF, level: f64, count: usize) -> Vec<State> {
    let n = clf.state_dim();
    (0..count)
        .map(|i| {
            let th = std::f64::consts::TAU * (i as f64 + 0.3) / count as f64;
            let d = if n == 2 {
                State::from_vec(vec![th.cos(), th.sin()])
            } else {
                State::from_fn(n, |j, _| (th * (j + 1) as f64 + j as f64).cos())
            };
            let v = clf.value(&d);
            d * (level / v).sqrt()
        })
        .collect()
}

fn write_value_artifacts(
    art: &mut Artifacts,
    field: &ValueField,
    solve: &SolveReport,
) -> Result<(), CliError> {
    art.text("value_field.csv", &field.to_csv())?;
    let mut res = Csv::new(&["iteration", "residual"]);
    for (i, r) in solve.residual_history.iter().enumerate() {
        res.row(&[(i + 1).to_string(), num(*r)]);
    }
    art.text("residuals.csv", &res.finish())
}

fn trajectories_csv(trajs: &[Trajectory], n: usize, m: usize) -> String {
    let mut header = vec!["rollout".to_string(), "k".into(), "t".into()];
    header.extend((0..n).map(|i| format!("x{i}")));
    header.extend((0..m).map(|i| format!("u{i}")));
    header.extend(["V".to_string(), "J".into(), "stage_cost".into()]);
    let mut csv = Csv::new(&header);
    for (r, tr) in trajs.iter().enumerate() {
        for k in 0..tr.len() {
            let mut row = vec![r.to_string(), k.to_string(), num(tr.times[k])];
            row.extend(tr.states[k].iter().map(|v| num(*v)));
            match tr.controls.get(k) {
                Some(u) => row.extend(u.iter().map(|v| num(*v))),
                None => row.extend((0..m).map(|_| String::new())),
            }
            row.push(tr.clf_values.get(k).map_or(String::new(), |v| num(*v)));
            row.push(tr.values.get(k).map_or(String::new(), |v| num(*v)));
            row.push(tr.stage_costs.get(k).map_or(String::new(), |v| num(*v)));
            csv.row(&row);
        }
    }
    csv.finish()
}

/// Envelope columns aligned row by row with `trajectories.csv`.
fn envelopes_csv(trajs: &[Trajectory], report: &BoundReport, discrete: bool) -> String {
    let mut csv = Csv::new(&[
        "rollout",
        "k",
        "t",
        "state_norm",
        "state_envelope",
        "J",
        "value_envelope",
    ]);
    for (r, tr) in trajs.iter().enumerate() {
        let n0 = tr.states[0].norm();
        let j0 = tr.values.first().copied().unwrap_or(f64::NAN);
        for k in 0..tr.len() {
            let t = tr.times[k];
            let kk = if discrete { k } else { 0 };
            csv.row(&[
                r.to_string(),
                k.to_string(),
                num(t),
                num(tr.states[k].norm()),
                num(report.state_envelope(t, kk) * n0),
                tr.values.get(k).map_or(String::new(), |v| num(*v)),
                num(report.value_envelope(t, kk) * j0),
            ]);
        }
    }
    csv.finish()
}

fn sandwich_panel(title: &str, field: &ValueField, omega: &SublevelSet, report: &BoundReport) -> Panel {
    let mut p = Panel::new(title, "|x|", "J(x)");
    let grid = &field.grid;
    let pts: Vec<(f64, f64)> = omega
        .interior_indices(grid)
        .map(|i| (grid.node(i).norm(), field.values[i]))
        .collect();
    let r_max = pts.iter().map(|p| p.0).fold(0.0, f64::max);
    let curve = |c: f64| (0..=60).map(|i| r_max * i as f64 / 60.0).map(|r| (r, c * r * r)).collect();
    p.add("J on grid", pts, Mark::Dots, Some("#1f77b4"));
    p.add("lower bound", curve(report.value_lower_coeff), Mark::Dashed, Some("#2ca02c"));
    p.add("upper bound", curve(report.value_upper_coeff), Mark::Dashed, Some("#d62728"));
    p
}

fn normalized_panel(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: Vec<Vec<(f64, f64)>>,
    envelope: Vec<(f64, f64)>,
) -> Panel {
    let mut p = Panel::new(title, x_label, y_label).log_y(true);
    let mut first = true;
    for s in series {
        if first {
            p.add("rollouts", s, Mark::Line, Some("#1f77b4"));
            first = false;
        } else {
            p.add_quiet(s, Mark::Line, "#1f77b4");
        }
    }
    p.add("bound", envelope, Mark::Dashed, Some("#d62728"));
    p
}

/// Monotonicity, contraction and the a-posteriori sup-norm error
/// `κ·residual/(1 − κ)` relative to the largest value on `Ω_c`.
fn solver_checks(
    checks: &mut Vec<Check>,
    prefix: &str,
    solve: &SolveReport,
    field: &ValueField,
    omega: &SublevelSet,
    slack: f64,
) {
    let kappa = solve.discount;
    let error = kappa * solve.final_residual / (1.0 - kappa);
    let scale = omega.indices().map(|i| field.values[i]).fold(0.0, f64::max);
    checks.push(Check::at_most(
        &format!("{prefix}value_error_bound"),
        if scale > 0.0 { error / scale } else { 0.0 },
        slack,
    ));
    checks.push(Check::at_most(
        &format!("{prefix}monotone_violations"),
        solve.monotone_violations as f64,
        0.0,
    ));
    checks.push(Check::at_most(
        &format!("{prefix}contraction_violations"),
        solve.contraction_violations as f64,
        0.0,
    ));
}

fn require_converged(solve: &SolveReport) -> Result<(), CliError> {
    if solve.converged {
        Ok(())
    } else {
        Err(CliError::Solve(format!(
            "value iteration stopped after {} iterations with residual {:e}",
            solve.iterations, solve.final_residual
        )))
    }
}

fn resolve_costs(cfg: &RunConfig, clf: &QuadraticCLF) -> Result<Vec<CostSpec>, CliError> {
    if cfg.costs.is_empty() {
        return Err(CliError::Config("costs: at least one entry required".into()));
    }
    cfg.costs.iter().enumerate().map(|(i, c)| c.resolve(i, clf.alpha())).collect()
}

fn omega(clf: &QuadraticCLF, grid: &UniformGrid, regions: &Regions) -> Result<SublevelSet, CliError> {
    let set = clf_sublevel(clf, grid, regions.c).map_err(CliError::solve)?;
    if set.count() == 0 {
        return Err(CliError::Solve(format!("CLF sublevel set at c = {} holds no grid node", regions.c)));
    }
    Ok(set)
}

#[derive(Debug, Clone, Serialize)]
pub struct Fig1Report {
    pub config: serde_json::Value,
    pub cost: CostSpec,
    pub clf: ClfSummary,
    pub solver: SolveReport,
    pub regions: Regions,
    pub lipschitz: f64,
    pub bounds: BoundReport,
    pub value_scan: ScanSummary,
    pub rollouts: Vec<RolloutScan>,
    pub state_scan: ScanSummary,
    pub value_decay_scan: ScanSummary,
    pub checks: Vec<Check>,
    pub status: Status,
}

pub fn fig1(cfg: &RunConfig, out: &Path) -> Result<Fig1Report, CliError> {
    let sys = cfg.system()?;
    if cfg.discretization.is_some() {
        return Err(CliError::Config("discretization: fig1 runs the continuous-time system".into()));
    }
    let (clf, clf_summary) = synthesize(cfg, &sys, None)?;
    let specs = resolve_costs(cfg, &clf)?;
    let [spec] = specs[..] else {
        return Err(CliError::Config("costs: fig1 takes exactly one nominal_ct entry".into()));
    };
    let grid = cfg.uniform_grid()?;
    let scfg = cfg.solver_config()?;
    let a = &cfg.analysis;

    let (field, _, solve) = solve_hjb_ct(&sys, &clf, &spec, &grid, scfg).map_err(CliError::solve)?;
    require_converged(&solve)?;
    let regions = select_regions(&field, &clf, sys.control_lo(), sys.control_hi()).map_err(CliError::solve)?;
    let omega = omega(&clf, &grid, &regions)?;

    let problem = DiscountedProblem::continuous(&sys, &clf, &spec, scfg).map_err(CliError::solve)?;
    let gp = GreedyPolicy::new(problem, field.clone(), &clf, scfg, cfg.rollouts.refine);
    let policy = |x: &State| gp.control(x);
    let lipschitz = estimate_lipschitz(&policy, &sys, &omega, &grid, a.lipschitz_pairs, cfg.seed.wrapping_add(1))
        .map_err(CliError::solve)?;
    let mut bounds = ct_bounds(&clf, &spec, lipschitz).map_err(CliError::solve)?;
    let value_scan = scan_value_bounds(&field, &bounds, &omega, a.grid_slack);

    let jf = |x: &State| gp.value(x);
    let vf = |x: &State| clf.value(x);
    let lf = |x: &State, u: &oclab_core::systems::Control| stage_cost_ct(&spec, &clf, &sys, x, u).unwrap_or(f64::NAN);
    let probes = Probes {
        stage_cost: Some(&lf),
        clf: Some(&vf),
        value: Some(&jf),
    };
    let starts = level_starts(&clf, cfg.rollouts.level_fraction * regions.c, cfg.rollouts.count);
    let mut trajs = Vec::new();
    let mut rollouts = Vec::new();
    let (mut state_scans, mut decay_scans) = (Vec::new(), Vec::new());
    for x0 in &starts {
        let tr = rollout_ct(&sys, &policy, x0, cfg.rollouts.duration, cfg.rollouts.h, probes).map_err(CliError::solve)?;
        let s = scan_trajectory_bounds(&tr, &bounds, TrajectoryMode::StateEnvelope, a.trajectory_slack)
            .map_err(CliError::solve)?;
        let v = scan_trajectory_bounds(&tr, &bounds, TrajectoryMode::ValueDecay, a.trajectory_slack)
            .map_err(CliError::solve)?;
        rollouts.push(RolloutScan {
            x0: x0.iter().copied().collect(),
            final_norm: tr.final_state().map_or(f64::NAN, |x| x.norm()),
            saturated: tr.saturated,
            diverged: tr.diverged,
            state: (&s).into(),
            value: (&v).into(),
            step: None,
        });
        trajs.push(tr);
        state_scans.push(s);
        decay_scans.push(v);
    }
    let state_scan = ScanSummary::merge(&state_scans.iter().collect::<Vec<_>>());
    let value_decay_scan = ScanSummary::merge(&decay_scans.iter().collect::<Vec<_>>());
    let mut listed: Vec<&ScanResult> = vec![&value_scan];
    listed.extend(state_scans.iter());
    listed.extend(decay_scans.iter());
    attach(&mut bounds, &listed);

    let mut checks = vec![
        Check::at_most("value_sandwich_fraction", value_scan.fraction(), a.max_value_violation_fraction),
        Check::at_most("state_envelope_fraction", state_scan.fraction, a.max_trajectory_violation_fraction),
        Check::at_most("value_decay_fraction", value_decay_scan.fraction, a.max_trajectory_violation_fraction),
        Check::at_most(
            "diverged_rollouts",
            rollouts.iter().filter(|r| r.diverged).count() as f64,
            0.0,
        ),
    ];
    solver_checks(&mut checks, "", &solve, &field, &omega, a.grid_slack);
    let status = Status::from_checks(&checks);

    let mut art = Artifacts::new(out)?;
    write_value_artifacts(&mut art, &field, &solve)?;
    art.text("trajectories.csv", &trajectories_csv(&trajs, sys.state_dim(), sys.control_dim()))?;
    art.text("envelopes.csv", &envelopes_csv(&trajs, &bounds, false))?;
    let t_end = cfg.rollouts.duration;
    let ts: Vec<f64> = (0..=100).map(|i| t_end * i as f64 / 100.0).collect();
    let panels = [
        sandwich_panel("Value function vs quadratic bounds", &field, &omega, &bounds),
        normalized_panel(
            "Value decay along rollouts",
            "t",
            "J(x(t)) / J(x0)",
            trajs
                .iter()
                .map(|tr| tr.times.iter().zip(&tr.values).map(|(t, j)| (*t, j / tr.values[0])).collect())
                .collect(),
            ts.iter().map(|&t| (t, bounds.value_envelope(t, 0))).collect(),
        ),
        normalized_panel(
            "State norm envelope",
            "t",
            "|x(t)| / |x0|",
            trajs
                .iter()
                .map(|tr| {
                    let n0 = tr.states[0].norm();
                    tr.times.iter().zip(&tr.states).map(|(t, x)| (*t, x.norm() / n0)).collect()
                })
                .collect(),
            ts.iter().map(|&t| (t, bounds.state_envelope(t, 0))).collect(),
        ),
    ];
    art.text("fig1.svg", &render(&panels, 3))?;
    let report = Fig1Report {
        config: cfg.to_json(),
        cost: spec,
        clf: clf_summary,
        solver: solve,
        regions,
        lipschitz,
        bounds,
        value_scan: (&value_scan).into(),
        rollouts,
        state_scan,
        value_decay_scan,
        checks,
        status,
    };
    art.json("clf.json", &report.clf)?;
    art.json("bounds.json", &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct Fig2Report {
    pub config: serde_json::Value,
    pub cost: CostSpec,
    pub clf: ClfSummary,
    pub x0: Vec<f64>,
    pub objective: f64,
    pub continuity_residual: f64,
    pub failed: bool,
    pub evaluations: usize,
    pub rounds: Vec<PenaltyRound>,
    pub tail_discount: f64,
    pub clf_initial: f64,
    pub clf_final: f64,
    /// `V(x(T)) / V(x0)`, zero when `x0 = 0`.
    pub clf_ratio: f64,
    /// Largest `Ĵ(t_k) / min_{j<k} Ĵ(t_j)`.
    pub cost_to_go_ratio: f64,
    pub checks: Vec<Check>,
    pub status: Status,
}

/// Worst increase of a series over its running minimum.
fn worst_rebound(series: &[f64]) -> f64 {
    let mut run_min = f64::INFINITY;
    let mut worst: f64 = 1.0;
    for &v in series {
        if run_min.is_finite() {
            let r = if run_min > 0.0 {
                v / run_min
            } else if v > 0.0 {
                f64::INFINITY
            } else {
                1.0
            };
            worst = worst.max(r);
        }
        run_min = run_min.min(v);
    }
    worst
}

pub fn fig2(cfg: &RunConfig, out: &Path) -> Result<Fig2Report, CliError> {
    let sys = cfg.system()?;
    if cfg.discretization.is_some() {
        return Err(CliError::Config("discretization: fig2 runs the continuous-time system".into()));
    }
    let sh = cfg.shooting_config()?;
    let (clf, clf_summary) = synthesize(cfg, &sys, None)?;
    let specs = resolve_costs(cfg, &clf)?;
    let [spec] = specs[..] else {
        return Err(CliError::Config("costs: fig2 takes exactly one nominal_ct entry".into()));
    };
    let x0 = State::from_vec(sh.x0.clone());
    if let Some(r) = cfg.clf.certify_radius {
        if x0.norm() > r {
            return Err(CliError::Config(format!(
                "shooting.x0: |x0| = {} lies outside the certified radius {r}",
                x0.norm()
            )));
        }
    }
    let problem = ShootingProblem {
        sys: &sys,
        clf: &clf,
        spec: &spec,
        x0: x0.clone(),
        settings: sh.settings(),
    };
    let sol = solve_shooting(&problem).map_err(CliError::solve)?;
    let tr = &sol.trajectory;
    let ctg = cost_to_go(tr, &spec).map_err(CliError::solve)?;
    let v0 = tr.clf_values.first().copied().unwrap_or(0.0);
    let vt = tr.clf_values.last().copied().unwrap_or(0.0);
    let clf_ratio = if v0 > 0.0 { vt / v0 } else { 0.0 };
    let ctg_ratio = worst_rebound(&ctg);
    let a = &cfg.analysis;
    let checks = vec![
        Check::at_most("continuity_defect", sol.continuity_residual, sh.defect_tol),
        Check::at_most("terminal_clf_ratio", clf_ratio, a.terminal_clf_ratio),
        Check::at_most("cost_to_go_rebound", ctg_ratio, a.cost_to_go_slack),
    ];
    let status = Status::from_checks(&checks);

    let mut art = Artifacts::new(out)?;
    let (n, m) = (sys.state_dim(), sys.control_dim());
    let mut header = vec!["t".to_string()];
    header.extend((0..n).map(|i| format!("x{i}")));
    header.extend((0..m).map(|i| format!("u{i}")));
    header.extend(["V".to_string(), "stage_cost".into(), "cost_to_go".into()]);
    let mut csv = Csv::new(&header);
    let mut env = Csv::new(&["t", "V", "V_ratio", "cost_to_go", "cost_to_go_bound"]);
    let mut run_min = f64::INFINITY;
    for k in 0..tr.len() {
        let mut row = vec![num(tr.times[k])];
        row.extend(tr.states[k].iter().map(|v| num(*v)));
        match tr.controls.get(k) {
            Some(u) => row.extend(u.iter().map(|v| num(*v))),
            None => row.extend((0..m).map(|_| String::new())),
        }
        row.push(num(tr.clf_values[k]));
        // Stage costs are recorded at the right end of each interval.
        row.push(if k == 0 { String::new() } else { num(tr.stage_costs[k - 1]) });
        row.push(num(ctg[k]));
        csv.row(&row);
        let bound = if run_min.is_finite() { a.cost_to_go_slack * run_min } else { f64::NAN };
        env.row(&[
            num(tr.times[k]),
            num(tr.clf_values[k]),
            num(if v0 > 0.0 { tr.clf_values[k] / v0 } else { 0.0 }),
            num(ctg[k]),
            num(bound),
        ]);
        run_min = run_min.min(ctg[k]);
    }
    art.text("trajectories.csv", &csv.finish())?;
    art.text("envelopes.csv", &env.finish())?;

    let t_end = tr.times.last().copied().unwrap_or(0.0);
    let mut p1 = Panel::new("CLF decay along the shooting solution", "t", "V(x(t)) / V(x0)").log_y(true);
    p1.add(
        "V ratio",
        tr.times
            .iter()
            .zip(&tr.clf_values)
            .map(|(t, v)| (*t, if v0 > 0.0 { v / v0 } else { 0.0 }))
            .collect(),
        Mark::Line,
        None,
    );
    p1.add(
        "terminal target",
        vec![(0.0, a.terminal_clf_ratio), (t_end, a.terminal_clf_ratio)],
        Mark::Dashed,
        Some("#d62728"),
    );
    let mut p2 = Panel::new("Cost-to-go", "t", "J(t)");
    p2.add("cost-to-go", tr.times.iter().copied().zip(ctg.iter().copied()).collect(), Mark::Line, None);
    art.text("fig2.svg", &render(&[p1, p2], 2))?;

    let report = Fig2Report {
        config: cfg.to_json(),
        cost: spec,
        clf: clf_summary,
        x0: sh.x0.clone(),
        objective: sol.objective,
        continuity_residual: sol.continuity_residual,
        failed: sol.failed,
        evaluations: sol.evaluations,
        rounds: sol.rounds.clone(),
        tail_discount: sol.tail_discount,
        clf_initial: v0,
        clf_final: vt,
        clf_ratio,
        cost_to_go_ratio: ctg_ratio,
        checks,
        status,
    };
    art.json("clf.json", &report.clf)?;
    art.json("bounds.json", &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct Feasibility {
    pub label: String,
    pub c_bar: f64,
    pub c_reg: f64,
    pub zeta_minus: f64,
    pub zeta_plus: f64,
    pub q_cbar: f64,
    pub feasible: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct DtRun {
    pub label: String,
    pub cost: CostSpec,
    pub solver: SolveReport,
    pub regions: Regions,
    pub bounds: BoundReport,
    pub value_scan: ScanSummary,
    pub rollouts: Vec<RolloutScan>,
    pub state_scan: ScanSummary,
    pub value_decay_scan: ScanSummary,
    pub step_scan: ScanSummary,
    pub checks: Vec<Check>,
    pub status: Status,
}

#[derive(Debug, Clone, Serialize)]
pub struct Fig3Report {
    pub config: serde_json::Value,
    pub clf: ClfSummary,
    pub c_certified: f64,
    pub feasibility: Vec<Feasibility>,
    pub runs: Vec<DtRun>,
    pub checks: Vec<Check>,
    pub status: Status,
}

/// Theorem constants for a discrete cost; the practical variant is evaluated
/// at `c_bar` and may come back infeasible.
fn discrete_bounds(clf: &QuadraticCLF, spec: &CostSpec, c_bar: f64) -> Result<BoundReport, CliError> {
    match spec {
        CostSpec::PracticalDt { .. } => {
            let c_reg = c_reg_bound(spec, clf).map_err(CliError::solve)?;
            dt_practical_bounds(clf, spec, c_bar, c_reg).map_err(CliError::solve)
        }
        _ => dt_bounds(clf, spec).map_err(CliError::solve),
    }
}

struct DtSetup {
    sys: ControlAffineSystem,
    dsys: DiscreteSystem,
    clf: QuadraticCLF,
    clf_summary: ClfSummary,
    specs: Vec<CostSpec>,
    grid: UniformGrid,
    c_certified: f64,
}

fn dt_setup(cfg: &RunConfig) -> Result<DtSetup, CliError> {
    let sys = cfg.system()?;
    let dsys = cfg
        .discrete_system(&sys)?
        .ok_or_else(|| CliError::Config("discretization: section required for discrete-time runs".into()))?;
    let (clf, clf_summary) = synthesize(cfg, &sys, Some(&dsys))?;
    let specs = resolve_costs(cfg, &clf)?;
    let grid = cfg.uniform_grid()?;
    let c_certified = certified_level(&clf, sys.control_lo(), sys.control_hi(), &grid);
    Ok(DtSetup {
        sys,
        dsys,
        clf,
        clf_summary,
        specs,
        grid,
        c_certified,
    })
}

fn run_dt(
    cfg: &RunConfig,
    setup: &DtSetup,
    spec: &CostSpec,
    art: &mut Artifacts,
) -> Result<(DtRun, ValueField, SublevelSet, Vec<Trajectory>), CliError> {
    let DtSetup {
        sys, dsys, clf, grid, ..
    } = setup;
    let scfg = cfg.solver_config()?;
    let a = &cfg.analysis;
    let (field, _, solve) = solve_dp_dt(dsys, clf, spec, grid, scfg).map_err(CliError::solve)?;
    require_converged(&solve)?;
    let regions = select_regions(&field, clf, sys.control_lo(), sys.control_hi()).map_err(CliError::solve)?;
    let omega = omega(clf, grid, &regions)?;
    let mut bounds = discrete_bounds(clf, spec, setup.c_certified)?;
    let value_scan = scan_value_bounds(&field, &bounds, &omega, a.grid_slack);

    let problem = DiscountedProblem::discrete(dsys, clf, spec, scfg).map_err(CliError::solve)?;
    let gp = GreedyPolicy::new(problem, field.clone(), clf, scfg, cfg.rollouts.refine);
    let policy = |x: &State| gp.control(x);
    let jf = |x: &State| gp.value(x);
    let vf = |x: &State| clf.value(x);
    let lf = |x: &State, u: &oclab_core::systems::Control| {
        stage_cost_discrete(spec, clf, dsys, x, u).unwrap_or(f64::NAN)
    };
    let probes = Probes {
        stage_cost: Some(&lf),
        clf: Some(&vf),
        value: Some(&jf),
    };
    let inside = |x: &State| clf.value(x) <= regions.c;
    let starts = level_starts(clf, cfg.rollouts.level_fraction * regions.c, cfg.rollouts.count);
    let (mut trajs, mut rollouts) = (Vec::new(), Vec::new());
    let (mut ss, mut vs, mut ks) = (Vec::new(), Vec::new(), Vec::new());
    for x0 in &starts {
        let tr = rollout_dt(dsys, &policy, x0, cfg.rollouts.steps, probes).map_err(CliError::solve)?;
        let s = scan_trajectory_bounds(&tr, &bounds, TrajectoryMode::StateEnvelope, a.trajectory_slack)
            .map_err(CliError::solve)?;
        let v = scan_trajectory_bounds(&tr, &bounds, TrajectoryMode::ValueDecay, a.trajectory_slack)
            .map_err(CliError::solve)?;
        let k = scan_step_decay(&tr, bounds.value_decay, a.step_slack, &inside).map_err(CliError::solve)?;
        rollouts.push(RolloutScan {
            x0: x0.iter().copied().collect(),
            final_norm: tr.final_state().map_or(f64::NAN, |x| x.norm()),
            saturated: tr.saturated,
            diverged: tr.diverged,
            state: (&s).into(),
            value: (&v).into(),
            step: Some((&k).into()),
        });
        trajs.push(tr);
        ss.push(s);
        vs.push(v);
        ks.push(k);
    }
    let state_scan = ScanSummary::merge(&ss.iter().collect::<Vec<_>>());
    let value_decay_scan = ScanSummary::merge(&vs.iter().collect::<Vec<_>>());
    let step_scan = ScanSummary::merge(&ks.iter().collect::<Vec<_>>());
    let mut listed: Vec<&ScanResult> = vec![&value_scan];
    listed.extend(ss.iter());
    listed.extend(ks.iter());
    attach(&mut bounds, &listed);

    let mut checks = vec![
        Check::at_most("value_sandwich_fraction", value_scan.fraction(), a.max_value_violation_fraction),
        Check::at_most("state_envelope_fraction", state_scan.fraction, a.max_trajectory_violation_fraction),
        Check::at_least("step_decay_fraction", 1.0 - step_scan.fraction, a.min_step_fraction),
        Check::at_most(
            "diverged_rollouts",
            rollouts.iter().filter(|r| r.diverged).count() as f64,
            0.0,
        ),
    ];
    solver_checks(&mut checks, "", &solve, &field, &omega, a.grid_slack);
    let status = Status::from_checks(&checks);

    write_value_artifacts(art, &field, &solve)?;
    art.text("trajectories.csv", &trajectories_csv(&trajs, sys.state_dim(), sys.control_dim()))?;
    art.text("envelopes.csv", &envelopes_csv(&trajs, &bounds, true))?;
    let run = DtRun {
        label: spec.variant_name().to_string(),
        cost: *spec,
        solver: solve,
        regions,
        bounds,
        value_scan: (&value_scan).into(),
        rollouts,
        state_scan,
        value_decay_scan,
        step_scan,
        checks,
        status,
    };
    art.json("bounds.json", &run)?;
    Ok((run, field, omega, trajs))
}

fn feasibility_of(setup: &DtSetup) -> Result<Vec<Feasibility>, CliError> {
    let mut out = Vec::new();
    for spec in &setup.specs {
        if let CostSpec::PracticalDt { .. } = spec {
            let b = discrete_bounds(&setup.clf, spec, setup.c_certified)?;
            let get = |k: &str| b.constant(k).unwrap_or(f64::NAN);
            out.push(Feasibility {
                label: spec.variant_name().to_string(),
                c_bar: get("c_bar"),
                c_reg: get("c_reg"),
                zeta_minus: get("zeta_minus"),
                zeta_plus: get("zeta_plus"),
                q_cbar: get("q_cbar"),
                feasible: b.feasible,
            });
        }
    }
    Ok(out)
}

pub fn fig3(cfg: &RunConfig, out: &Path) -> Result<Fig3Report, CliError> {
    let setup = dt_setup(cfg)?;
    let mut art = Artifacts::new(out)?;
    let feasibility = feasibility_of(&setup)?;
    if !feasibility.is_empty() {
        art.json("feasibility.json", &feasibility)?;
    }
    if let Some(bad) = feasibility.iter().find(|f| !f.feasible) {
        let checks = vec![Check::at_most(&format!("{}_q_cbar", bad.label), bad.q_cbar, 1.0)];
        let report = Fig3Report {
            config: cfg.to_json(),
            clf: setup.clf_summary.clone(),
            c_certified: setup.c_certified,
            feasibility,
            runs: Vec::new(),
            checks,
            status: Status::Infeasible,
        };
        art.json("bounds.json", &report)?;
        return Ok(report);
    }

    let mut labels = std::collections::BTreeMap::<&str, usize>::new();
    let mut runs = Vec::new();
    let mut panels = Vec::new();
    for spec in &setup.specs {
        let base = spec.variant_name();
        let seen = labels.entry(base).or_default();
        let dir = if *seen == 0 { base.to_string() } else { format!("{base}_{seen}") };
        *seen += 1;
        let mut sub = art.subdir(&dir)?;
        let (mut run, field, omega, trajs) = run_dt(cfg, &setup, spec, &mut sub)?;
        run.label = dir.clone();
        let steps = cfg.rollouts.steps;
        panels.push(sandwich_panel(&format!("{dir}: value vs bounds"), &field, &omega, &run.bounds));
        panels.push(normalized_panel(
            &format!("{dir}: state envelope"),
            "k",
            "|x_k| / |x_0|",
            trajs
                .iter()
                .map(|tr| {
                    let n0 = tr.states[0].norm();
                    tr.states.iter().enumerate().map(|(k, x)| (k as f64, x.norm() / n0)).collect()
                })
                .collect(),
            (0..=steps).map(|k| (k as f64, run.bounds.state_envelope(0.0, k))).collect(),
        ));
        panels.push(normalized_panel(
            &format!("{dir}: value decay"),
            "k",
            "J(x_k) / J(x_0)",
            trajs
                .iter()
                .map(|tr| tr.values.iter().enumerate().map(|(k, j)| (k as f64, j / tr.values[0])).collect())
                .collect(),
            (0..=steps).map(|k| (k as f64, run.bounds.value_envelope(0.0, k))).collect(),
        ));
        runs.push(run);
    }
    art.text("fig3.svg", &render(&panels, 3))?;
    let checks: Vec<Check> = runs
        .iter()
        .flat_map(|r| {
            r.checks.iter().map(move |c| Check {
                name: format!("{}.{}", r.label, c.name),
                ..c.clone()
            })
        })
        .collect();
    let status = Status::from_checks(&checks);
    let report = Fig3Report {
        config: cfg.to_json(),
        clf: setup.clf_summary.clone(),
        c_certified: setup.c_certified,
        feasibility,
        runs,
        checks,
        status,
    };
    art.json("clf.json", &report.clf)?;
    art.json("bounds.json", &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct RobustnessReport {
    pub config: serde_json::Value,
    pub cost: CostSpec,
    pub clf: ClfSummary,
    pub solver: SolveReport,
    pub regions: Regions,
    pub bounds: BoundReport,
    /// `‖B_d‖`, converting control perturbations into state disturbances.
    pub control_gain: f64,
    pub c3: f64,
    pub rate_theory: f64,
    pub additive: Vec<IssResult>,
    pub policy: Vec<IssResult>,
    pub checks: Vec<Check>,
    pub status: Status,
}

pub fn robustness(cfg: &RunConfig, out: &Path) -> Result<RobustnessReport, CliError> {
    let rb = cfg.robustness_config()?;
    let setup = dt_setup(cfg)?;
    let spec = setup.specs[0];
    if cfg.costs[0].variant == CostVariant::NominalCt {
        return Err(CliError::Config("costs[0].variant: robustness needs a discrete cost".into()));
    }
    let bounds = discrete_bounds(&setup.clf, &spec, setup.c_certified)?;
    if !bounds.feasible {
        return Err(CliError::Config("costs[0]: practical cost fails the contraction hypothesis".into()));
    }
    let scfg = cfg.solver_config()?;
    let (field, _, solve) =
        solve_dp_dt(&setup.dsys, &setup.clf, &spec, &setup.grid, scfg).map_err(CliError::solve)?;
    require_converged(&solve)?;
    let regions =
        select_regions(&field, &setup.clf, setup.sys.control_lo(), setup.sys.control_hi()).map_err(CliError::solve)?;
    let problem = DiscountedProblem::discrete(&setup.dsys, &setup.clf, &spec, scfg).map_err(CliError::solve)?;
    let gp = GreedyPolicy::new(problem, field.clone(), &setup.clf, scfg, cfg.rollouts.refine);
    let policy = |x: &State| gp.control(x);
    let jf = |x: &State| gp.value(x);
    let x0s = level_starts(&setup.clf, cfg.rollouts.level_fraction * regions.c, cfg.rollouts.count);
    let c3 = bounds.value_decay;
    let control_gain = control_lipschitz(&setup.dsys);
    let iss = |d_bar: f64| IssConfig {
        d_bar,
        horizon: rb.horizon,
        tail_fraction: rb.tail_fraction,
        c3,
        candidates: rb.candidates,
        seed: cfg.seed.wrapping_add(2),
    };
    let policy_d: Vec<f64> = rb
        .policy_d_bar
        .clone()
        .unwrap_or_else(|| rb.d_bar.iter().map(|d| d / control_gain).collect());
    let mut additive = Vec::new();
    for &d in &rb.d_bar {
        additive.push(
            iss_additive_experiment(&setup.dsys, &policy, &jf, &setup.grid, &x0s, &iss(d)).map_err(CliError::solve)?,
        );
    }
    let mut perturbed = Vec::new();
    for &p in &policy_d {
        perturbed.push(
            iss_suboptimal_policy_experiment(&setup.dsys, &policy, &jf, &setup.grid, &x0s, &iss(p))
                .map_err(CliError::solve)?,
        );
    }

    let rate_theory = bounds.state_envelope_rate;
    let mut checks = Vec::new();
    let unbounded = additive.iter().chain(&perturbed).filter(|r| !r.bounded).count();
    checks.push(Check::at_most("unbounded_sweeps", unbounded as f64, 0.0));
    let mut order: Vec<&IssResult> = additive.iter().collect();
    order.sort_by(|a, b| a.d_bar.total_cmp(&b.d_bar));
    let worst_drop = order
        .windows(2)
        .map(|w| {
            if w[0].ultimate_bound > 0.0 {
                1.0 - w[1].ultimate_bound / w[0].ultimate_bound
            } else {
                0.0
            }
        })
        .fold(0.0, f64::max);
    checks.push(Check::at_most("ultimate_bound_drop", worst_drop, rb.monotone_tolerance));
    let lyap = additive.iter().map(|r| r.lyapunov_fraction).fold(1.0, f64::min);
    checks.push(Check::at_least("lyapunov_fraction", lyap, rb.min_lyapunov_fraction));
    let sigma_ok = additive.iter().all(|r| r.sigma_hat.is_finite());
    checks.push(Check::at_least("finite_sigma", if sigma_ok { 1.0 } else { 0.0 }, 1.0));
    if let Some(zero) = additive.iter().find(|r| r.d_bar == 0.0) {
        checks.push(Check::at_most("ultimate_bound_at_zero", zero.ultimate_bound, rb.max_bound_at_zero));
        let rel = (zero.lambda_fit - rate_theory).abs() / rate_theory;
        checks.push(Check::at_most("rate_fit_error", rel, rb.rate_tolerance));
        if let Some(pz) = perturbed.iter().find(|r| r.d_bar == 0.0) {
            let same = pz.trajectories == zero.trajectories;
            checks.push(Check::at_least("zero_perturbation_matches", if same { 1.0 } else { 0.0 }, 1.0));
        }
    }
    let status = Status::from_checks(&checks);

    let mut art = Artifacts::new(out)?;
    let mut sweep = Csv::new(&[
        "experiment",
        "d_bar",
        "equivalent_state_d_bar",
        "ultimate_bound",
        "m_fit",
        "lambda_fit",
        "sigma_hat",
        "lyapunov_fraction",
        "transitions",
        "bounded",
        "max_state_norm",
    ]);
    let mut norms = Csv::new(&["experiment", "d_bar", "rollout", "k", "state_norm"]);
    let mut env = Csv::new(&["experiment", "d_bar", "k", "envelope"]);
    for (name, set, scale) in [("additive", &additive, 1.0), ("policy", &perturbed, control_gain)] {
        for r in set.iter() {
            sweep.row(&[
                name.to_string(),
                num(r.d_bar),
                num(r.d_bar * scale),
                num(r.ultimate_bound),
                num(r.m_fit),
                num(r.lambda_fit),
                num(r.sigma_hat),
                num(r.lyapunov_fraction),
                r.transitions.to_string(),
                r.bounded.to_string(),
                num(r.max_state_norm),
            ]);
            for (i, states) in r.trajectories.iter().enumerate() {
                for (k, x) in states.iter().enumerate() {
                    norms.row(&[name.to_string(), num(r.d_bar), i.to_string(), k.to_string(), num(x.norm())]);
                }
            }
            let n0 = x0s.iter().map(|x| x.norm()).fold(0.0, f64::max);
            for k in 0..=rb.horizon {
                let e = r.m_fit * r.lambda_fit.powi(k as i32) * n0 + r.ultimate_bound;
                env.row(&[name.to_string(), num(r.d_bar), k.to_string(), num(e)]);
            }
        }
    }
    art.text("robustness.csv", &sweep.finish())?;
    art.text("trajectories.csv", &norms.finish())?;
    art.text("envelopes.csv", &env.finish())?;

    let mut p1 = Panel::new("Ultimate bound vs disturbance", "equivalent state disturbance", "alpha_hat");
    p1.add(
        "additive",
        additive.iter().map(|r| (r.d_bar, r.ultimate_bound)).collect(),
        Mark::Line,
        None,
    );
    p1.add(
        "perturbed policy",
        perturbed.iter().map(|r| (r.d_bar * control_gain, r.ultimate_bound)).collect(),
        Mark::Dashed,
        None,
    );
    let mut p2 = Panel::new("Disturbed rollouts (largest d)", "k", "|x_k|").log_y(true);
    if let Some(r) = order.last() {
        for (i, states) in r.trajectories.iter().enumerate() {
            let pts = states.iter().enumerate().map(|(k, x)| (k as f64, x.norm())).collect();
            if i == 0 {
                p2.add("rollouts", pts, Mark::Line, Some("#1f77b4"));
            } else {
                p2.add_quiet(pts, Mark::Line, "#1f77b4");
            }
        }
        p2.add(
            "ultimate bound",
            vec![(0.0, r.ultimate_bound), (rb.horizon as f64, r.ultimate_bound)],
            Mark::Dashed,
            Some("#d62728"),
        );
    }
    art.text("robustness.svg", &render(&[p1, p2], 2))?;

    let report = RobustnessReport {
        config: cfg.to_json(),
        cost: spec,
        clf: setup.clf_summary,
        solver: solve,
        regions,
        bounds,
        control_gain,
        c3,
        rate_theory,
        additive,
        policy: perturbed,
        checks,
        status,
    };
    art.json("clf.json", &report.clf)?;
    art.json("bounds.json", &report)?;
    Ok(report)
}

