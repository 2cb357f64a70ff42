//! End-to-end checks that chain synthesis, solving, rollouts and scans.

use nalgebra::DMatrix;
use oclab_core::analysis::{
    control_lipschitz, dt_bounds, iss_additive_experiment, iss_suboptimal_policy_experiment, scan_trajectory_bounds,
    select_regions, BoundReport, IssConfig, Regions, TrajectoryMode,
};
use oclab_core::clf::{certify_region, synthesize_ct, synthesize_dt, Plant, QuadraticCLF};
use oclab_core::costs::CostSpec;
use oclab_core::field::{UniformGrid, ValueField};
use oclab_core::solvers::{solve_dp_dt, solve_hjb_ct, DiscountedProblem, GreedyPolicy, SolverConfig};
use oclab_core::systems::{discretize, double_integrator, rollout_dt, Control, DiscreteSystem, Probes, Scheme, State};
use oclab_core::trajopt::{cost_to_go, solve_shooting, ShootingProblem, ShootingSettings, ShootingSolution};
use std::sync::OnceLock;

fn ct_setup() -> (oclab_core::systems::ControlAffineSystem, QuadraticCLF, CostSpec) {
    let sys = double_integrator(3.0).unwrap();
    let clf = synthesize_ct(&sys, &DMatrix::identity(2, 2), &DMatrix::identity(1, 1)).unwrap();
    let spec = CostSpec::NominalCt {
        beta: 1.0,
        rho: 10.0,
        lambda: 0.5 * clf.alpha(),
        gamma: 0.5,
    };
    (sys, clf, spec)
}

fn shoot(substeps: usize) -> ShootingSolution {
    let (sys, clf, spec) = ct_setup();
    let settings = ShootingSettings {
        horizon: 10.0,
        n_segments: 100,
        substeps_per_segment: substeps,
        penalty_weight: 100.0,
        budget: 1_000_000,
        defect_tol: 1e-4,
        penalty_rounds: 5,
    };
    let problem = ShootingProblem {
        sys: &sys,
        clf: &clf,
        spec: &spec,
        x0: State::from_vec(vec![1.0, 0.0]),
        settings,
    };
    solve_shooting(&problem).unwrap()
}

fn shoot10() -> &'static ShootingSolution {
    static SOL: OnceLock<ShootingSolution> = OnceLock::new();
    SOL.get_or_init(|| shoot(10))
}

#[test]
fn shooting_agrees_with_grid_value() {
    let (sys, clf, spec) = ct_setup();
    let grid = UniformGrid::new(vec![-2.0, -2.0], vec![2.0, 2.0], vec![201, 201]).unwrap();
    let mut cfg = SolverConfig::new(vec![21]);
    cfg.sl_step = 0.01;
    let (field, _, report) = solve_hjb_ct(&sys, &clf, &spec, &grid, &cfg).unwrap();
    assert!(report.converged);
    let j_grid = field.interpolate(&State::from_vec(vec![1.0, 0.0]));
    let sol = shoot10();
    assert!(!sol.failed);
    let gap = (sol.objective - j_grid).abs() / j_grid;
    assert!(gap < 0.05, "grid {j_grid}, shooting {}, gap {gap}", sol.objective);
}

#[test]
fn substep_doubling_barely_moves_the_objective() {
    let coarse = shoot10();
    let fine = shoot(20);
    assert!(!fine.failed);
    let rel = (fine.objective - coarse.objective).abs() / coarse.objective;
    assert!(rel < 0.01, "{} vs {}", coarse.objective, fine.objective);
}

#[test]
fn shooting_history_is_monotone_within_rounds() {
    let sol = shoot10();
    assert!(sol.continuity_residual <= 1e-4);
    for round in &sol.objective_history {
        for w in round.windows(2) {
            assert!(w[1] <= w[0], "objective increased: {} -> {}", w[0], w[1]);
        }
    }
}

#[test]
fn cost_to_go_starts_at_objective_and_decreases() {
    let (_, _, spec) = ct_setup();
    let sol = shoot10();
    let ctg = cost_to_go(&sol.trajectory, &spec).unwrap();
    let j0 = ctg[0];
    assert!((j0 - sol.objective).abs() <= 1e-6 * sol.objective, "{j0} vs {}", sol.objective);
    for w in ctg.windows(2) {
        assert!(w[1] <= w[0] + 1e-3 * j0);
    }
}

struct DtCase {
    dsys: DiscreteSystem,
    clf: QuadraticCLF,
    field: ValueField,
    spec: CostSpec,
    cfg: SolverConfig,
    report: BoundReport,
    regions: Regions,
}

fn dt_case() -> &'static DtCase {
    static CASE: OnceLock<DtCase> = OnceLock::new();
    CASE.get_or_init(|| {
        let sys = double_integrator(3.0).unwrap();
        let dsys = discretize(&sys, 0.1, Scheme::Euler).unwrap();
        let clf0 = synthesize_dt(&dsys, &DMatrix::identity(2, 2), &DMatrix::identity(1, 1)).unwrap();
        let (clf, _) = certify_region(&clf0, Plant::Discrete(&dsys), 2.0, 4000, 7).unwrap();
        let spec = CostSpec::NominalDt {
            beta: 1.0,
            rho: 10.0,
            lambda: clf.alpha(),
            delta: 0.95,
        };
        let grid = UniformGrid::new(vec![-2.0, -2.0], vec![2.0, 2.0], vec![101, 101]).unwrap();
        let cfg = SolverConfig::new(vec![21]);
        let (field, _, _) = solve_dp_dt(&dsys, &clf, &spec, &grid, &cfg).unwrap();
        let regions = select_regions(&field, &clf, sys.control_lo(), sys.control_hi()).unwrap();
        let report = dt_bounds(&clf, &spec).unwrap();
        DtCase {
            dsys,
            clf,
            field,
            spec,
            cfg,
            report,
            regions,
        }
    })
}

fn starts(clf: &QuadraticCLF, level: f64, n: usize) -> Vec<State> {
    (0..n)
        .map(|i| {
            let th = std::f64::consts::TAU * (i as f64 + 0.3) / n as f64;
            let d = State::from_vec(vec![th.cos(), th.sin()]);
            let v = clf.value(&d);
            d * (level / v).sqrt()
        })
        .collect()
}

fn iss_cfg(case: &DtCase, d_bar: f64) -> IssConfig {
    IssConfig {
        d_bar,
        horizon: 150,
        tail_fraction: 0.5,
        c3: case.report.value_decay,
        candidates: 8,
        seed: 11,
    }
}

#[test]
fn iss_experiments_scale_with_disturbance() {
    let case = dt_case();
    let problem = DiscountedProblem::discrete(&case.dsys, &case.clf, &case.spec, &case.cfg).unwrap();
    let gp = GreedyPolicy::new(problem, case.field.clone(), &case.clf, &case.cfg, true);
    let pol = |x: &State| gp.control(x);
    let jf = |x: &State| gp.value(x);
    let grid = &case.field.grid;
    let x0s = starts(&case.clf, 0.9 * case.regions.c, 8);

    let nominal = iss_additive_experiment(&case.dsys, &pol, &jf, grid, &x0s, &iss_cfg(case, 0.0)).unwrap();
    let sub0 = iss_suboptimal_policy_experiment(&case.dsys, &pol, &jf, grid, &x0s, &iss_cfg(case, 0.0)).unwrap();
    assert_eq!(nominal.trajectories, sub0.trajectories);

    let mut last = nominal.ultimate_bound;
    for d in [0.01, 0.02, 0.05] {
        let r = iss_additive_experiment(&case.dsys, &pol, &jf, grid, &x0s, &iss_cfg(case, d)).unwrap();
        assert!(r.bounded);
        assert!(r.ultimate_bound > last, "ultimate bound not increasing at {d}");
        last = r.ultimate_bound;
    }

    let lf = control_lipschitz(&case.dsys);
    let p = 0.2;
    let sub = iss_suboptimal_policy_experiment(&case.dsys, &pol, &jf, grid, &x0s, &iss_cfg(case, p)).unwrap();
    let add = iss_additive_experiment(&case.dsys, &pol, &jf, grid, &x0s, &iss_cfg(case, lf * p)).unwrap();
    assert!(sub.bounded);
    assert!(
        sub.ultimate_bound <= 2.0 * add.ultimate_bound,
        "suboptimal {} vs additive {}",
        sub.ultimate_bound,
        add.ultimate_bound
    );
}

#[test]
fn perturbed_controls_are_clamped() {
    let case = dt_case();
    let base = case.dsys.base();
    let pol = |x: &State| case.clf.feedback(x);
    let jf = |x: &State| case.clf.value(x);
    let x0s = starts(&case.clf, 0.5 * case.regions.c, 4);
    let r = iss_suboptimal_policy_experiment(&case.dsys, &pol, &jf, &case.field.grid, &x0s, &iss_cfg(case, 100.0))
        .unwrap();
    // Any admissible control moves the state at most ‖B_d‖·‖u‖ away from the
    // zero-control successor.
    let umax = base.control_hi().norm().max(base.control_lo().norm());
    let reach = control_lipschitz(&case.dsys) * umax * (1.0 + 1e-12);
    for states in &r.trajectories {
        for w in states.windows(2) {
            let free = case.dsys.step(&w[0], &Control::zeros(1));
            assert!((&w[1] - free).norm() <= reach);
        }
    }
}

#[test]
fn destabilized_policy_is_flagged() {
    let case = dt_case();
    let anti = |x: &State| -case.clf.feedback(x);
    let vf = |x: &State| case.clf.value(x);
    let x0 = starts(&case.clf, 0.5 * case.regions.c, 1).remove(0);
    let probes = Probes {
        stage_cost: None,
        clf: Some(&vf),
        value: None,
    };
    let traj = rollout_dt(&case.dsys, &anti, &x0, 100, probes).unwrap();
    let scan = scan_trajectory_bounds(&traj, &case.report, TrajectoryMode::StateEnvelope, 1.1).unwrap();
    assert!(!scan.violations.is_empty());

    let good = |x: &State| case.clf.feedback(x);
    let traj = rollout_dt(&case.dsys, &good, &x0, 100, probes).unwrap();
    let scan = scan_trajectory_bounds(&traj, &case.report, TrajectoryMode::StateEnvelope, 1.1).unwrap();
    assert!(scan.violations.is_empty());
}
