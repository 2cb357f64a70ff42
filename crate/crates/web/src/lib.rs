//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Each export takes a JSON parameter object and returns a JSON string; the
//! `*_json` functions hold the logic so native tests can call them.

use nalgebra::DMatrix;
use oclab_core::analysis::{certified_level, dt_bounds, dt_practical_bounds, q_cbar, select_regions};
use oclab_core::clf::{certify_region, synthesize_ct, synthesize_dt, Plant, QuadraticCLF};
use oclab_core::costs::{c_reg_bound, CostSpec};
use oclab_core::field::UniformGrid;
use oclab_core::solvers::{solve_dp_dt, DiscountedProblem, GreedyPolicy, SolverConfig};
use oclab_core::systems::{discretize, double_integrator, rollout_dt, DiscreteSystem, Probes, Scheme, State};
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

const BOX: f64 = 2.0;
const U_MAX: f64 = 3.0;
const CERTIFY_SAMPLES: usize = 2000;
const SEED: u64 = 7;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn parse<'a, T: Deserialize<'a>>(json: &'a str) -> Result<T, String> {
    serde_json::from_str(json).map_err(|e| format!("parameters: {e}"))
}

fn setup(h: f64) -> Result<(DiscreteSystem, QuadraticCLF, UniformGrid), String> {
    let sys = double_integrator(U_MAX).map_err(err)?;
    let dsys = discretize(&sys, h, Scheme::Euler).map_err(err)?;
    let eye = |n| DMatrix::identity(n, n);
    let linear = synthesize_dt(&dsys, &eye(2), &eye(1)).map_err(err)?;
    let (clf, _) = certify_region(&linear, Plant::Discrete(&dsys), BOX, CERTIFY_SAMPLES, SEED).map_err(err)?;
    Ok((dsys, clf, UniformGrid::new(vec![-BOX; 2], vec![BOX; 2], vec![2; 2]).map_err(err)?))
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveParams {
    pub practical: bool,
    pub h: f64,
    pub delta: f64,
    pub lambda_fraction: f64,
    pub rho: f64,
    pub sigma_sq: f64,
    pub sigma_vdot: f64,
    pub w_u: f64,
    pub nodes: usize,
    pub controls: usize,
    pub x0: [f64; 2],
    pub steps: usize,
}

impl Default for SolveParams {
    fn default() -> Self {
        Self {
            practical: false,
            h: 0.1,
            delta: 0.95,
            lambda_fraction: 1.0,
            rho: 10.0,
            sigma_sq: 500.0,
            sigma_vdot: 1.0,
            w_u: 1e-4,
            nodes: 41,
            controls: 11,
            x0: [1.0, 0.5],
            steps: 100,
        }
    }
}

impl SolveParams {
    fn spec(&self, alpha: f64) -> CostSpec {
        let lambda = self.lambda_fraction * alpha;
        if self.practical {
            CostSpec::PracticalDt {
                beta: 1.0,
                rho: self.rho,
                lambda,
                delta: self.delta,
                sigma_sq: self.sigma_sq,
                sigma_vdot: self.sigma_vdot,
                w_u: self.w_u,
            }
        } else {
            CostSpec::NominalDt {
                beta: 1.0,
                rho: self.rho,
                lambda,
                delta: self.delta,
            }
        }
    }
}

#[derive(Debug, Serialize)]
pub struct SolveOutput {
    pub variant: &'static str,
    pub alpha: f64,
    pub lambda: f64,
    pub iterations: usize,
    pub converged: bool,
    pub counts: Vec<usize>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    /// Row-major values, last coordinate fastest.
    pub values: Vec<f64>,
    /// CLF level of the scanned region `Ω_c`.
    pub c: f64,
    pub p: [f64; 4],
    pub value_lower_coeff: f64,
    pub value_upper_coeff: f64,
    pub value_decay: f64,
    pub feasible: bool,
    pub states: Vec<[f64; 2]>,
    pub rollout_values: Vec<f64>,
    pub value_envelope: Vec<f64>,
    pub state_envelope: Vec<f64>,
}

/// Discrete-time value iteration on the double integrator followed by a
/// greedy rollout from `x0`.
pub fn solve_json(params: &str) -> Result<String, String> {
    let p: SolveParams = parse(params)?;
    if !(3..=121).contains(&p.nodes) || !(3..=41).contains(&p.controls) {
        return Err("nodes must lie in 3..=121 and controls in 3..=41".into());
    }
    if p.steps > 1000 {
        return Err("steps must be at most 1000".into());
    }
    if p.x0.iter().any(|v| !v.is_finite() || v.abs() > BOX) {
        return Err(format!("x0 must lie in the box [-{BOX}, {BOX}]²"));
    }
    let (dsys, clf, _) = setup(p.h)?;
    let spec = p.spec(clf.alpha());
    spec.validate(clf.alpha()).map_err(err)?;
    let grid = UniformGrid::new(vec![-BOX; 2], vec![BOX; 2], vec![p.nodes; 2]).map_err(err)?;
    let mut cfg = SolverConfig::new(vec![p.controls]);
    cfg.tol = 1e-6;
    let (field, _, report) = solve_dp_dt(&dsys, &clf, &spec, &grid, &cfg).map_err(err)?;
    let (lo_u, hi_u) = (dsys.base().control_lo(), dsys.base().control_hi());
    let regions = select_regions(&field, &clf, lo_u, hi_u).map_err(err)?;
    let bounds = match spec {
        CostSpec::PracticalDt { .. } => {
            let c_bar = certified_level(&clf, lo_u, hi_u, &grid);
            dt_practical_bounds(&clf, &spec, c_bar, c_reg_bound(&spec, &clf).map_err(err)?).map_err(err)?
        }
        _ => dt_bounds(&clf, &spec).map_err(err)?,
    };

    let problem = DiscountedProblem::discrete(&dsys, &clf, &spec, &cfg).map_err(err)?;
    let gp = GreedyPolicy::new(problem, field.clone(), &clf, &cfg, true);
    let policy = |x: &State| gp.control(x);
    let jf = |x: &State| gp.value(x);
    let probes = Probes {
        stage_cost: None,
        clf: None,
        value: Some(&jf),
    };
    let x0 = State::from_vec(p.x0.to_vec());
    let tr = rollout_dt(&dsys, &policy, &x0, p.steps, probes).map_err(err)?;
    let (n0, j0) = (x0.norm(), tr.values.first().copied().unwrap_or(0.0));
    let cp = clf.p();
    let out = SolveOutput {
        variant: spec.variant_name(),
        alpha: clf.alpha(),
        lambda: spec.lambda(),
        iterations: report.iterations,
        converged: report.converged,
        counts: grid.counts().to_vec(),
        lo: grid.lo().to_vec(),
        hi: grid.hi().to_vec(),
        values: field.values.clone(),
        c: regions.c,
        p: [cp[(0, 0)], cp[(0, 1)], cp[(1, 0)], cp[(1, 1)]],
        value_lower_coeff: bounds.value_lower_coeff,
        value_upper_coeff: bounds.value_upper_coeff,
        value_decay: bounds.value_decay,
        feasible: bounds.feasible,
        states: tr.states.iter().map(|x| [x[0], x[1]]).collect(),
        rollout_values: tr.values.clone(),
        value_envelope: (0..tr.len()).map(|k| bounds.value_envelope(0.0, k) * j0).collect(),
        state_envelope: (0..tr.len()).map(|k| bounds.state_envelope(0.0, k) * n0).collect(),
    };
    serde_json::to_string(&out).map_err(err)
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeasibilityParams {
    pub h: f64,
    pub delta: f64,
    pub w_u: f64,
    pub lambda_fractions: usize,
    pub log10_sigma_sq: [f64; 2],
    pub sigma_steps: usize,
}

impl Default for FeasibilityParams {
    fn default() -> Self {
        Self {
            h: 0.1,
            delta: 0.95,
            w_u: 1e-4,
            lambda_fractions: 20,
            log10_sigma_sq: [0.0, 4.0],
            sigma_steps: 40,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct FeasibilityOutput {
    pub c_bar: f64,
    pub alpha: f64,
    pub lambda_fraction: Vec<f64>,
    pub sigma_sq: Vec<f64>,
    /// `q[i][j]` for `lambda_fraction[i]` and `sigma_sq[j]`.
    pub q: Vec<Vec<f64>>,
}

/// `q_c̄` of the practical cost over a `(λ/α, σ²)` lattice.
pub fn feasibility_json(params: &str) -> Result<String, String> {
    let p: FeasibilityParams = parse(params)?;
    if !(2..=200).contains(&p.lambda_fractions) || !(2..=200).contains(&p.sigma_steps) {
        return Err("lattice sizes must lie in 2..=200".into());
    }
    let (dsys, clf, grid) = setup(p.h)?;
    let c_bar = certified_level(&clf, dsys.base().control_lo(), dsys.base().control_hi(), &grid);
    let fractions: Vec<f64> = (1..=p.lambda_fractions).map(|i| i as f64 / p.lambda_fractions as f64).collect();
    let [a, b] = p.log10_sigma_sq;
    let sigmas: Vec<f64> = (0..p.sigma_steps)
        .map(|j| 10f64.powf(a + (b - a) * j as f64 / (p.sigma_steps - 1) as f64))
        .collect();
    let mut q = Vec::with_capacity(fractions.len());
    for &f in &fractions {
        let mut row = Vec::with_capacity(sigmas.len());
        for &s in &sigmas {
            let spec = CostSpec::PracticalDt {
                beta: 1.0,
                rho: 10.0,
                lambda: f * clf.alpha(),
                delta: p.delta,
                sigma_sq: s,
                sigma_vdot: 1.0,
                w_u: p.w_u,
            };
            spec.validate(clf.alpha()).map_err(err)?;
            let c_reg = c_reg_bound(&spec, &clf).map_err(err)?;
            row.push(q_cbar(&spec, c_bar, c_reg).map_err(err)?);
        }
        q.push(row);
    }
    serde_json::to_string(&FeasibilityOutput {
        c_bar,
        alpha: clf.alpha(),
        lambda_fraction: fractions,
        sigma_sq: sigmas,
        q,
    })
    .map_err(err)
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClfParams {
    /// Diagonal of `Q`.
    pub q: [f64; 2],
    pub r: f64,
    /// Euler step; `None` synthesizes for the continuous system.
    pub h: Option<f64>,
    pub radius: f64,
}

impl Default for ClfParams {
    fn default() -> Self {
        Self {
            q: [1.0, 1.0],
            r: 1.0,
            h: None,
            radius: BOX,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct ClfOutput {
    pub p: [f64; 4],
    pub gain: [f64; 2],
    pub c1: f64,
    pub c2: f64,
    pub alpha_linear: f64,
    pub alpha_certified: f64,
    pub riccati_residual: f64,
    pub violations: usize,
}

/// Riccati CLF for the double integrator with diagonal weights, certified on
/// the ball of the given radius.
pub fn clf_json(params: &str) -> Result<String, String> {
    let p: ClfParams = parse(params)?;
    let sys = double_integrator(U_MAX).map_err(err)?;
    let q = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(p.q.to_vec()));
    let r = DMatrix::from_element(1, 1, p.r);
    let dsys = p.h.map(|h| discretize(&sys, h, Scheme::Euler)).transpose().map_err(err)?;
    let (linear, plant) = match &dsys {
        Some(d) => (synthesize_dt(d, &q, &r).map_err(err)?, Plant::Discrete(d)),
        None => (synthesize_ct(&sys, &q, &r).map_err(err)?, Plant::Continuous(&sys)),
    };
    let (clf, cert) = certify_region(&linear, plant, p.radius, CERTIFY_SAMPLES, SEED).map_err(err)?;
    let (cp, k) = (clf.p(), clf.gain());
    serde_json::to_string(&ClfOutput {
        p: [cp[(0, 0)], cp[(0, 1)], cp[(1, 0)], cp[(1, 1)]],
        gain: [k[(0, 0)], k[(0, 1)]],
        c1: clf.c1(),
        c2: clf.c2(),
        alpha_linear: linear.alpha(),
        alpha_certified: clf.alpha(),
        riccati_residual: clf.riccati_residual(),
        violations: cert.violations.len(),
    })
    .map_err(err)
}

#[wasm_bindgen]
pub fn solve(params: &str) -> Result<String, JsValue> {
    solve_json(params).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn feasibility(params: &str) -> Result<String, JsValue> {
    feasibility_json(params).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn clf(params: &str) -> Result<String, JsValue> {
    clf_json(params).map_err(|e| JsValue::from_str(&e))
}
