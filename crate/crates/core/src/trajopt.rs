//! Direct multiple shooting for the continuous-time discounted problem.
//!
//! Decision variables are one constant control per segment and the start
//! states of segments `1..N`. Continuity is imposed by a quadratic penalty
//! that is escalated ×10 per round; each round runs projected L-BFGS with a
//! monotone Armijo line search and central finite-difference gradients.

use serde::{Deserialize, Serialize};

use crate::clf::QuadraticCLF;
use crate::costs::{stage_cost_ct, CostSpec};
use crate::error::{invalid, Error, Result};
use crate::par_map;
use crate::systems::{rk4_raw, ControlAffineSystem, Control, State, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShootingSettings {
    /// Seconds.
    pub horizon: f64,
    pub n_segments: usize,
    pub substeps_per_segment: usize,
    /// Initial continuity penalty weight.
    pub penalty_weight: f64,
    /// Maximum number of objective-equivalent evaluations.
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

impl ShootingSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(invalid("horizon", "must be positive"));
        }
        if self.n_segments == 0 {
            return Err(invalid("n_segments", "must be at least 1"));
        }
        if self.substeps_per_segment == 0 {
            return Err(invalid("substeps_per_segment", "must be at least 1"));
        }
        if !(self.penalty_weight > 0.0) {
            return Err(invalid("penalty_weight", "must be positive"));
        }
        if self.budget == 0 {
            return Err(invalid("budget", "must be positive"));
        }
        if !(self.defect_tol > 0.0) {
            return Err(invalid("defect_tol", "must be positive"));
        }
        if self.penalty_rounds == 0 {
            return Err(invalid("penalty_rounds", "must be at least 1"));
        }
        Ok(())
    }
}

pub struct ShootingProblem<'a> {
    pub sys: &'a ControlAffineSystem,
    pub clf: &'a QuadraticCLF,
    pub spec: &'a CostSpec,
    pub x0: State,
    pub settings: ShootingSettings,
}

#[derive(Debug, Clone, Serialize)]
pub struct PenaltyRound {
    pub weight: f64,
    pub iterations: usize,
    pub objective: f64,
    pub max_defect: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ShootingSolution {
    #[serde(skip)]
    pub trajectory: Trajectory,
    /// Discounted quadrature objective without the penalty term.
    pub objective: f64,
    /// Largest continuity defect norm.
    pub continuity_residual: f64,
    /// Defects above tolerance when the budget or the rounds ran out.
    pub failed: bool,
    pub evaluations: usize,
    pub rounds: Vec<PenaltyRound>,
    /// Penalized objective after every accepted step, per round.
    #[serde(skip)]
    pub objective_history: Vec<Vec<f64>>,
    /// `e^{−γT}`: weight of everything past the horizon.
    pub tail_discount: f64,
}

struct Layout {
    n: usize,
    m: usize,
    segments: usize,
}

impl Layout {
    fn len(&self) -> usize {
        self.segments * self.m + (self.segments - 1) * self.n
    }

    fn control<'z>(&self, z: &'z [f64], k: usize) -> &'z [f64] {
        &z[k * self.m..(k + 1) * self.m]
    }

    fn state_offset(&self, k: usize) -> usize {
        debug_assert!(k >= 1);
        self.segments * self.m + (k - 1) * self.n
    }
}

struct Transcription<'p, 'a> {
    p: &'p ShootingProblem<'a>,
    layout: Layout,
    gamma: f64,
    seg_len: f64,
    dt: f64,
}

struct SegmentEval {
    cost: f64,
    end: State,
}

impl<'p, 'a> Transcription<'p, 'a> {
    fn new(p: &'p ShootingProblem<'a>) -> Result<Self> {
        p.settings.validate()?;
        let CostSpec::NominalCt { gamma, .. } = *p.spec else {
            return Err(Error::VariantMismatch {
                expected: "nominal_ct",
                actual: p.spec.variant_name(),
            });
        };
        p.spec.validate(p.clf.alpha())?;
        crate::systems::check_dim(&p.x0, p.sys.state_dim(), "x0")?;
        let s = &p.settings;
        let seg_len = s.horizon / s.n_segments as f64;
        Ok(Self {
            p,
            layout: Layout {
                n: p.sys.state_dim(),
                m: p.sys.control_dim(),
                segments: s.n_segments,
            },
            gamma,
            seg_len,
            dt: seg_len / s.substeps_per_segment as f64,
        })
    }

    fn start(&self, z: &[f64], k: usize) -> State {
        if k == 0 {
            self.p.x0.clone()
        } else {
            let o = self.layout.state_offset(k);
            State::from_column_slice(&z[o..o + self.layout.n])
        }
    }

    fn stage(&self, x: &State, u: &Control) -> f64 {
        stage_cost_ct(self.p.spec, self.p.clf, self.p.sys, x, u).unwrap_or(f64::NAN)
    }

    /// Integrates segment `k` from `s` under `u`, with right-endpoint
    /// discounted quadrature; `record` receives `(t, x, ℓ)` per substep.
    fn segment(&self, k: usize, s: &State, u: &Control, mut record: impl FnMut(f64, &State, f64)) -> SegmentEval {
        let t0 = k as f64 * self.seg_len;
        let mut x = s.clone();
        let mut cost = 0.0;
        for j in 0..self.p.settings.substeps_per_segment {
            x = rk4_raw(self.p.sys, &x, u, self.dt);
            let t = t0 + (j + 1) as f64 * self.dt;
            let l = self.stage(&x, u);
            cost += (-self.gamma * t).exp() * l * self.dt;
            record(t, &x, l);
        }
        SegmentEval { cost, end: x }
    }

    fn segment_plain(&self, k: usize, s: &State, u: &Control) -> SegmentEval {
        self.segment(k, s, u, |_, _, _| {})
    }

    fn evals(&self, z: &[f64]) -> Vec<SegmentEval> {
        par_map(self.layout.segments, |k| {
            let u = Control::from_column_slice(self.layout.control(z, k));
            self.segment_plain(k, &self.start(z, k), &u)
        })
    }

    fn defects(&self, z: &[f64], evals: &[SegmentEval]) -> Vec<State> {
        (0..self.layout.segments - 1)
            .map(|k| &evals[k].end - self.start(z, k + 1))
            .collect()
    }

    /// `(quadrature objective, penalized objective, max defect)`
    fn objective(&self, z: &[f64], w: f64) -> (f64, f64, f64) {
        let evals = self.evals(z);
        let cost: f64 = evals.iter().map(|e| e.cost).sum();
        let defects = self.defects(z, &evals);
        let pen: f64 = defects.iter().map(|d| d.norm_squared()).sum();
        let max_def = defects.iter().map(|d| d.norm()).fold(0.0, f64::max);
        (cost, cost + w * pen, max_def)
    }

    /// Gradient of the penalized objective. Each segment only couples its own
    /// start state and control, so perturbations re-integrate one segment.
    fn gradient(&self, z: &[f64], w: f64) -> Vec<f64> {
        let l = &self.layout;
        let evals = self.evals(z);
        let defects = self.defects(z, &evals);
        let per_segment = par_map(l.segments, |k| {
            let s = self.start(z, k);
            let u = Control::from_column_slice(l.control(z, k));
            let mut g_u = vec![0.0; l.m];
            let mut g_s = vec![0.0; if k == 0 { 0 } else { l.n }];
            let partial = |sp: &State, up: &Control, sm: &State, um: &Control, h: f64| -> f64 {
                let a = self.segment_plain(k, sp, up);
                let b = self.segment_plain(k, sm, um);
                let mut g = (a.cost - b.cost) / (2.0 * h);
                if k + 1 < l.segments {
                    g += 2.0 * w * ((&a.end - &b.end) / (2.0 * h)).dot(&defects[k]);
                }
                g
            };
            for i in 0..l.m {
                let h = 1e-6 * u[i].abs().max(1.0);
                let (mut up, mut um) = (u.clone(), u.clone());
                up[i] += h;
                um[i] -= h;
                g_u[i] = partial(&s, &up, &s, &um, h);
            }
            for i in 0..g_s.len() {
                let h = 1e-6 * s[i].abs().max(1.0);
                let (mut sp, mut sm) = (s.clone(), s.clone());
                sp[i] += h;
                sm[i] -= h;
                g_s[i] = partial(&sp, &u, &sm, &u, h) - 2.0 * w * defects[k - 1][i];
            }
            (g_u, g_s)
        });
        let mut g = vec![0.0; l.len()];
        for (k, (g_u, g_s)) in per_segment.into_iter().enumerate() {
            g[k * l.m..(k + 1) * l.m].copy_from_slice(&g_u);
            if k > 0 {
                let o = l.state_offset(k);
                g[o..o + l.n].copy_from_slice(&g_s);
            }
        }
        g
    }

    fn gradient_cost(&self) -> usize {
        2 * (self.layout.n + self.layout.m)
    }

    fn project(&self, z: &mut [f64]) {
        let (lo, hi) = (self.p.sys.control_lo(), self.p.sys.control_hi());
        for k in 0..self.layout.segments {
            for i in 0..self.layout.m {
                let v = &mut z[k * self.layout.m + i];
                *v = v.clamp(lo[i], hi[i]);
            }
        }
    }

    /// Controls at a bound whose descent direction points outward are frozen.
    fn freeze_active(&self, z: &[f64], d: &mut [f64]) {
        let (lo, hi) = (self.p.sys.control_lo(), self.p.sys.control_hi());
        for k in 0..self.layout.segments {
            for i in 0..self.layout.m {
                let j = k * self.layout.m + i;
                if (z[j] <= lo[i] && d[j] < 0.0) || (z[j] >= hi[i] && d[j] > 0.0) {
                    d[j] = 0.0;
                }
            }
        }
    }

    fn initial_guess(&self) -> Vec<f64> {
        let l = &self.layout;
        let mut z = vec![0.0; l.len()];
        for k in 0..l.segments {
            let frac = 1.0 - k as f64 / l.segments as f64;
            let s = &self.p.x0 * frac;
            let (u, _) = self.p.sys.clamp_control(&self.p.clf.feedback(&s));
            z[k * l.m..(k + 1) * l.m].copy_from_slice(u.as_slice());
            if k > 0 {
                let o = l.state_offset(k);
                z[o..o + l.n].copy_from_slice(s.as_slice());
            }
        }
        z
    }

    fn stitch(&self, z: &[f64]) -> Trajectory {
        let mut traj = Trajectory::default();
        traj.times.push(0.0);
        traj.states.push(self.p.x0.clone());
        traj.clf_values.push(self.p.clf.value(&self.p.x0));
        for k in 0..self.layout.segments {
            let u = Control::from_column_slice(self.layout.control(z, k));
            self.segment(k, &self.start(z, k), &u, |t, x, l| {
                traj.times.push(t);
                traj.states.push(x.clone());
                traj.clf_values.push(self.p.clf.value(x));
                traj.controls.push(u.clone());
                traj.stage_costs.push(l);
            });
        }
        traj
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves the penalized transcription and returns the stitched trajectory.
pub fn solve_shooting(problem: &ShootingProblem<'_>) -> Result<ShootingSolution> {
    let tr = Transcription::new(problem)?;
    let s = &problem.settings;
    let mut z = tr.initial_guess();
    tr.project(&mut z);
    let mut evaluations = 0usize;
    let mut rounds = Vec::new();
    let mut histories = Vec::new();
    let mut weight = s.penalty_weight;
    let (mut cost, mut f, mut defect) = tr.objective(&z, weight);
    evaluations += 1;
    if !f.is_finite() {
        return Err(Error::NonFinite("shooting objective"));
    }
    for round in 0..s.penalty_rounds {
        if round > 0 {
            weight *= 10.0;
            (cost, f, defect) = tr.objective(&z, weight);
            evaluations += 1;
        }
        if defect <= s.defect_tol && round > 0 {
            break;
        }
        let mut history = vec![f];
        let mut iterations = 0;
        let mut mem: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::new();
        let mut g = Vec::new();
        if evaluations + tr.gradient_cost() <= s.budget {
            g = tr.gradient(&z, weight);
            evaluations += tr.gradient_cost();
        }
        while !g.is_empty() && evaluations + tr.gradient_cost() + 1 <= s.budget {
            let mut pg = g.iter().map(|v| -v).collect::<Vec<_>>();
            tr.freeze_active(&z, &mut pg);
            let pg_norm = dot(&pg, &pg).sqrt();
            if pg_norm <= 1e-10 * (1.0 + f.abs()) {
                break;
            }
            // Two-loop recursion on -g.
            let mut q = g.clone();
            let mut alphas = Vec::with_capacity(mem.len());
            for (si, yi, rho) in mem.iter().rev() {
                let a = rho * dot(si, &q);
                q.iter_mut().zip(yi).for_each(|(qv, yv)| *qv -= a * yv);
                alphas.push(a);
            }
            if let Some((si, yi, _)) = mem.last() {
                let scale = dot(si, yi) / dot(yi, yi);
                q.iter_mut().for_each(|v| *v *= scale);
            } else {
                let scale = 1.0 / pg_norm.max(1e-300);
                q.iter_mut().for_each(|v| *v *= scale.min(1.0));
            }
            for ((si, yi, rho), a) in mem.iter().zip(alphas.iter().rev()) {
                let b = rho * dot(yi, &q);
                q.iter_mut().zip(si).for_each(|(qv, sv)| *qv += (a - b) * sv);
            }
            let mut d: Vec<f64> = q.iter().map(|v| -v).collect();
            tr.freeze_active(&z, &mut d);
            if dot(&d, &g) >= 0.0 {
                mem.clear();
                d = pg;
            }
            // Monotone projected Armijo backtracking.
            let mut t = 1.0;
            let mut accepted = None;
            for _ in 0..40 {
                if evaluations + 1 > s.budget {
                    break;
                }
                let mut trial: Vec<f64> = z.iter().zip(&d).map(|(a, b)| a + t * b).collect();
                tr.project(&mut trial);
                let step: Vec<f64> = trial.iter().zip(&z).map(|(a, b)| a - b).collect();
                let (c_t, f_t, d_t) = tr.objective(&trial, weight);
                evaluations += 1;
                if f_t.is_finite() && f_t <= f + 1e-4 * dot(&g, &step) && f_t < f {
                    accepted = Some((trial, step, c_t, f_t, d_t));
                    break;
                }
                t *= 0.5;
            }
            let Some((trial, step, c_t, f_t, d_t)) = accepted else {
                break;
            };
            let rel = (f - f_t) / f.abs().max(1e-300);
            z = trial;
            (cost, f, defect) = (c_t, f_t, d_t);
            history.push(f);
            iterations += 1;
            if evaluations + tr.gradient_cost() > s.budget {
                break;
            }
            let g_new = tr.gradient(&z, weight);
            evaluations += tr.gradient_cost();
            let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
            let sy = dot(&step, &y);
            if sy > 1e-12 * dot(&step, &step).sqrt() * dot(&y, &y).sqrt() {
                mem.push((step, y, 1.0 / sy));
                if mem.len() > 10 {
                    mem.remove(0);
                }
            }
            g = g_new;
            if rel < 1e-15 {
                break;
            }
        }
        rounds.push(PenaltyRound {
            weight,
            iterations,
            objective: cost,
            max_defect: defect,
        });
        histories.push(history);
        if defect <= s.defect_tol || evaluations >= s.budget {
            break;
        }
    }
    let trajectory = tr.stitch(&z);
    Ok(ShootingSolution {
        trajectory,
        objective: cost,
        continuity_residual: defect,
        failed: defect > s.defect_tol,
        evaluations,
        rounds,
        objective_history: histories,
        tail_discount: (-tr.gamma * s.horizon).exp(),
    })
}

/// Discounted tail sums `Ĵ(t_k) = Σ_{i≥k} e^{−γ(t_{i+1}−t_k)}·ℓ_i·Δt_i`, where
/// `ℓ_i` is the stage cost recorded at the right end of interval `i`.
pub fn cost_to_go(traj: &Trajectory, spec: &CostSpec) -> Result<Vec<f64>> {
    let gamma = spec.gamma().ok_or(Error::VariantMismatch {
        expected: "nominal_ct",
        actual: spec.variant_name(),
    })?;
    if traj.is_empty() {
        return Ok(Vec::new());
    }
    if traj.stage_costs.len() + 1 != traj.len() {
        return Err(Error::MissingField {
            mode: "cost_to_go",
            field: "stage_costs",
        });
    }
    let mut out = vec![0.0; traj.len()];
    for i in (0..traj.stage_costs.len()).rev() {
        let dt = traj.times[i + 1] - traj.times[i];
        let disc = (-gamma * dt).exp();
        out[i] = disc * (traj.stage_costs[i] * dt + out[i + 1]);
    }
    Ok(out)
}
