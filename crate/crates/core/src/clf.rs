//! Quadratic control Lyapunov functions `V(x) = xᵀPx` synthesized from LQR on
//! the linearization, with the sandwich constants `c1 ≤ V/‖x‖² ≤ c2` and a
//! certified decay rate `α`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg;
use crate::systems::{check_dim, ControlAffineSystem, DiscreteSystem, State};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClfKind {
    /// Decay condition `V̇ ≤ −αV`.
    Continuous,
    /// Decay condition `ΔV ≤ −αV`, `α ∈ (0, 1]`.
    Discrete,
}

impl ClfKind {
    fn label(self) -> &'static str {
        match self {
            ClfKind::Continuous => "continuous",
            ClfKind::Discrete => "discrete",
        }
    }
}

#[derive(Debug, Clone)]
pub struct QuadraticCLF {
    p: DMatrix<f64>,
    gain: DMatrix<f64>,
    c1: f64,
    c2: f64,
    alpha: f64,
    kind: ClfKind,
    riccati_residual: f64,
    certified_radius: Option<f64>,
}

impl QuadraticCLF {
    /// Assembles a CLF from an SPD `P`, a feedback gain (`μ(x) = −gain·x`) and a
    /// decay rate.
    pub fn from_parts(
        p: DMatrix<f64>,
        gain: DMatrix<f64>,
        alpha: f64,
        kind: ClfKind,
    ) -> Result<Self> {
        if !linalg::is_symmetric(&p, 1e-10) {
            return Err(Error::NotSpd("P"));
        }
        let p = linalg::symmetrize(&p);
        let (c1, c2) = linalg::sym_eig_extremes(&p);
        if !(c1 > 0.0) {
            return Err(Error::NotSpd("P"));
        }
        if gain.ncols() != p.nrows() {
            return Err(Error::Dimension {
                context: "feedback gain columns",
                expected: p.nrows(),
                actual: gain.ncols(),
            });
        }
        let clf = Self {
            p,
            gain,
            c1,
            c2,
            alpha: 0.0,
            kind,
            riccati_residual: 0.0,
            certified_radius: None,
        };
        clf.with_alpha(alpha)
    }

    /// Replaces the certified decay rate.
    pub fn with_alpha(mut self, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(invalid("alpha", format!("must be positive, got {alpha}")));
        }
        if self.kind == ClfKind::Discrete && alpha > 1.0 {
            return Err(invalid("alpha", format!("discrete decay must be ≤ 1, got {alpha}")));
        }
        self.alpha = alpha;
        Ok(self)
    }

    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn gain(&self) -> &DMatrix<f64> {
        &self.gain
    }

    pub fn c1(&self) -> f64 {
        self.c1
    }

    pub fn c2(&self) -> f64 {
        self.c2
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn kind(&self) -> ClfKind {
        self.kind
    }

    pub fn state_dim(&self) -> usize {
        self.p.nrows()
    }

    /// Frobenius residual of the Riccati equation `P` was obtained from.
    pub fn riccati_residual(&self) -> f64 {
        self.riccati_residual
    }

    pub fn certified_radius(&self) -> Option<f64> {
        self.certified_radius
    }

    pub fn value(&self, x: &State) -> f64 {
        (x.transpose() * &self.p * x)[(0, 0)]
    }

    pub fn gradient(&self, x: &State) -> State {
        &self.p * x * 2.0
    }

    /// The stabilizing feedback `μ(x) = −gain·x` (not projected onto `U`).
    pub fn feedback(&self, x: &State) -> DVector<f64> {
        -(&self.gain * x)
    }

    /// `∇V(x)ᵀ(f(x) + g(x)u)`
    pub fn vdot(&self, sys: &ControlAffineSystem, x: &State, u: &DVector<f64>) -> Result<f64> {
        self.expect(ClfKind::Continuous)?;
        Ok(self.gradient(x).dot(&sys.vector_field(x, u)))
    }

    /// `V(F(x, u)) − V(x)`
    pub fn delta_v(&self, dsys: &DiscreteSystem, x: &State, u: &DVector<f64>) -> Result<f64> {
        self.expect(ClfKind::Discrete)?;
        Ok(self.value(&dsys.step(x, u)) - self.value(x))
    }

    fn expect(&self, kind: ClfKind) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::KindMismatch {
                expected: kind.label(),
                actual: self.kind.label(),
            })
        }
    }

    /// Largest `c` such that the unprojected feedback stays inside the control
    /// box on `Ω_c = {V ≤ c}`.
    pub fn admissible_level(&self, lo: &DVector<f64>, hi: &DVector<f64>) -> f64 {
        let p_inv = match self.p.clone().try_inverse() {
            Some(m) => m,
            None => return 0.0,
        };
        let mut level = f64::INFINITY;
        for i in 0..self.gain.nrows() {
            let k = self.gain.row(i);
            let spread = (k * &p_inv * k.transpose())[(0, 0)];
            if spread > 0.0 {
                let bound = hi[i].min(-lo[i]);
                level = level.min(bound * bound / spread);
            }
        }
        level
    }

    /// Largest `c` such that `Ω_c` lies inside the Euclidean ball of radius `r`.
    pub fn level_inside_ball(&self, r: f64) -> f64 {
        self.c1 * r * r
    }
}

/// LQR-based CLF for continuous dynamics, from the linearization at 0.
pub fn synthesize_ct(
    sys: &ControlAffineSystem,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<QuadraticCLF> {
    check_weights(q, r, sys.state_dim(), sys.control_dim())?;
    let (a, b) = sys.linearize();
    let p = linalg::solve_care(&a, &b, q, r, sys.name())?;
    let r_inv = r.clone().try_inverse().ok_or(Error::NotSpd("R"))?;
    let gain = &r_inv * b.transpose() * &p;
    if linalg::spectral_abscissa(&(&a - &b * &gain)) >= 0.0 {
        return Err(Error::NotStabilizable(sys.name().to_string()));
    }
    let (_, lambda_max_p) = linalg::sym_eig_extremes(&p);
    let (decay_min, _) = linalg::sym_eig_extremes(&(q + gain.transpose() * r * &gain));
    let alpha = decay_min / lambda_max_p;
    let residual = linalg::care_residual(&a, &b, q, r, &p);
    let mut clf = QuadraticCLF::from_parts(p, gain, alpha, ClfKind::Continuous)?;
    clf.riccati_residual = residual;
    Ok(clf)
}

/// LQR-based CLF for a discrete map, from its linearization at `(0, 0)`.
pub fn synthesize_dt(
    dsys: &DiscreteSystem,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<QuadraticCLF> {
    check_weights(q, r, dsys.state_dim(), dsys.control_dim())?;
    let (a, b) = dsys.linearize();
    synthesize_dt_linear(&a, &b, q, r, dsys.name())
}

/// Discrete LQR CLF directly from `(A_d, B_d)`.
pub fn synthesize_dt_linear(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    name: &str,
) -> Result<QuadraticCLF> {
    check_weights(q, r, a.nrows(), b.ncols())?;
    let p = linalg::solve_dare(a, b, q, r, name)?;
    let s = r + b.transpose() * &p * b;
    let gain = s.try_inverse().ok_or(Error::NotSpd("R + BᵀPB"))? * b.transpose() * &p * a;
    let a_cl = a - b * &gain;
    if linalg::spectral_radius(&a_cl) >= 1.0 {
        return Err(Error::NotStabilizable(name.to_string()));
    }
    let (_, lambda_max_p) = linalg::sym_eig_extremes(&p);
    let (decrease_min, _) = linalg::sym_eig_extremes(&(&p - a_cl.transpose() * &p * &a_cl));
    let alpha = (decrease_min / lambda_max_p).min(1.0);
    if !(alpha > 0.0) {
        return Err(Error::NotStabilizable(name.to_string()));
    }
    let residual = linalg::dare_residual(a, b, q, r, &p);
    let mut clf = QuadraticCLF::from_parts(p, gain, alpha, ClfKind::Discrete)?;
    clf.riccati_residual = residual;
    Ok(clf)
}

fn check_weights(q: &DMatrix<f64>, r: &DMatrix<f64>, n: usize, m: usize) -> Result<()> {
    if q.nrows() != n || q.ncols() != n {
        return Err(Error::Dimension {
            context: "Q",
            expected: n,
            actual: q.nrows(),
        });
    }
    if r.nrows() != m || r.ncols() != m {
        return Err(Error::Dimension {
            context: "R",
            expected: m,
            actual: r.nrows(),
        });
    }
    if !linalg::is_spd(q) {
        return Err(Error::NotSpd("Q"));
    }
    if !linalg::is_spd(r) {
        return Err(Error::NotSpd("R"));
    }
    Ok(())
}

/// Plant a CLF is certified against.
#[derive(Clone, Copy)]
pub enum Plant<'a> {
    Continuous(&'a ControlAffineSystem),
    Discrete(&'a DiscreteSystem),
}

impl Plant<'_> {
    fn state_dim(&self) -> usize {
        match self {
            Plant::Continuous(s) => s.state_dim(),
            Plant::Discrete(d) => d.state_dim(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayViolation {
    pub x: Vec<f64>,
    /// `V̇` or `ΔV` under the CLF feedback.
    pub decay: f64,
    /// `−αV(x)`
    pub bound: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Certificate {
    pub radius: f64,
    pub n_samples: usize,
    /// Smallest sampled `−V̇/V` (or `−ΔV/V`) under the feedback.
    pub alpha_observed: f64,
    pub violations: Vec<DecayViolation>,
}

impl Certificate {
    /// The decay rate the region supports: the smaller of the linear
    /// certificate and the sampled worst case.
    pub fn certified_alpha(&self, clf: &QuadraticCLF) -> f64 {
        clf.alpha.min(self.alpha_observed)
    }
}

/// Uniform sample from the Euclidean ball of radius `r` in `n` dimensions.
pub fn sample_ball(rng: &mut ChaCha8Rng, n: usize, r: f64) -> State {
    loop {
        let dir = State::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = dir.norm();
        if norm > 1e-12 {
            let radius = r * rng.gen::<f64>().powf(1.0 / n as f64);
            return dir * (radius / norm);
        }
    }
}

/// Samples the ball of the given radius and checks the decay condition
/// under the (unprojected) CLF feedback.
pub fn certify(
    clf: &QuadraticCLF,
    plant: Plant<'_>,
    radius: f64,
    n_samples: usize,
    seed: u64,
) -> Result<Certificate> {
    if n_samples == 0 {
        return Err(invalid("n_samples", "must be at least 1"));
    }
    if !(radius > 0.0) {
        return Err(invalid("region_radius", "must be positive"));
    }
    let n = plant.state_dim();
    check_dim(&State::zeros(clf.state_dim()), n, "CLF dimension")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut alpha_observed = f64::INFINITY;
    let mut violations = Vec::new();
    for _ in 0..n_samples {
        let x = sample_ball(&mut rng, n, radius);
        let v = clf.value(&x);
        if v <= 0.0 {
            continue;
        }
        let mu = clf.feedback(&x);
        let decay = match plant {
            Plant::Continuous(sys) => clf.vdot(sys, &x, &mu)?,
            Plant::Discrete(dsys) => clf.delta_v(dsys, &x, &mu)?,
        };
        alpha_observed = alpha_observed.min(-decay / v);
        if decay + clf.alpha * v > 1e-9 {
            violations.push(DecayViolation {
                x: x.iter().copied().collect(),
                decay,
                bound: -clf.alpha * v,
            });
        }
    }
    Ok(Certificate {
        radius,
        n_samples,
        alpha_observed,
        violations,
    })
}

/// Certifies `clf` on the ball and returns a copy whose `α` is the certified
/// rate on that region.
pub fn certify_region(
    clf: &QuadraticCLF,
    plant: Plant<'_>,
    radius: f64,
    n_samples: usize,
    seed: u64,
) -> Result<(QuadraticCLF, Certificate)> {
    let cert = certify(clf, plant, radius, n_samples, seed)?;
    let alpha = cert.certified_alpha(clf);
    let mut out = clf.clone().with_alpha(alpha)?;
    out.certified_radius = Some(radius);
    Ok((out, cert))
}
