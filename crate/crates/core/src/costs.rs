//! CLF-shaped stage costs and the practical RL reward.
//!
//! Nominal costs are `ℓ(x,u) = βV(x) + ρ[Ḋ + λV(x)]₊` with `Ḋ` either `V̇` or
//! `ΔV`. The practical reward `R = r_V + r_V̇ + r_reg` is turned into the cost
//! `β − R`, which splits as `φ(V) − r_V̇ − r_reg`.

use serde::{Deserialize, Serialize};

use crate::clf::QuadraticCLF;
use crate::error::{invalid, Error, Result};
use crate::linalg;
use crate::systems::{Control, ControlAffineSystem, DiscreteSystem, State};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case", deny_unknown_fields)]
pub enum CostSpec {
    NominalCt {
        beta: f64,
        rho: f64,
        lambda: f64,
        gamma: f64,
    },
    NominalDt {
        beta: f64,
        rho: f64,
        lambda: f64,
        delta: f64,
    },
    PracticalDt {
        beta: f64,
        rho: f64,
        lambda: f64,
        delta: f64,
        sigma_sq: f64,
        sigma_vdot: f64,
        w_u: f64,
    },
}

fn positive(field: &'static str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(field, format!("must be positive, got {v}")))
    }
}

fn nonnegative(field: &'static str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(field, format!("must be nonnegative, got {v}")))
    }
}

impl CostSpec {
    pub fn variant_name(&self) -> &'static str {
        match self {
            CostSpec::NominalCt { .. } => "nominal_ct",
            CostSpec::NominalDt { .. } => "nominal_dt",
            CostSpec::PracticalDt { .. } => "practical_dt",
        }
    }

    pub fn beta(&self) -> f64 {
        match *self {
            CostSpec::NominalCt { beta, .. }
            | CostSpec::NominalDt { beta, .. }
            | CostSpec::PracticalDt { beta, .. } => beta,
        }
    }

    pub fn rho(&self) -> f64 {
        match *self {
            CostSpec::NominalCt { rho, .. }
            | CostSpec::NominalDt { rho, .. }
            | CostSpec::PracticalDt { rho, .. } => rho,
        }
    }

    pub fn lambda(&self) -> f64 {
        match *self {
            CostSpec::NominalCt { lambda, .. }
            | CostSpec::NominalDt { lambda, .. }
            | CostSpec::PracticalDt { lambda, .. } => lambda,
        }
    }

    /// Returns a copy with a different decay rate `λ`.
    pub fn with_lambda(mut self, value: f64) -> Self {
        match &mut self {
            CostSpec::NominalCt { lambda, .. }
            | CostSpec::NominalDt { lambda, .. }
            | CostSpec::PracticalDt { lambda, .. } => *lambda = value,
        }
        self
    }

    /// Discrete discount `δ`; `None` for the continuous variant.
    pub fn delta(&self) -> Option<f64> {
        match *self {
            CostSpec::NominalCt { .. } => None,
            CostSpec::NominalDt { delta, .. } | CostSpec::PracticalDt { delta, .. } => Some(delta),
        }
    }

    /// Continuous discount rate `γ`; `None` for discrete variants.
    pub fn gamma(&self) -> Option<f64> {
        match *self {
            CostSpec::NominalCt { gamma, .. } => Some(gamma),
            _ => None,
        }
    }

    pub fn is_discrete(&self) -> bool {
        !matches!(self, CostSpec::NominalCt { .. })
    }

    /// Checks every parameter constraint, including `0 < λ ≤ α`.
    pub fn validate(&self, alpha: f64) -> Result<()> {
        positive("beta", self.beta())?;
        positive("lambda", self.lambda())?;
        match *self {
            CostSpec::NominalCt { rho, gamma, .. } => {
                positive("rho", rho)?;
                positive("gamma", gamma)?;
            }
            CostSpec::NominalDt { rho, delta, .. } => {
                positive("rho", rho)?;
                check_delta(delta)?;
            }
            CostSpec::PracticalDt {
                rho,
                delta,
                sigma_sq,
                sigma_vdot,
                w_u,
                ..
            } => {
                nonnegative("rho", rho)?;
                check_delta(delta)?;
                positive("sigma_sq", sigma_sq)?;
                positive("sigma_vdot", sigma_vdot)?;
                nonnegative("w_u", w_u)?;
            }
        }
        if self.lambda() > alpha {
            return Err(invalid(
                "lambda",
                format!(
                    "decay rate {} exceeds the CLF's certified rate alpha = {alpha}",
                    self.lambda()
                ),
            ));
        }
        Ok(())
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(invalid("delta", format!("must lie in (0, 1), got {delta}")))
    }
}

fn mismatch(expected: &'static str, spec: &CostSpec) -> Error {
    Error::VariantMismatch {
        expected,
        actual: spec.variant_name(),
    }
}

/// `ℓ(x,u) = βV(x) + ρ[V̇(x,u) + λV(x)]₊`
pub fn stage_cost_ct(
    spec: &CostSpec,
    clf: &QuadraticCLF,
    sys: &ControlAffineSystem,
    x: &State,
    u: &Control,
) -> Result<f64> {
    let CostSpec::NominalCt {
        beta, rho, lambda, ..
    } = *spec
    else {
        return Err(mismatch("nominal_ct", spec));
    };
    let v = clf.value(x);
    let vdot = clf.vdot(sys, x, u)?;
    Ok(beta * v + rho * (vdot + lambda * v).max(0.0))
}

/// `ℓ(x,u) = βV(x) + ρ[ΔV(x,u) + λV(x)]₊`
pub fn stage_cost_dt(
    spec: &CostSpec,
    clf: &QuadraticCLF,
    dsys: &DiscreteSystem,
    x: &State,
    u: &Control,
) -> Result<f64> {
    let CostSpec::NominalDt {
        beta, rho, lambda, ..
    } = *spec
    else {
        return Err(mismatch("nominal_dt", spec));
    };
    let v = clf.value(x);
    let dv = clf.delta_v(dsys, x, u)?;
    Ok(beta * v + rho * (dv + lambda * v).max(0.0))
}

/// `clip(s, 0, 1)`
pub fn clip01(s: f64) -> f64 {
    s.max(0.0).min(1.0)
}

struct PracticalTerms {
    phi: f64,
    hinge: f64,
    reg: f64,
}

fn practical_terms(
    spec: &CostSpec,
    clf: &QuadraticCLF,
    dsys: &DiscreteSystem,
    x: &State,
    u: &Control,
) -> Result<PracticalTerms> {
    let CostSpec::PracticalDt {
        beta,
        rho,
        lambda,
        sigma_sq,
        sigma_vdot,
        w_u,
        ..
    } = *spec
    else {
        return Err(mismatch("practical_dt", spec));
    };
    let v = clf.value(x);
    let dv = clf.delta_v(dsys, x, u)?;
    Ok(PracticalTerms {
        phi: -beta * (-v / sigma_sq).exp_m1(),
        hinge: rho * clip01((dv + lambda * v) / sigma_vdot),
        reg: w_u * u.norm_squared(),
    })
}

/// `R = β·exp(−V/σ²) − ρ·clip((ΔV + λV)/σ_V̇, 0, 1) − w_u‖u‖²`
pub fn practical_reward(
    spec: &CostSpec,
    clf: &QuadraticCLF,
    dsys: &DiscreteSystem,
    x: &State,
    u: &Control,
) -> Result<f64> {
    let t = practical_terms(spec, clf, dsys, x, u)?;
    Ok(spec.beta() - t.phi - t.hinge - t.reg)
}

/// `ℓ = β − R = φ(V) + ρ·clip(·) + w_u‖u‖²`, evaluated in the split form so
/// that small values near the origin keep full relative precision.
pub fn practical_cost(
    spec: &CostSpec,
    clf: &QuadraticCLF,
    dsys: &DiscreteSystem,
    x: &State,
    u: &Control,
) -> Result<f64> {
    let t = practical_terms(spec, clf, dsys, x, u)?;
    Ok(t.phi + t.hinge + t.reg)
}

/// `φ(s) = β(1 − e^{−s/σ²})`
pub fn phi(spec: &CostSpec, s: f64) -> Result<f64> {
    let CostSpec::PracticalDt { beta, sigma_sq, .. } = *spec else {
        return Err(mismatch("practical_dt", spec));
    };
    if !(s >= 0.0) {
        return Err(invalid("s", format!("must be nonnegative, got {s}")));
    }
    Ok(-beta * (-s / sigma_sq).exp_m1())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Zeta {
    pub minus: f64,
    pub plus: f64,
}

/// `ζ₋(c̄) = (β/σ²)e^{−c̄/σ²}`, `ζ₊ = β/σ²`
pub fn zeta_constants(spec: &CostSpec, c_bar: f64) -> Result<Zeta> {
    let CostSpec::PracticalDt { beta, sigma_sq, .. } = *spec else {
        return Err(mismatch("practical_dt", spec));
    };
    if !(c_bar >= 0.0) {
        return Err(invalid("c_bar", "must be nonnegative"));
    }
    let plus = beta / sigma_sq;
    Ok(Zeta {
        minus: plus * (-c_bar / sigma_sq).exp(),
        plus,
    })
}

/// Certificate `c_reg = w_u·λ_max(KᵀK)/c1`, so that `w_u‖Kx‖² ≤ c_reg·V(x)`
/// for every `x`.
pub fn c_reg_bound(spec: &CostSpec, clf: &QuadraticCLF) -> Result<f64> {
    let CostSpec::PracticalDt { w_u, .. } = *spec else {
        return Err(mismatch("practical_dt", spec));
    };
    if w_u == 0.0 {
        return Ok(0.0);
    }
    let ktk = clf.gain().transpose() * clf.gain();
    let (_, top) = linalg::sym_eig_extremes(&ktk);
    Ok(w_u * top.max(0.0) / clf.c1())
}

/// Discrete stage cost for whichever discrete variant `spec` is.
pub fn stage_cost_discrete(
    spec: &CostSpec,
    clf: &QuadraticCLF,
    dsys: &DiscreteSystem,
    x: &State,
    u: &Control,
) -> Result<f64> {
    match spec {
        CostSpec::NominalDt { .. } => stage_cost_dt(spec, clf, dsys, x, u),
        CostSpec::PracticalDt { .. } => practical_cost(spec, clf, dsys, x, u),
        CostSpec::NominalCt { .. } => Err(mismatch("nominal_dt or practical_dt", spec)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clf::ClfKind;
    use crate::systems::{discretize, ControlAffineSystem, Scheme};
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use std::sync::Arc;

    fn s(v: f64) -> State {
        State::from_element(1, v)
    }

    fn scalar_clf(kind: ClfKind, alpha: f64) -> QuadraticCLF {
        QuadraticCLF::from_parts(
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 0.5),
            alpha,
            kind,
        )
        .unwrap()
    }

    /// ẋ = drift_gain·x + u
    fn scalar_sys(drift_gain: f64) -> ControlAffineSystem {
        ControlAffineSystem::new(
            "scalar",
            1,
            1,
            Arc::new(move |x: &State| x * drift_gain),
            Arc::new(|_: &State| DMatrix::from_element(1, 1, 1.0)),
            s(-2.0),
            s(2.0),
        )
        .unwrap()
    }

    #[test]
    fn nominal_ct_toy() {
        let spec = CostSpec::NominalCt {
            beta: 1.0,
            rho: 1.0,
            lambda: 1.0,
            gamma: 0.5,
        };
        let clf = scalar_clf(ClfKind::Continuous, 1.0);
        let sys = scalar_sys(0.0);
        assert_eq!(stage_cost_ct(&spec, &clf, &sys, &s(0.0), &s(1.5)).unwrap(), 0.0);
        assert_eq!(stage_cost_ct(&spec, &clf, &sys, &s(1.0), &s(0.0)).unwrap(), 2.0);
        assert_eq!(stage_cost_ct(&spec, &clf, &sys, &s(1.0), &s(-1.0)).unwrap(), 1.0);
    }

    #[test]
    fn nominal_dt_toy() {
        // Euler with h = 1 on ẋ = −x + u gives F(x, u) = u.
        let d = discretize(&scalar_sys(-1.0), 1.0, Scheme::Euler).unwrap();
        let spec = CostSpec::NominalDt {
            beta: 1.0,
            rho: 1.0,
            lambda: 0.5,
            delta: 0.9,
        };
        let clf = scalar_clf(ClfKind::Discrete, 0.5);
        assert_eq!(stage_cost_dt(&spec, &clf, &d, &s(0.0), &s(0.0)).unwrap(), 0.0);
        assert_eq!(stage_cost_dt(&spec, &clf, &d, &s(1.0), &s(0.0)).unwrap(), 1.0);
        assert_eq!(stage_cost_dt(&spec, &clf, &d, &s(1.0), &s(1.0)).unwrap(), 1.5);
        let ct = CostSpec::NominalCt {
            beta: 1.0,
            rho: 1.0,
            lambda: 0.5,
            gamma: 1.0,
        };
        assert!(matches!(
            stage_cost_dt(&ct, &clf, &d, &s(1.0), &s(1.0)),
            Err(Error::VariantMismatch { .. })
        ));
    }

    fn practical(w_u: f64) -> CostSpec {
        CostSpec::PracticalDt {
            beta: 1.0,
            rho: 1.0,
            lambda: 1.0,
            delta: 0.9,
            sigma_sq: 1.0,
            sigma_vdot: 1.0,
            w_u,
        }
    }

    #[test]
    fn practical_reward_examples() {
        // F(x, u) = u, V = x²: at x = 1, u = √2 we get V = 1 and ΔV + λV = 2.
        let d = discretize(&scalar_sys(-1.0), 1.0, Scheme::Euler).unwrap();
        let clf = scalar_clf(ClfKind::Discrete, 1.0);
        let spec = practical(0.0);
        assert_eq!(practical_reward(&spec, &clf, &d, &s(0.0), &s(0.0)).unwrap(), 1.0);
        assert_eq!(practical_cost(&spec, &clf, &d, &s(0.0), &s(0.0)).unwrap(), 0.0);
        let u = s(2f64.sqrt());
        let r = practical_reward(&spec, &clf, &d, &s(1.0), &u).unwrap();
        assert_relative_eq!(r, (-1f64).exp() - 1.0, epsilon = 1e-12);
        assert_relative_eq!(r, -0.6321, epsilon = 1e-4);
        let c = practical_cost(&spec, &clf, &d, &s(1.0), &u).unwrap();
        assert_relative_eq!(c, 1.6321, epsilon = 1e-4);
        assert_relative_eq!(c, 1.0 - r, epsilon = 1e-12);

        // ‖u‖² = 4 with w_u = 0.1 costs 0.4 of reward
        let with_reg = practical(0.1);
        let u = s(2.0);
        let base = practical_reward(&spec, &clf, &d, &s(0.5), &u).unwrap();
        let reg = practical_reward(&with_reg, &clf, &d, &s(0.5), &u).unwrap();
        assert_relative_eq!(base - reg, 0.4, epsilon = 1e-12);
    }

    #[test]
    fn phi_and_zeta() {
        let spec = practical(0.0);
        assert_eq!(phi(&spec, 0.0).unwrap(), 0.0);
        assert_relative_eq!(phi(&spec, 1.0).unwrap(), 1.0 - (-1f64).exp(), epsilon = 1e-15);
        assert!(phi(&spec, -0.1).is_err());

        let z = zeta_constants(&spec, 0.0).unwrap();
        assert_eq!(z.minus, z.plus);
        assert_eq!(z.plus, 1.0);
        let z = zeta_constants(&spec, 0.1).unwrap();
        assert_relative_eq!(z.minus, 0.9048, epsilon = 1e-4);
        assert_eq!(z.plus, 1.0);
    }

    #[test]
    fn phi_bracket_on_dense_sweep() {
        for (beta, sigma_sq, c_bar) in [(1.0, 1.0, 0.1), (2.5, 0.3, 1.7), (0.7, 40.0, 12.0)] {
            let spec = CostSpec::PracticalDt {
                beta,
                rho: 1.0,
                lambda: 0.1,
                delta: 0.9,
                sigma_sq,
                sigma_vdot: 1.0,
                w_u: 0.0,
            };
            let z = zeta_constants(&spec, c_bar).unwrap();
            assert!(z.minus <= z.plus);
            for i in 0..=10_000 {
                let sv = c_bar * i as f64 / 10_000.0;
                let p = phi(&spec, sv).unwrap();
                assert!(z.minus * sv <= p * (1.0 + 1e-12) + 1e-300, "lower at {sv}");
                assert!(p <= z.plus * sv * (1.0 + 1e-12), "upper at {sv}");
            }
        }
    }

    #[test]
    fn c_reg_examples() {
        let s3 = 3f64.sqrt();
        let clf = QuadraticCLF::from_parts(
            DMatrix::from_row_slice(2, 2, &[s3, 1.0, 1.0, s3]),
            DMatrix::from_row_slice(1, 2, &[1.0, s3]),
            0.2,
            ClfKind::Discrete,
        )
        .unwrap();
        assert_eq!(c_reg_bound(&practical(0.0), &clf).unwrap(), 0.0);
        let c = c_reg_bound(&practical(0.01), &clf).unwrap();
        assert_relative_eq!(c, 0.04 / (s3 - 1.0), epsilon = 1e-12);
        assert_relative_eq!(c, 0.0546, epsilon = 1e-4);
    }

    #[test]
    fn validation_checks_lambda_against_alpha() {
        let spec = CostSpec::NominalCt {
            beta: 1.0,
            rho: 10.0,
            lambda: 0.5,
            gamma: 0.5,
        };
        assert!(spec.validate(0.5).is_ok());
        assert!(matches!(
            spec.validate(0.4),
            Err(Error::InvalidParameter { field: "lambda", .. })
        ));
        let bad = CostSpec::NominalDt {
            beta: 1.0,
            rho: 1.0,
            lambda: 0.1,
            delta: 1.0,
        };
        assert!(matches!(
            bad.validate(1.0),
            Err(Error::InvalidParameter { field: "delta", .. })
        ));
    }
}
