//! Control-affine benchmark systems `ẋ = f(x) + g(x)u`, integrators and the
//! discrete-time maps they induce, and closed-loop rollouts.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::numeric_jacobian;

pub type State = DVector<f64>;
pub type Control = DVector<f64>;

pub type DriftFn = Arc<dyn Fn(&State) -> State + Send + Sync>;
pub type ActuationFn = Arc<dyn Fn(&State) -> DMatrix<f64> + Send + Sync>;

/// A state-feedback law.
pub type Policy<'a> = dyn Fn(&State) -> Control + 'a;

/// Continuous control-affine dynamics with a box control set `U`.
#[derive(Clone)]
pub struct ControlAffineSystem {
    name: String,
    state_dim: usize,
    control_dim: usize,
    drift: DriftFn,
    actuation: ActuationFn,
    control_lo: Control,
    control_hi: Control,
}

impl fmt::Debug for ControlAffineSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlAffineSystem")
            .field("name", &self.name)
            .field("state_dim", &self.state_dim)
            .field("control_dim", &self.control_dim)
            .field("control_lo", &self.control_lo.as_slice())
            .field("control_hi", &self.control_hi.as_slice())
            .finish()
    }
}

impl ControlAffineSystem {
    /// Builds a system, checking `f(0) = 0` and `0 ∈ int U`.
    pub fn new(
        name: impl Into<String>,
        state_dim: usize,
        control_dim: usize,
        drift: DriftFn,
        actuation: ActuationFn,
        control_lo: Control,
        control_hi: Control,
    ) -> Result<Self> {
        if state_dim == 0 {
            return Err(invalid("state_dim", "must be positive"));
        }
        if control_dim == 0 {
            return Err(invalid("control_dim", "must be positive"));
        }
        for (what, v) in [("control_lo", &control_lo), ("control_hi", &control_hi)] {
            if v.len() != control_dim {
                return Err(Error::Dimension {
                    context: what,
                    expected: control_dim,
                    actual: v.len(),
                });
            }
        }
        if control_lo.iter().any(|&l| !(l < 0.0)) || control_hi.iter().any(|&h| !(h > 0.0)) {
            return Err(invalid(
                "control bounds",
                "the origin must lie strictly inside the control box",
            ));
        }
        let sys = Self {
            name: name.into(),
            state_dim,
            control_dim,
            drift,
            actuation,
            control_lo,
            control_hi,
        };
        let f0 = sys.drift(&State::zeros(state_dim));
        if f0.len() != state_dim {
            return Err(Error::Dimension {
                context: "drift output",
                expected: state_dim,
                actual: f0.len(),
            });
        }
        if f0.amax() > 1e-12 {
            return Err(invalid("drift", "f(0) must vanish at the equilibrium"));
        }
        let g0 = sys.actuation(&State::zeros(state_dim));
        if g0.nrows() != state_dim || g0.ncols() != control_dim {
            return Err(Error::Dimension {
                context: "actuation output",
                expected: state_dim * control_dim,
                actual: g0.nrows() * g0.ncols(),
            });
        }
        Ok(sys)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    pub fn control_lo(&self) -> &Control {
        &self.control_lo
    }

    pub fn control_hi(&self) -> &Control {
        &self.control_hi
    }

    pub fn drift(&self, x: &State) -> State {
        (self.drift)(x)
    }

    pub fn actuation(&self, x: &State) -> DMatrix<f64> {
        (self.actuation)(x)
    }

    /// `f(x) + g(x)u`
    pub fn vector_field(&self, x: &State, u: &Control) -> State {
        self.drift(x) + self.actuation(x) * u
    }

    pub fn contains_control(&self, u: &Control) -> bool {
        u.iter()
            .zip(self.control_lo.iter().zip(self.control_hi.iter()))
            .all(|(&v, (&lo, &hi))| v >= lo && v <= hi)
    }

    /// Projects `u` onto the control box; the flag reports whether it moved.
    pub fn clamp_control(&self, u: &Control) -> (Control, bool) {
        let mut clamped = false;
        let out = Control::from_iterator(
            u.len(),
            u.iter()
                .zip(self.control_lo.iter().zip(self.control_hi.iter()))
                .map(|(&v, (&lo, &hi))| {
                    let c = v.clamp(lo, hi);
                    if c != v {
                        clamped = true;
                    }
                    c
                }),
        );
        (out, clamped)
    }

    /// Jacobians `(A, B)` of the dynamics at the origin.
    pub fn linearize(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let zero = State::zeros(self.state_dim);
        let a = numeric_jacobian(|x| self.drift(x), &zero, self.state_dim);
        let b = self.actuation(&zero);
        (a, b)
    }
}

/// `ẋ = (x₂, u)` with `|u| ≤ u_max`.
pub fn double_integrator(u_max: f64) -> Result<ControlAffineSystem> {
    if !(u_max > 0.0) || !u_max.is_finite() {
        return Err(invalid("u_max", "must be positive"));
    }
    ControlAffineSystem::new(
        "double_integrator",
        2,
        1,
        Arc::new(|x: &State| State::from_vec(vec![x[1], 0.0])),
        Arc::new(|_: &State| DMatrix::from_column_slice(2, 1, &[0.0, 1.0])),
        Control::from_element(1, -u_max),
        Control::from_element(1, u_max),
    )
}

/// Physical parameters of the cart-pole.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CartPoleParams {
    /// kg
    pub cart_mass: f64,
    /// kg, point mass at the pole tip
    pub pole_mass: f64,
    /// m, pivot to pole mass
    pub pole_length: f64,
    /// m/s²
    pub gravity: f64,
    /// N, bound on the horizontal force
    pub u_max: f64,
}

impl Default for CartPoleParams {
    fn default() -> Self {
        Self {
            cart_mass: 1.0,
            pole_mass: 0.1,
            pole_length: 0.5,
            gravity: 9.81,
            u_max: 10.0,
        }
    }
}

/// Frictionless cart-pole with a point-mass pole and force input on the cart.
///
/// State is `(position, angle, velocity, angular rate)` with the angle measured
/// from upright, so the origin is the unstable upright equilibrium.
pub fn cart_pole(params: CartPoleParams) -> Result<ControlAffineSystem> {
    let CartPoleParams {
        cart_mass: mc,
        pole_mass: mp,
        pole_length: l,
        gravity: g,
        u_max,
    } = params;
    for (field, v) in [
        ("cart_mass", mc),
        ("pole_mass", mp),
        ("pole_length", l),
        ("gravity", g),
        ("u_max", u_max),
    ] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(invalid(field, "must be positive"));
        }
    }
    let drift = move |x: &State| {
        let (th, v, w) = (x[1], x[2], x[3]);
        let (s, c) = th.sin_cos();
        let den = mc + mp * s * s;
        let acc = mp * s * (l * w * w - g * c) / den;
        let alpha = ((mc + mp) * g * s - mp * l * w * w * s * c) / (l * den);
        State::from_vec(vec![v, w, acc, alpha])
    };
    let actuation = move |x: &State| {
        let (s, c) = x[1].sin_cos();
        let den = mc + mp * s * s;
        DMatrix::from_column_slice(4, 1, &[0.0, 0.0, 1.0 / den, -c / (l * den)])
    };
    ControlAffineSystem::new(
        "cart_pole",
        4,
        1,
        Arc::new(drift),
        Arc::new(actuation),
        Control::from_element(1, -u_max),
        Control::from_element(1, u_max),
    )
}

fn check_finite(v: &State, what: &'static str) -> Result<()> {
    if v.iter().all(|c| c.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Classical fourth-order Runge–Kutta step with `u` held constant.
pub fn rk4_step(sys: &ControlAffineSystem, x: &State, u: &Control, h: f64) -> Result<State> {
    if !(h > 0.0) {
        return Err(invalid("h", "step size must be positive"));
    }
    check_finite(x, "rk4 input state")?;
    let out = rk4_raw(sys, x, u, h);
    check_finite(&out, "rk4 output state")?;
    Ok(out)
}

pub(crate) fn rk4_raw(sys: &ControlAffineSystem, x: &State, u: &Control, h: f64) -> State {
    let k1 = sys.vector_field(x, u);
    let k2 = sys.vector_field(&(x + &k1 * (h / 2.0)), u);
    let k3 = sys.vector_field(&(x + &k2 * (h / 2.0)), u);
    let k4 = sys.vector_field(&(x + &k3 * h), u);
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

pub(crate) fn euler_raw(sys: &ControlAffineSystem, x: &State, u: &Control, h: f64) -> State {
    x + sys.vector_field(x, u) * h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Euler,
    Rk4,
}

/// Discrete-time map `x_{k+1} = F(x_k, u_k)` induced by one integrator step.
#[derive(Debug, Clone)]
pub struct DiscreteSystem {
    base: ControlAffineSystem,
    step_size: f64,
    scheme: Scheme,
}

pub fn discretize(sys: &ControlAffineSystem, h: f64, scheme: Scheme) -> Result<DiscreteSystem> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(invalid("step_size", "must be positive"));
    }
    let d = DiscreteSystem {
        base: sys.clone(),
        step_size: h,
        scheme,
    };
    let z = d.step(
        &State::zeros(sys.state_dim()),
        &Control::zeros(sys.control_dim()),
    );
    if z.amax() > 1e-12 {
        return Err(invalid("step map", "F(0, 0) must vanish"));
    }
    Ok(d)
}

impl DiscreteSystem {
    pub fn base(&self) -> &ControlAffineSystem {
        &self.base
    }

    pub fn step_size(&self) -> f64 {
        self.step_size
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn state_dim(&self) -> usize {
        self.base.state_dim()
    }

    pub fn control_dim(&self) -> usize {
        self.base.control_dim()
    }

    pub fn name(&self) -> &str {
        self.base.name()
    }

    /// `F(x, u)`
    pub fn step(&self, x: &State, u: &Control) -> State {
        match self.scheme {
            Scheme::Euler => euler_raw(&self.base, x, u, self.step_size),
            Scheme::Rk4 => rk4_raw(&self.base, x, u, self.step_size),
        }
    }

    /// Jacobians `(A_d, B_d)` of `F` at `(0, 0)`.
    pub fn linearize(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.state_dim();
        let m = self.control_dim();
        let zx = State::zeros(n);
        let zu = Control::zeros(m);
        let a = numeric_jacobian(|x| self.step(x, &zu), &zx, n);
        let b = numeric_jacobian(|u| self.step(&zx, u), &zu, n);
        (a, b)
    }
}

/// A closed-loop run: `states` has one more entry than `controls`.
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    /// Seconds for both continuous and discrete runs (`k·h` for the latter).
    pub times: Vec<f64>,
    pub states: Vec<State>,
    pub controls: Vec<Control>,
    /// One per control, empty when no cost was supplied.
    pub stage_costs: Vec<f64>,
    /// One per state, empty when no CLF was supplied.
    pub clf_values: Vec<f64>,
    /// Value-function estimates, one per state; empty unless supplied.
    pub values: Vec<f64>,
    /// Some control was projected onto `U`.
    pub saturated: bool,
    /// Integration produced a non-finite state and the run was truncated.
    pub diverged: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state_norms(&self) -> Vec<f64> {
        self.states.iter().map(|x| x.norm()).collect()
    }

    pub fn final_state(&self) -> Option<&State> {
        self.states.last()
    }
}

/// Optional per-sample observables recorded during a rollout.
#[derive(Default, Clone, Copy)]
pub struct Probes<'a> {
    pub stage_cost: Option<&'a dyn Fn(&State, &Control) -> f64>,
    pub clf: Option<&'a dyn Fn(&State) -> f64>,
    pub value: Option<&'a dyn Fn(&State) -> f64>,
}

fn run<S>(
    policy: &Policy<'_>,
    x0: &State,
    steps: usize,
    dt: f64,
    clamp: impl Fn(&Control) -> (Control, bool),
    mut step: S,
    probes: Probes<'_>,
) -> Trajectory
where
    S: FnMut(&State, &Control) -> State,
{
    let mut traj = Trajectory::default();
    let mut x = x0.clone();
    let record = |traj: &mut Trajectory, x: &State, t: f64| {
        traj.times.push(t);
        if let Some(v) = probes.clf {
            traj.clf_values.push(v(x));
        }
        if let Some(j) = probes.value {
            traj.values.push(j(x));
        }
        traj.states.push(x.clone());
    };
    record(&mut traj, &x, 0.0);
    if !x.iter().all(|c| c.is_finite()) {
        traj.diverged = true;
        return traj;
    }
    for k in 0..steps {
        let (u, clamped) = clamp(&policy(&x));
        traj.saturated |= clamped;
        let next = step(&x, &u);
        if !next.iter().all(|c| c.is_finite()) {
            traj.diverged = true;
            break;
        }
        if let Some(cost) = probes.stage_cost {
            traj.stage_costs.push(cost(&x, &u));
        }
        traj.controls.push(u);
        x = next;
        record(&mut traj, &x, (k + 1) as f64 * dt);
    }
    traj
}

/// Integrates the closed loop with RK4 at step `h`, holding each control for
/// one step.
pub fn rollout_ct(
    sys: &ControlAffineSystem,
    policy: &Policy<'_>,
    x0: &State,
    duration: f64,
    h: f64,
    probes: Probes<'_>,
) -> Result<Trajectory> {
    if !(h > 0.0) {
        return Err(invalid("h", "step size must be positive"));
    }
    if !(duration >= 0.0) {
        return Err(invalid("duration", "must be nonnegative"));
    }
    check_dim(x0, sys.state_dim(), "initial state")?;
    let steps = (duration / h).round() as usize;
    Ok(run(
        policy,
        x0,
        steps,
        h,
        |u| sys.clamp_control(u),
        |x, u| rk4_raw(sys, x, u, h),
        probes,
    ))
}

/// Iterates `x_{k+1} = F(x_k, π(x_k))` for `steps` steps.
pub fn rollout_dt(
    dsys: &DiscreteSystem,
    policy: &Policy<'_>,
    x0: &State,
    steps: usize,
    probes: Probes<'_>,
) -> Result<Trajectory> {
    check_dim(x0, dsys.state_dim(), "initial state")?;
    Ok(run(
        policy,
        x0,
        steps,
        dsys.step_size(),
        |u| dsys.base().clamp_control(u),
        |x, u| dsys.step(x, u),
        probes,
    ))
}

pub(crate) fn check_dim(v: &DVector<f64>, expected: usize, context: &'static str) -> Result<()> {
    if v.len() == expected {
        Ok(())
    } else {
        Err(Error::Dimension {
            context,
            expected,
            actual: v.len(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn v(xs: &[f64]) -> State {
        State::from_column_slice(xs)
    }

    #[test]
    fn double_integrator_evaluations() {
        let di = double_integrator(1.0).unwrap();
        assert_eq!(di.drift(&v(&[0.0, 0.0])), v(&[0.0, 0.0]));
        assert_eq!(di.drift(&v(&[1.0, 2.0])), v(&[2.0, 0.0]));
        assert_eq!(
            di.actuation(&v(&[5.0, -3.0])),
            DMatrix::from_column_slice(2, 1, &[0.0, 1.0])
        );
        assert!(double_integrator(0.0).is_err());
    }

    #[test]
    fn cart_pole_structure() {
        let cp = cart_pole(CartPoleParams::default()).unwrap();
        assert!(cp.drift(&State::zeros(4)).amax() == 0.0);
        for th in [-1.0, 0.3, 2.5] {
            let f = cp.drift(&v(&[0.0, th, 0.0, 0.0]));
            assert_eq!(f[0], 0.0);
            assert_eq!(f[1], 0.0);
        }
        let (a, _) = cp.linearize();
        let max_re = crate::linalg::spectral_abscissa(&a);
        assert!(max_re > 0.0, "upright must be unstable, got {max_re}");
        // (M + m) g / (l M)
        assert_relative_eq!(max_re, (1.1f64 * 9.81 / 0.5).sqrt(), epsilon = 1e-6);

        let bad = CartPoleParams {
            pole_mass: -0.1,
            ..CartPoleParams::default()
        };
        assert!(matches!(
            cart_pole(bad),
            Err(Error::InvalidParameter { field: "pole_mass", .. })
        ));
    }

    #[test]
    fn constructor_rejects_bad_systems() {
        let shifted = ControlAffineSystem::new(
            "shifted",
            1,
            1,
            Arc::new(|x: &State| x.add_scalar(1.0)),
            Arc::new(|_: &State| DMatrix::from_element(1, 1, 1.0)),
            v(&[-1.0]),
            v(&[1.0]),
        );
        assert!(shifted.is_err());
        let one_sided = ControlAffineSystem::new(
            "one_sided",
            1,
            1,
            Arc::new(|x: &State| -x),
            Arc::new(|_: &State| DMatrix::from_element(1, 1, 1.0)),
            v(&[0.0]),
            v(&[1.0]),
        );
        assert!(one_sided.is_err());
    }

    #[test]
    fn rk4_exact_on_double_integrator() {
        let di = double_integrator(1.0).unwrap();
        let x = rk4_step(&di, &v(&[0.0, 0.0]), &v(&[0.0]), 0.1).unwrap();
        assert_eq!(x, v(&[0.0, 0.0]));
        let x = rk4_step(&di, &v(&[0.0, 1.0]), &v(&[0.0]), 0.1).unwrap();
        assert_relative_eq!(x[0], 0.1, epsilon = 1e-15);
        assert_relative_eq!(x[1], 1.0, epsilon = 1e-15);
        let x = rk4_step(&di, &v(&[0.0, 0.0]), &v(&[1.0]), 0.1).unwrap();
        assert_relative_eq!(x[0], 0.005, epsilon = 1e-15);
        assert_relative_eq!(x[1], 0.1, epsilon = 1e-15);
        assert!(rk4_step(&di, &v(&[f64::NAN, 0.0]), &v(&[0.0]), 0.1).is_err());
        assert!(rk4_step(&di, &v(&[0.0, 0.0]), &v(&[0.0]), 0.0).is_err());
    }

    #[test]
    fn discretization_examples() {
        let di = double_integrator(1.0).unwrap();
        let d = discretize(&di, 0.1, Scheme::Euler).unwrap();
        assert_eq!(d.step(&v(&[1.0, 0.0]), &v(&[0.0])), v(&[1.0, 0.0]));
        let x = d.step(&v(&[0.0, 1.0]), &v(&[0.0]));
        assert_relative_eq!(x[0], 0.1, epsilon = 1e-15);
        assert_relative_eq!(x[1], 1.0, epsilon = 1e-15);
        let cp = cart_pole(CartPoleParams::default()).unwrap();
        let dc = discretize(&cp, 0.05, Scheme::Rk4).unwrap();
        assert_eq!(dc.step(&State::zeros(4), &v(&[0.0])), State::zeros(4));
        assert!(discretize(&di, -1.0, Scheme::Euler).is_err());
    }

    #[test]
    fn stable_feedback_shrinks_state() {
        let di = double_integrator(10.0).unwrap();
        let pol = |x: &State| v(&[-x[0] - 2.0 * x[1]]);
        let traj = rollout_ct(&di, &pol, &v(&[1.0, 0.0]), 5.0, 0.01, Probes::default()).unwrap();
        assert_eq!(traj.states.len(), traj.controls.len() + 1);
        assert!(traj.final_state().unwrap().norm() < 1.0);
        assert!(traj.times.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn rollout_clamps_and_flags() {
        let di = double_integrator(1.0).unwrap();
        let pol = |_: &State| v(&[5.0]);
        let traj = rollout_ct(&di, &pol, &v(&[0.0, 0.0]), 1.0, 0.1, Probes::default()).unwrap();
        assert!(traj.saturated);
        assert!(traj.controls.iter().all(|u| u[0] == 1.0));
    }

    #[test]
    fn rollout_truncates_on_blow_up() {
        let sys = ControlAffineSystem::new(
            "blowup",
            1,
            1,
            Arc::new(|x: &State| x.map(|c| c * c * c)),
            Arc::new(|_: &State| DMatrix::from_element(1, 1, 1.0)),
            v(&[-1.0]),
            v(&[1.0]),
        )
        .unwrap();
        let pol = |_: &State| v(&[0.0]);
        let traj = rollout_ct(&sys, &pol, &v(&[10.0]), 10.0, 0.1, Probes::default()).unwrap();
        assert!(traj.diverged);
        assert_eq!(traj.states.len(), traj.controls.len() + 1);
        assert!(traj.states.iter().all(|x| x[0].is_finite()));
    }
}
