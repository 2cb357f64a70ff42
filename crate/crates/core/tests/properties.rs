use nalgebra::DMatrix;
use oclab_core::analysis::{dt_bounds, estimate_lipschitz, scan_value_bounds};
use oclab_core::clf::{synthesize_ct, synthesize_dt, QuadraticCLF};
use oclab_core::costs::{practical_cost, stage_cost_ct, stage_cost_dt, CostSpec};
use oclab_core::field::{clf_sublevel, extract_sublevel, SetKind, UniformGrid, ValueField};
use oclab_core::systems::{
    cart_pole, discretize, double_integrator, rk4_step, CartPoleParams, Control, DiscreteSystem, Scheme, State,
};
use proptest::prelude::*;

fn di_clf() -> QuadraticCLF {
    let sys = double_integrator(3.0).unwrap();
    synthesize_ct(&sys, &DMatrix::identity(2, 2), &DMatrix::identity(1, 1)).unwrap()
}

fn di_discrete() -> (DiscreteSystem, QuadraticCLF) {
    let sys = double_integrator(3.0).unwrap();
    let dsys = discretize(&sys, 0.1, Scheme::Euler).unwrap();
    let clf = synthesize_dt(&dsys, &DMatrix::identity(2, 2), &DMatrix::identity(1, 1)).unwrap();
    (dsys, clf)
}

fn state2() -> impl Strategy<Value = State> {
    (-2.0..2.0f64, -2.0..2.0f64).prop_map(|(a, b)| State::from_vec(vec![a, b]))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn equilibrium_is_preserved(h in 1e-4..0.5f64) {
        let di = double_integrator(3.0).unwrap();
        prop_assert_eq!(rk4_step(&di, &State::zeros(2), &Control::zeros(1), h).unwrap(), State::zeros(2));
        let cp = cart_pole(CartPoleParams::default()).unwrap();
        let x = rk4_step(&cp, &State::zeros(4), &Control::zeros(1), h).unwrap();
        prop_assert!(x.norm() == 0.0);
    }

    #[test]
    fn clamping_lands_in_box(u in -100.0..100.0f64) {
        let sys = double_integrator(3.0).unwrap();
        let (v, flagged) = sys.clamp_control(&Control::from_element(1, u));
        prop_assert!(sys.contains_control(&v));
        prop_assert_eq!(flagged, u.abs() > 3.0);
    }

    #[test]
    fn rayleigh_sandwich(x in state2()) {
        let clf = di_clf();
        let n2 = x.norm_squared();
        let v = clf.value(&x);
        prop_assert!(clf.c1() * n2 <= v * (1.0 + 1e-12) + 1e-300);
        prop_assert!(v <= clf.c2() * n2 * (1.0 + 1e-12) + 1e-300);
    }

    #[test]
    fn gradient_matches_finite_differences(x in state2()) {
        let clf = di_clf();
        let g = clf.gradient(&x);
        for i in 0..2 {
            let h = 1e-6;
            let (mut a, mut b) = (x.clone(), x.clone());
            a[i] += h;
            b[i] -= h;
            let fd = (clf.value(&a) - clf.value(&b)) / (2.0 * h);
            prop_assert!((fd - g[i]).abs() <= 1e-6 * (1.0 + g[i].abs()));
        }
    }

    #[test]
    fn stage_costs_are_nonnegative(x in state2(), u in -3.0..3.0f64) {
        let sys = double_integrator(3.0).unwrap();
        let clf = di_clf();
        let u = Control::from_element(1, u);
        let ct = CostSpec::NominalCt { beta: 1.0, rho: 10.0, lambda: 0.1, gamma: 0.5 };
        prop_assert!(stage_cost_ct(&ct, &clf, &sys, &x, &u).unwrap() >= 0.0);
        let (dsys, dclf) = di_discrete();
        let dt = CostSpec::NominalDt { beta: 1.0, rho: 10.0, lambda: 0.01, delta: 0.95 };
        prop_assert!(stage_cost_dt(&dt, &dclf, &dsys, &x, &u).unwrap() >= 0.0);
        let pr = CostSpec::PracticalDt {
            beta: 1.0, rho: 10.0, lambda: 0.01, delta: 0.95, sigma_sq: 5.0, sigma_vdot: 1.0, w_u: 0.1,
        };
        prop_assert!(practical_cost(&pr, &dclf, &dsys, &x, &u).unwrap() >= 0.0);
    }

    #[test]
    fn interpolation_reproduces_affine_functions(
        a in -5.0..5.0f64, b0 in -5.0..5.0f64, b1 in -5.0..5.0f64, x in state2()
    ) {
        let grid = UniformGrid::new(vec![-2.0, -2.0], vec![2.0, 2.0], vec![17, 9]).unwrap();
        let f = |p: &State| a + b0 * p[0] + b1 * p[1];
        // Shift so every nodal value is nonnegative.
        let shift = 30.0;
        let field = ValueField::new(grid.clone(), grid.nodes().map(|p| f(&p) + shift).collect()).unwrap();
        prop_assert!((field.interpolate(&x) - shift - f(&x)).abs() <= 1e-12 * (1.0 + shift));
    }

    #[test]
    fn interpolation_stays_within_corner_values(
        vals in proptest::collection::vec(0.0..10.0f64, 25), x in state2()
    ) {
        let grid = UniformGrid::new(vec![-2.0, -2.0], vec![2.0, 2.0], vec![5, 5]).unwrap();
        let field = ValueField::new(grid.clone(), vals.clone()).unwrap();
        let st = grid.stencil(&x);
        let corner: Vec<f64> = st.nodes.iter().map(|&n| vals[n]).collect();
        let lo = corner.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = corner.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let v = field.interpolate(&x);
        prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
    }

    #[test]
    fn sublevel_round_trip(vals in proptest::collection::vec(0.0..10.0f64, 49), t in 0.1..10.0f64) {
        let grid = UniformGrid::new(vec![-1.0, -1.0], vec![1.0, 1.0], vec![7, 7]).unwrap();
        let set = extract_sublevel(&vals, t, &grid, SetKind::ValueSet).unwrap();
        for (i, &m) in set.members.iter().enumerate() {
            prop_assert_eq!(m, vals[i] <= t);
        }
    }
}

#[test]
fn lipschitz_sampling_is_monotone_in_pairs() {
    let sys = double_integrator(3.0).unwrap();
    let clf = di_clf();
    let grid = UniformGrid::new(vec![-2.0, -2.0], vec![2.0, 2.0], vec![81, 81]).unwrap();
    let set = clf_sublevel(&clf, &grid, 3.0).unwrap();
    assert!(set.count() > 2000, "count {}", set.count());
    let pi = |x: &State| {
        let u = if x[0] + x[1] > 0.0 { -1.0 } else { 1.0 };
        Control::from_element(1, u - 0.3 * x[1])
    };
    let mut last = 0.0;
    for pairs in [100, 200, 400, 800, 1600] {
        let l = estimate_lipschitz(&pi, &sys, &set, &grid, pairs, 5).unwrap();
        assert!(l >= last);
        last = l;
    }
    let small = clf_sublevel(&clf, &grid, 0.5).unwrap();
    let big = clf_sublevel(&clf, &grid, 2.0).unwrap();
    let ls = estimate_lipschitz(&pi, &sys, &small, &grid, 10, 5).unwrap();
    let lb = estimate_lipschitz(&pi, &sys, &big, &grid, 10, 5).unwrap();
    assert!(small.count() <= 2000 && big.count() <= 2000);
    assert!(lb >= ls);
}

#[test]
fn value_scan_detects_every_injected_spike() {
    let (_, clf) = di_discrete();
    let spec = CostSpec::NominalDt {
        beta: 1.0,
        rho: 10.0,
        lambda: 0.01,
        delta: 0.95,
    };
    let report = dt_bounds(&clf, &spec).unwrap();
    let grid = UniformGrid::new(vec![-2.0, -2.0], vec![2.0, 2.0], vec![21, 21]).unwrap();
    let mid = 0.5 * (report.value_lower_coeff + report.value_upper_coeff);
    let clean: Vec<f64> = grid.nodes().map(|x| mid * x.norm_squared()).collect();
    let region = clf_sublevel(&clf, &grid, 20.0).unwrap();
    let baseline = ValueField::new(grid.clone(), clean.clone()).unwrap();
    assert!(scan_value_bounds(&baseline, &report, &region, 0.05).violations.is_empty());
    for i in region.interior_indices(&grid).filter(|&i| clean[i] > 0.0) {
        let mut spiked = clean.clone();
        spiked[i] *= 10.0;
        let field = ValueField::new(grid.clone(), spiked).unwrap();
        let scan = scan_value_bounds(&field, &report, &region, 0.05);
        assert_eq!(scan.violations.len(), 1, "spike at node {i} missed");
    }
}
