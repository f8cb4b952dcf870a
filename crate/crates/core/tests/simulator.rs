use ensemble_backstep::grid::GridSpec;
use ensemble_backstep::kernelsolve::{solve_backstepping_kernels, GoursatOptions, KernelSolution};
use ensemble_backstep::model::{
    pure_transport_model, toy_analytic_kernels, toy_ktilde, toy_model, TOY_RATE,
};
use ensemble_backstep::simulator::{
    control_value, fit_decay_rate, forward_transform, inverse_transform, joint_norm,
    lyapunov_value, simulate, step_plant, v_norm, EnsembleState, InitialCondition, Mode,
    TargetSystem,
};
use ensemble_backstep::Error;
use proptest::prelude::*;

fn smooth_state(grid: &GridSpec, c: &[f64]) -> EnsembleState {
    let mut s = EnsembleState::zeros(grid);
    for ((i, l), u) in s.u.indexed_iter_mut() {
        let (x, y) = (grid.x(i), grid.y(l));
        *u = c[0] * (3.0 * x).sin() + c[1] * (2.0 * y - 1.0) + c[2] * x * y;
    }
    for (i, v) in s.v.iter_mut().enumerate() {
        let x = grid.x(i);
        *v = c[3] + c[4] * (2.0 * x).cos();
    }
    s
}

#[test]
fn cfl_violation_is_a_config_error() {
    let g = GridSpec::new(20, 5, 0.1, 1.0).unwrap();
    let c = pure_transport_model().sample(&g).unwrap();
    let s = EnsembleState::zeros(&g);
    assert!(matches!(
        step_plant(&s, &c, g.dt, 0.0),
        Err(Error::Config(_))
    ));
}

#[test]
fn zero_state_stays_zero_in_every_mode() {
    let g = GridSpec::new(20, 7, 0.04, 1.0).unwrap();
    let m = toy_model();
    let c = m.sample(&g).unwrap();
    let k = solve_backstepping_kernels(&m, &g, &GoursatOptions::default()).unwrap();
    let zero = InitialCondition::Zero.build(&g);
    for mode in [Mode::Open, Mode::Closed, Mode::Target] {
        let r = simulate(&c, Some(&k), mode, &zero, &[]).unwrap();
        assert!(r.joint_norms.iter().chain(&r.control).all(|v| *v == 0.0));
    }
}

#[test]
fn closed_mode_needs_kernels() {
    let g = GridSpec::new(10, 3, 0.05, 0.5).unwrap();
    let c = toy_model().sample(&g).unwrap();
    let s = EnsembleState::zeros(&g);
    assert!(matches!(
        simulate(&c, None, Mode::Closed, &s, &[]),
        Err(Error::Config(_))
    ));
}

#[test]
fn default_initial_condition_excites_v_in_open_loop() {
    let g = GridSpec::new(50, 31, 0.016, 2.0).unwrap();
    let c = toy_model().sample(&g).unwrap();
    let r = simulate(
        &c,
        None,
        Mode::Open,
        &InitialCondition::Default { amp: 1.0 }.build(&g),
        &[],
    )
    .unwrap();
    assert!(*r.v_norms.last().unwrap() > 1.0);
    let half = simulate(
        &c,
        None,
        Mode::Open,
        &InitialCondition::HalfMode { amp: 1.0 }.build(&g),
        &[],
    )
    .unwrap();
    assert!(half.v_norms.iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn control_of_unit_state_matches_closed_form() {
    let g = GridSpec::spatial(100, 201).unwrap();
    let (k, kt) = toy_analytic_kernels(&g);
    let sol = KernelSolution::from_kernels(g, k, kt).unwrap();
    let mut s = EnsembleState::zeros(&g);
    s.u.fill(1.0);
    s.v.fill(1.0);
    let exact = -35.0 / 6.0 * (TOY_RATE.exp() - 1.0) / TOY_RATE + toy_ktilde();
    let u = control_value(&s, &sol).unwrap();
    assert!((u - exact).abs() < 1e-3 * exact.abs(), "{u} vs {exact}");
}

#[test]
fn target_beta_is_transported_out() {
    let g = GridSpec::new(40, 9, 0.02, 2.5).unwrap();
    let m = toy_model();
    let c = m.sample(&g).unwrap();
    let k = solve_backstepping_kernels(&m, &g, &GoursatOptions::default()).unwrap();
    let r = simulate(
        &c,
        Some(&k),
        Mode::Target,
        &InitialCondition::Default { amp: 1.0 }.build(&g),
        &[2.0],
    )
    .unwrap();
    let b0 = v_norm(
        &g,
        &forward_transform(
            &InitialCondition::Default { amp: 1.0 }.build(&g),
            &k.k,
            &k.ktilde,
        )
        .unwrap()
        .v,
    );
    assert!(v_norm(&g, &r.snapshots[0].state.v) < 1e-3 * b0);
}

#[test]
fn closed_loop_decays_on_a_coarse_grid() {
    let g = GridSpec::new(100, 31, 0.008, 5.0).unwrap();
    let m = toy_model();
    let c = m.sample(&g).unwrap();
    let k = solve_backstepping_kernels(&m, &g, &GoursatOptions::default()).unwrap();
    let r = simulate(
        &c,
        Some(&k),
        Mode::Closed,
        &InitialCondition::Default { amp: 1.0 }.build(&g),
        &[],
    )
    .unwrap();
    assert!(r.final_norm() < 0.2 * r.max_norm());
    assert!(r.decay_rate.unwrap() < 0.0);
}

#[test]
fn simulation_is_reproducible() {
    let g = GridSpec::new(30, 11, 0.02, 1.0).unwrap();
    let m = toy_model();
    let c = m.sample(&g).unwrap();
    let k = solve_backstepping_kernels(&m, &g, &GoursatOptions::default()).unwrap();
    let ic = InitialCondition::Gaussian {
        amp: 1.0,
        center: 0.4,
        width: 0.1,
    }
    .build(&g);
    let a = simulate(&c, Some(&k), Mode::Closed, &ic, &[0.5]).unwrap();
    let b = simulate(&c, Some(&k), Mode::Closed, &ic, &[0.5]).unwrap();
    assert_eq!(a, b);
}

#[test]
fn decay_fit_recovers_exponential_rate() {
    let t: Vec<f64> = (0..100).map(|n| n as f64 * 0.05).collect();
    let y: Vec<f64> = t.iter().map(|t| 3.0 * (-0.7 * t).exp()).collect();
    assert!((fit_decay_rate(&t, &y, 2.0).unwrap() + 0.7).abs() < 1e-12);
    assert_eq!(fit_decay_rate(&t[..10], &y[..10], 2.0), None);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn pure_transport_norm_never_grows(
        c in prop::array::uniform5(-1.0f64..1.0),
        cfl in 0.1f64..=1.0,
    ) {
        let nx = 30;
        let g = GridSpec::new(nx, 7, cfl / nx as f64, 0.5).unwrap();
        let coeff = pure_transport_model().sample(&g).unwrap();
        let r = simulate(&coeff, None, Mode::Open, &smooth_state(&g, &c), &[]).unwrap();
        // From the first step on both boundary values are zero and each
        // update is a convex combination; the initial step may still raise
        // the trapezoid norm when the data do not vanish at the inflow.
        for w in r.joint_norms[1..].windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-14));
        }
    }

    #[test]
    fn transforms_round_trip(c in prop::array::uniform5(-1.0f64..1.0)) {
        let g = GridSpec::new(40, 11, 0.02, 1.0).unwrap();
        let (k, kt) = toy_analytic_kernels(&g);
        let sol = KernelSolution::from_kernels(g, k, kt).unwrap();
        let coeff = toy_model().sample(&g).unwrap();
        let ts = TargetSystem::new(&coeff, &sol).unwrap();
        let s = smooth_state(&g, &c);
        let back = inverse_transform(&forward_transform(&s, &sol.k, &sol.ktilde).unwrap(), &ts.l, &ts.ltilde).unwrap();
        let diff: Vec<f64> = back.v.iter().zip(&s.v).map(|(a, b)| a - b).collect();
        prop_assert!(v_norm(&g, &diff) <= 1e-3 * v_norm(&g, &s.v).max(1e-12));
        prop_assert_eq!(back.u, s.u);
    }

    #[test]
    fn lyapunov_sandwich_holds(c in prop::array::uniform5(-1.0f64..1.0)) {
        let g = GridSpec::new(20, 9, 0.04, 1.0).unwrap();
        for m in [toy_model(), pure_transport_model()] {
            let coeff = m.sample(&g).unwrap();
            let k = solve_backstepping_kernels(&m, &g, &GoursatOptions::default()).unwrap();
            let ts = TargetSystem::new(&coeff, &k).unwrap();
            let s = smooth_state(&g, &c);
            let v = lyapunov_value(&coeff, &s, ts.lyapunov.p, ts.lyapunov.delta).unwrap();
            let n2 = joint_norm(&g, &s.u, &s.v).powi(2);
            prop_assert!(ts.lyapunov.lower * n2 <= v * (1.0 + 1e-12));
            prop_assert!(v <= ts.lyapunov.upper * n2 * (1.0 + 1e-12));
        }
    }
}
