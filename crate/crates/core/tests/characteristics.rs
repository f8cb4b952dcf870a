use ensemble_backstep::characteristics::{trace_f_curve, trace_g_curve, ConstantSpeeds, FnSpeeds};
use ensemble_backstep::model::{toy_model, varying_speed_model};
use ensemble_backstep::Error;
use proptest::prelude::*;

const STEP: f64 = 1e-2;

#[test]
fn fixed_examples() {
    let unit = ConstantSpeeds {
        lambda: 1.0,
        mu: 1.0,
    };
    let f = trace_f_curve(&unit, 1.0, 0.0, 0.5, STEP).unwrap();
    assert!((f.s_end - 0.5).abs() < 1e-8);
    assert!((f.launch - 0.5).abs() < 1e-8);
    let s = FnSpeeds {
        lambda: |_: f64, _: f64| 1.0,
        mu: |x: f64| 1.0 + x,
        lambda_floor: 1.0,
        mu_floor: 1.0,
    };
    let g = trace_g_curve(&s, 1.0, 0.5, STEP).unwrap();
    assert!((g.s_end - 1.5f64.ln()).abs() < 1e-8);
}

#[test]
fn points_off_the_triangle_are_rejected() {
    let unit = ConstantSpeeds {
        lambda: 1.0,
        mu: 1.0,
    };
    assert!(matches!(
        trace_f_curve(&unit, 0.3, 0.6, 0.5, STEP),
        Err(Error::Domain(_))
    ));
    assert!(matches!(
        trace_g_curve(&unit, 1.2, 0.1, STEP),
        Err(Error::Domain(_))
    ));
}

#[test]
fn f_crossing_time_is_lipschitz_in_y() {
    let m = varying_speed_model();
    let ys: Vec<f64> = (0..50).map(|l| l as f64 / 49.0).collect();
    let s: Vec<f64> = ys
        .iter()
        .map(|y| trace_f_curve(&m, 0.9, 0.2, *y, STEP).unwrap().s_end)
        .collect();
    let q = s
        .windows(2)
        .map(|w| (w[1] - w[0]).abs() * 49.0)
        .fold(0.0, f64::max);
    assert!(q.is_finite() && q < 1.0, "Lipschitz quotient {q}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn constant_speed_closed_forms(
        lambda in 0.2f64..3.0, mu in 0.2f64..3.0,
        x in 0.0f64..=1.0, t in 0.0f64..=1.0, y in 0.0f64..=1.0,
    ) {
        let sp = ConstantSpeeds { lambda, mu };
        let xi = t * x;
        let f = trace_f_curve(&sp, x, xi, y, STEP).unwrap();
        prop_assert!((f.s_end - (x - xi) / (lambda + mu)).abs() < 1e-8);
        let g = trace_g_curve(&sp, x, xi, STEP).unwrap();
        prop_assert!((g.s_end - xi / mu).abs() < 1e-8);
        prop_assert!((g.launch - (x - xi)).abs() < 1e-8);
    }

    #[test]
    fn diagonal_and_edge_points_have_zero_crossing_time(x in 0.0f64..=1.0, y in 0.0f64..=1.0) {
        let m = toy_model();
        prop_assert!(trace_f_curve(&m, x, x, y, STEP).unwrap().s_end.abs() < 1e-12);
        prop_assert!(trace_g_curve(&m, x, 0.0, STEP).unwrap().s_end.abs() < 1e-12);
    }

    #[test]
    fn g_crossing_time_ignores_lambda(x in 0.0f64..=1.0, t in 0.0f64..=1.0, l1 in 0.3f64..3.0, l2 in 0.3f64..3.0) {
        let xi = t * x;
        let a = trace_g_curve(&ConstantSpeeds { lambda: l1, mu: 0.7 }, x, xi, STEP).unwrap();
        let b = trace_g_curve(&ConstantSpeeds { lambda: l2, mu: 0.7 }, x, xi, STEP).unwrap();
        prop_assert_eq!(a.s_end, b.s_end);
    }

    #[test]
    fn f_paths_stay_in_the_triangle(x in 0.0f64..=1.0, t in 0.0f64..=1.0, y in 0.0f64..=1.0) {
        let m = varying_speed_model();
        let c = trace_f_curve(&m, x, t * x, y, STEP).unwrap();
        for (px, pz) in c.path_x.iter().zip(&c.path_xi) {
            prop_assert!(*pz >= -1e-9 && *pz <= *px + 1e-9 && *px <= 1.0 + 1e-9);
        }
    }
}
