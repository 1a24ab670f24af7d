use clp::gate::{gate_grad_a, hard_mask, round_window, soft_mask, GateParams, PruneWindow};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn mask_stays_in_unit_interval(layers in 2usize..40, frac in 0.0f64..1.0, n_frac in 0.0f64..1.0, k in 0.5f64..60.0) {
        let n = 1 + ((layers - 1) as f64 * n_frac) as usize;
        let a = frac * (layers - n) as f64;
        let m = soft_mask(&GateParams::new(a, n, k, layers).unwrap());
        prop_assert_eq!(m.len(), layers);
        prop_assert!(m.values().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn closed_form_gradient_matches_differences(a in 0.05f64..8.95, n in 1usize..4, k in prop::sample::select(vec![3.0, 5.0, 10.0])) {
        let gp = GateParams::new(a, n, k, 12).unwrap();
        prop_assume!(a + 1e-4 <= gp.max_start());
        for i in 0..12 {
            let h = 1e-4;
            let fd = (gp.with_a(a + h).value(i) - gp.with_a(a - h).value(i)) / (2.0 * h);
            let g = gate_grad_a(&gp, i);
            prop_assert!((g - fd).abs() <= 1e-4 * fd.abs().max(1e-6), "i {} g {} fd {}", i, g, fd);
        }
    }

    #[test]
    fn steep_gate_approaches_the_hard_mask(layers in 4usize..33, n_frac in 0.0f64..1.0, s_frac in 0.0f64..1.0) {
        let n = 1 + ((layers - 2) as f64 * n_frac) as usize;
        let s = 1 + ((layers - n - 1) as f64 * s_frac) as usize;
        prop_assume!(s + n <= layers);
        let a = s as f64 - 0.5;
        let soft = soft_mask(&GateParams::new(a, n, 50.0, layers).unwrap());
        let hard = hard_mask(PruneWindow::new(s, n), layers).unwrap();
        let bound = (-25.0f64).exp();
        // the two window edges themselves sit on the sigmoid shoulders
        let gp = GateParams::new(a, n, 50.0, layers).unwrap();
        for i in (0..layers).filter(|&i| i != s && i != s + n - 1) {
            // near 1 the deviation is below f64 resolution of m itself
            let deviation = if hard.values()[i] == 1.0 { gp.removed(i) } else { soft.values()[i] };
            prop_assert!(deviation <= bound, "i {} deviation {}", i, deviation);
            prop_assert!((soft.values()[i] - hard.values()[i]).abs() <= bound + f64::EPSILON);
        }
    }

    #[test]
    fn rounded_window_is_always_valid(layers in 2usize..40, n_frac in 0.0f64..1.0, a in -5.0f64..50.0) {
        let n = 1 + ((layers - 1) as f64 * n_frac) as usize;
        let w = round_window(&GateParams::new(a, n, 5.0, layers).unwrap());
        prop_assert!(w.validate(layers).is_ok());
        prop_assert_eq!(w.length, n);
    }
}
