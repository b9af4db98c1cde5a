use anisoflow::grid::{lebesgue_norm, Grid, GridFunction, Region};
use anisoflow::weak_lebesgue::{equi_split, interpolation_bound, verify_interpolation, weak_norm};
use proptest::prelude::*;

fn bumps(g: &Grid, centers: &[(f64, f64, f64)]) -> GridFunction {
    GridFunction::sample(g, |x| centers.iter().map(|&(c, w, a)| a * (-(x[0] - c).powi(2) / (w * w)).exp()).sum()).unwrap()
}

fn centers() -> impl Strategy<Value = Vec<(f64, f64, f64)>> {
    prop::collection::vec((-2.0..2.0f64, 0.05..1.0f64, -3.0..3.0f64), 1..5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn norm_is_homogeneous(cs in centers(), c in -5.0..5.0f64, p in 1.0..6.0f64) {
        let g = Grid::uniform(1, 0, 4.0, 256).unwrap();
        let u = bumps(&g, &cs);
        let a = lebesgue_norm(&u.scale(c).unwrap(), p, &Region::Full).unwrap();
        let b = c.abs() * lebesgue_norm(&u, p, &Region::Full).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * b.max(1e-300));
    }

    #[test]
    fn norm_is_monotone_in_region(cs in centers(), r1 in 0.1..3.0f64, dr in 0.0..1.0f64, p in 1.0..4.0f64) {
        let g = Grid::uniform(1, 0, 4.0, 256).unwrap();
        let u = bumps(&g, &cs);
        let small = lebesgue_norm(&u, p, &Region::centered_ball(1, r1).unwrap()).unwrap();
        let large = lebesgue_norm(&u, p, &Region::centered_ball(1, r1 + dr).unwrap()).unwrap();
        prop_assert!(small <= large);
    }

    #[test]
    fn chebyshev(cs in centers()) {
        let g = Grid::uniform(1, 0, 4.0, 256).unwrap();
        let u = bumps(&g, &cs);
        let w = weak_norm(&u, 1.0, &Region::Full).unwrap().value;
        prop_assert!(w <= lebesgue_norm(&u, 1.0, &Region::Full).unwrap() * (1.0 + 1e-12));
    }

    #[test]
    fn weak_norm_is_homogeneous(cs in centers(), c in 0.01..10.0f64, p in 1.0..4.0f64) {
        let g = Grid::uniform(1, 0, 4.0, 128).unwrap();
        let u = bumps(&g, &cs);
        let a = weak_norm(&u.scale(c).unwrap(), p, &Region::Full).unwrap().value;
        let b = c * weak_norm(&u, p, &Region::Full).unwrap().value;
        prop_assert!((a - b).abs() <= 1e-12 * b.max(1e-300));
    }

    #[test]
    fn equi_split_invariants(cs in centers(), frac in 0.01..0.9f64) {
        let g = Grid::uniform(1, 0, 4.0, 256).unwrap();
        let u = bumps(&g, &cs);
        let eps = frac * lebesgue_norm(&u, 1.0, &Region::Full).unwrap();
        let s = equi_split(&u, eps, 2.0).unwrap();
        let sum = s.u1.add(&s.u2).unwrap();
        prop_assert_eq!(sum.values(), u.values());
        prop_assert!(lebesgue_norm(&s.u1, 1.0, &Region::Full).unwrap() <= eps * (1.0 + 1e-12));
        for i in 0..g.len() {
            let v = s.u2.value(i);
            prop_assert!(v.abs() <= s.threshold);
            if v != 0.0 {
                prop_assert!(g.coord(0, i).abs() <= s.support_radius);
            }
        }
        prop_assert!((s.c_epsilon - lebesgue_norm(&s.u2, 2.0, &Region::Full).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn interpolation_bound_is_monotone(m1 in 0.01..10.0f64, mp in 0.0..10.0f64, dm in 0.0..5.0f64, mu in 0.1..10.0f64, dmu in 0.0..5.0f64, p in 1.1..8.0f64) {
        let base = interpolation_bound(m1, mp, p, mu).unwrap().value;
        prop_assert!(interpolation_bound(m1, mp + dm, p, mu).unwrap().value >= base);
        prop_assert!(interpolation_bound(m1, mp, p, mu + dmu).unwrap().value >= base);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn interpolation_holds_on_random_functions(cs in centers(), p in prop::sample::select(vec![1.5, 2.0, 3.0, f64::INFINITY])) {
        let g = Grid::uniform(1, 0, 4.0, 512).unwrap();
        let u = bumps(&g, &cs);
        let r = verify_interpolation(&u, p, &Region::centered_ball(1, 3.0).unwrap()).unwrap();
        prop_assert!(r.holds, "{r:?}");
    }
}

#[test]
fn refinement_is_second_order() {
    let f = |x: &[f64]| (-(x[0] * x[0]) - 0.5 * x[1] * x[1]).exp() * (1.0 + 0.3 * x[0].sin());
    let norm = |n| lebesgue_norm(&GridFunction::sample(&Grid::uniform(2, 0, 6.0, n).unwrap(), f).unwrap(), 2.0, &Region::Full).unwrap();
    let (a, b, c) = (norm(32), norm(64), norm(128));
    assert!((b - c).abs() <= (a - b).abs().max(1e-13));
    assert!((b - c).abs() < 0.05 * (12.0f64 / 64.0).powi(2));
}
