use std::sync::Arc;

use anisoflow::diffquot::{big_u, big_v, AnisotropyMatrix, DerivativeStructure, DerivativeTerm};
use anisoflow::grid::{lebesgue_norm, Grid, GridFunction, Region};
use anisoflow::maximal::{maximal_function, pointwise_domination_constant, smooth_maximal, BumpFamily, SmoothInput, StdBump};
use anisoflow::singular::{apply, apply_to_measure, rescale_kernel, Hilbert, Identity, Kernel, Riesz2d, SignedMeasure};
use proptest::prelude::*;

fn line(n: usize) -> Grid {
    Grid::uniform(1, 0, 4.0, n).unwrap()
}

fn bumps(g: &Grid, cs: &[(f64, f64, f64)]) -> GridFunction {
    GridFunction::sample(g, |x| {
        cs.iter()
            .map(|&(c, w, a)| a * (-((x[0] - c).powi(2) + x.get(1).map_or(0.0, |y| (y - 0.3 * c).powi(2))) / (w * w)).exp())
            .sum()
    })
    .unwrap()
}

fn centers() -> impl Strategy<Value = Vec<(f64, f64, f64)>> {
    prop::collection::vec((-2.0..2.0f64, 0.2..1.0f64, -3.0..3.0f64), 1..4)
}

fn max_abs_diff(a: &GridFunction, b: &GridFunction) -> f64 {
    a.values().iter().zip(b.values()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn riesz(i: usize, j: usize) -> Kernel {
    Arc::new(Riesz2d::new(i, j).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn hilbert_is_linear(a in centers(), b in centers(), s in -3.0..3.0f64, t in -3.0..3.0f64) {
        let g = line(256);
        let (u, v) = (bumps(&g, &a), bumps(&g, &b));
        let combo = u.scale(s).unwrap().add(&v.scale(t).unwrap()).unwrap();
        let lhs = apply(&Hilbert, &combo).unwrap();
        let rhs = apply(&Hilbert, &u).unwrap().scale(s).unwrap().add(&apply(&Hilbert, &v).unwrap().scale(t).unwrap()).unwrap();
        prop_assert!(max_abs_diff(&lhs, &rhs) < 1e-10);
    }

    #[test]
    fn unimodular_multipliers_preserve_l2(a in centers(), which in 0usize..3) {
        let (k, g): (Kernel, Grid) = match which {
            0 => (Arc::new(Hilbert), line(256)),
            _ => (riesz(1, 2), Grid::uniform(2, 0, 4.0, 64).unwrap()),
        };
        let u = bumps(&g, &a);
        let mean = u.values().iter().sum::<f64>() / g.len() as f64;
        let u0 = u.map(|v| v - mean).unwrap();
        let ku = apply(k.as_ref(), &u0).unwrap();
        let (nu, nk) = (lebesgue_norm(&u0, 2.0, &Region::Full).unwrap(), lebesgue_norm(&ku, 2.0, &Region::Full).unwrap());
        if which == 0 {
            prop_assert!((nu - nk).abs() <= 1e-10 * nu.max(1e-300));
        } else {
            prop_assert!(nk <= nu * (1.0 + 1e-10));
        }
    }

    #[test]
    fn rescaling_composes(a in 0.1..10.0f64, b in 0.1..10.0f64, x in -3.0..3.0f64, y in -3.0..3.0f64) {
        prop_assume!(x.hypot(y) > 0.05);
        let k = riesz(1, 1);
        let twice = rescale_kernel(&rescale_kernel(&k, a).unwrap(), b).unwrap();
        let once = rescale_kernel(&k, a * b).unwrap();
        let (u, v) = (twice.evaluate(&[x, y]), once.evaluate(&[x, y]));
        prop_assert!((u - v).abs() <= 1e-10 * u.abs().max(v.abs()).max(1e-300));
        let (mu, mv) = (twice.multiplier(&[x, y]), once.multiplier(&[x, y]));
        prop_assert!((mu - mv).norm() < 1e-12);
    }

    #[test]
    fn density_measure_matches_apply(a in centers(), which in 0usize..2) {
        let (k, g): (Kernel, Grid) = match which {
            0 => (Arc::new(Hilbert), line(256)),
            _ => (riesz(2, 2), Grid::uniform(2, 0, 4.0, 64).unwrap()),
        };
        let u = bumps(&g, &a);
        let direct = apply(k.as_ref(), &u).unwrap();
        let via = apply_to_measure(k.as_ref(), &SignedMeasure::from_density(u).unwrap(), &g).unwrap();
        prop_assert!(via.mask.iter().all(|&m| m));
        prop_assert!(max_abs_diff(&direct, &via.values) < 1e-12);
    }

    #[test]
    fn smooth_maximal_is_dominated(a in centers(), twod in any::<bool>()) {
        let g = if twod { Grid::uniform(2, 0, 4.0, 32).unwrap() } else { line(128) };
        let u = bumps(&g, &a);
        let fam = BumpFamily::single(Arc::new(StdBump::new(g.dim()))).unwrap();
        let c = pointwise_domination_constant(&fam);
        let m = maximal_function(&u).unwrap();
        let s = smooth_maximal(&fam, SmoothInput::Function(&u)).unwrap();
        for i in 0..g.len() {
            prop_assert!(m.value(i) >= u.value(i).abs());
            if s.mask[i] {
                prop_assert!(s.values.value(i) <= c * m.value(i) * (1.0 + 1e-9), "node {i}: {} vs {}", s.values.value(i), c * m.value(i));
            }
        }
    }
}

fn single_term(g: &Grid, c: f64, x0: f64) -> DerivativeStructure {
    let g1 = g.block1().unwrap();
    let g2 = g.block2().unwrap();
    let gamma = GridFunction::sample(&g2, |v| c * (-v[0] * v[0]).exp()).unwrap();
    let datum = SignedMeasure::from_density(GridFunction::sample(&g1, |x| (-(x[0] - x0).powi(2) * 4.0).exp()).unwrap()).unwrap();
    DerivativeStructure::new(
        g.clone(),
        vec![DerivativeTerm { component: 0, axis: 0, k: 1, kernel: Arc::new(Hilbert), gamma, datum }],
    )
    .unwrap()
}

fn identity_term(g: &Grid, x0: f64) -> DerivativeStructure {
    let mut s = single_term(g, 1.0, x0);
    s.terms[0].kernel = Arc::new(Identity { dim: 1 });
    s.terms[0].component = 1;
    s.terms[0].axis = 1;
    s.terms[0].k = 2;
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn u_is_nonnegative_and_homogeneous(c in 0.1..5.0f64, x0 in -1.0..1.0f64, l1 in 0.0..2.0f64, l2 in 0.0..2.0f64) {
        let g = Grid::new(1, vec![4.0, 4.0], vec![32, 32]).unwrap();
        let a = AnisotropyMatrix::from_ln(-(l1 + l2), -l2, 1, 1).unwrap();
        let base = big_u(&single_term(&g, 1.0, x0), &a, 4).unwrap();
        let scaled = big_u(&single_term(&g, c, x0), &a, 4).unwrap();
        for i in 0..g.len() {
            prop_assert!(base.values.value(i) >= 0.0);
            let (u, v) = (scaled.values.value(i), c * base.values.value(i));
            prop_assert!((u - v).abs() <= 1e-9 * v.max(1e-300));
        }
    }

    #[test]
    fn u_is_additive_over_terms(x0 in -1.0..1.0f64, x1 in -1.0..1.0f64) {
        let g = Grid::new(1, vec![4.0, 4.0], vec![32, 32]).unwrap();
        let (s, t) = (single_term(&g, 1.0, x0), identity_term(&g, x1));
        let a = AnisotropyMatrix::new(0.25, 0.5, 1, 1).unwrap();
        let sum = big_u(&s.concat(&t).unwrap(), &a, 4).unwrap();
        let (us, ut) = (big_u(&s, &a, 4).unwrap(), big_u(&t, &a, 4).unwrap());
        for i in 0..g.len() {
            let v = us.values.value(i) + ut.values.value(i);
            prop_assert!((sum.values.value(i) - v).abs() <= 1e-12 * v.max(1e-300));
        }
    }
}

#[test]
fn identity_anisotropy_reduces_to_v() {
    let g = Grid::new(1, vec![4.0, 4.0], vec![32, 32]).unwrap();
    let s = single_term(&g, 1.5, 0.2);
    let u = big_u(&s, &AnisotropyMatrix::identity(1, 1), 8).unwrap();
    let v = big_v(&s, 8).unwrap();
    assert_eq!(u.values.values(), v.values.values());
    assert_eq!(u.mask, v.mask);
}
