use std::sync::Arc;

use anisoflow::diffquot::AnisotropyMatrix;
use anisoflow::flow::{integrate_seeds, superlevel_decay, FlowMap, SinCosField, SplitVectorField, VlasovField};
use anisoflow::grid::Grid;
use anisoflow::stability::{
    budget_terms, phi_functional, phi_lower_bound, BudgetSplit, Certificate, StabilityParams,
};
use proptest::prelude::*;

type Paths = Vec<Vec<[f64; 2]>>;

fn flow_map(seeds: &[[f64; 2]], paths: &Paths, times: usize) -> FlowMap {
    let positions = paths.iter().flat_map(|p| p.iter().flat_map(|q| q.iter().copied())).collect();
    FlowMap {
        dim: 2,
        seeds: seeds.iter().map(|s| s.to_vec()).collect(),
        seed_spacing: vec![0.1, 0.1],
        cell_measure: 0.01,
        times: (0..times).map(|k| k as f64).collect(),
        positions,
        escaped: vec![None; seeds.len()],
        start_time: 0.0,
    }
}

fn pair_strategy() -> impl Strategy<Value = (Vec<[f64; 2]>, Paths, Paths)> {
    let pt = || prop::array::uniform2(-3.0..3.0f64);
    (1usize..40, 1usize..5).prop_flat_map(move |(n, t)| {
        (
            prop::collection::vec(pt(), n),
            prop::collection::vec(prop::collection::vec(pt(), t), n),
            prop::collection::vec(prop::collection::vec(pt(), t), n),
        )
    })
}

fn sin_cos(a: f64, phase: f64) -> SplitVectorField {
    let grid = Grid::uniform(2, 0, std::f64::consts::PI, 64).unwrap();
    SplitVectorField::analytic("sin_cos", grid, Arc::new(SinCosField { amplitude: a, phase })).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn phi_decreases_with_delta2((seeds, p, q) in pair_strategy(), ln_alpha in -3.0..0.0f64, l2 in -8.0..0.0f64, dl in 0.0..4.0f64) {
        let (x, xbar) = (flow_map(&seeds, &p, p[0].len()), flow_map(&seeds, &q, q[0].len()));
        let at = |l: f64| {
            let a = AnisotropyMatrix::from_ln(ln_alpha + l, l, 1, 1).unwrap();
            phi_functional(&x, &xbar, &a, 3.0, 5.0).unwrap()
        };
        let (small, large) = (at(l2), at(l2 + dl));
        for (s, l) in small.iter().zip(&large) {
            prop_assert!(*l <= *s * (1.0 + 1e-12));
        }
    }

    #[test]
    fn phi_bounds_the_superlevel_set((seeds, p, q) in pair_strategy(), ln_alpha in -3.0..0.0f64, l2 in -40.0..0.0f64, gamma in 0.01..2.0f64) {
        let (x, xbar) = (flow_map(&seeds, &p, p[0].len()), flow_map(&seeds, &q, q[0].len()));
        let a = AnisotropyMatrix::from_ln(ln_alpha + l2, l2, 1, 1).unwrap();
        let check = phi_lower_bound(&x, &xbar, &a, 3.0, 5.0, gamma).unwrap();
        prop_assert!(check.holds, "{check:?}");
    }

    #[test]
    fn decay_curve_is_monotone((seeds, p, _q) in pair_strategy(), mut ladder in prop::collection::vec(0.1..6.0f64, 1..8)) {
        ladder.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ladder.dedup();
        let x = flow_map(&seeds, &p, p[0].len());
        let curve = superlevel_decay(&x, 3.0, &ladder).unwrap();
        prop_assert!(curve.monotone);
    }

    #[test]
    fn certificate_reevaluates_exactly(
        ln_alpha in -5.0..0.0f64, l2 in -1e6..-1.0f64, eps_frac in 0.01..1.0f64,
        c_eps in 0.0..10.0f64, m in 0.0..10.0f64, gamma in 0.01..1.0f64, tails in (0.0..0.1f64, 0.0..0.1f64),
    ) {
        let alpha = ln_alpha.exp();
        let params = StabilityParams {
            gamma, r: 1.0, eta: 0.5, lambda: 2.0, alpha, epsilon: eps_frac * alpha * alpha, c_epsilon: c_eps,
            ln_delta1: alpha.ln() + l2, ln_delta2: l2,
        };
        let terms = budget_terms(&params, m, 1.0, tails);
        prop_assert!(terms.iter().all(|t| t.is_finite() && *t >= 0.0));
        let cert = Certificate {
            params, c_lambda: 1.0, ln_c_gamma_r_eta: 0.0, budget_terms: terms.to_vec(), split: BudgetSplit::default(),
            m_norm: m, growth_norms: vec![], compressibility: vec![],
        };
        let back = Certificate::from_toml_str(&cert.to_toml_string().unwrap()).unwrap();
        prop_assert_eq!(back.reevaluate(), terms);
        prop_assert_eq!(back.budget_sum(), cert.budget_sum());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn flow_has_the_semigroup_property(seeds in prop::collection::vec(prop::array::uniform2(-1.5..1.5f64), 1..10), s in 0.1..0.9f64) {
        let b = sin_cos(0.5, 0.1);
        let seeds: Vec<Vec<f64>> = seeds.iter().map(|p| p.to_vec()).collect();
        let dt = 0.005;
        let whole = integrate_seeds(&b, seeds.clone(), vec![0.1, 0.1], &[0.0, s, 1.0], dt).unwrap();
        let first = integrate_seeds(&b, seeds.clone(), vec![0.1, 0.1], &[0.0, s], dt).unwrap();
        let mid: Vec<Vec<f64>> = (0..seeds.len()).map(|i| first.position(i, 1).to_vec()).collect();
        let second = integrate_seeds(&b, mid, vec![0.1, 0.1], &[s, 1.0], dt).unwrap();
        for i in 0..seeds.len() {
            for (u, v) in whole.position(i, 2).iter().zip(second.position(i, 1)) {
                prop_assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn free_transport_is_exact(seeds in prop::collection::vec(prop::array::uniform2(-2.0..2.0f64), 1..10), t in 0.1..1.5f64) {
        let grid = Grid::uniform(1, 1, 8.0, 64).unwrap();
        let f = VlasovField::new(1, 0.0, 0.1, vec![(vec![0.0], 1.0)]).unwrap();
        let b = SplitVectorField::analytic("vlasov", grid, Arc::new(f)).unwrap();
        let seeds: Vec<Vec<f64>> = seeds.iter().map(|p| p.to_vec()).collect();
        let fm = integrate_seeds(&b, seeds.clone(), vec![0.1, 0.1], &[0.0, t], 0.01).unwrap();
        for (i, p) in seeds.iter().enumerate() {
            let q = fm.position(i, 1);
            prop_assert!((q[0] - (p[0] + t * p[1])).abs() < 1e-12);
            prop_assert!((q[1] - p[1]).abs() < 1e-15);
        }
    }
}
