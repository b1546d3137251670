use proptest::prelude::*;
use urank::diagnostics::{
    compatibility_constant, pseudonorm, CompatibilityMode, GramMatrix, GramSource, MarginSpec, NormSource, Pseudonorm,
};
use urank::model::{score, LossKind, LossSpec};
use urank::solver::{fit_lasso, soft_threshold, SolverOptions};
use urank::tuning::{estimate_c_hat, lambda_hat, normalization_weights};
use urank::urisk::{empirical_risk_split, empirical_risk_u, permutation_average, risk_subgradient_u};
use urank::{BasisSpec, Dataset, Theta};

fn losses() -> Vec<LossSpec> {
    vec![
        LossSpec::hinge(),
        LossSpec::logistic(),
        LossSpec::truncated_quadratic(2.0).unwrap(),
        LossSpec::exponential(2.0).unwrap(),
    ]
}

prop_compose! {
    fn dataset(max_n: usize, max_d: usize)(n in 2..=max_n, d in 1..=max_d)
        (x in prop::collection::vec(-3.0f64..3.0, n * d),
         // coarse labels so ties occur
         y in prop::collection::vec(0i32..4, n),
         d in Just(d)) -> Dataset {
        Dataset::from_flat(x, y.into_iter().map(f64::from).collect(), d).unwrap()
    }
}

fn theta_for(d: usize) -> impl Strategy<Value = Theta> {
    prop::collection::vec(-2.0f64..2.0, d).prop_map(|v| Theta::new(v).unwrap())
}

fn data_and_theta(max_n: usize, max_d: usize) -> impl Strategy<Value = (Dataset, Theta, Theta)> {
    dataset(max_n, max_d).prop_flat_map(|ds| {
        let d = ds.d();
        (Just(ds), theta_for(d), theta_for(d))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn losses_are_convex(a in -2.0f64..2.0, b in -2.0f64..2.0, w in 0.0f64..1.0) {
        for l in losses() {
            let mid = l.value(w * a + (1.0 - w) * b);
            prop_assert!(mid <= w * l.value(a) + (1.0 - w) * l.value(b) + 1e-12, "{:?}", l.kind());
        }
    }

    #[test]
    fn losses_are_lipschitz_on_their_range(a in -2.0f64..2.0, b in -2.0f64..2.0) {
        for l in losses() {
            prop_assert!((l.value(a) - l.value(b)).abs() <= l.lipschitz() * (a - b).abs() + 1e-12, "{:?}", l.kind());
        }
    }

    #[test]
    fn subgradient_inequality(a in -2.0f64..2.0, b in -2.0f64..2.0) {
        for l in losses() {
            prop_assert!(l.value(b) >= l.value(a) + l.subgradient(a) * (b - a) - 1e-12, "{:?}", l.kind());
        }
    }

    #[test]
    fn linear_scores_are_antisymmetric(
        th in prop::collection::vec(-3.0f64..3.0, 3),
        x in prop::collection::vec(-3.0f64..3.0, 3),
        xp in prop::collection::vec(-3.0f64..3.0, 3),
    ) {
        let basis = BasisSpec::named("linear", 3).unwrap();
        let theta = Theta::new(th).unwrap();
        let f = score(&theta, &basis, &x, &xp).unwrap();
        let g = score(&theta, &basis, &xp, &x).unwrap();
        prop_assert!((f + g).abs() <= 1e-12);
        let sign_basis = BasisSpec::named("sign", 3).unwrap();
        let f = score(&theta, &sign_basis, &x, &xp).unwrap();
        let g = score(&theta, &sign_basis, &xp, &x).unwrap();
        prop_assert!((f + g).abs() <= 1e-12);
    }

    #[test]
    fn risk_is_invariant_to_row_order((ds, th, _) in data_and_theta(7, 3), rot in 0usize..7) {
        let n = ds.n();
        let perm: Vec<usize> = (0..n).map(|i| (i * 3 + rot) % n).collect();
        let mut sorted = perm.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assume!(sorted.len() == n);
        let shuffled = ds.select(&perm).unwrap();
        let basis = BasisSpec::named("linear", ds.d()).unwrap();
        for l in losses() {
            let a = empirical_risk_u(&th, &basis, &l, &ds).unwrap().value;
            let b = empirical_risk_u(&th, &basis, &l, &shuffled).unwrap().value;
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn risk_is_convex_in_theta((ds, t1, t2) in data_and_theta(8, 3), w in 0.0f64..1.0) {
        let basis = BasisSpec::named("linear", ds.d()).unwrap();
        let mid = Theta::new(t1.as_slice().iter().zip(t2.as_slice()).map(|(a, b)| w * a + (1.0 - w) * b).collect()).unwrap();
        for l in [LossSpec::hinge(), LossSpec::logistic()] {
            let q = |t: &Theta| empirical_risk_u(t, &basis, &l, &ds).unwrap().value;
            prop_assert!(q(&mid) <= w * q(&t1) + (1.0 - w) * q(&t2) + 1e-10);
        }
    }

    #[test]
    fn risk_subgradient_supports_the_risk((ds, t1, t2) in data_and_theta(8, 3)) {
        let basis = BasisSpec::named("linear", ds.d()).unwrap();
        for l in [LossSpec::hinge(), LossSpec::logistic()] {
            let g = risk_subgradient_u(&t1, &basis, &l, &ds).unwrap();
            let q1 = empirical_risk_u(&t1, &basis, &l, &ds).unwrap().value;
            let q2 = empirical_risk_u(&t2, &basis, &l, &ds).unwrap().value;
            let lin: f64 = g.iter().zip(t2.as_slice().iter().zip(t1.as_slice())).map(|(g, (b, a))| g * (b - a)).sum();
            prop_assert!(q2 >= q1 + lin - 1e-10);
        }
    }

    #[test]
    fn permutation_average_matches_u_statistic((ds, th, _) in data_and_theta(6, 2)) {
        let basis = BasisSpec::named("linear", ds.d()).unwrap();
        let l = LossSpec::logistic();
        let u = empirical_risk_u(&th, &basis, &l, &ds).unwrap().value;
        let p = permutation_average(&th, &basis, &l, &ds).unwrap();
        prop_assert!((u - p).abs() <= 1e-12 * u.max(1.0));
        let s = empirical_risk_split(&th, &basis, &l, &ds).unwrap();
        prop_assert_eq!(s.pair_count as usize, ds.n() / 2);
    }

    #[test]
    fn soft_threshold_is_a_contraction(
        v in prop::collection::vec(-5.0f64..5.0, 4),
        w in prop::collection::vec(-5.0f64..5.0, 4),
        t in prop::collection::vec(0.0f64..3.0, 4),
    ) {
        let sv = soft_threshold(&v, &t).unwrap();
        let sw = soft_threshold(&w, &t).unwrap();
        for k in 0..4 {
            prop_assert!((sv[k] - sw[k]).abs() <= (v[k] - w[k]).abs() + 1e-15);
            prop_assert_eq!(sv[k] == 0.0, v[k].abs() <= t[k]);
            prop_assert!(sv[k].abs() <= v[k].abs());
        }
    }

    #[test]
    fn lambda_hat_is_monotone(c in 0.1f64..20.0, n in 2usize..5000, m in 2usize..500, b in 0.1f64..1000.0) {
        let base = lambda_hat(c, 1.0, n, m, b).unwrap();
        prop_assert!(lambda_hat(c, 1.0, n + 1, m, b).unwrap() <= base);
        prop_assert!(lambda_hat(c, 1.0, n, m + 1, b).unwrap() >= base);
        prop_assert!(lambda_hat(c * 1.5, 1.0, n, m, b).unwrap() >= base);
        prop_assert!((lambda_hat(c, 1.0, n, m, 2.0 * b).unwrap() - 2.0 * base).abs() <= 1e-12 * base);
    }

    #[test]
    fn weights_match_pairwise_oracle(ds in dataset(9, 3)) {
        let basis = BasisSpec::named("linear", ds.d()).unwrap();
        let w = normalization_weights(&ds, &basis).unwrap();
        let n = ds.n();
        for (k, wk) in w.iter().enumerate() {
            let mut s = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        s += (ds.row(i)[k] - ds.row(j)[k]).powi(2);
                    }
                }
            }
            let oracle = (s / (n * (n - 1)) as f64).sqrt();
            prop_assert!((wk - oracle).abs() <= 1e-10 * oracle.max(1.0));
        }
        let c = estimate_c_hat(&ds, &basis).unwrap();
        prop_assert_eq!(c, w.iter().copied().fold(0.0, f64::max));
    }

    #[test]
    fn conjugate_dominates_every_affine_minorant(a in 0.1f64..5.0, alpha in 0.05f64..1.0, u in 0.0f64..10.0, v in 0.0f64..10.0) {
        let m = MarginSpec::new(a, alpha).unwrap();
        // Fenchel-Young
        prop_assert!(m.h(v) + 1e-9 * (1.0 + m.h(v)) >= u * v - m.g(u));
        // attained at u* = (α v / (2a))^{α/(2-α)}
        let ustar = (alpha * v / (2.0 * a)).powf(alpha / (2.0 - alpha));
        let at = ustar * v - m.g(ustar);
        prop_assert!((m.h(v) - at).abs() <= 1e-9 * m.h(v).max(1.0));
    }

    #[test]
    fn cone_points_satisfy_compatibility(
        raw in prop::collection::vec(-2.0f64..2.0, 16),
        theta in prop::collection::vec(-1.0f64..1.0, 4),
        s_len in 1usize..3,
    ) {
        // Σ = BᵀB + 0.1 I
        let b = nalgebra::DMatrix::from_row_slice(4, 4, &raw);
        let sigma = b.transpose() * &b + nalgebra::DMatrix::identity(4, 4) * 0.1;
        let gram = GramMatrix::new(sigma.clone(), GramSource::EmpiricalPairs).unwrap();
        let support: Vec<usize> = (0..s_len).collect();
        let a = compatibility_constant(&gram, &support, CompatibilityMode::ConeSearch).unwrap();
        let eig = compatibility_constant(&gram, &support, CompatibilityMode::EigenLowerBound).unwrap();
        prop_assert!(a >= eig - 1e-12);
        let on: f64 = theta[..s_len].iter().map(|v| v.abs()).sum();
        let off: f64 = theta[s_len..].iter().map(|v| v.abs()).sum();
        prop_assume!(on > 1e-3 && off <= 3.0 * on);
        let t = nalgebra::DVector::from_column_slice(&theta);
        let norm = t.dot(&(&sigma * &t)).sqrt();
        prop_assert!(on <= norm * (s_len as f64).sqrt() / a * (1.0 + 1e-6) + 1e-12);
    }

    #[test]
    fn conditional_norm_is_below_l2((ds, th, _) in data_and_theta(9, 3)) {
        let basis = BasisSpec::named("linear", ds.d()).unwrap();
        let src = NormSource::Data { data: &ds, basis: &basis };
        let c = pseudonorm(&th, Pseudonorm::Conditional, src).unwrap();
        let l2 = pseudonorm(&th, Pseudonorm::L2, src).unwrap();
        prop_assert!(c <= l2 + 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn l1_norm_shrinks_as_lambda_grows(ds in dataset(12, 3), lo in 0.005f64..0.05, factor in 1.5f64..6.0) {
        let basis = BasisSpec::named("linear", ds.d()).unwrap();
        let loss = LossSpec::logistic();
        let opts = SolverOptions { tol: 1e-12, ..SolverOptions::default() };
        let a = fit_lasso(&ds, &basis, &loss, lo, None, &opts).unwrap();
        let b = fit_lasso(&ds, &basis, &loss, lo * factor, None, &opts).unwrap();
        // both solutions are approximate; allow the optimality slack
        prop_assert!(b.theta_hat.l1_norm() <= a.theta_hat.l1_norm() * (1.0 + 1e-3) + 1e-4);
    }

    #[test]
    fn logistic_fit_satisfies_kkt(ds in dataset(12, 3), lambda in 0.01f64..0.3) {
        let basis = BasisSpec::named("linear", ds.d()).unwrap();
        let loss = LossSpec::logistic();
        let opts = SolverOptions { tol: 1e-14, window: 50, ..SolverOptions::default() };
        let fit = fit_lasso(&ds, &basis, &loss, lambda, None, &opts).unwrap();
        let g = risk_subgradient_u(&fit.theta_hat, &basis, &loss, &ds).unwrap();
        for (k, &t) in fit.theta_hat.as_slice().iter().enumerate() {
            if t == 0.0 {
                prop_assert!(g[k].abs() <= lambda + 1e-4, "k={k} g={} lambda={lambda}", g[k]);
            } else {
                prop_assert!((g[k] + lambda * t.signum()).abs() <= 1e-4, "k={k} g={} t={t}", g[k]);
            }
        }
    }
}

#[test]
fn loss_kinds_roundtrip_through_names() {
    for (name, kind) in [
        ("hinge", LossKind::Hinge),
        ("logistic", LossKind::Logistic),
        ("truncated_quadratic", LossKind::TruncatedQuadratic),
        ("exponential", LossKind::Exponential),
    ] {
        assert_eq!(name.parse::<LossKind>().unwrap(), kind);
    }
    assert!("square".parse::<LossKind>().is_err());
}
