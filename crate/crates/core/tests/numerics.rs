mod common;

use approx::assert_abs_diff_eq;
use nalgebra::{DMatrix, DVector};
use panelcf::numerics::*;
use panelcf::PanelError;
use proptest::prelude::*;

#[test]
fn normal_cdf_reference_values() {
    assert_eq!(norm_cdf(0.0), 0.5);
    // high-precision reference values of Φ
    let table = [
        (1.0, 0.841_344_746_068_542_9),
        (-1.5, 0.066_807_201_268_858_07),
        (-5.0, 2.866_515_718_791_939e-7),
        (2.5, 0.993_790_334_674_223_7),
        (-10.0, 7.619_853_024_160_527e-24),
    ];
    for (x, want) in table {
        let err = (norm_cdf(x) - want).abs();
        assert!(err < 1e-15, "Φ({x}) err {err:e}");
        assert!(err / want < 1e-14, "Φ({x}) rel err {:e}", err / want);
    }
    // 1.959964 itself is only good to 2e-9 in coverage
    let z = 1.959_963_984_540_054;
    assert_abs_diff_eq!(norm_cdf(z) - norm_cdf(-z), 0.95, epsilon = 1e-9);
    assert_abs_diff_eq!(norm_cdf(1.959964) - norm_cdf(-1.959964), 0.95, epsilon = 1e-8);
}

#[test]
fn quantile_round_trip() {
    for i in 0..=240 {
        let x = -6.0 + 0.05 * i as f64;
        // Φ(x) rounds near 1 for x > 0, so the upper half goes through the
        // mirror identity; the direct call is held to its conditioning limit
        let q = if x <= 0.0 { norm_quantile(norm_cdf(x)).unwrap() } else { -norm_quantile(norm_cdf(-x)).unwrap() };
        assert!((q - x).abs() < 1e-10, "x = {x}, q = {q}");
        let direct = norm_quantile(norm_cdf(x)).unwrap();
        assert!((direct - x).abs() < 1e-10 + 4.0 * f64::EPSILON / norm_pdf(x), "x = {x}, direct = {direct}");
    }
    for p in [1e-300, 1e-20, 0.3, 0.5, 0.9] {
        let x = norm_quantile(p).unwrap();
        assert!((norm_cdf(x) - p).abs() / p < 1e-12);
    }
    assert!(matches!(norm_quantile(0.0), Err(PanelError::Domain(_))));
    assert!(matches!(norm_quantile(1.0), Err(PanelError::Domain(_))));
}

#[test]
fn mills_and_log_cdf_in_the_tail() {
    for x in [-40.0, -35.0, -30.5, -8.0, 0.0, 3.0] {
        let direct = norm_pdf(x) / norm_cdf(x);
        if x > -30.0 {
            assert!((mills(x) - direct).abs() / direct < 1e-10);
            assert!((log_norm_cdf(x) - norm_cdf(x).ln()).abs() < 1e-10);
        } else {
            // λ(x) ≈ −x for very negative x
            assert!((mills(x) / -x - 1.0).abs() < 2.0 / (x * x));
            assert!(log_norm_cdf(x).is_finite());
        }
    }
}

#[test]
fn kron_inverse_matches_dense() {
    let mut r = common::rng(3);
    let (m, t) = (2, 3);
    let sigma = common::random_spd(&mut r, m, 0.5);
    let lambda = common::random_spd(&mut r, m, 0.1);
    let k = KronInverse::new(&sigma, &lambda, t).unwrap();
    // Ω = I_T⊗Σ + E_T⊗Λ in period-major blocks
    let mut omega = DMatrix::zeros(m * t, m * t);
    for s in 0..t {
        for q in 0..t {
            let blk = if s == q { &sigma + &lambda } else { lambda.clone() };
            omega.view_mut((s * m, q * m), (m, m)).copy_from(&blk);
        }
    }
    let inv = omega.clone().try_inverse().unwrap();
    assert!((&k.dense() - &inv).amax() < 1e-10);
    assert!((k.logdet() - omega.determinant().ln()).abs() < 1e-10);
    let u = DMatrix::from_fn(m, t, |_, _| common::normal(&mut r));
    let applied = k.apply(&u);
    let dense = &inv * DVector::from_column_slice(u.as_slice());
    assert!((DVector::from_column_slice(applied.as_slice()) - dense).amax() < 1e-10);
}

#[test]
fn kron_inverse_single_period() {
    let mut r = common::rng(4);
    let sigma = common::random_spd(&mut r, 3, 0.5);
    let lambda = common::random_spd(&mut r, 3, 0.2);
    let k = KronInverse::new(&sigma, &lambda, 1).unwrap();
    let want = (&sigma + &lambda).try_inverse().unwrap();
    assert!((k.dense() - want).amax() < 1e-10);
}

#[test]
fn spd_rejects_indefinite() {
    let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
    assert!(matches!(Spd::new(&a), Err(PanelError::Domain(_))));
}

#[test]
fn solve_normal_flags_rank_deficiency() {
    let x = DMatrix::from_fn(10, 3, |r, c| if c == 2 { 2.0 * r as f64 } else { (r * (c + 1)) as f64 });
    let g = x.transpose() * &x;
    let b = DVector::from_element(3, 1.0);
    assert!(matches!(solve_normal(&g, &b, "test"), Err(PanelError::Rank(_))));
}

#[test]
fn finite_diff_of_square() {
    let g = finite_diff(|v| v[0] * v[0], &DVector::from_element(1, 3.0), false);
    assert!((g[0] - 6.0).abs() < 1e-9);
    let g = finite_diff(|v| v[0].sin() * v[1].exp(), &DVector::from_vec(vec![0.4, -0.2]), true);
    assert!((g[0] - 0.4f64.cos() * (-0.2f64).exp()).abs() < 1e-10);
    assert!((g[1] - 0.4f64.sin() * (-0.2f64).exp()).abs() < 1e-10);
}

#[test]
fn mvn_sampler_covariance() {
    let mut r = common::rng(5);
    let cov = common::random_spd(&mut r, 3, 0.3);
    let mean = DVector::from_vec(vec![1.0, -2.0, 0.5]);
    let s = MvnSampler::new(mean.clone(), &cov).unwrap();
    let n = 1_000_000;
    let mut sum = DVector::zeros(3);
    let mut outer = DMatrix::zeros(3, 3);
    for _ in 0..n {
        let d = s.sample(&mut r) - &mean;
        sum += &d;
        outer += &d * d.transpose();
    }
    let nf = n as f64;
    let m = sum / nf;
    let c = outer / nf - &m * m.transpose();
    for i in 0..3 {
        for j in 0..3 {
            // sd of a sample covariance ≈ √((σᵢᵢσⱼⱼ + σᵢⱼ²)/n)
            let sd = ((cov[(i, i)] * cov[(j, j)] + cov[(i, j)].powi(2)) / nf).sqrt();
            assert!((c[(i, j)] - cov[(i, j)]).abs() < 3.0 * sd, "({i},{j})");
        }
    }
}

#[test]
fn streams_are_reproducible_and_distinct() {
    use rand::Rng;
    let a: Vec<u64> = (0..4).map(|_| 0).scan(stream_rng(9, 1), |r, _| Some(r.random())).collect();
    let b: Vec<u64> = (0..4).map(|_| 0).scan(stream_rng(9, 1), |r, _| Some(r.random())).collect();
    let c: Vec<u64> = (0..4).map(|_| 0).scan(stream_rng(9, 2), |r, _| Some(r.random())).collect();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn fmt_round_trips() {
    for v in [0.1, -1.0 / 3.0, 6.02214076e23, 5e-324, 123456789.123456789] {
        let s = fmt_sig17(v);
        assert_eq!(s.parse::<f64>().unwrap(), v);
    }
}

proptest! {
    #[test]
    fn vech_round_trip(vals in proptest::collection::vec(-5.0f64..5.0, 6)) {
        let a = unvech(&vals, 3);
        prop_assert_eq!((&a - a.transpose()).amax(), 0.0);
        let v = vech(&a);
        prop_assert_eq!(v.as_slice(), vals.as_slice());
    }

    #[test]
    fn spd_inverse_is_inverse(seed in 0u64..1000, m in 1usize..5) {
        let mut r = common::rng(seed);
        let a = common::random_spd(&mut r, m, 0.2);
        let s = Spd::new(&a).unwrap();
        let err = (&a * s.inverse() - DMatrix::identity(m, m)).amax();
        prop_assert!(err < 1e-10);
        let b = DVector::from_fn(m, |_, _| common::normal(&mut r));
        let x = s.solve_vec(&b);
        prop_assert!((&a * x - &b).norm() / b.norm() < 1e-10);
    }

    #[test]
    fn psd_clip_is_minimal(seed in 0u64..500) {
        let mut r = common::rng(seed);
        let a = common::random_spd(&mut r, 3, 0.0) - DMatrix::identity(3, 3) * 0.5;
        let (c, _) = psd_clip(&a, 0.0);
        let ev = nalgebra::SymmetricEigen::new(c.clone()).eigenvalues;
        prop_assert!(ev.min() >= -1e-12);
        // only the negative part moves
        let ev_a = nalgebra::SymmetricEigen::new(a.clone()).eigenvalues;
        let neg: f64 = ev_a.iter().filter(|&&l| l < 0.0).map(|l| l * l).sum::<f64>().sqrt();
        prop_assert!(((&c - &a).norm() - neg).abs() < 1e-9);
    }
}
