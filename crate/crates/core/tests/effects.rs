mod common;

use nalgebra::{DMatrix, DVector};
use panelcf::effects::*;
use panelcf::mc::{generate, DgpSpec, Instrument};
use panelcf::numerics::{finite_diff, norm_cdf};
use panelcf::pipeline::{self, PipelineFit, PipelineSpec};
use panelcf::PanelError;
use rand::Rng;

fn fitted(n: usize, seed: u64, instrument: Instrument) -> PipelineFit {
    let (d, _) = generate(&DgpSpec::table1(n, instrument), seed).unwrap();
    pipeline::fit(&d, &PipelineSpec::default()).unwrap()
}

fn with_theta<'a>(f: &'a PipelineFit, theta: &'a DVector<f64>) -> EffectInputs<'a> {
    EffectInputs { data: &f.data, cf: &f.cf, theta }
}

#[test]
fn zero_coefficients() {
    let f = fitted(200, 1, Instrument::Binary);
    let z = DVector::zeros(f.second.theta.len());
    let inp = with_theta(&f, &z);
    let xb = DVector::from_element(1, 0.7);
    assert_eq!(asf_point(&inp, &xb), 0.5);
    assert_eq!(ape_point(&inp, &xb, 0, 0.05).unwrap().psi_l, 0.0);
}

#[test]
fn no_heterogeneity_gives_closed_form() {
    let f = fitted(200, 2, Instrument::Binary);
    // design (x, const, α̂, ε̂)
    let th = DVector::from_vec(vec![-0.8, 0.3, 0.0, 0.0]);
    let inp = with_theta(&f, &th);
    for x in [-1.0, 0.0, 2.5] {
        let g = asf_point(&inp, &DVector::from_element(1, x));
        assert!((g - norm_cdf(-0.8 * x + 0.3)).abs() < 1e-12, "{g} {}", norm_cdf(-0.8 * x + 0.3));
    }
}

#[test]
fn asf_monotone_in_positive_direction() {
    let f = fitted(200, 3, Instrument::Binary);
    let th = DVector::from_vec(vec![0.6, -0.2, 0.4, -0.3]);
    let inp = with_theta(&f, &th);
    let mut prev = 0.0;
    for i in 0..40 {
        let g = asf_point(&inp, &DVector::from_element(1, -4.0 + 0.2 * i as f64));
        assert!(g >= prev);
        prev = g;
    }
}

#[test]
fn zero_increment_is_a_domain_error() {
    let f = fitted(100, 4, Instrument::Binary);
    let xb = DVector::from_element(1, 1.0);
    assert!(matches!(f.ape_point(&xb, 0, 0.0), Err(PanelError::Domain(_))));
    assert!(matches!(f.ape_point(&xb, 1, 0.1), Err(PanelError::Domain(_))));
    assert!(matches!(f.ape_point(&DVector::zeros(2), 0, 0.1), Err(PanelError::Shape(_))));
}

#[test]
fn asf_tracks_true_heterogeneity_average() {
    let dgp = DgpSpec::table1(5000, Instrument::Continuous);
    let (d, lat) = generate(&dgp, 5).unwrap();
    let f = pipeline::fit(&d, &PipelineSpec::default()).unwrap();
    let g = f.asf(&DVector::from_element(1, 1.0));
    let truth = lat.zeta.iter().enumerate().filter(|(k, &z)| -1.0 + lat.theta[k / 5] + z > 0.0).count() as f64
        / lat.zeta.len() as f64;
    assert!((g - truth).abs() < 0.02, "Ĝ(1) = {g}, G(1) = {truth}");
}

#[test]
fn gradient_matches_finite_differences() {
    let f = fitted(300, 6, Instrument::Binary);
    let xb = DVector::from_element(1, 1.0);
    let est = f.ape_point(&xb, 0, 0.05).unwrap();
    let fd = finite_diff(|th| ape_point(&with_theta(&f, th), &xb, 0, 0.05).unwrap().psi_l, &f.second.theta, true);
    assert!((&est.grad - &fd).amax() / fd.amax() < 1e-6);
}

#[test]
fn single_point_density() {
    let pts = DMatrix::from_row_slice(1, 2, &[0.3, -0.1]);
    let xs = DMatrix::from_element(1, 1, 2.0);
    let f = conditional_density(&pts, &xs, &DVector::from_element(1, 2.0)).unwrap();
    assert!((f[0] - 1.0 / (2.0 * std::f64::consts::PI)).abs() < 1e-15);
}

#[test]
fn density_support_error_far_from_data() {
    let pts = DMatrix::from_fn(50, 2, |r, c| (r * (c + 1)) as f64 / 50.0);
    let xs = DMatrix::from_fn(50, 1, |r, _| r as f64 / 50.0);
    let r = conditional_density(&pts, &xs, &DVector::from_element(1, 1e6));
    assert!(matches!(r, Err(PanelError::Support(_))));
}

#[test]
fn independent_x_gives_marginal_density() {
    let mut err = Vec::new();
    for m in [500, 5000] {
        let mut r = common::rng(m as u64);
        let pts = DMatrix::from_fn(m, 2, |_, _| common::normal(&mut r));
        let xs = DMatrix::from_fn(m, 1, |_, _| common::normal(&mut r));
        let f = conditional_density(&pts, &xs, &DVector::from_element(1, 0.3)).unwrap();
        let truth = |a: f64, b: f64| (-(a * a + b * b) / 2.0).exp() / (2.0 * std::f64::consts::PI);
        let mad: f64 = (0..m).map(|i| (f[i] - truth(pts[(i, 0)], pts[(i, 1)])).abs()).sum::<f64>() / m as f64;
        err.push(mad);
    }
    assert!(err[1] < err[0], "{err:?}");
    assert!(err[1] < 0.01);
}

#[test]
fn bandwidths_follow_normal_reference() {
    let mut r = common::rng(9);
    let pts = DMatrix::from_fn(1000, 3, |_, c| (c + 1) as f64 * common::normal(&mut r));
    let h = rule_of_thumb_bandwidths(&pts);
    for c in 0..3 {
        let col = pts.column(c);
        let sd = col.variance().sqrt() * (1000.0f64 / 999.0).sqrt();
        assert!((h[c] - 1.06 * sd * 1000f64.powf(-1.0 / 7.0)).abs() < 1e-12);
    }
}

/// inf{γ : (1/M)#{f ≤ γ} ≥ 1 − p̄} by scanning every candidate γ.
fn brute_threshold(v: &[f64], p_bar: f64) -> f64 {
    let m = v.len() as f64;
    let mut cands = v.to_vec();
    cands.sort_by(|a, b| a.total_cmp(b));
    for g in cands {
        let h = v.iter().filter(|&&x| x <= g).count() as f64 / m;
        if h >= 1.0 - p_bar - 1e-12 {
            return g;
        }
    }
    unreachable!()
}

#[test]
fn trimming_threshold_definition() {
    assert_eq!(trimming_threshold(&[0.4; 10], 0.9).unwrap(), 0.4);
    let asc: Vec<f64> = (0..100).map(|i| i as f64 * 0.01).collect();
    assert_eq!(trimming_threshold(&asc, 0.975).unwrap(), brute_threshold(&asc, 0.975));
    assert_eq!(trimming_threshold(&asc, 0.975).unwrap(), asc[2]);
    let mut r = common::rng(10);
    for _ in 0..50 {
        let m = r.random_range(1..300);
        let v: Vec<f64> = (0..m).map(|_| r.random::<f64>()).collect();
        for p in [0.5, 0.9, 0.95, 0.975, 0.99, 1.0] {
            assert_eq!(trimming_threshold(&v, p).unwrap(), brute_threshold(&v, p));
        }
    }
    let min = asc.iter().cloned().fold(f64::INFINITY, f64::min);
    assert_eq!(trimming_threshold(&asc, 1.0).unwrap(), min);
    assert!(matches!(trimming_threshold(&[], 0.9), Err(PanelError::Domain(_))));
}

#[test]
fn bound_algebra() {
    let f = fitted(300, 11, Instrument::Binary);
    let inp = f.inputs();
    let xb = DVector::from_element(1, 1.0);
    let nt = f.data.nt();
    let all = vec![true; nt];
    let point = ape_point(&inp, &xb, 0, 0.05).unwrap();
    let b = ape_bounds_with_masks(&inp, &xb, 0, 0.05, &all, &all).unwrap();
    assert_eq!(b.psi_l, point.psi_l);
    assert_eq!(b.psi_u, point.psi_l);
    let none = vec![false; nt];
    let b = ape_bounds_with_masks(&inp, &xb, 0, 0.05, &none, &none).unwrap();
    assert!((b.psi_u - b.psi_l - 2.0 / 0.05).abs() < 1e-12);
    let mut r = common::rng(12);
    for _ in 0..20 {
        let m0: Vec<bool> = (0..nt).map(|_| r.random::<f64>() > 0.1).collect();
        let m1: Vec<bool> = (0..nt).map(|_| r.random::<f64>() > 0.3).collect();
        let b = ape_bounds_with_masks(&inp, &xb, 0, 0.05, &m0, &m1).unwrap();
        assert!((b.psi_u - b.psi_l - (b.p_xbar + b.p_xbar_delta) / 0.05).abs() < 1e-12);
        assert!(b.g_tilde.0 >= 0.0 && b.g_tilde.0 <= 1.0 - b.p_xbar);
    }
}

#[test]
fn bounds_and_auto_mode() {
    let f = fitted(400, 13, Instrument::Binary);
    let inp = f.inputs();
    let xb = DVector::from_element(1, 1.0);
    let b = ape_bounds(&inp, &xb, 0, 0.05, DEFAULT_P_BAR).unwrap();
    assert_eq!(b.kind, ApeKind::Bounds);
    assert!(b.psi_l <= b.psi_u);
    assert!(b.p_xbar > 0.0);
    let a = ape_auto(&inp, &xb, 0, 0.05, DEFAULT_P_BAR).unwrap();
    assert_eq!(a.kind, ApeKind::Bounds);
    // at p̄ = 1 nothing is trimmed and auto falls back to the point estimate
    let a1 = ape_auto(&inp, &xb, 0, 0.05, 1.0).unwrap();
    assert_eq!(a1.kind, ApeKind::Point);
}
