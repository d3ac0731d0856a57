mod common;

use nalgebra::{DMatrix, DVector};
use panelcf::data::{PanelDataset, ReducedFormParams};
use panelcf::mc::{generate, DgpSpec, Instrument};
use panelcf::numerics::{finite_diff, finite_diff_jacobian, KronInverse, TOL_PSD};
use panelcf::reduced_form::{RfModel, StepwiseOptions};
use panelcf::PanelError;

fn fixture(seed: u64, n: usize, t: usize, dx: usize) -> PanelDataset {
    let o = common::SimOpts { dx, dz: dx + 1, dw: 1, ..Default::default() };
    common::sim_panel(seed, n, t, &o).with_intercept()
}

fn random_params(model: &RfModel, seed: u64) -> ReducedFormParams {
    let mut r = common::rng(seed);
    let delta = DVector::from_fn(model.dim_delta(), |_, _| 0.5 * common::normal(&mut r));
    let (pi, pi_bar) = model.split_pi(&delta);
    ReducedFormParams {
        pi,
        pi_bar,
        sigma_eps: common::random_spd(&mut r, model.m, 0.5),
        lambda_alpha: common::random_spd(&mut r, model.m, 0.2),
    }
}

/// Dense Ω_u(T) in period-major order.
fn dense_omega(sigma: &DMatrix<f64>, lambda: &DMatrix<f64>, t: usize) -> DMatrix<f64> {
    let m = sigma.nrows();
    DMatrix::from_fn(m * t, m * t, |r, c| {
        let v = lambda[(r % m, c % m)];
        if r / m == c / m {
            v + sigma[(r % m, c % m)]
        } else {
            v
        }
    })
}

#[test]
fn analytic_score_matches_finite_differences() {
    let d = fixture(1, 40, 3, 2);
    let model = RfModel::new(&d);
    let p = random_params(&model, 2);
    let theta = model.pack(&p);
    let (scores, _) = model.score_and_hessian(&p).unwrap();
    let analytic = scores.row_sum().transpose();
    let fd = finite_diff(|v| model.loglik(&model.unpack(v)).unwrap(), &theta, true);
    let err = (&analytic - &fd).amax() / fd.amax();
    assert!(err < 1e-5, "score rel err {err:e}");
}

#[test]
fn per_unit_scores_match_unit_loglik() {
    let d = fixture(3, 6, 4, 1);
    let model = RfModel::new(&d);
    let p = random_params(&model, 4);
    let theta = model.pack(&p);
    let (scores, _) = model.score_and_hessian(&p).unwrap();
    let jac = finite_diff_jacobian(|v| model.unit_loglik(&model.unpack(v)).unwrap(), &theta, true);
    assert!((&scores - &jac).amax() / jac.amax() < 1e-6);
}

#[test]
fn analytic_hessian_matches_differenced_score() {
    let d = fixture(5, 40, 3, 2);
    let model = RfModel::new(&d);
    let p = random_params(&model, 6);
    let theta = model.pack(&p);
    let (_, hess) = model.score_and_hessian(&p).unwrap();
    let fd = finite_diff_jacobian(|v| model.score_sum(&model.unpack(v)).unwrap(), &theta, true);
    let err = (&hess - &fd).amax() / fd.amax();
    assert!(err < 1e-4, "hessian rel err {err:e}");
    assert!((&hess - hess.transpose()).amax() < 1e-8 * hess.amax());
}

#[test]
fn gls_matches_dense_quadratic_minimiser() {
    let d = fixture(7, 30, 3, 2);
    let model = RfModel::new(&d);
    let p = random_params(&model, 8);
    let got = model.gls_step(&p.sigma_eps, &p.lambda_alpha).unwrap();
    // δ minimises Σᵢ (xᵢ − Zᵢδ)′Ω⁻¹(xᵢ − Zᵢδ) with Zᵢ rows r_it′ ⊗ I_m
    let (m, t, dr) = (model.m, model.t, model.dr());
    let oinv = dense_omega(&p.sigma_eps, &p.lambda_alpha, t).try_inverse().unwrap();
    let k = m * dr;
    let mut a = DMatrix::zeros(k, k);
    let mut b = DVector::zeros(k);
    for i in 0..model.n {
        let mut zi = DMatrix::zeros(m * t, k);
        let mut xi = DVector::zeros(m * t);
        for s in 0..t {
            let row = i * t + s;
            for j in 0..m {
                xi[s * m + j] = model.x[(row, j)];
                for c in 0..dr {
                    zi[(s * m + j, c * m + j)] = model.r[(row, c)];
                }
            }
        }
        a += zi.transpose() * &oinv * &zi;
        b += zi.transpose() * &oinv * xi;
    }
    let want = a.lu().solve(&b).unwrap();
    assert!((&got - &want).amax() < 1e-9 * want.amax().max(1.0));
}

#[test]
fn gls_is_pooled_ols_without_effects() {
    let d = fixture(9, 50, 4, 1);
    let model = RfModel::new(&d);
    let sigma = DMatrix::from_element(1, 1, 2.3);
    let got = model.gls_step(&sigma, &DMatrix::zeros(1, 1)).unwrap();
    let ols = (model.r.transpose() * &model.r).lu().solve(&(model.r.transpose() * model.x.column(0))).unwrap();
    assert!((&got - &ols).amax() < 1e-10);
}

#[test]
fn structured_inverse_matches_direct_inversion() {
    let mut r = common::rng(10);
    for (m, t) in [(1, 2), (2, 3), (3, 5)] {
        let s = common::random_spd(&mut r, m, 0.3);
        let l = common::random_spd(&mut r, m, 0.0);
        let k = KronInverse::new(&s, &l, t).unwrap();
        let want = dense_omega(&s, &l, t).try_inverse().unwrap();
        assert!((k.dense() - want).amax() < 1e-10);
    }
}

#[test]
fn covariance_step_hand_example() {
    // x residuals (1,−1) and (−1,1) at δ = 0
    let z = DMatrix::from_row_slice(4, 1, &[0.0, 1.0, 0.0, 1.0]);
    let x = DMatrix::from_row_slice(4, 1, &[1.0, -1.0, -1.0, 1.0]);
    let d = PanelDataset::new(vec!["a".into(), "b".into()], 2, DVector::zeros(4), x, z, DMatrix::zeros(4, 0)).unwrap();
    let model = RfModel::new(&d);
    let (s, l, clipped) = model.covariance_step(&DVector::zeros(model.dim_delta())).unwrap();
    assert_eq!(s[(0, 0)], 2.0);
    assert!(clipped);
    assert!((l[(0, 0)] - TOL_PSD).abs() < 1e-15);
}

#[test]
fn covariance_step_degenerate() {
    let z = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 2.0, 0.0, 1.0, 1.0]);
    let x = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 2.0, 1.0]);
    let d = PanelDataset::new(vec!["a".into()], 2, DVector::zeros(2), x, z, DMatrix::zeros(2, 0)).unwrap();
    let model = RfModel::new(&d);
    assert!(matches!(model.covariance_step(&DVector::zeros(model.dim_delta())), Err(PanelError::Degenerate(_))));
}

#[test]
fn error_component_anova_oracle() {
    // With free Mundlak means δ splits into within (FE) and between OLS, so
    // the stepwise fixed point reproduces the one-way ANOVA components.
    let d = fixture(12, 300, 4, 1);
    let fit = RfModel::new(&d).fit_stepwise(StepwiseOptions::default()).unwrap();
    assert!(fit.converged);
    let (n, t) = (d.n(), d.t());
    let q = d.q();
    let tv: Vec<usize> = vec![1, 2, 3];
    let qbar = d.unit_means_of(&q);
    let xbar = d.x_bar();
    let wq = DMatrix::from_fn(n * t, tv.len(), |r, c| q[(r, tv[c])] - qbar[(r / t, tv[c])]);
    let wx = DVector::from_fn(n * t, |r, _| d.x[(r, 0)] - xbar[(r / t, 0)]);
    let fe = (wq.transpose() * &wq).lu().solve(&(wq.transpose() * &wx)).unwrap();
    let ew = &wx - &wq * &fe;
    let sig = ew.norm_squared() / (n * (t - 1)) as f64;
    let bq = DMatrix::from_fn(n, 4, |i, c| if c == 0 { 1.0 } else { qbar[(i, tv[c - 1])] });
    let bx = xbar.column(0).into_owned();
    let be = (bq.transpose() * &bq).lu().solve(&(bq.transpose() * &bx)).unwrap();
    let eb = &bx - &bq * be;
    let lam = (t as f64 * eb.norm_squared() / n as f64 - sig) / t as f64;

    let p = &fit.params;
    assert!((p.pi[(0, 1)] - fe[0]).abs() < 1e-8);
    assert!((p.pi[(0, 2)] - fe[1]).abs() < 1e-8);
    assert!((p.pi[(0, 3)] - fe[2]).abs() < 1e-8);
    assert!((p.sigma_eps[(0, 0)] - sig).abs() < 1e-6);
    assert!((p.lambda_alpha[(0, 0)] - lam).abs() < 1e-6);
}

#[test]
fn loglik_path_is_monotone_and_score_vanishes() {
    for seed in 0..5 {
        let (d, _) = generate(&DgpSpec::table2(300), seed).unwrap();
        let d = d.with_intercept();
        let fit = RfModel::new(&d).fit_stepwise(StepwiseOptions::default()).unwrap();
        assert!(fit.converged);
        for w in fit.loglik_path.windows(2) {
            assert!(w[1] >= w[0] - 1e-9 * w[0].abs(), "{:?}", fit.loglik_path);
        }
        let mean = fit.per_unit_scores.row_mean();
        assert!(mean.amax() < 1e-6, "seed {seed}: {mean}");
    }
}

#[test]
fn recovers_one_regressor_design() {
    let (d, _) = generate(&DgpSpec::table1(5000, Instrument::Continuous), 21).unwrap();
    let d = d.with_intercept();
    let fit = RfModel::new(&d).fit_stepwise(StepwiseOptions::default()).unwrap();
    let p = &fit.params;
    assert!((p.pi[(0, 1)] - 1.5).abs() < 0.05, "π̂ = {}", p.pi[(0, 1)]);
    assert!((p.sigma_eps[(0, 0)] - 1.0).abs() < 0.05);
    // α | z̄ has variance σ_α²(1 − T ρ²/(1 + (T−1)·0)) with independent z_t
    let (sz, sa, rho, t) = (5.0f64, 3.0f64, 0.4f64, 5.0f64);
    let c = rho * sz * sa;
    let lam = sa * sa - t * c * c / (sz * sz);
    assert!((p.lambda_alpha[(0, 0)] - lam).abs() < 0.1 * lam, "Λ̂ = {}", p.lambda_alpha[(0, 0)]);
    assert!((p.pi_bar[(0, 1)] - t * c / (sz * sz)).abs() < 0.05);
}

#[test]
fn recovers_two_regressor_design() {
    let (d, _) = generate(&DgpSpec::table2(2000), 22).unwrap();
    let d = d.with_intercept();
    let fit = RfModel::new(&d).fit_stepwise(StepwiseOptions::default()).unwrap();
    let want = [[-1.0, 0.05], [0.025, 0.75]];
    for r in 0..2 {
        for c in 0..2 {
            let got = fit.params.pi[(r, c + 1)];
            assert!((got - want[r][c]).abs() < 0.1, "π[{r},{c}] = {got}");
        }
    }
}

#[test]
fn quad_forms_are_nonnegative_and_match_dense() {
    let d = fixture(13, 20, 3, 2);
    let model = RfModel::new(&d);
    let p = random_params(&model, 14);
    let q = model.quad_forms(&p).unwrap();
    let oinv = dense_omega(&p.sigma_eps, &p.lambda_alpha, 3).try_inverse().unwrap();
    let u = model.residuals(&model.delta_of(&p));
    for i in 0..model.n {
        let ui = DVector::from_column_slice(u.rows(i * 3, 3).transpose().as_slice());
        let want = (ui.transpose() * &oinv * &ui)[0];
        assert!(q[i] >= 0.0);
        assert!((q[i] - want).abs() < 1e-9 * want.max(1.0));
    }
}
