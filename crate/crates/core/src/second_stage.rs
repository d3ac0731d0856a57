//! Second stage: the binary outcome on the control-function augmented
//! design, by pooled probit or by GEE with an exchangeable working
//! correlation. Also the linear-outcome regressions used to check the
//! control-function / instrumental-variables equivalence.

use nalgebra::{DMatrix, DVector};

use crate::control_functions::ControlFunctionSet;
use crate::data::{PanelDataset, ReducedFormParams, SecondStageParams};
use crate::error::{PanelError, Result};
use crate::numerics::{log_norm_cdf, mills, norm_cdf, norm_pdf, ols, solve_normal, Spd};

const M_FLOOR: f64 = 1e-10;
/// Φ(−5.6) ≈ 1e-8.
const SEPARATION_MARGIN: f64 = 5.6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    PooledProbit,
    Gee,
}

impl Method {
    pub fn tag(&self) -> &'static str {
        match self {
            Method::PooledProbit => "pooled_probit",
            Method::Gee => "gee",
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FitOptions {
    pub max_iter: usize,
    pub tol: f64,
    /// Coefficient norm beyond which the data are declared separated.
    pub separation_norm: f64,
    pub gee_outer: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { max_iter: 200, tol: 1e-10, separation_norm: 1e3, gee_outer: 2 }
    }
}

#[derive(Clone, Debug)]
pub struct SecondStageFit {
    pub params: SecondStageParams,
    /// Θ₂ stacked in design order.
    pub theta: DVector<f64>,
    pub method: Method,
    pub rho_work: f64,
    /// Inverse of the (model-based) information, ignoring the first stage.
    pub naive_cov: DMatrix<f64>,
    /// Two-step corrected covariance of Θ̂₂, filled in by the inference module.
    pub v2_star: Option<DMatrix<f64>>,
    /// Log-likelihood (probit) or Σᵢuᵢ′V̂ᵢ⁻¹uᵢ (GEE).
    pub loglik_or_objective: f64,
    pub n_iter: usize,
    pub converged: bool,
    /// m(1−m) at the point where the working variance V̂ was frozen (NT).
    pub working_var: DVector<f64>,
}

/// Rows (xᵢₜ′, wᵢₜ′, α̂ᵢ′, ε̂ᵢₜ′).
pub fn build_design(data: &PanelDataset, cf: &ControlFunctionSet) -> DMatrix<f64> {
    let (nt, dx, dw) = (data.nt(), data.dx(), data.dw());
    let t = data.t();
    let mut d = DMatrix::zeros(nt, 3 * dx + dw);
    d.view_mut((0, 0), (nt, dx)).copy_from(&data.x);
    if dw > 0 {
        d.view_mut((0, dx), (nt, dw)).copy_from(&data.w);
    }
    for k in 0..nt {
        for j in 0..dx {
            d[(k, dx + dw + j)] = cf.alpha_hat[(k / t, j)];
            d[(k, 2 * dx + dw + j)] = cf.eps_hat[(k, j)];
        }
    }
    d
}

pub fn probit_loglik(y: &DVector<f64>, x: &DMatrix<f64>, theta: &DVector<f64>) -> f64 {
    let eta = x * theta;
    eta.iter().zip(y.iter()).map(|(&e, &yy)| if yy > 0.5 { log_norm_cdf(e) } else { log_norm_cdf(-e) }).sum()
}

/// Gradient and Hessian of the pooled probit log-likelihood.
pub fn probit_grad_hess(y: &DVector<f64>, x: &DMatrix<f64>, theta: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eta = x * theta;
    let k = x.ncols();
    let mut g = DVector::zeros(k);
    let mut h = DMatrix::zeros(k, k);
    for r in 0..x.nrows() {
        let e = eta[r];
        // generalized residual λ and its slope −λ(λ+η)
        let lam = if y[r] > 0.5 { mills(e) } else { -mills(-e) };
        let w = lam * (lam + e);
        let xr = x.row(r);
        for a in 0..k {
            g[a] += lam * xr[a];
            for b in 0..=a {
                h[(a, b)] -= w * xr[a] * xr[b];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            h[(b, a)] = h[(a, b)];
        }
    }
    (g, h)
}

fn check_rank(x: &DMatrix<f64>) -> Result<()> {
    let k = x.ncols();
    solve_normal(&(x.transpose() * x), &DVector::zeros(k), "second-stage design").map(|_| ())
}

fn split_params(theta: &DVector<f64>, dx: usize, dw: usize, rho: Option<f64>) -> SecondStageParams {
    if theta.len() == 3 * dx + dw {
        let mut p = SecondStageParams::from_vec(theta, dx, dw);
        p.rho_work = rho;
        p
    } else {
        SecondStageParams {
            phi: theta.clone(),
            phi_alpha: DVector::zeros(0),
            phi_eps: DVector::zeros(0),
            rho_work: rho,
        }
    }
}

/// Pooled probit MLE by Newton with step-halving from Θ = 0.
/// `dx`/`dw` only label the coefficient blocks of the result.
pub fn fit_pooled_probit(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    dx: usize,
    dw: usize,
    opts: &FitOptions,
) -> Result<SecondStageFit> {
    check_rank(x)?;
    let k = x.ncols();
    let mut theta = DVector::zeros(k);
    let mut ll = probit_loglik(y, x, &theta);
    let mut converged = false;
    let mut n_iter = 0;
    for it in 1..=opts.max_iter {
        n_iter = it;
        let (g, h) = probit_grad_hess(y, x, &theta);
        let step = solve_normal(&(-&h), &g, "probit Newton step")?;
        let mut s = 1.0;
        let mut cand = &theta + &step;
        let mut ll_new = probit_loglik(y, x, &cand);
        while !(ll_new >= ll) && s > 1e-12 {
            s *= 0.5;
            cand = &theta + &step * s;
            ll_new = probit_loglik(y, x, &cand);
        }
        let moved = (&cand - &theta).amax();
        if ll_new >= ll {
            theta = cand;
            ll = ll_new;
        }
        if theta.norm() > opts.separation_norm {
            return Err(PanelError::Separation(format!(
                "coefficient norm {:.3e} exceeds {:.1e}",
                theta.norm(),
                opts.separation_norm
            )));
        }
        if moved < opts.tol || g.amax() < 1e-12 {
            converged = true;
            break;
        }
    }
    let eta = x * &theta;
    // vanishing gradient with every outcome predicted: complete separation
    let worst = eta.iter().zip(y.iter()).map(|(&e, &yy)| if yy > 0.5 { e } else { -e }).fold(f64::INFINITY, f64::min);
    if worst > SEPARATION_MARGIN {
        return Err(PanelError::Separation(format!(
            "every outcome is predicted with probability above Φ({worst:.1})"
        )));
    }
    let (_, h) = probit_grad_hess(y, x, &theta);
    let naive_cov = Spd::new(&(-h))?.inverse().clone();
    let working_var = eta.map(|e| {
        let m = norm_cdf(e).clamp(M_FLOOR, 1.0 - M_FLOOR);
        m * (1.0 - m)
    });
    Ok(SecondStageFit {
        params: split_params(&theta, dx, dw, None),
        theta,
        method: Method::PooledProbit,
        rho_work: 0.0,
        naive_cov,
        v2_star: None,
        loglik_or_objective: ll,
        n_iter,
        converged,
        working_var,
    })
}

fn standardized_residuals(y: &DVector<f64>, x: &DMatrix<f64>, theta: &DVector<f64>) -> DVector<f64> {
    let eta = x * theta;
    DVector::from_fn(y.len(), |r, _| {
        let m = norm_cdf(eta[r]).clamp(M_FLOOR, 1.0 - M_FLOOR);
        (y[r] - m) / (m * (1.0 - m)).sqrt()
    })
}

pub fn rho_bounds(t: usize) -> (f64, f64) {
    (-1.0 / (t as f64 - 1.0) + 1e-6, 1.0 - 1e-6)
}

/// ρ̃ = (1/(NT(T−1))) Σᵢ Σ_{s≠t} ẽᵢₜẽᵢₛ, clamped so that C(ρ̃) stays SPD.
pub fn estimate_working_correlation(y: &DVector<f64>, x: &DMatrix<f64>, theta: &DVector<f64>, t: usize) -> f64 {
    let e = standardized_residuals(y, x, theta);
    let n = y.len() / t;
    let mut s = 0.0;
    for i in 0..n {
        let blk = e.rows(i * t, t);
        let tot = blk.sum();
        s += tot * tot - blk.norm_squared();
    }
    let rho = s / (n as f64 * t as f64 * (t as f64 - 1.0));
    let (lo, hi) = rho_bounds(t);
    rho.clamp(lo, hi)
}

/// C(ρ)⁻¹ for the T×T exchangeable correlation.
pub fn exchangeable_inverse(rho: f64, t: usize) -> Result<DMatrix<f64>> {
    let (lo, hi) = rho_bounds(t);
    if !(rho >= lo - 1e-12 && rho <= hi + 1e-12) {
        return Err(PanelError::Clamp(format!("ρ = {rho} outside ({lo}, {hi})")));
    }
    let a = 1.0 / (1.0 - rho);
    let b = rho / (1.0 + (t as f64 - 1.0) * rho);
    Ok(DMatrix::from_fn(t, t, |r, c| a * (if r == c { 1.0 } else { 0.0 } - b)))
}

/// V̂ᵢ⁻¹ = D^{-1/2} C(ρ)⁻¹ D^{-1/2} for unit i given m(1−m) values.
pub fn working_inverse(cinv: &DMatrix<f64>, var: &[f64]) -> DMatrix<f64> {
    let t = var.len();
    DMatrix::from_fn(t, t, |r, c| cinv[(r, c)] / (var[r] * var[c]).sqrt())
}

fn gee_objective(y: &DVector<f64>, x: &DMatrix<f64>, theta: &DVector<f64>, vinv: &[DMatrix<f64>], t: usize) -> f64 {
    let eta = x * theta;
    let u = DVector::from_fn(y.len(), |r, _| y[r] - norm_cdf(eta[r]));
    vinv.iter().enumerate().map(|(i, v)| {
        let ui = u.rows(i * t, t);
        (ui.transpose() * v * ui)[0]
    }).sum()
}

/// Σᵢ ∇mᵢ′V̂ᵢ⁻¹∇mᵢ and Σᵢ ∇mᵢ′V̂ᵢ⁻¹uᵢ at Θ.
fn gee_normal_eq(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    theta: &DVector<f64>,
    vinv: &[DMatrix<f64>],
    t: usize,
) -> (DMatrix<f64>, DVector<f64>) {
    let k = x.ncols();
    let eta = x * theta;
    let mut a = DMatrix::zeros(k, k);
    let mut b = DVector::zeros(k);
    for (i, v) in vinv.iter().enumerate() {
        let rows = x.rows(i * t, t);
        let mut j = rows.into_owned();
        let mut u = DVector::zeros(t);
        for p in 0..t {
            let e = eta[i * t + p];
            j.row_mut(p).scale_mut(norm_pdf(e));
            u[p] = y[i * t + p] - norm_cdf(e);
        }
        let jv = j.transpose() * v;
        a += &jv * &j;
        b += jv * u;
    }
    (a, b)
}

/// GEE/MWNLS with exchangeable working correlation, started from the pooled
/// probit estimate. Each outer iteration re-estimates ρ̃, freezes V̂ at the
/// current Θ and minimizes Σᵢuᵢ′V̂ᵢ⁻¹uᵢ by Gauss–Newton with step-halving.
pub fn fit_gee(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    t: usize,
    dx: usize,
    dw: usize,
    opts: &FitOptions,
) -> Result<SecondStageFit> {
    if y.len() % t != 0 {
        return Err(PanelError::Shape("GEE needs NT rows grouped by unit".into()));
    }
    let pre = fit_pooled_probit(y, x, dx, dw, opts)?;
    let n = y.len() / t;
    let mut theta = pre.theta.clone();
    let mut rho = 0.0;
    let mut var = pre.working_var.clone();
    let mut obj = 0.0;
    let mut n_iter = 0;
    let mut converged = false;
    let mut info = DMatrix::zeros(x.ncols(), x.ncols());
    for _ in 0..opts.gee_outer.max(1) {
        rho = estimate_working_correlation(y, x, &theta, t);
        let cinv = exchangeable_inverse(rho, t)?;
        let eta = x * &theta;
        var = eta.map(|e| {
            let m = norm_cdf(e).clamp(M_FLOOR, 1.0 - M_FLOOR);
            m * (1.0 - m)
        });
        let vinv: Vec<DMatrix<f64>> =
            (0..n).map(|i| working_inverse(&cinv, &var.as_slice()[i * t..(i + 1) * t])).collect();
        obj = gee_objective(y, x, &theta, &vinv, t);
        converged = false;
        for _ in 0..opts.max_iter {
            n_iter += 1;
            let (a, b) = gee_normal_eq(y, x, &theta, &vinv, t);
            let step = solve_normal(&a, &b, "GEE Gauss–Newton step")?;
            let mut s = 1.0;
            let mut cand = &theta + &step;
            let mut o = gee_objective(y, x, &cand, &vinv, t);
            while !(o <= obj) && s > 1e-12 {
                s *= 0.5;
                cand = &theta + &step * s;
                o = gee_objective(y, x, &cand, &vinv, t);
            }
            let moved = (&cand - &theta).amax();
            if o <= obj {
                theta = cand;
                obj = o;
            }
            if theta.norm() > opts.separation_norm {
                return Err(PanelError::Separation("GEE coefficients diverged".into()));
            }
            if moved < opts.tol {
                converged = true;
                break;
            }
        }
        info = gee_normal_eq(y, x, &theta, &vinv, t).0;
    }
    let naive_cov = Spd::new(&info)?.inverse().clone();
    Ok(SecondStageFit {
        params: split_params(&theta, dx, dw, Some(rho)),
        theta,
        method: Method::Gee,
        rho_work: rho,
        naive_cov,
        v2_star: None,
        loglik_or_objective: obj,
        n_iter,
        converged,
        working_var: var,
    })
}

/// Which linear-outcome regression to compare against its IV counterpart.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LinearVariant {
    /// Pooled OLS on (x, w, α̂, ε̂) with the shrunken posterior means.
    ControlFunction,
    /// Pooled OLS on (x, w, π̄q̄, υ) with the unshrunk reduced-form residual υ.
    Residual,
    /// Within-transformed OLS on (ẍ, ẅ, ε̂̈) against FE2SLS with q̈ instruments.
    Within,
}

pub(crate) fn demean(a: &DMatrix<f64>, t: usize) -> DMatrix<f64> {
    let n = a.nrows() / t;
    let mut out = a.clone();
    for i in 0..n {
        let mean = a.rows(i * t, t).row_mean();
        for p in 0..t {
            let mut r = out.row_mut(i * t + p);
            r -= &mean;
        }
    }
    out
}

pub(crate) fn hcat(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let rows = blocks[0].nrows();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut c = 0;
    for b in blocks {
        out.view_mut((0, c), (rows, b.ncols())).copy_from(b);
        c += b.ncols();
    }
    out
}

/// Pooled 2SLS: coefficients of y on `regs` with instrument matrix `inst`.
pub fn two_sls(y: &DVector<f64>, regs: &DMatrix<f64>, inst: &DMatrix<f64>) -> Result<DVector<f64>> {
    let ztz = inst.transpose() * inst;
    let zi = Spd::new(&ztz).map_err(|_| PanelError::Rank("instrument cross-product is singular".into()))?;
    let pz_x = inst * zi.solve(&(inst.transpose() * regs));
    solve_normal(&(pz_x.transpose() * regs), &(pz_x.transpose() * y), "2SLS")
}

/// Pooled OLS of a continuous outcome on the design of `variant`; returns the
/// full coefficient vector with x first.
pub fn fit_linear_cf(
    y: &DVector<f64>,
    data: &PanelDataset,
    rf: &ReducedFormParams,
    cf: &ControlFunctionSet,
    variant: LinearVariant,
) -> Result<DVector<f64>> {
    let t = data.t();
    match variant {
        LinearVariant::ControlFunction => ols(&build_design(data, cf), y),
        LinearVariant::Residual => {
            let q = data.q();
            let qbar_long = DMatrix::from_fn(data.nt(), q.ncols(), |r, c| data.unit_means_of(&q)[(r / t, c)]);
            let prior = &qbar_long * rf.pi_bar.transpose();
            let resid = &data.x - &q * rf.pi.transpose() - &prior;
            ols(&hcat(&[&data.x, &data.w, &prior, &resid]), y)
        }
        LinearVariant::Within => {
            let reg = hcat(&[&demean(&data.x, t), &demean(&data.w, t), &demean(&cf.eps_hat, t)]);
            let keep = time_varying(&reg, t);
            let reg = select_cols(&reg, &keep);
            let yd = demean(&DMatrix::from_column_slice(y.len(), 1, y.as_slice()), t).column(0).into_owned();
            ols(&reg, &yd)
        }
    }
}

fn time_varying(a: &DMatrix<f64>, _t: usize) -> Vec<usize> {
    (0..a.ncols()).filter(|&c| a.column(c).amax() > 1e-12).collect()
}

fn select_cols(a: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), cols.len(), |r, c| a[(r, cols[c])])
}

/// IV counterpart of `fit_linear_cf`. For the pooled variants: 2SLS of y on
/// (x, w, π̄q̄) with instruments (q̈, q̄, w). For `Within`: FE2SLS of ÿ on
/// (ẍ, ẅ) with instruments (q̈). Returns coefficients with x first.
pub fn fit_linear_iv(
    y: &DVector<f64>,
    data: &PanelDataset,
    rf: &ReducedFormParams,
    variant: LinearVariant,
) -> Result<DVector<f64>> {
    let t = data.t();
    let q = data.q();
    let qbar = data.unit_means_of(&q);
    let qbar_long = DMatrix::from_fn(data.nt(), q.ncols(), |r, c| qbar[(r / t, c)]);
    let qdd = demean(&q, t);
    let keep = time_varying(&qdd, t);
    let qdd = select_cols(&qdd, &keep);
    match variant {
        LinearVariant::Within => {
            let regs = hcat(&[&demean(&data.x, t), &demean(&data.w, t)]);
            let keep_r = time_varying(&regs, t);
            let regs = select_cols(&regs, &keep_r);
            let yd = demean(&DMatrix::from_column_slice(y.len(), 1, y.as_slice()), t).column(0).into_owned();
            two_sls(&yd, &regs, &qdd)
        }
        _ => {
            let prior = &qbar_long * rf.pi_bar.transpose();
            let regs = hcat(&[&data.x, &data.w, &prior]);
            let inst = hcat(&[&qdd, &qbar_long, &data.w]);
            let inst = independent_cols(&inst);
            two_sls(y, &regs, &inst)
        }
    }
}

/// Greedy selection of linearly independent columns (drops duplicates such
/// as a constant that appears both in w and in q̄).
fn independent_cols(a: &DMatrix<f64>) -> DMatrix<f64> {
    let mut keep: Vec<usize> = Vec::new();
    for c in 0..a.ncols() {
        let mut cand = keep.clone();
        cand.push(c);
        let s = select_cols(a, &cand);
        let g = s.transpose() * &s;
        let ev = nalgebra::SymmetricEigen::new(g).eigenvalues;
        let lmax = ev.iter().cloned().fold(0.0_f64, f64::max);
        let lmin = ev.iter().cloned().fold(f64::INFINITY, f64::min);
        if lmax > 0.0 && lmin > 1e-10 * lmax {
            keep = cand;
        }
    }
    select_cols(a, &keep)
}

/// φ̂ from both sides of the equivalence and their largest absolute gap.
#[derive(Clone, Debug)]
pub struct LinearEquivalence {
    pub phi_cf: DVector<f64>,
    pub phi_iv: DVector<f64>,
    pub max_abs_diff: f64,
}

pub fn linear_equivalence(
    y: &DVector<f64>,
    data: &PanelDataset,
    rf: &ReducedFormParams,
    cf: &ControlFunctionSet,
    variant: LinearVariant,
) -> Result<LinearEquivalence> {
    let dx = data.dx();
    let a = fit_linear_cf(y, data, rf, cf, variant)?;
    let b = fit_linear_iv(y, data, rf, variant)?;
    let phi_cf = a.rows(0, dx).into_owned();
    let phi_iv = b.rows(0, dx).into_owned();
    let max_abs_diff = (&phi_cf - &phi_iv).amax();
    Ok(LinearEquivalence { phi_cf, phi_iv, max_abs_diff })
}
