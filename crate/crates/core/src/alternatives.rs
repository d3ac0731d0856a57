//! Comparison estimators used in the simulations: the pooled residual
//! control function with a Mundlak first stage (PW), the Mundlak CRE probit
//! and the conditional (fixed-effects) logit.

use nalgebra::{DMatrix, DVector};

use crate::data::PanelDataset;
use crate::error::{PanelError, Result};
use crate::numerics::{norm_cdf, ols, solve_normal};
use crate::second_stage::{fit_pooled_probit, hcat, FitOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AltKind {
    Pw,
    CreProbit,
    CondLogit,
}

impl AltKind {
    pub fn tag(&self) -> &'static str {
        match self {
            AltKind::Pw => "pw",
            AltKind::CreProbit => "cre_probit",
            AltKind::CondLogit => "cond_logit",
        }
    }
}

/// Which first-stage residuals enter the PW second stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PwControl {
    /// υᵢₜ only.
    Own,
    /// The whole residual history Vᵢ. Under exchangeability its linear
    /// projection is spanned by (υᵢₜ, ῡᵢ).
    AllPeriods,
}

#[derive(Clone, Debug)]
pub struct AltFit {
    pub kind: AltKind,
    pub coefficients: DVector<f64>,
    pub names: Vec<String>,
    /// Regressor matrix of the final stage; the APE swaps x̄ into `x_cols`.
    pub design: DMatrix<f64>,
    pub x_cols: Vec<usize>,
    /// First-stage residuals υ (PW only).
    pub residuals: Option<DMatrix<f64>>,
    pub loglik: f64,
    pub converged: bool,
}

/// Stage 1: OLS of x on (1, w, z, z̄). Stage 2: probit of y on
/// (1, x, w, z̄, υ[, ῡ]).
pub fn fit_pw(data: &PanelDataset, control: PwControl, opts: &FitOptions) -> Result<AltFit> {
    if data.dx() != 1 {
        return Err(PanelError::Domain(format!("PW takes one endogenous regressor, got {}", data.dx())));
    }
    let nt = data.nt();
    let t = data.t();
    let one = DMatrix::from_element(nt, 1, 1.0);
    let zbar_long = expand(&data.z_bar, t);
    let first = hcat(&[&one, &data.w, &data.z, &zbar_long]);
    let xcol = data.x.column(0).into_owned();
    let b = ols(&first, &xcol)?;
    let v = &xcol - &first * b;
    let vmat = DMatrix::from_column_slice(nt, 1, v.as_slice());
    let mut blocks: Vec<DMatrix<f64>> = vec![one, data.x.clone(), data.w.clone(), zbar_long, vmat.clone()];
    let mut names: Vec<String> = vec!["const".into()];
    names.extend(data.x_names.iter().cloned());
    names.extend(data.w_names.iter().cloned());
    names.extend(data.z_names.iter().map(|n| format!("{n}_bar")));
    names.push("v".into());
    if control == PwControl::AllPeriods {
        blocks.push(expand(&data.unit_means_of(&vmat), t));
        names.push("v_bar".into());
    }
    let refs: Vec<&DMatrix<f64>> = blocks.iter().collect();
    let design = hcat(&refs);
    let fit = fit_pooled_probit(&data.y, &design, design.ncols(), 0, opts)?;
    Ok(AltFit {
        kind: AltKind::Pw,
        coefficients: fit.theta,
        names,
        design,
        x_cols: vec![1],
        residuals: Some(vmat),
        loglik: fit.loglik_or_objective,
        converged: fit.converged,
    })
}

/// Pooled probit of y on (1, x, w, x̄ᵢ).
pub fn fit_cre_probit(data: &PanelDataset, opts: &FitOptions) -> Result<AltFit> {
    let nt = data.nt();
    let one = DMatrix::from_element(nt, 1, 1.0);
    let xbar = expand(&data.x_bar(), data.t());
    let design = hcat(&[&one, &data.x, &data.w, &xbar]);
    let fit = fit_pooled_probit(&data.y, &design, design.ncols(), 0, opts)?;
    let mut names: Vec<String> = vec!["const".into()];
    names.extend(data.x_names.iter().cloned());
    names.extend(data.w_names.iter().cloned());
    names.extend(data.x_names.iter().map(|n| format!("{n}_bar")));
    Ok(AltFit {
        kind: AltKind::CreProbit,
        coefficients: fit.theta,
        names,
        design,
        x_cols: (1..=data.dx()).collect(),
        residuals: None,
        loglik: fit.loglik_or_objective,
        converged: fit.converged,
    })
}

/// Conditional logit sufficient for θᵢ: Σᵢ [Σₜyᵢₜηᵢₜ − log Σ_{d: Σd = Σy} exp(Σₜdₜηᵢₜ)]
/// with η = xφ (+ time-varying w). Returns (loglik, gradient, Hessian).
pub fn cond_logit_loglik(y: &DVector<f64>, x: &DMatrix<f64>, t: usize, phi: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>) {
    let k = x.ncols();
    let n = y.len() / t;
    let by_sum = sequences_by_sum(t);
    let eta = x * phi;
    let mut ll = 0.0;
    let mut g = DVector::zeros(k);
    let mut h = DMatrix::zeros(k, k);
    for i in 0..n {
        let s: usize = (0..t).map(|p| y[i * t + p] as usize).sum();
        if s == 0 || s == t {
            continue;
        }
        let obs_eta: f64 = (0..t).map(|p| y[i * t + p] * eta[i * t + p]).sum();
        let xi = x.rows(i * t, t);
        let seqs = &by_sum[s];
        let scores: Vec<f64> = seqs
            .iter()
            .map(|&mask| (0..t).filter(|p| mask >> p & 1 == 1).map(|p| eta[i * t + p]).sum())
            .collect();
        let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let wts: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
        let tot: f64 = wts.iter().sum();
        ll += obs_eta - mx - tot.ln();
        let mut mean = DVector::zeros(k);
        let mut second = DMatrix::zeros(k, k);
        for (j, &mask) in seqs.iter().enumerate() {
            let mut sx = DVector::zeros(k);
            for p in 0..t {
                if mask >> p & 1 == 1 {
                    sx += xi.row(p).transpose();
                }
            }
            let pj = wts[j] / tot;
            mean.axpy(pj, &sx, 1.0);
            second += &sx * sx.transpose() * pj;
        }
        let mut obs = DVector::zeros(k);
        for p in 0..t {
            if y[i * t + p] > 0.5 {
                obs += xi.row(p).transpose();
            }
        }
        g += obs - &mean;
        h -= second - &mean * mean.transpose();
    }
    (ll, g, h)
}

/// Bitmasks of length-T 0/1 sequences grouped by their sum.
fn sequences_by_sum(t: usize) -> Vec<Vec<u32>> {
    let mut out = vec![Vec::new(); t + 1];
    for mask in 0u32..(1u32 << t) {
        out[mask.count_ones() as usize].push(mask);
    }
    out
}

pub const CL_MAX_T: usize = 10;

pub fn fit_cond_logit(data: &PanelDataset, opts: &FitOptions) -> Result<AltFit> {
    let t = data.t();
    if t > CL_MAX_T {
        return Err(PanelError::Domain(format!("conditional logit enumerates sequences only for T ≤ {CL_MAX_T}")));
    }
    let informative = (0..data.n()).any(|i| {
        let s: f64 = (0..t).map(|p| data.y[i * t + p]).sum();
        s > 0.5 && s < t as f64 - 0.5
    });
    if !informative {
        return Err(PanelError::Degenerate("no unit has 0 < Σₜyᵢₜ < T".into()));
    }
    let tv: Vec<usize> = (0..data.dw())
        .filter(|&c| (0..data.n()).any(|i| (1..t).any(|p| data.w[(i * t + p, c)] != data.w[(i * t, c)])))
        .collect();
    let wtv = DMatrix::from_fn(data.nt(), tv.len(), |r, c| data.w[(r, tv[c])]);
    let design = hcat(&[&data.x, &wtv]);
    let k = design.ncols();
    let mut phi = DVector::zeros(k);
    let (mut ll, _, _) = cond_logit_loglik(&data.y, &design, t, &phi);
    let mut converged = false;
    for _ in 0..opts.max_iter {
        let (_, g, h) = cond_logit_loglik(&data.y, &design, t, &phi);
        let step = solve_normal(&(-&h), &g, "conditional logit Newton step")?;
        let mut s = 1.0;
        let mut cand = &phi + &step;
        let mut ll_new = cond_logit_loglik(&data.y, &design, t, &cand).0;
        while !(ll_new >= ll) && s > 1e-12 {
            s *= 0.5;
            cand = &phi + &step * s;
            ll_new = cond_logit_loglik(&data.y, &design, t, &cand).0;
        }
        let moved = (&cand - &phi).amax();
        if ll_new >= ll {
            phi = cand;
            ll = ll_new;
        }
        if phi.norm() > opts.separation_norm {
            return Err(PanelError::Separation("conditional logit coefficients diverged".into()));
        }
        if moved < opts.tol || g.amax() < 1e-12 {
            converged = true;
            break;
        }
    }
    let mut names = data.x_names.clone();
    names.extend(tv.iter().map(|&c| data.w_names[c].clone()));
    Ok(AltFit {
        kind: AltKind::CondLogit,
        coefficients: phi,
        names,
        design,
        x_cols: (0..data.dx()).collect(),
        residuals: None,
        loglik: ll,
        converged,
    })
}

fn logistic(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Average response with x set to `x_bar` everywhere. For the conditional
/// logit θᵢ is added inside Λ and must be supplied.
pub fn asf_alt(fit: &AltFit, x_bar: &DVector<f64>, theta: Option<&DVector<f64>>) -> Result<f64> {
    if x_bar.len() != fit.x_cols.len() {
        return Err(PanelError::Shape(format!("x̄ has {} entries, expected {}", x_bar.len(), fit.x_cols.len())));
    }
    let nt = fit.design.nrows();
    let mut row = DVector::zeros(fit.design.ncols());
    let mut acc = 0.0;
    match fit.kind {
        AltKind::CondLogit => {
            let th = theta.ok_or_else(|| {
                PanelError::Unsupported(
                    "conditional-logit APE needs the individual effects θᵢ, which are only known in simulation".into(),
                )
            })?;
            if nt % th.len() != 0 {
                return Err(PanelError::Shape("θ length does not divide the number of rows".into()));
            }
            let t = nt / th.len();
            for r in 0..nt {
                row.copy_from(&fit.design.row(r).transpose());
                for (j, &c) in fit.x_cols.iter().enumerate() {
                    row[c] = x_bar[j];
                }
                acc += logistic(row.dot(&fit.coefficients) + th[r / t]);
            }
        }
        _ => {
            for r in 0..nt {
                row.copy_from(&fit.design.row(r).transpose());
                for (j, &c) in fit.x_cols.iter().enumerate() {
                    row[c] = x_bar[j];
                }
                acc += norm_cdf(row.dot(&fit.coefficients));
            }
        }
    }
    Ok(acc / nt as f64)
}

/// [Ĝ(x̄ + Δₖeₖ) − Ĝ(x̄)]/Δₖ under each estimator's own model.
pub fn ape_alt(fit: &AltFit, x_bar: &DVector<f64>, k: usize, delta_k: f64, theta: Option<&DVector<f64>>) -> Result<f64> {
    if k >= x_bar.len() {
        return Err(PanelError::Domain(format!("regressor index {k} out of range")));
    }
    if delta_k == 0.0 || !delta_k.is_finite() {
        return Err(PanelError::Domain("Δₖ must be finite and nonzero".into()));
    }
    let mut xd = x_bar.clone();
    xd[k] += delta_k;
    Ok((asf_alt(fit, &xd, theta)? - asf_alt(fit, x_bar, theta)?) / delta_k)
}

/// Repeat each unit-level row T times.
fn expand(a: &DMatrix<f64>, t: usize) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows() * t, a.ncols(), |r, c| a[(r / t, c)])
}
