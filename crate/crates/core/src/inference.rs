//! Two-step covariance of Θ̂₂ accounting for the estimated first stage,
//! delta-method standard errors for ASF/APE contrasts, Imbens–Manski
//! intervals for bounds, and the unit-level bootstrap.
//!
//! Scale convention: `v2_star` is the asymptotic covariance of
//! √N(Θ̂₂ − Θ₂). σ̄ is scaled so that σ̄/√(NT) is the standard error of an
//! APE estimate, i.e. σ̄² = T·g′V₂*g.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::control_functions::CfJacobian;
use crate::data::PanelDataset;
use crate::effects::{ApeEstimate, ApeKind};
use crate::error::{PanelError, Result};
use crate::numerics::{norm_cdf, norm_pdf, psd_clip, stream_rng, symmetrize};
use crate::pipeline::{PipelineFit, PipelineSpec};
use crate::second_stage::{exchangeable_inverse, working_inverse};

pub const Z_975: f64 = 1.959_963_984_540_054;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CovMethod {
    Analytic,
    Bootstrap,
}

#[derive(Clone, Debug)]
pub struct CovBlocks {
    /// (1/N)Σ ∂²ℒᵢ/∂Θ₁∂Θ₁′.
    pub l11: DMatrix<f64>,
    pub h21: DMatrix<f64>,
    pub h22: DMatrix<f64>,
    pub v_ll: DMatrix<f64>,
    pub v_lh: DMatrix<f64>,
    pub v_hh: DMatrix<f64>,
}

#[derive(Clone, Debug)]
pub struct TwoStepCovariance {
    pub v2_star: DMatrix<f64>,
    pub n_units: usize,
    pub blocks: Option<CovBlocks>,
    pub method: CovMethod,
    /// Eigenvalues had to be clipped to make V₂* PSD.
    pub clipped: bool,
    /// Largest |V − V′| before symmetrization.
    pub asymmetry: f64,
    /// Bootstrap replicates that completed (None for analytic).
    pub b_effective: Option<usize>,
}

impl TwoStepCovariance {
    /// Finite-sample covariance of Θ̂₂, V₂*/N.
    pub fn cov(&self) -> DMatrix<f64> {
        &self.v2_star / self.n_units as f64
    }

    pub fn se(&self) -> DVector<f64> {
        self.cov().diagonal().map(|v| v.max(0.0).sqrt())
    }
}

/// Per-unit stage-two moments Hᵢ = −∇mᵢ′V̂ᵢ⁻¹uᵢ (N × k) together with
/// ℍ_Θ₂Θ₂ = (1/N)Σ∇mᵢ′V̂ᵢ⁻¹∇mᵢ and ℍ_Θ₂Θ₁ = (1/N)Σ∇_Θ₂mᵢ′V̂ᵢ⁻¹∇_Θ₁mᵢ.
pub struct MomentDerivatives {
    pub h22: DMatrix<f64>,
    pub h21: DMatrix<f64>,
    pub moments: DMatrix<f64>,
}

pub fn stage2_moment_derivatives(fit: &PipelineFit) -> Result<MomentDerivatives> {
    let data = &fit.data;
    let (n, t, dx, dw) = (data.n(), data.t(), data.dx(), data.dw());
    let theta = &fit.second.theta;
    let k = theta.len();
    let jac = CfJacobian::new(&fit.model, &fit.rf.params)?;
    let p1 = fit.model.dim_theta();
    let cinv = exchangeable_inverse(fit.second.rho_work, t)
        .map_err(|e| PanelError::Domain(format!("working correlation: {e}")))?;
    let phi_a = theta.rows(dx + dw, dx).into_owned();
    let phi_e = theta.rows(2 * dx + dw, dx).into_owned();
    let eta = &fit.design * theta;
    let mut h22 = DMatrix::zeros(k, k);
    let mut h21 = DMatrix::zeros(k, p1);
    let mut moments = DMatrix::zeros(n, k);
    let a_rows: Vec<_> = jac.alpha.iter().map(|a| phi_a.transpose() * a).collect();
    for i in 0..n {
        let vinv = working_inverse(&cinv, &fit.second.working_var.as_slice()[i * t..(i + 1) * t]);
        let mut j2 = DMatrix::zeros(t, k);
        let mut j1 = DMatrix::zeros(t, p1);
        let mut u = DVector::zeros(t);
        for p in 0..t {
            let r = i * t + p;
            let d = norm_pdf(eta[r]);
            j2.set_row(p, &(fit.design.row(r) * d));
            let de = jac.eps_jacobian(&fit.model, i, r);
            let row = (&a_rows[i] + phi_e.transpose() * de) * d;
            j1.set_row(p, &row);
            u[p] = data.y[r] - norm_cdf(eta[r]);
        }
        let jv = j2.transpose() * vinv;
        h22 += &jv * &j2;
        h21 += &jv * &j1;
        moments.set_row(i, &(-(jv * u)).transpose());
    }
    let nf = n as f64;
    Ok(MomentDerivatives { h22: h22 / nf, h21: h21 / nf, moments })
}

/// V₂* = ℍ⁻¹[V_HH + ℍ₂₁𝕃⁻¹V_LL𝕃⁻¹′ℍ₂₁′ − ℍ₂₁𝕃⁻¹V_LH − V_HL𝕃⁻¹′ℍ₂₁′]ℍ⁻¹′.
/// Returns the matrix, its pre-symmetrization asymmetry and the clip flag.
pub fn assemble_v2(b: &CovBlocks) -> Result<(DMatrix<f64>, f64, bool)> {
    let hinv = b.h22.clone().try_inverse().ok_or_else(|| PanelError::Domain("ℍ_Θ₂Θ₂ is singular".into()))?;
    let linv = b.l11.clone().try_inverse().ok_or_else(|| PanelError::Domain("𝕃_Θ₁Θ₁ is singular".into()))?;
    let hl = &b.h21 * &linv;
    let mid = &b.v_hh + &hl * &b.v_ll * hl.transpose() - &hl * &b.v_lh - b.v_lh.transpose() * hl.transpose();
    let v = &hinv * mid * hinv.transpose();
    let asym = (&v - v.transpose()).amax();
    let (v, clipped) = psd_clip(&symmetrize(&v), 0.0);
    Ok((v, asym, clipped))
}

pub fn v2_star(fit: &PipelineFit) -> Result<TwoStepCovariance> {
    let n = fit.data.n();
    let nf = n as f64;
    let md = stage2_moment_derivatives(fit)?;
    let s = &fit.rf.per_unit_scores;
    let blocks = CovBlocks {
        l11: &fit.rf.hessian_blocks / nf,
        h21: md.h21,
        h22: md.h22,
        v_ll: s.transpose() * s / nf,
        v_lh: s.transpose() * &md.moments / nf,
        v_hh: md.moments.transpose() * &md.moments / nf,
    };
    let (v, asymmetry, clipped) = assemble_v2(&blocks)?;
    Ok(TwoStepCovariance {
        v2_star: v,
        n_units: n,
        blocks: Some(blocks),
        method: CovMethod::Analytic,
        clipped,
        asymmetry,
        b_effective: None,
    })
}

/// σ̄ = √(T·g′V₂*g) for the shared gradient g of the APE (or both bounds).
pub fn ape_se_delta(est: &ApeEstimate, cov: &TwoStepCovariance, t: usize) -> f64 {
    let q = (est.grad.transpose() * &cov.v2_star * &est.grad)[0];
    (t as f64 * q.max(0.0)).sqrt()
}

/// C solving Φ(C + s) − Φ(−C) = level, s = √(NT)(Ψ_u − Ψ_l)/σ̄, by bisection on [0, 5].
pub fn imbens_manski_c(scaled_width: f64, level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(PanelError::Domain(format!("confidence level {level} not in (0,1)")));
    }
    if !(scaled_width >= 0.0) {
        return Err(PanelError::Domain("interval width must be non-negative".into()));
    }
    let f = |c: f64| norm_cdf(c + scaled_width) - norm_cdf(-c) - level;
    let (mut lo, mut hi) = (0.0_f64, 5.0_f64);
    if f(lo) > 0.0 || f(hi) < 0.0 {
        return Err(PanelError::Domain("no root of the Imbens–Manski equation in [0, 5]".into()));
    }
    while hi - lo > 1e-13 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// [Ψ_l − Cσ̄/√(NT), Ψ_u + Cσ̄/√(NT)] and C.
pub fn imbens_manski_ci(psi_l: f64, psi_u: f64, sigma_bar: f64, n_obs: usize, level: f64) -> Result<(f64, f64, f64)> {
    if psi_l > psi_u {
        return Err(PanelError::Domain("Ψ_l exceeds Ψ_u".into()));
    }
    if !(sigma_bar > 0.0) {
        return Err(PanelError::Domain("σ̄ must be positive".into()));
    }
    let rt = (n_obs as f64).sqrt();
    let c = imbens_manski_c(rt * (psi_u - psi_l) / sigma_bar, level)?;
    Ok((psi_l - c * sigma_bar / rt, psi_u + c * sigma_bar / rt, c))
}

/// Fill σ̄ and the 95% interval: symmetric normal for points,
/// Imbens–Manski for bounds.
pub fn attach_se(est: &mut ApeEstimate, cov: &TwoStepCovariance, data: &PanelDataset) -> Result<()> {
    let sb = ape_se_delta(est, cov, data.t());
    let rt = (data.nt() as f64).sqrt();
    est.sigma_bar = Some(sb);
    est.ci95 = Some(match est.kind {
        ApeKind::Point => (est.psi_l - Z_975 * sb / rt, est.psi_u + Z_975 * sb / rt),
        ApeKind::Bounds => {
            if sb > 0.0 {
                let (lo, hi, _) = imbens_manski_ci(est.psi_l, est.psi_u, sb, data.nt(), 0.95)?;
                (lo, hi)
            } else {
                (est.psi_l, est.psi_u)
            }
        }
    });
    Ok(())
}

/// APE evaluation point carried through bootstrap replicates.
#[derive(Clone, Debug)]
pub struct ApeTarget {
    pub x_bar: DVector<f64>,
    pub k: usize,
    pub delta_k: f64,
}

#[derive(Clone, Debug)]
pub struct BootstrapResult {
    pub cov: TwoStepCovariance,
    /// Θ̂₂ for every replicate that completed, in replicate order.
    pub draws: Vec<DVector<f64>>,
    /// Point APE per completed replicate when a target was given.
    pub ape_draws: Vec<f64>,
    /// Indices of replicates that failed or did not converge.
    pub dropped: Vec<usize>,
}

/// Resample units with replacement and rerun every estimation step.
/// Replicate b draws from stream b of `seed`, so results do not depend on
/// scheduling or thread count.
pub fn bootstrap_two_step(
    data: &PanelDataset,
    spec: &PipelineSpec,
    b: usize,
    seed: u64,
    target: Option<&ApeTarget>,
) -> Result<BootstrapResult> {
    use rand::Rng;
    let n = data.n();
    let reps: Vec<Option<(DVector<f64>, f64)>> = (0..b)
        .into_par_iter()
        .map(|rep| {
            let mut rng = stream_rng(seed, rep as u64);
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let d = data.resample(&idx);
            let fit = crate::pipeline::fit(&d, spec).ok()?;
            if !fit.second.converged || !fit.rf.converged {
                return None;
            }
            let ape = match target {
                Some(tg) => fit.ape_point(&tg.x_bar, tg.k, tg.delta_k).ok()?.psi_l,
                None => f64::NAN,
            };
            Some((fit.second.theta.clone(), ape))
        })
        .collect();
    let mut draws = Vec::new();
    let mut ape_draws = Vec::new();
    let mut dropped = Vec::new();
    for (rep, r) in reps.into_iter().enumerate() {
        match r {
            Some((th, a)) => {
                draws.push(th);
                if target.is_some() {
                    ape_draws.push(a);
                }
            }
            None => dropped.push(rep),
        }
    }
    if draws.len() < 2 {
        return Err(PanelError::Degenerate(format!("only {} bootstrap replicates completed", draws.len())));
    }
    let cov = sample_cov(&draws);
    Ok(BootstrapResult {
        cov: TwoStepCovariance {
            v2_star: cov * n as f64,
            n_units: n,
            blocks: None,
            method: CovMethod::Bootstrap,
            clipped: false,
            asymmetry: 0.0,
            b_effective: Some(draws.len()),
        },
        draws,
        ape_draws,
        dropped,
    })
}

pub fn sample_cov(draws: &[DVector<f64>]) -> DMatrix<f64> {
    let k = draws[0].len();
    let b = draws.len() as f64;
    let mean = draws.iter().fold(DVector::zeros(k), |a, d| a + d) / b;
    let mut c = DMatrix::zeros(k, k);
    for d in draws {
        let e = d - &mean;
        c += &e * e.transpose();
    }
    c / (b - 1.0)
}

/// Percentile interval from bootstrap draws (type-7 quantiles).
pub fn percentile_ci(values: &[f64], level: f64) -> Option<(f64, f64)> {
    let mut v: Vec<f64> = values.iter().cloned().filter(|x| x.is_finite()).collect();
    if v.len() < 2 {
        return None;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let q = |p: f64| {
        let h = (v.len() - 1) as f64 * p;
        let lo = h.floor() as usize;
        let hi = h.ceil() as usize;
        v[lo] + (h - lo as f64) * (v[hi] - v[lo])
    };
    let a = (1.0 - level) / 2.0;
    Some((q(a), q(1.0 - a)))
}
