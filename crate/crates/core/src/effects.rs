//! Average structural function and average partial effects: point estimates
//! under full support, and bounds when the conditional support of the
//! control functions at the evaluation point is estimated to be smaller
//! than their marginal support.

use nalgebra::{DMatrix, DVector};

use crate::control_functions::ControlFunctionSet;
use crate::data::PanelDataset;
use crate::error::{PanelError, Result};
use crate::numerics::{norm_cdf, norm_pdf};

pub const DEFAULT_P_BAR: f64 = 0.975;
/// Above this many pooled observations the kernel sums use a subsample.
pub const DENSITY_SUBSAMPLE: usize = 50_000;
/// `ape auto` switches to bounds when P̂ exceeds this at either point.
pub const AUTO_THRESHOLD: f64 = 0.001;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ApeKind {
    Point,
    Bounds,
}

#[derive(Clone, Debug)]
pub struct ApeEstimate {
    pub x_bar: DVector<f64>,
    pub k: usize,
    pub delta_k: f64,
    pub kind: ApeKind,
    pub psi_l: f64,
    pub psi_u: f64,
    pub p_xbar: f64,
    pub p_xbar_delta: f64,
    /// G̃̂ at x̄ and at x̄ + Δₖeₖ (equal to Ĝ when nothing is trimmed).
    pub g_tilde: (f64, f64),
    /// ∂[G̃̂(x̄_Δ) − G̃̂(x̄)]/∂Θ₂ / Δₖ, shared by both bounds.
    pub grad: DVector<f64>,
    /// Filled in by `inference::attach_se`.
    pub sigma_bar: Option<f64>,
    pub ci95: Option<(f64, f64)>,
}

/// Everything the effect formulas need from a fitted model: the observed
/// w columns, the control functions and Θ₂ in design order (x, w, α̂, ε̂).
pub struct EffectInputs<'a> {
    pub data: &'a PanelDataset,
    pub cf: &'a ControlFunctionSet,
    pub theta: &'a DVector<f64>,
}

impl<'a> EffectInputs<'a> {
    /// Index 𝕏ᵢₜ(x̄)′Θ₂ with x replaced by x̄ for every observation, and the
    /// matching design row generator.
    fn design_row(&self, x_bar: &DVector<f64>, k: usize) -> DVector<f64> {
        let (dx, dw) = (self.data.dx(), self.data.dw());
        let t = self.data.t();
        let mut r = DVector::zeros(3 * dx + dw);
        r.rows_mut(0, dx).copy_from(x_bar);
        for j in 0..dw {
            r[dx + j] = self.data.w[(k, j)];
        }
        for j in 0..dx {
            r[dx + dw + j] = self.cf.alpha_hat[(k / t, j)];
            r[2 * dx + dw + j] = self.cf.eps_hat[(k, j)];
        }
        r
    }

    /// (G̃̂, ∂G̃̂/∂Θ₂) over observations with `keep[k]`; all when `keep` is None.
    fn g_tilde(&self, x_bar: &DVector<f64>, keep: Option<&[bool]>) -> (f64, DVector<f64>) {
        let nt = self.data.nt();
        let mut g = 0.0;
        let mut grad = DVector::zeros(self.theta.len());
        for k in 0..nt {
            if keep.map(|m| m[k]).unwrap_or(true) {
                let row = self.design_row(x_bar, k);
                let e = row.dot(self.theta);
                g += norm_cdf(e);
                grad.axpy(norm_pdf(e), &row, 1.0);
            }
        }
        (g / nt as f64, grad / nt as f64)
    }
}

fn check_point(inp: &EffectInputs, x_bar: &DVector<f64>, k: usize, delta_k: f64) -> Result<()> {
    if x_bar.len() != inp.data.dx() {
        return Err(PanelError::Shape(format!("x̄ has {} entries, d_x = {}", x_bar.len(), inp.data.dx())));
    }
    if k >= x_bar.len() {
        return Err(PanelError::Domain(format!("regressor index {k} out of range")));
    }
    if delta_k == 0.0 || !delta_k.is_finite() {
        return Err(PanelError::Domain("Δₖ must be finite and nonzero".into()));
    }
    Ok(())
}

fn shifted(x_bar: &DVector<f64>, k: usize, delta_k: f64) -> DVector<f64> {
    let mut v = x_bar.clone();
    v[k] += delta_k;
    v
}

/// Ĝ(x̄) = (1/NT) Σᵢₜ Φ(x̄′φ̂ + wᵢₜ′φ̂_w + α̂ᵢ′φ̂_α + ε̂ᵢₜ′φ̂_ε).
pub fn asf_point(inp: &EffectInputs, x_bar: &DVector<f64>) -> f64 {
    inp.g_tilde(x_bar, None).0
}

pub fn ape_point(inp: &EffectInputs, x_bar: &DVector<f64>, k: usize, delta_k: f64) -> Result<ApeEstimate> {
    check_point(inp, x_bar, k, delta_k)?;
    let xd = shifted(x_bar, k, delta_k);
    let (g0, d0) = inp.g_tilde(x_bar, None);
    let (g1, d1) = inp.g_tilde(&xd, None);
    let ape = (g1 - g0) / delta_k;
    Ok(ApeEstimate {
        x_bar: x_bar.clone(),
        k,
        delta_k,
        kind: ApeKind::Point,
        psi_l: ape,
        psi_u: ape,
        p_xbar: 0.0,
        p_xbar_delta: 0.0,
        g_tilde: (g0, g1),
        grad: (d1 - d0) / delta_k,
        sigma_bar: None,
        ci95: None,
    })
}

/// Normal-reference bandwidths 1.06·σ̂ⱼ·M^{−1/(4+q)} for the columns of `pts`.
pub fn rule_of_thumb_bandwidths(pts: &DMatrix<f64>) -> DVector<f64> {
    let (mrows, q) = pts.shape();
    let factor = 1.06 * (mrows as f64).powf(-1.0 / (4.0 + q as f64));
    DVector::from_fn(q, |j, _| {
        let col = pts.column(j);
        let mean = col.mean();
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (mrows.max(2) - 1) as f64;
        let sd = var.sqrt();
        // a constant column still needs a positive width
        factor * if sd > 0.0 { sd } else { 1.0 }
    })
}

/// f̂(α̂,ε̂ | x̄) at each of the M pooled points: product Gaussian kernel
/// estimate of the joint density of (α̂, ε̂, x) at (α̂ⱼ, ε̂ⱼ, x̄) divided by the
/// kernel estimate of the density of x at x̄.
pub fn conditional_density(cf_points: &DMatrix<f64>, x_values: &DMatrix<f64>, x_bar: &DVector<f64>) -> Result<Vec<f64>> {
    let mrows = cf_points.nrows();
    if x_values.nrows() != mrows || x_values.ncols() != x_bar.len() {
        return Err(PanelError::Shape("CF points, x values and x̄ disagree in shape".into()));
    }
    if mrows == 0 {
        return Err(PanelError::Domain("no points for density estimation".into()));
    }
    let (pc, px) = (cf_points.ncols(), x_values.ncols());
    let mut all = DMatrix::zeros(mrows, pc + px);
    all.view_mut((0, 0), (mrows, pc)).copy_from(cf_points);
    all.view_mut((0, pc), (mrows, px)).copy_from(x_values);
    let h = if mrows == 1 { DVector::from_element(pc + px, 1.0) } else { rule_of_thumb_bandwidths(&all) };

    let stride = mrows.div_ceil(DENSITY_SUBSAMPLE);
    let refs: Vec<usize> = (0..mrows).step_by(stride).collect();
    let norm_c = |dims: std::ops::Range<usize>| -> f64 {
        dims.map(|j| 1.0 / (h[j] * (2.0 * std::f64::consts::PI).sqrt())).product()
    };
    let cx = norm_c(pc..pc + px);
    let cc = norm_c(0..pc);
    let wx: Vec<f64> = refs
        .iter()
        .map(|&r| {
            let mut s = 0.0;
            for j in 0..px {
                let d = (x_bar[j] - x_values[(r, j)]) / h[pc + j];
                s += d * d;
            }
            cx * (-0.5 * s).exp()
        })
        .collect();
    let marg: f64 = wx.iter().sum::<f64>() / refs.len() as f64;
    if !(marg > 0.0) {
        return Err(PanelError::Support(format!("kernel density of x is zero at x̄ = {:?}", x_bar.as_slice())));
    }
    let active: Vec<(usize, f64)> = refs.iter().zip(wx.iter()).filter(|(_, &w)| w > 0.0).map(|(&r, &w)| (r, w)).collect();
    let inv_h: Vec<f64> = (0..pc).map(|j| 1.0 / h[j]).collect();
    let out = (0..mrows)
        .map(|a| {
            let mut s = 0.0;
            for &(r, w) in &active {
                let mut d2 = 0.0;
                for j in 0..pc {
                    let d = (cf_points[(a, j)] - cf_points[(r, j)]) * inv_h[j];
                    d2 += d * d;
                }
                s += w * (-0.5 * d2).exp();
            }
            cc * s / refs.len() as f64 / marg
        })
        .collect();
    Ok(out)
}

/// δ(p̄) = inf{γ : Ĥ(γ) ≥ 1 − p̄} with Ĥ the empirical CDF of the density
/// values, i.e. the ⌈(1−p̄)M⌉-th order statistic (at least the first).
pub fn trimming_threshold(values: &[f64], p_bar: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(PanelError::Domain("no density values".into()));
    }
    if !(p_bar > 0.0 && p_bar <= 1.0) {
        return Err(PanelError::Domain(format!("p̄ must lie in (0, 1], got {p_bar}")));
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let target = (1.0 - p_bar) * v.len() as f64;
    // guard against 0.05*100 = 5.000000000000004
    let k = ((target - 1e-9).ceil().max(1.0) as usize).min(v.len());
    Ok(v[k - 1])
}

/// Membership in Â(x̄) (f̂ ≥ δ(p̄)) for every pooled observation.
pub fn support_mask(inp: &EffectInputs, x_bar: &DVector<f64>, p_bar: f64) -> Result<Vec<bool>> {
    let dx = inp.data.dx();
    let nt = inp.data.nt();
    let mut pts = DMatrix::zeros(nt, 2 * dx);
    pts.view_mut((0, 0), (nt, dx)).copy_from(&inp.cf.alpha_long(inp.data.t()));
    pts.view_mut((0, dx), (nt, dx)).copy_from(&inp.cf.eps_hat);
    let f = conditional_density(&pts, &inp.data.x, x_bar)?;
    let d = trimming_threshold(&f, p_bar)?;
    Ok(f.iter().map(|&v| v >= d).collect())
}

/// Bounds from precomputed support masks at x̄ and x̄ + Δₖeₖ.
pub fn ape_bounds_with_masks(
    inp: &EffectInputs,
    x_bar: &DVector<f64>,
    k: usize,
    delta_k: f64,
    mask0: &[bool],
    mask1: &[bool],
) -> Result<ApeEstimate> {
    check_point(inp, x_bar, k, delta_k)?;
    let nt = inp.data.nt() as f64;
    let xd = shifted(x_bar, k, delta_k);
    let (g0, d0) = inp.g_tilde(x_bar, Some(mask0));
    let (g1, d1) = inp.g_tilde(&xd, Some(mask1));
    let p0 = mask0.iter().filter(|&&b| !b).count() as f64 / nt;
    let p1 = mask1.iter().filter(|&&b| !b).count() as f64 / nt;
    Ok(ApeEstimate {
        x_bar: x_bar.clone(),
        k,
        delta_k,
        kind: ApeKind::Bounds,
        psi_l: (g1 - g0 - p0) / delta_k,
        psi_u: (g1 + p1 - g0) / delta_k,
        p_xbar: p0,
        p_xbar_delta: p1,
        g_tilde: (g0, g1),
        grad: (d1 - d0) / delta_k,
        sigma_bar: None,
        ci95: None,
    })
}

pub fn ape_bounds(inp: &EffectInputs, x_bar: &DVector<f64>, k: usize, delta_k: f64, p_bar: f64) -> Result<ApeEstimate> {
    check_point(inp, x_bar, k, delta_k)?;
    let mask0 = support_mask(inp, x_bar, p_bar)?;
    let mask1 = support_mask(inp, &shifted(x_bar, k, delta_k), p_bar)?;
    ape_bounds_with_masks(inp, x_bar, k, delta_k, &mask0, &mask1)
}

/// Bounds when P̂ exceeds `AUTO_THRESHOLD` at either point, else the point APE.
pub fn ape_auto(inp: &EffectInputs, x_bar: &DVector<f64>, k: usize, delta_k: f64, p_bar: f64) -> Result<ApeEstimate> {
    let b = ape_bounds(inp, x_bar, k, delta_k, p_bar)?;
    if b.p_xbar > AUTO_THRESHOLD || b.p_xbar_delta > AUTO_THRESHOLD {
        Ok(b)
    } else {
        ape_point(inp, x_bar, k, delta_k)
    }
}
