//! Control functions: posterior means of the reduced-form heterogeneity
//! given (X, Z) under joint normality, and their derivatives with respect
//! to Θ₁.

use nalgebra::{DMatrix, DVector};

use crate::data::{PanelDataset, ReducedFormParams};
use crate::error::{PanelError, Result};
use crate::numerics::{solve_normal, sym_basis, symmetrize, vech_len, Spd};
use crate::reduced_form::RfModel;

#[derive(Clone, Debug)]
pub struct ControlFunctionSet {
    /// N × d_x, α̂ᵢ = π̄q̄ᵢ + âᵢ.
    pub alpha_hat: DMatrix<f64>,
    /// NT × d_x, ε̂ᵢₜ = xᵢₜ − πqᵢₜ − α̂ᵢ.
    pub eps_hat: DMatrix<f64>,
    /// Posterior variance Ω = [TΣ⁻¹ + Λ⁻¹]⁻¹.
    pub omega: DMatrix<f64>,
    /// [Σ⁻¹ + Λ⁻¹/T]⁻¹Σ⁻¹, the weight on the mean residual.
    pub shrinkage: DMatrix<f64>,
}

impl ControlFunctionSet {
    /// NT × d_x matrix with α̂ᵢ repeated over periods.
    pub fn alpha_long(&self, t: usize) -> DMatrix<f64> {
        let n = self.alpha_hat.nrows();
        DMatrix::from_fn(n * t, self.alpha_hat.ncols(), |r, c| self.alpha_hat[(r / t, c)])
    }
}

/// Ω = Λ(I + TΣ⁻¹Λ)⁻¹, valid for singular Λ as well.
fn posterior_omega(sigma_inv: &DMatrix<f64>, lambda: &DMatrix<f64>, t: usize) -> Result<DMatrix<f64>> {
    let m = lambda.nrows();
    let a = DMatrix::identity(m, m) + sigma_inv * lambda * t as f64;
    let inv = a.try_inverse().ok_or_else(|| PanelError::Domain("I + TΣ⁻¹Λ is singular".into()))?;
    Ok(symmetrize(&(lambda * inv)))
}

fn check_shapes(data: &PanelDataset, rf: &ReducedFormParams) -> Result<()> {
    let (m, dq) = (data.dx(), data.dw() + data.dz());
    let ok = rf.pi.shape() == (m, dq)
        && rf.pi_bar.shape() == (m, dq)
        && rf.sigma_eps.shape() == (m, m)
        && rf.lambda_alpha.shape() == (m, m);
    if ok {
        Ok(())
    } else {
        Err(PanelError::Shape(format!(
            "reduced form is {}×{} / Σ {}×{}, data has d_x={m}, d_w+d_z={dq}",
            rf.pi.nrows(),
            rf.pi.ncols(),
            rf.sigma_eps.nrows(),
            rf.sigma_eps.ncols()
        )))
    }
}

pub fn compute_control_functions(data: &PanelDataset, rf: &ReducedFormParams) -> Result<ControlFunctionSet> {
    check_shapes(data, rf)?;
    let (n, t, m) = (data.n(), data.t(), data.dx());
    let sigma = Spd::new(&rf.sigma_eps)?;
    let omega = posterior_omega(sigma.inverse(), &rf.lambda_alpha, t)?;
    let gain = &omega * sigma.inverse();
    let q = data.q();
    let qbar = data.unit_means_of(&q);
    let mut alpha_hat = DMatrix::zeros(n, m);
    let mut eps_hat = DMatrix::zeros(n * t, m);
    for i in 0..n {
        let prior = &rf.pi_bar * qbar.row(i).transpose();
        let mut sum = DVector::zeros(m);
        for p in 0..t {
            let k = i * t + p;
            sum += data.x.row(k).transpose() - &rf.pi * q.row(k).transpose() - &prior;
        }
        let a = &prior + &gain * sum;
        for p in 0..t {
            let k = i * t + p;
            let e = data.x.row(k).transpose() - &rf.pi * q.row(k).transpose() - &a;
            eps_hat.set_row(k, &e.transpose());
        }
        alpha_hat.set_row(i, &a.transpose());
    }
    Ok(ControlFunctionSet { alpha_hat, eps_hat, shrinkage: &gain * t as f64, omega })
}

/// Scalar reduced form with a general T×T error covariance: the weights are
/// ω = Ω_εε⁻¹e / (e′Ω_εε⁻¹e + σ_α⁻²).
pub fn compute_cf_scalar_nonspherical(
    data: &PanelDataset,
    pi: &DMatrix<f64>,
    pi_bar: &DMatrix<f64>,
    omega_eps: &DMatrix<f64>,
    sigma2_alpha: f64,
) -> Result<ControlFunctionSet> {
    if data.dx() != 1 {
        return Err(PanelError::Shape("non-spherical posterior needs d_x = 1".into()));
    }
    let t = data.t();
    if omega_eps.shape() != (t, t) {
        return Err(PanelError::Shape(format!("Ω_εε must be {t}×{t}")));
    }
    if !(sigma2_alpha > 0.0) {
        return Err(PanelError::Domain("σ²_α must be positive".into()));
    }
    let om = Spd::new(omega_eps)?;
    let oe = om.inverse() * DVector::from_element(t, 1.0);
    let prec = oe.sum() + 1.0 / sigma2_alpha;
    let weights = &oe / prec;
    let q = data.q();
    let qbar = data.unit_means_of(&q);
    let n = data.n();
    let mut alpha_hat = DMatrix::zeros(n, 1);
    let mut eps_hat = DMatrix::zeros(n * t, 1);
    for i in 0..n {
        let prior = (pi_bar * qbar.row(i).transpose())[0];
        let mut a = prior;
        for p in 0..t {
            let k = i * t + p;
            let v = data.x[(k, 0)] - (pi * q.row(k).transpose())[0] - prior;
            a += weights[p] * v;
        }
        alpha_hat[(i, 0)] = a;
        for p in 0..t {
            let k = i * t + p;
            eps_hat[(k, 0)] = data.x[(k, 0)] - (pi * q.row(k).transpose())[0] - a;
        }
    }
    Ok(ControlFunctionSet {
        alpha_hat,
        eps_hat,
        omega: DMatrix::from_element(1, 1, 1.0 / prec),
        shrinkage: DMatrix::from_element(1, 1, weights.sum()),
    })
}

/// Posterior means under the random-coefficient reduced form
/// x_it = z_it′(ᾱ + a_i) + ε_it.
#[derive(Clone, Debug)]
pub struct RandomCoefCf {
    /// N × d_z posterior means âᵢ.
    pub a_hat: DMatrix<f64>,
    /// NT residuals x_it − z_it′(ᾱ + âᵢ).
    pub eps_hat: DVector<f64>,
}

pub fn compute_cf_random_coeff(
    data: &PanelDataset,
    alpha_mean: &DVector<f64>,
    sigma_a: &DMatrix<f64>,
    sigma2_eps: f64,
) -> Result<RandomCoefCf> {
    if data.dx() != 1 {
        return Err(PanelError::Shape("random-coefficient posterior needs d_x = 1".into()));
    }
    let dz = data.dz();
    if alpha_mean.len() != dz || sigma_a.shape() != (dz, dz) {
        return Err(PanelError::Shape("ᾱ / Σ_a do not match d_z".into()));
    }
    if !(sigma2_eps > 0.0) {
        return Err(PanelError::Domain("σ²_ε must be positive".into()));
    }
    let prior_prec = Spd::new(sigma_a)?.inverse() * sigma2_eps;
    let (n, t) = (data.n(), data.t());
    let mut a_hat = DMatrix::zeros(n, dz);
    let mut eps_hat = DVector::zeros(n * t);
    for i in 0..n {
        let mut a = prior_prec.clone();
        let mut b = DVector::zeros(dz);
        for p in 0..t {
            let zt = data.z.row(i * t + p).transpose();
            a += &zt * zt.transpose();
            b += &zt * (data.x[(i * t + p, 0)] - zt.dot(alpha_mean));
        }
        let ai = solve_normal(&a, &b, "random-coefficient posterior")?;
        for p in 0..t {
            let zt = data.z.row(i * t + p).transpose();
            eps_hat[i * t + p] = data.x[(i * t + p, 0)] - zt.dot(&(alpha_mean + &ai));
        }
        a_hat.set_row(i, &ai.transpose());
    }
    Ok(RandomCoefCf { a_hat, eps_hat })
}

/// Mean Euclidean distance between α̂ᵢ and the fixed-effect estimate
/// α̂_FE,i = (1/T)Σₜ(xᵢₜ − πqᵢₜ).
pub fn fe_distance(data: &PanelDataset, rf: &ReducedFormParams) -> Result<f64> {
    let cf = compute_control_functions(data, rf)?;
    let (n, t) = (data.n(), data.t());
    let q = data.q();
    let mut total = 0.0;
    for i in 0..n {
        let mut fe = DVector::zeros(data.dx());
        for p in 0..t {
            let k = i * t + p;
            fe += data.x.row(k).transpose() - &rf.pi * q.row(k).transpose();
        }
        fe /= t as f64;
        total += (fe - cf.alpha_hat.row(i).transpose()).norm();
    }
    Ok(total / n as f64)
}

/// `fe_distance` for each (dataset, reduced form) pair, keyed by T.
pub fn fe_limit_check(fits: &[(PanelDataset, ReducedFormParams)]) -> Result<Vec<(usize, f64)>> {
    fits.iter().map(|(d, rf)| Ok((d.t(), fe_distance(d, rf)?))).collect()
}

/// ∂α̂ᵢ/∂Θ₁′ for every unit (each d_x × dim Θ₁), in the layout of `RfModel`.
/// ∂ε̂ᵢₜ/∂Θ₁′ follows from `eps_jacobian`.
#[derive(Clone, Debug)]
pub struct CfJacobian {
    pub alpha: Vec<DMatrix<f64>>,
}

impl CfJacobian {
    pub fn new(model: &RfModel, rf: &ReducedFormParams) -> Result<CfJacobian> {
        let (n, t, m) = (model.n, model.t, model.m);
        let tf = t as f64;
        let dr = model.dr();
        let pd = model.dim_delta();
        let h = vech_len(m);
        let sigma = Spd::new(&rf.sigma_eps)?;
        let si = sigma.inverse();
        let omega = posterior_omega(si, &rf.lambda_alpha, t)?;
        let gain = &omega * si;
        // ΩΛ⁻¹ = (I + TΛΣ⁻¹)⁻¹ avoids inverting Λ
        let nmat = (DMatrix::identity(m, m) + &rf.lambda_alpha * si * tf)
            .try_inverse()
            .ok_or_else(|| PanelError::Domain("I + TΛΣ⁻¹ is singular".into()))?;
        let mut dgain_s = Vec::with_capacity(h);
        let mut dgain_l = Vec::with_capacity(h);
        for p in 0..h {
            let e = sym_basis(m, p);
            dgain_s.push(&omega * si * &e * si * &omega * si * tf - &omega * si * &e * si);
            dgain_l.push(&nmat * &e * nmat.transpose() * si);
        }
        let delta = model.delta_of(rf);
        let u = model.residuals(&delta);
        let dq = model.dq;
        let mut alpha = Vec::with_capacity(n);
        for i in 0..n {
            let rb = model.rbar.row(i).transpose();
            let ub = u.rows(i * t, t).row_mean().transpose();
            let mut s = DVector::zeros(dr);
            for k in dq..dr {
                s[k] = rb[k];
            }
            let mut jac = DMatrix::zeros(m, model.dim_theta());
            let dd = s.transpose().kronecker(&DMatrix::identity(m, m)) - rb.transpose().kronecker(&gain) * tf;
            jac.view_mut((0, 0), (m, pd)).copy_from(&dd);
            for p in 0..h {
                jac.set_column(pd + p, &(&dgain_s[p] * &ub * tf));
                jac.set_column(pd + h + p, &(&dgain_l[p] * &ub * tf));
            }
            alpha.push(jac);
        }
        Ok(CfJacobian { alpha })
    }

    /// ∂ε̂ᵢₜ/∂Θ₁′ = −[qₜ′⊗I, 0] − ∂α̂ᵢ/∂Θ₁′ (row `k = i*T + t` of the design).
    pub fn eps_jacobian(&self, model: &RfModel, i: usize, k: usize) -> DMatrix<f64> {
        let m = model.m;
        let mut out = -&self.alpha[i];
        for c in 0..model.dq {
            let v = model.r[(k, c)];
            for j in 0..m {
                out[(j, c * m + j)] -= v;
            }
        }
        out
    }
}
