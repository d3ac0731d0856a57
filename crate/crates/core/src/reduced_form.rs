//! Stepwise maximum likelihood for the reduced-form system
//! x_it = π q_it + π̄ q̄_i + a_i + ε_it with a ~ N(0, Λ), ε ~ N(0, Σ).
//!
//! Parameter layout of Θ₁ used by scores, Hessians and the two-step
//! covariance: (δ, vech Σ, vech Λ) where δ = vec[π | π̄_free] (column-major,
//! m = d_x rows) and vech stacks the lower triangle column by column.
//! Derivatives with respect to an off-diagonal vech element move both
//! symmetric entries.

use nalgebra::{DMatrix, DVector};

use crate::data::{PanelDataset, ReducedFormParams};
use crate::error::{PanelError, Result};
use crate::numerics::{psd_clip, solve_normal, sym_basis, unvech, vec_of, vech, vech_len, KronInverse, TOL_PSD};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug)]
pub struct StepwiseOptions {
    pub max_iter: usize,
    pub tol_loglik: f64,
}

impl Default for StepwiseOptions {
    fn default() -> Self {
        StepwiseOptions { max_iter: 500, tol_loglik: 1e-9 }
    }
}

#[derive(Clone, Debug)]
pub struct ReducedFormFit {
    pub params: ReducedFormParams,
    pub loglik: f64,
    pub n_iter: usize,
    pub converged: bool,
    /// Log-likelihood after every completed GLS + covariance sweep.
    pub loglik_path: Vec<f64>,
    /// N × dim(Θ₁) matrix of ∂ℒᵢ/∂Θ₁.
    pub per_unit_scores: DMatrix<f64>,
    /// Σᵢ ∂²ℒᵢ/∂Θ₁∂Θ₁′.
    pub hessian_blocks: DMatrix<f64>,
    /// True when the last covariance step had to clip Λ̂ to be PSD.
    pub lambda_clipped: bool,
}

/// Design and sufficient statistics of the reduced form for one dataset.
/// r_it = (q_it′, q̄_i,M′)′ where M are the time-varying columns of q.
#[derive(Clone, Debug)]
pub struct RfModel {
    pub n: usize,
    pub t: usize,
    pub m: usize,
    pub dq: usize,
    pub mundlak: Vec<usize>,
    /// NT × m endogenous regressors.
    pub x: DMatrix<f64>,
    /// NT × dr rows r_it.
    pub r: DMatrix<f64>,
    /// N × dr unit means of r.
    pub rbar: DMatrix<f64>,
    mww: DMatrix<f64>,
    mbb: DMatrix<f64>,
    xw: DMatrix<f64>,
    xb: DMatrix<f64>,
}

impl RfModel {
    pub fn new(data: &PanelDataset) -> RfModel {
        let (n, t, m) = (data.n(), data.t(), data.dx());
        let q = data.q();
        let dq = q.ncols();
        let mundlak = data.mundlak_cols();
        let dr = dq + mundlak.len();
        let qbar = data.unit_means_of(&q);
        let mut r = DMatrix::zeros(n * t, dr);
        r.view_mut((0, 0), (n * t, dq)).copy_from(&q);
        for i in 0..n {
            for p in 0..t {
                for (k, &c) in mundlak.iter().enumerate() {
                    r[(i * t + p, dq + k)] = qbar[(i, c)];
                }
            }
        }
        let rbar = data.unit_means_of(&r);
        let xbar = data.x_bar();
        let mut mww = DMatrix::zeros(dr, dr);
        let mut mbb = DMatrix::zeros(dr, dr);
        let mut xw = DMatrix::zeros(m, dr);
        let mut xb = DMatrix::zeros(m, dr);
        for i in 0..n {
            let rb = rbar.row(i).transpose();
            let xbi = xbar.row(i).transpose();
            mbb += &rb * rb.transpose();
            xb += &xbi * rb.transpose();
            for p in 0..t {
                let k = i * t + p;
                let rt = r.row(k).transpose() - &rb;
                let xt = data.x.row(k).transpose() - &xbi;
                mww += &rt * rt.transpose();
                xw += &xt * rt.transpose();
            }
        }
        RfModel { n, t, m, dq, mundlak, x: data.x.clone(), r, rbar, mww, mbb, xw, xb }
    }

    pub fn dr(&self) -> usize {
        self.r.ncols()
    }
    pub fn dim_delta(&self) -> usize {
        self.m * self.dr()
    }
    pub fn dim_theta(&self) -> usize {
        self.dim_delta() + 2 * vech_len(self.m)
    }

    /// Π_all = [π | π̄_free] (m × dr) from δ.
    pub fn pi_all(&self, delta: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.m, self.dr(), delta.as_slice())
    }

    pub fn split_pi(&self, delta: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let all = self.pi_all(delta);
        let pi = all.columns(0, self.dq).into_owned();
        let mut pi_bar = DMatrix::zeros(self.m, self.dq);
        for (k, &c) in self.mundlak.iter().enumerate() {
            pi_bar.set_column(c, &all.column(self.dq + k));
        }
        (pi, pi_bar)
    }

    pub fn delta_of(&self, p: &ReducedFormParams) -> DVector<f64> {
        let mut all = DMatrix::zeros(self.m, self.dr());
        all.columns_mut(0, self.dq).copy_from(&p.pi);
        for (k, &c) in self.mundlak.iter().enumerate() {
            all.set_column(self.dq + k, &p.pi_bar.column(c));
        }
        vec_of(&all)
    }

    pub fn pack(&self, p: &ReducedFormParams) -> DVector<f64> {
        let d = self.delta_of(p);
        let v: Vec<f64> = d.iter().chain(vech(&p.sigma_eps).iter()).chain(vech(&p.lambda_alpha).iter()).cloned().collect();
        DVector::from_vec(v)
    }

    pub fn unpack(&self, theta: &DVector<f64>) -> ReducedFormParams {
        let pd = self.dim_delta();
        let h = vech_len(self.m);
        let delta = theta.rows(0, pd).into_owned();
        let (pi, pi_bar) = self.split_pi(&delta);
        ReducedFormParams {
            pi,
            pi_bar,
            sigma_eps: unvech(&theta.as_slice()[pd..pd + h], self.m),
            lambda_alpha: unvech(&theta.as_slice()[pd + h..pd + 2 * h], self.m),
        }
    }

    /// NT × m residuals u_it = x_it − Π_all r_it.
    pub fn residuals(&self, delta: &DVector<f64>) -> DMatrix<f64> {
        &self.x - &self.r * self.pi_all(delta).transpose()
    }

    /// GLS for δ given (Σ, Λ): solves the K_T/J_T weighted normal equations
    /// (Mww⊗Σ⁻¹ + T·Mbb⊗Σ_(T)⁻¹) δ = vec(Σ⁻¹Xw + T·Σ_(T)⁻¹Xb).
    pub fn gls_step(&self, sigma: &DMatrix<f64>, lambda: &DMatrix<f64>) -> Result<DVector<f64>> {
        let k = KronInverse::new(sigma, lambda, self.t)?;
        let tf = self.t as f64;
        let si = k.sigma.inverse();
        let sti = k.sigma_t.inverse();
        let a = self.mww.kronecker(si) + self.mbb.kronecker(sti) * tf;
        let b = vec_of(&(si * &self.xw + sti * &self.xb * tf));
        solve_normal(&a, &b, "GLS step")
    }

    /// Per-unit W_ui = Σₜ(uₜ−ū)(uₜ−ū)′ and B_ui = T·ūū′, plus unit means ū.
    fn wb(&self, u: &DMatrix<f64>) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>, Vec<DVector<f64>>) {
        let (n, t, m) = (self.n, self.t, self.m);
        let mut ws = Vec::with_capacity(n);
        let mut bs = Vec::with_capacity(n);
        let mut ubars = Vec::with_capacity(n);
        for i in 0..n {
            let blk = u.rows(i * t, t);
            let ub = blk.row_mean().transpose();
            let mut w = DMatrix::zeros(m, m);
            for p in 0..t {
                let d = blk.row(p).transpose() - &ub;
                w += &d * d.transpose();
            }
            bs.push(&ub * ub.transpose() * t as f64);
            ws.push(w);
            ubars.push(ub);
        }
        (ws, bs, ubars)
    }

    /// Closed-form maximizer of ℒ over (Σ, Σ_(T)) at fixed δ. Λ̂ is clipped
    /// to the PSD cone (eigenvalues ≥ tol_psd) when needed.
    pub fn covariance_step(&self, delta: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>, bool)> {
        if self.n * (self.t - 1) < self.m {
            return Err(PanelError::Degenerate(format!(
                "N(T−1) = {} is smaller than d_x = {}",
                self.n * (self.t - 1),
                self.m
            )));
        }
        let u = self.residuals(delta);
        let (ws, bs, _) = self.wb(&u);
        let m = self.m;
        let wsum = ws.iter().fold(DMatrix::zeros(m, m), |a, b| a + b);
        let bsum = bs.iter().fold(DMatrix::zeros(m, m), |a, b| a + b);
        let sigma = wsum / (self.n as f64 * (self.t as f64 - 1.0));
        let sigma_t = bsum / self.n as f64;
        let raw = (&sigma_t - &sigma) / self.t as f64;
        let (lambda, clipped) = psd_clip(&raw, TOL_PSD);
        Ok((crate::numerics::symmetrize(&sigma), lambda, clipped))
    }

    /// ℒᵢ = −(mT/2)ln2π − ½ln|Ω_u(T)| − ½Qᵢ(T) for every unit.
    pub fn unit_loglik(&self, p: &ReducedFormParams) -> Result<DVector<f64>> {
        let k = KronInverse::new(&p.sigma_eps, &p.lambda_alpha, self.t)?;
        let u = self.residuals(&self.delta_of(p));
        let (ws, bs, _) = self.wb(&u);
        let c = -0.5 * (self.m * self.t) as f64 * LN_2PI - 0.5 * k.logdet();
        Ok(DVector::from_fn(self.n, |i, _| {
            let q = (k.sigma.inverse() * &ws[i]).trace() + (k.sigma_t.inverse() * &bs[i]).trace();
            c - 0.5 * q
        }))
    }

    pub fn loglik(&self, p: &ReducedFormParams) -> Result<f64> {
        Ok(self.unit_loglik(p)?.sum())
    }

    /// Qᵢ(T) = uᵢ′Ω_u(T)⁻¹uᵢ computed with the structured inverse.
    pub fn quad_forms(&self, p: &ReducedFormParams) -> Result<DVector<f64>> {
        let k = KronInverse::new(&p.sigma_eps, &p.lambda_alpha, self.t)?;
        let u = self.residuals(&self.delta_of(p));
        Ok(DVector::from_fn(self.n, |i, _| {
            let ui = u.rows(i * self.t, self.t).transpose().into_owned();
            let v = k.apply(&ui);
            ui.component_mul(&v).sum()
        }))
    }

    /// Per-unit scores (N × dim Θ₁) and the summed Hessian.
    pub fn score_and_hessian(&self, p: &ReducedFormParams) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let k = KronInverse::new(&p.sigma_eps, &p.lambda_alpha, self.t)?;
        let si = k.sigma.inverse().clone();
        let sti = k.sigma_t.inverse().clone();
        let (n, t, m) = (self.n, self.t, self.m);
        let tf = t as f64;
        let nf = n as f64;
        let dr = self.dr();
        let pd = self.dim_delta();
        let h = vech_len(m);
        let dim = pd + 2 * h;
        let delta = self.delta_of(p);
        let u = self.residuals(&delta);
        let (ws, bs, ubars) = self.wb(&u);
        let basis: Vec<DMatrix<f64>> = (0..h).map(|q| sym_basis(m, q)).collect();
        let tr_e = |g: &DMatrix<f64>, e: &DMatrix<f64>| g.component_mul(e).sum();

        let mut scores = DMatrix::zeros(n, dim);
        let mut uw_sum = DMatrix::zeros(m, dr);
        let mut ub_sum = DMatrix::zeros(m, dr);
        for i in 0..n {
            let rb = self.rbar.row(i).transpose();
            let mut uw = DMatrix::zeros(m, dr);
            for pp in 0..t {
                let kk = i * t + pp;
                let du = u.row(kk).transpose() - &ubars[i];
                let dr_t = self.r.row(kk).transpose() - &rb;
                uw += du * dr_t.transpose();
            }
            let ub = &ubars[i] * rb.transpose();
            let sd = vec_of(&(&si * &uw + &sti * &ub * tf));
            uw_sum += uw;
            ub_sum += ub;
            let gs = (&si * (tf - 1.0) + &sti - &si * &ws[i] * &si - &sti * &bs[i] * &sti) * -0.5;
            let gl = (&sti - &sti * &bs[i] * &sti) * (-0.5 * tf);
            for j in 0..pd {
                scores[(i, j)] = sd[j];
            }
            for q in 0..h {
                scores[(i, pd + q)] = tr_e(&gs, &basis[q]);
                scores[(i, pd + h + q)] = tr_e(&gl, &basis[q]);
            }
        }

        let wsum = ws.iter().fold(DMatrix::zeros(m, m), |a, b| a + b);
        let bsum = bs.iter().fold(DMatrix::zeros(m, m), |a, b| a + b);
        let mut hess = DMatrix::zeros(dim, dim);
        let hdd = (self.mww.kronecker(&si) + self.mbb.kronecker(&sti) * tf) * -1.0;
        hess.view_mut((0, 0), (pd, pd)).copy_from(&hdd);
        for q in 0..h {
            let e = &basis[q];
            let aq = &si * e * &si;
            let cq = &sti * e * &sti;
            let ds = vec_of(&((&aq * &uw_sum + &cq * &ub_sum * tf) * -1.0));
            let dl = vec_of(&(&cq * &ub_sum * (-tf * tf)));
            for j in 0..pd {
                hess[(j, pd + q)] = ds[j];
                hess[(pd + q, j)] = ds[j];
                hess[(j, pd + h + q)] = dl[j];
                hess[(pd + h + q, j)] = dl[j];
            }
            let cb = &cq * &bsum * &sti + &sti * &bsum * &cq;
            // ∂G_S along Σ-direction e (Σ and Σ_(T) both move by e)
            let dgs_s = (&aq * (-(tf - 1.0) * nf) - &cq * nf + &aq * &wsum * &si + &si * &wsum * &aq + &cb) * -0.5;
            // ∂G_S along Λ-direction e (Σ_(T) moves by T·e)
            let dgs_l = (&cq * (-nf * tf) + &cb * tf) * -0.5;
            // ∂G_Λ along Λ-direction e
            let dgl_l = (&cq * (-nf * tf) + &cb * tf) * (-0.5 * tf);
            for pidx in 0..h {
                let ep = &basis[pidx];
                hess[(pd + pidx, pd + q)] = tr_e(&dgs_s, ep);
                hess[(pd + pidx, pd + h + q)] = tr_e(&dgs_l, ep);
                hess[(pd + h + q, pd + pidx)] = tr_e(&dgs_l, ep);
                hess[(pd + h + pidx, pd + h + q)] = tr_e(&dgl_l, ep);
            }
        }
        Ok((scores, hess))
    }

    /// ∂ℒ/∂Θ₁ summed over units.
    pub fn score_sum(&self, p: &ReducedFormParams) -> Result<DVector<f64>> {
        let (s, _) = self.score_and_hessian(p)?;
        Ok(s.row_sum().transpose())
    }

    pub fn fit_stepwise(&self, opts: StepwiseOptions) -> Result<ReducedFormFit> {
        let m = self.m;
        let mut sigma = DMatrix::identity(m, m);
        let mut lambda = DMatrix::zeros(m, m);
        let mut path = Vec::new();
        let mut converged = false;
        let mut clipped = false;
        let mut params = None;
        let mut n_iter = 0;
        for it in 1..=opts.max_iter {
            n_iter = it;
            let delta = self.gls_step(&sigma, &lambda)?;
            let (s, l, c) = self.covariance_step(&delta)?;
            sigma = s;
            lambda = l;
            clipped = c;
            let (pi, pi_bar) = self.split_pi(&delta);
            let p = ReducedFormParams { pi, pi_bar, sigma_eps: sigma.clone(), lambda_alpha: lambda.clone() };
            let ll = self.loglik(&p)?;
            let done = path.last().map(|&prev: &f64| (ll - prev).abs() < opts.tol_loglik).unwrap_or(false);
            path.push(ll);
            params = Some(p);
            if done {
                converged = true;
                break;
            }
        }
        let params = params.expect("at least one iteration");
        let (scores, hess) = self.score_and_hessian(&params)?;
        Ok(ReducedFormFit {
            loglik: *path.last().expect("non-empty path"),
            params,
            n_iter,
            converged,
            loglik_path: path,
            per_unit_scores: scores,
            hessian_blocks: hess,
            lambda_clipped: clipped,
        })
    }
}

pub fn gls_step(data: &PanelDataset, sigma: &DMatrix<f64>, lambda: &DMatrix<f64>) -> Result<DVector<f64>> {
    RfModel::new(data).gls_step(sigma, lambda)
}

pub fn covariance_step(data: &PanelDataset, delta: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (s, l, _) = RfModel::new(data).covariance_step(delta)?;
    Ok((s, l))
}

pub fn fit_stepwise(data: &PanelDataset, opts: StepwiseOptions) -> Result<ReducedFormFit> {
    RfModel::new(data).fit_stepwise(opts)
}

pub fn score_and_hessian(data: &PanelDataset, params: &ReducedFormParams) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    RfModel::new(data).score_and_hessian(params)
}
