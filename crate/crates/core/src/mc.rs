//! Monte Carlo designs: the one- and two-regressor simulation DGPs, the
//! simulated true APE, replication loops for every estimator and the
//! control-function misspecification experiment.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::alternatives::{ape_alt, fit_cond_logit, fit_cre_probit, fit_pw, PwControl};
use crate::data::PanelDataset;
use crate::error::{PanelError, Result};
use crate::numerics::{stream_rng, MvnSampler};
use crate::pipeline::{self, PipelineSpec};
use crate::second_stage::{FitOptions, Method};

/// How a latent instrument is turned into the observed one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Discretize {
    None,
    /// 1{z > c}.
    Above(f64),
    /// 1{z ≥ c}.
    AtLeast(f64),
}

impl Discretize {
    fn apply(&self, z: f64) -> f64 {
        match *self {
            Discretize::None => z,
            Discretize::Above(c) => (z > c) as u8 as f64,
            Discretize::AtLeast(c) => (z >= c) as u8 as f64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Instrument {
    Continuous,
    Binary,
}

#[derive(Clone, Debug)]
pub struct DgpSpec {
    pub n_units: usize,
    pub t: usize,
    /// Structural coefficients φ (d_x).
    pub phi: DVector<f64>,
    /// Reduced form x = π z + α + ε with π d_x × d_z.
    pub pi: DMatrix<f64>,
    /// Within-period covariance of the latent z (d_z × d_z); periods are independent.
    pub sigma_z: DMatrix<f64>,
    /// Cov(z_t, α) (d_z × d_x), the same in every period.
    pub cov_z_alpha: DMatrix<f64>,
    /// Cov(z_t, θ) (d_z).
    pub cov_z_theta: DVector<f64>,
    pub sigma_alpha: DMatrix<f64>,
    pub cov_alpha_theta: DVector<f64>,
    pub var_theta: f64,
    /// Covariance of (ζ, ε₁, …, ε_{d_x}).
    pub sigma_zeta_eps: DMatrix<f64>,
    pub discretize: Vec<Discretize>,
    /// Default evaluation point and increments.
    pub x_bar: DVector<f64>,
    pub delta: DVector<f64>,
}

fn corr_cov(sd: &[f64], corr: &[(usize, usize, f64)]) -> DMatrix<f64> {
    let k = sd.len();
    let mut c = DMatrix::from_fn(k, k, |r, q| if r == q { sd[r] * sd[r] } else { 0.0 });
    for &(a, b, rho) in corr {
        c[(a, b)] = rho * sd[a] * sd[b];
        c[(b, a)] = c[(a, b)];
    }
    c
}

impl DgpSpec {
    /// One endogenous regressor, T = 5, x̄ = 1, Δ = 0.05.
    pub fn table1(n_units: usize, instrument: Instrument) -> DgpSpec {
        let (sz, sa, st) = (5.0, 3.0, 4.0);
        DgpSpec {
            n_units,
            t: 5,
            phi: DVector::from_element(1, -1.0),
            pi: DMatrix::from_element(1, 1, 1.5),
            sigma_z: DMatrix::from_element(1, 1, sz * sz),
            cov_z_alpha: DMatrix::from_element(1, 1, 0.4 * sz * sa),
            cov_z_theta: DVector::from_element(1, 0.2 * sz * st),
            sigma_alpha: DMatrix::from_element(1, 1, sa * sa),
            cov_alpha_theta: DVector::from_element(1, 0.5 * sa * st),
            var_theta: st * st,
            sigma_zeta_eps: corr_cov(&[1.0, 1.0], &[(0, 1, 0.75)]),
            discretize: vec![match instrument {
                Instrument::Continuous => Discretize::None,
                Instrument::Binary => Discretize::Above(0.0),
            }],
            x_bar: DVector::from_element(1, 1.0),
            delta: DVector::from_element(1, 0.05),
        }
    }

    /// Two endogenous regressors and two binary instruments, T = 5,
    /// x̄ = (0.5, 1), Δ = (0.05, 0.1).
    pub fn table2(n_units: usize) -> DgpSpec {
        let (sz1, sz2, sa1, sa2, st) = (5.0, 2.0, 6.0, 2.0, 4.0);
        DgpSpec {
            n_units,
            t: 5,
            phi: DVector::from_vec(vec![-1.0, 0.5]),
            pi: DMatrix::from_row_slice(2, 2, &[-1.0, 0.05, 0.025, 0.75]),
            sigma_z: corr_cov(&[sz1, sz2], &[(0, 1, 0.25)]),
            cov_z_alpha: DMatrix::from_row_slice(2, 2, &[0.2 * sz1 * sa1, 0.25 * sz1 * sa2, 0.3 * sz2 * sa1, 0.3 * sz2 * sa2]),
            cov_z_theta: DVector::from_vec(vec![0.1 * sz1 * st, 0.15 * sz2 * st]),
            sigma_alpha: corr_cov(&[sa1, sa2], &[(0, 1, 0.5)]),
            cov_alpha_theta: DVector::from_vec(vec![0.5 * sa1 * st, 0.25 * sa2 * st]),
            var_theta: st * st,
            sigma_zeta_eps: corr_cov(&[1.0, 1.0, 1.0], &[(0, 1, 0.75), (0, 2, 0.25), (1, 2, 0.5)]),
            discretize: vec![Discretize::AtLeast(0.0), Discretize::AtLeast(1.0)],
            x_bar: DVector::from_vec(vec![0.5, 1.0]),
            delta: DVector::from_vec(vec![0.05, 0.1]),
        }
    }

    pub fn dx(&self) -> usize {
        self.phi.len()
    }

    pub fn dz(&self) -> usize {
        self.sigma_z.nrows()
    }

    /// Covariance of (z₁′, …, z_T′, α′, θ)′.
    pub fn joint_cov(&self) -> DMatrix<f64> {
        let (t, dz, dx) = (self.t, self.dz(), self.dx());
        let k = t * dz + dx + 1;
        let mut c = DMatrix::zeros(k, k);
        let a0 = t * dz;
        let th = a0 + dx;
        for p in 0..t {
            c.view_mut((p * dz, p * dz), (dz, dz)).copy_from(&self.sigma_z);
            c.view_mut((p * dz, a0), (dz, dx)).copy_from(&self.cov_z_alpha);
            c.view_mut((a0, p * dz), (dx, dz)).copy_from(&self.cov_z_alpha.transpose());
            for j in 0..dz {
                c[(p * dz + j, th)] = self.cov_z_theta[j];
                c[(th, p * dz + j)] = self.cov_z_theta[j];
            }
        }
        c.view_mut((a0, a0), (dx, dx)).copy_from(&self.sigma_alpha);
        for j in 0..dx {
            c[(a0 + j, th)] = self.cov_alpha_theta[j];
            c[(th, a0 + j)] = self.cov_alpha_theta[j];
        }
        c[(th, th)] = self.var_theta;
        c
    }

    pub fn validate(&self) -> Result<()> {
        let (dx, dz) = (self.dx(), self.dz());
        if self.t < 2 || self.n_units == 0 {
            return Err(PanelError::Config("need T ≥ 2 and at least one unit".into()));
        }
        if self.pi.shape() != (dx, dz)
            || self.cov_z_alpha.shape() != (dz, dx)
            || self.cov_z_theta.len() != dz
            || self.sigma_alpha.shape() != (dx, dx)
            || self.cov_alpha_theta.len() != dx
            || self.sigma_zeta_eps.shape() != (dx + 1, dx + 1)
            || self.discretize.len() != dz
            || self.x_bar.len() != dx
            || self.delta.len() != dx
        {
            return Err(PanelError::Config("DGP dimensions are inconsistent".into()));
        }
        for (name, m) in [("Σ_zαθ", self.joint_cov()), ("Σ_ζε", self.sigma_zeta_eps.clone())] {
            let ev = SymmetricEigen::new(m.clone()).eigenvalues;
            let lo = ev.min();
            if lo < -1e-10 * ev.amax().max(1.0) {
                let list: Vec<String> = ev.iter().map(|v| format!("{v:.4}")).collect();
                return Err(PanelError::Config(format!("{name} is not PSD; eigenvalues [{}]", list.join(", "))));
            }
        }
        Ok(())
    }
}

/// Unobservables of one simulated panel.
#[derive(Clone, Debug)]
pub struct Latent {
    /// N × d_x.
    pub alpha: DMatrix<f64>,
    pub theta: DVector<f64>,
    /// NT.
    pub zeta: DVector<f64>,
    /// NT × d_x.
    pub eps: DMatrix<f64>,
    /// Instruments before discretization (NT × d_z).
    pub z_latent: DMatrix<f64>,
}

pub fn generate(dgp: &DgpSpec, seed: u64) -> Result<(PanelDataset, Latent)> {
    let mut rng = stream_rng(seed, 0);
    generate_with(dgp, &mut rng)
}

pub fn generate_with(dgp: &DgpSpec, rng: &mut ChaCha8Rng) -> Result<(PanelDataset, Latent)> {
    dgp.validate()?;
    let (n, t, dx, dz) = (dgp.n_units, dgp.t, dgp.dx(), dgp.dz());
    let big = MvnSampler::new(DVector::zeros(t * dz + dx + 1), &dgp.joint_cov())?;
    let small = MvnSampler::new(DVector::zeros(dx + 1), &dgp.sigma_zeta_eps)?;
    let nt = n * t;
    let mut alpha = DMatrix::zeros(n, dx);
    let mut theta = DVector::zeros(n);
    let mut zeta = DVector::zeros(nt);
    let mut eps = DMatrix::zeros(nt, dx);
    let mut z_latent = DMatrix::zeros(nt, dz);
    let mut z = DMatrix::zeros(nt, dz);
    let mut x = DMatrix::zeros(nt, dx);
    let mut y = DVector::zeros(nt);
    for i in 0..n {
        let d = big.sample(rng);
        for j in 0..dx {
            alpha[(i, j)] = d[t * dz + j];
        }
        theta[i] = d[t * dz + dx];
        for p in 0..t {
            let r = i * t + p;
            for j in 0..dz {
                z_latent[(r, j)] = d[p * dz + j];
                z[(r, j)] = dgp.discretize[j].apply(d[p * dz + j]);
            }
            let e = small.sample(rng);
            zeta[r] = e[0];
            let mut idx = theta[i] + zeta[r];
            for j in 0..dx {
                eps[(r, j)] = e[1 + j];
                let mut v = alpha[(i, j)] + eps[(r, j)];
                for c in 0..dz {
                    v += dgp.pi[(j, c)] * z[(r, c)];
                }
                x[(r, j)] = v;
                idx += dgp.phi[j] * v;
            }
            y[r] = (idx > 0.0) as u8 as f64;
        }
    }
    let ids = (0..n).map(|i| i.to_string()).collect();
    let data = PanelDataset::new(ids, t, y, x, z, DMatrix::zeros(nt, 0))?;
    Ok((data, Latent { alpha, theta, zeta, eps, z_latent }))
}

/// [Ḡ(x̄ + Δₖeₖ) − Ḡ(x̄)]/Δₖ with Ḡ(v) = (1/NT)Σᵢₜ 1{φ′v + θᵢ + ζᵢₜ > 0}.
pub fn true_ape(phi: &DVector<f64>, latent: &Latent, x_bar: &DVector<f64>, k: usize, delta_k: f64) -> f64 {
    let nt = latent.zeta.len();
    let t = nt / latent.theta.len();
    let base = phi.dot(x_bar);
    let shifted = base + phi[k] * delta_k;
    let mut diff = 0i64;
    for r in 0..nt {
        let u = latent.theta[r / t] + latent.zeta[r];
        diff += (shifted + u > 0.0) as i64 - (base + u > 0.0) as i64;
    }
    diff as f64 / nt as f64 / delta_k
}

/// Population counterpart of `true_ape` when θ + ζ is N(0, s²).
pub fn population_ape(phi: &DVector<f64>, sd_u: f64, x_bar: &DVector<f64>, k: usize, delta_k: f64) -> f64 {
    use crate::numerics::norm_cdf;
    let base = phi.dot(x_bar);
    (norm_cdf((base + phi[k] * delta_k) / sd_u) - norm_cdf(base / sd_u)) / delta_k
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Estimator {
    /// Control functions from the random-effects reduced form, pooled probit.
    Crecf,
    /// Same with the GEE second stage.
    CrecfGee,
    Pw,
    /// PW with the full residual history as control function.
    PwAll,
    CreProbit,
    CondLogit,
}

impl Estimator {
    pub fn tag(&self) -> &'static str {
        match self {
            Estimator::Crecf => "crecf",
            Estimator::CrecfGee => "crecf_gee",
            Estimator::Pw => "pw",
            Estimator::PwAll => "pw_all",
            Estimator::CreProbit => "cre_probit",
            Estimator::CondLogit => "cond_logit",
        }
    }

    pub fn parse(s: &str) -> Result<Estimator> {
        Ok(match s.trim() {
            "crecf" => Estimator::Crecf,
            "crecf_gee" => Estimator::CrecfGee,
            "pw" => Estimator::Pw,
            "pw_all" => Estimator::PwAll,
            "cre_probit" | "cre" => Estimator::CreProbit,
            "cond_logit" | "cl" => Estimator::CondLogit,
            other => return Err(PanelError::Config(format!("unknown estimator '{other}'"))),
        })
    }
}

/// APEs of every regressor at the DGP's evaluation point.
pub fn estimate_apes(est: Estimator, data: &PanelDataset, latent: &Latent, dgp: &DgpSpec) -> Result<Vec<f64>> {
    let opts = FitOptions::default();
    let dx = dgp.dx();
    match est {
        Estimator::Crecf | Estimator::CrecfGee => {
            let spec = PipelineSpec {
                method: if est == Estimator::Crecf { Method::PooledProbit } else { Method::Gee },
                ..PipelineSpec::default()
            };
            let fit = pipeline::fit(data, &spec)?;
            (0..dx).map(|k| Ok(fit.ape_point(&dgp.x_bar, k, dgp.delta[k])?.psi_l)).collect()
        }
        _ => {
            let fit = match est {
                Estimator::Pw => fit_pw(data, PwControl::Own, &opts)?,
                Estimator::PwAll => fit_pw(data, PwControl::AllPeriods, &opts)?,
                Estimator::CreProbit => fit_cre_probit(data, &opts)?,
                _ => fit_cond_logit(data, &opts)?,
            };
            (0..dx).map(|k| ape_alt(&fit, &dgp.x_bar, k, dgp.delta[k], Some(&latent.theta))).collect()
        }
    }
}

#[derive(Clone, Debug)]
pub struct Replication {
    pub index: usize,
    /// Per regressor.
    pub true_ape: Vec<f64>,
    /// Per estimator, per regressor; None when the estimator failed.
    pub estimates: Vec<Option<Vec<f64>>>,
    pub errors: Vec<Option<String>>,
}

#[derive(Clone, Debug)]
pub struct SummaryRow {
    pub estimator: Estimator,
    pub regressor: usize,
    pub true_mean: f64,
    pub mean: f64,
    pub bias: f64,
    /// Population variance of the estimate minus the true APE.
    pub variance: f64,
    pub rmse: f64,
    pub m: usize,
    pub failures: usize,
}

#[derive(Clone, Debug)]
pub struct McResult {
    pub estimators: Vec<Estimator>,
    pub replications: Vec<Replication>,
    pub summary: Vec<SummaryRow>,
}

impl McResult {
    pub fn row(&self, est: Estimator, regressor: usize) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.estimator == est && r.regressor == regressor)
    }
}

/// Replication r draws its panel from stream r of `seed`; estimators run on
/// that same panel. Output does not depend on thread scheduling.
pub fn run_experiment(dgp: &DgpSpec, estimators: &[Estimator], m: usize, seed: u64) -> Result<McResult> {
    if m == 0 {
        return Err(PanelError::Config("need at least one replication".into()));
    }
    dgp.validate()?;
    let dx = dgp.dx();
    let replications: Vec<Replication> = (0..m)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream_rng(seed, r as u64);
            let (data, latent) = generate_with(dgp, &mut rng)?;
            let true_ape = (0..dx).map(|k| true_ape(&dgp.phi, &latent, &dgp.x_bar, k, dgp.delta[k])).collect();
            let mut estimates = Vec::new();
            let mut errors = Vec::new();
            for &e in estimators {
                match estimate_apes(e, &data, &latent, dgp) {
                    Ok(v) if v.iter().all(|a| a.is_finite()) => {
                        estimates.push(Some(v));
                        errors.push(None);
                    }
                    Ok(_) => {
                        estimates.push(None);
                        errors.push(Some("non-finite APE".into()));
                    }
                    Err(err) => {
                        estimates.push(None);
                        errors.push(Some(format!("{}: {err}", err.code())));
                    }
                }
            }
            Ok(Replication { index: r, true_ape, estimates, errors })
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = summarize(estimators, &replications, dx);
    Ok(McResult { estimators: estimators.to_vec(), replications, summary })
}

fn summarize(estimators: &[Estimator], reps: &[Replication], dx: usize) -> Vec<SummaryRow> {
    let mut out = Vec::new();
    for (e, &est) in estimators.iter().enumerate() {
        for k in 0..dx {
            let pairs: Vec<(f64, f64)> = reps
                .iter()
                .filter_map(|r| r.estimates[e].as_ref().map(|v| (v[k], r.true_ape[k])))
                .collect();
            let m = pairs.len();
            let failures = reps.len() - m;
            let mf = m as f64;
            let (mean, true_mean, bias, variance, rmse) = if m == 0 {
                (f64::NAN, f64::NAN, f64::NAN, f64::NAN, f64::NAN)
            } else {
                let mean = pairs.iter().map(|p| p.0).sum::<f64>() / mf;
                let true_mean = pairs.iter().map(|p| p.1).sum::<f64>() / mf;
                let bias = mean - true_mean;
                let variance = pairs.iter().map(|p| (p.0 - p.1 - bias).powi(2)).sum::<f64>() / mf;
                let mse = pairs.iter().map(|p| (p.0 - p.1).powi(2)).sum::<f64>() / mf;
                (mean, true_mean, bias, variance, mse.sqrt())
            };
            out.push(SummaryRow { estimator: est, regressor: k, true_mean, mean, bias, variance, rmse, m, failures });
        }
    }
    out
}

/// One cell of the control-function misspecification experiment.
#[derive(Clone, Debug)]
pub struct MisspecCell {
    pub instrument: Instrument,
    pub control: PwControl,
    /// Estimated minus true APE per completed replication.
    pub bias_draws: Vec<f64>,
    pub mean_bias: f64,
    pub failures: usize,
}

/// The PW estimator with υₜ or the whole residual history as control
/// function, on continuous and on binary instruments (one-regressor DGP).
pub fn cf_misspec_experiment(n_units: usize, m: usize, seed: u64) -> Result<Vec<MisspecCell>> {
    let mut cells = Vec::new();
    for (ci, instrument) in [Instrument::Continuous, Instrument::Binary].into_iter().enumerate() {
        let dgp = DgpSpec::table1(n_units, instrument);
        let res = run_experiment(&dgp, &[Estimator::Pw, Estimator::PwAll], m, seed.wrapping_add(ci as u64))?;
        for (e, control) in [PwControl::Own, PwControl::AllPeriods].into_iter().enumerate() {
            let bias_draws: Vec<f64> = res
                .replications
                .iter()
                .filter_map(|r| r.estimates[e].as_ref().map(|v| v[0] - r.true_ape[0]))
                .collect();
            let mean_bias = bias_draws.iter().sum::<f64>() / bias_draws.len().max(1) as f64;
            cells.push(MisspecCell { instrument, control, failures: m - bias_draws.len(), bias_draws, mean_bias });
        }
    }
    Ok(cells)
}

fn fmt(v: f64) -> String {
    crate::numerics::fmt_sig17(v)
}

pub fn write_summary_csv(res: &McResult, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "estimator,regressor,true_mean,mean,bias,variance,rmse,m,failures")?;
    for r in &res.summary {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{}",
            r.estimator.tag(),
            r.regressor,
            fmt(r.true_mean),
            fmt(r.mean),
            fmt(r.bias),
            fmt(r.variance),
            fmt(r.rmse),
            r.m,
            r.failures
        )?;
    }
    Ok(())
}

pub fn write_draws_csv(res: &McResult, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "replication,estimator,regressor,true_ape,estimate,error")?;
    for rep in &res.replications {
        for (e, est) in res.estimators.iter().enumerate() {
            for k in 0..rep.true_ape.len() {
                let (v, err) = match (&rep.estimates[e], &rep.errors[e]) {
                    (Some(v), _) => (fmt(v[k]), String::new()),
                    (None, err) => (String::new(), err.clone().unwrap_or_default().replace(',', ";")),
                };
                writeln!(f, "{},{},{},{},{},{}", rep.index, est.tag(), k, fmt(rep.true_ape[k]), v, err)?;
            }
        }
    }
    Ok(())
}

pub fn write_misspec_csv(cells: &[MisspecCell], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "instrument,control,draw,bias")?;
    for c in cells {
        let inst = match c.instrument {
            Instrument::Continuous => "continuous",
            Instrument::Binary => "binary",
        };
        let ctl = match c.control {
            PwControl::Own => "v_t",
            PwControl::AllPeriods => "V",
        };
        for (j, b) in c.bias_draws.iter().enumerate() {
            writeln!(f, "{inst},{ctl},{j},{}", fmt(*b))?;
        }
    }
    Ok(())
}

/// A linear triangular panel: x = πz + α + ε, y = φ′x + θ + ζ with
/// correlated effects, plus a placeholder binary outcome 1{y > 0}.
#[derive(Clone, Debug)]
pub struct LinearFixture {
    pub data: PanelDataset,
    pub y: DVector<f64>,
}

pub fn linear_fixture(n_units: usize, t: usize, seed: u64) -> Result<LinearFixture> {
    use rand::Rng;
    let mut rng = stream_rng(seed, 0);
    let (dx, dz) = (1, 2);
    let mut u = |lo: f64, hi: f64| lo + (hi - lo) * rng.random::<f64>();
    let pi = DMatrix::from_fn(dx, dz, |_, _| u(0.5, 2.0));
    let phi = DVector::from_fn(dx, |_, _| u(-1.5, 1.5));
    let dgp = DgpSpec {
        n_units,
        t,
        phi: phi.clone(),
        pi,
        sigma_z: corr_cov(&[u(1.0, 3.0), u(1.0, 3.0)], &[(0, 1, u(-0.3, 0.3))]),
        cov_z_alpha: DMatrix::from_fn(dz, dx, |_, _| u(0.0, 0.6)),
        cov_z_theta: DVector::from_fn(dz, |_, _| u(0.0, 0.4)),
        sigma_alpha: DMatrix::from_element(dx, dx, u(1.0, 2.0)),
        cov_alpha_theta: DVector::from_element(dx, u(0.0, 0.5)),
        var_theta: u(1.0, 2.0),
        sigma_zeta_eps: corr_cov(&[1.0, u(0.5, 1.5)], &[(0, 1, u(-0.6, 0.6))]),
        discretize: vec![Discretize::None; dz],
        x_bar: DVector::zeros(dx),
        delta: DVector::from_element(dx, 1.0),
    };
    let mut draw = stream_rng(seed, 1);
    let (data, lat) = generate_with(&dgp, &mut draw)?;
    let nt = data.nt();
    let y = DVector::from_fn(nt, |r, _| (&data.x.row(r) * &phi)[0] + lat.theta[r / t] + lat.zeta[r]);
    let yb = y.map(|v| (v > 0.0) as u8 as f64);
    let data = PanelDataset::new(data.unit_ids.clone(), t, yb, data.x.clone(), data.z.clone(), data.w.clone())?;
    Ok(LinearFixture { data, y })
}

#[derive(Clone, Debug)]
pub struct EquivalenceRow {
    pub fixture: usize,
    pub phi_cf: DVector<f64>,
    pub phi_iv: DVector<f64>,
    pub max_abs_diff: f64,
}

/// Control-function versus IV estimates of φ on `k` linear fixtures. With
/// `mismatch` the IV side drops the last instrument (a negative control).
pub fn run_equivalence_check(
    k: usize,
    n_units: usize,
    t: usize,
    seed: u64,
    variant: crate::second_stage::LinearVariant,
    mismatch: bool,
) -> Result<Vec<EquivalenceRow>> {
    use crate::control_functions::compute_control_functions;
    use crate::reduced_form::RfModel;
    use crate::second_stage::{fit_linear_cf, fit_linear_iv};
    (0..k)
        .into_par_iter()
        .map(|f| {
            let fx = linear_fixture(n_units, t, seed.wrapping_add(f as u64))?;
            let data = fx.data.with_intercept();
            let rf = RfModel::new(&data).fit_stepwise(Default::default())?;
            let cf = compute_control_functions(&data, &rf.params)?;
            let a = fit_linear_cf(&fx.y, &data, &rf.params, &cf, variant)?;
            let b = if mismatch {
                let z = data.z.columns(0, data.dz() - 1).into_owned();
                let short = PanelDataset::new(data.unit_ids.clone(), t, data.y.clone(), data.x.clone(), z, data.w.clone())?;
                let rf_s = RfModel::new(&short).fit_stepwise(Default::default())?;
                fit_linear_iv(&fx.y, &short, &rf_s.params, variant)?
            } else {
                fit_linear_iv(&fx.y, &data, &rf.params, variant)?
            };
            let dx = data.dx();
            let phi_cf = a.rows(0, dx).into_owned();
            let phi_iv = b.rows(0, dx).into_owned();
            let max_abs_diff = (&phi_cf - &phi_iv).amax();
            Ok(EquivalenceRow { fixture: f, phi_cf, phi_iv, max_abs_diff })
        })
        .collect()
}
