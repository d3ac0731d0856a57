//! End-to-end fit: reduced form, control functions, second stage.

use nalgebra::{DMatrix, DVector};

use crate::control_functions::{compute_control_functions, ControlFunctionSet};
use crate::data::PanelDataset;
use crate::effects::{self, ApeEstimate, EffectInputs, DEFAULT_P_BAR};
use crate::error::{PanelError, Result};
use crate::inference::{self, TwoStepCovariance};
use crate::numerics::TOL_RANK;
use crate::reduced_form::{ReducedFormFit, RfModel, StepwiseOptions};
use crate::second_stage::{build_design, fit_gee, fit_pooled_probit, FitOptions, Method, SecondStageFit};

#[derive(Clone, Debug)]
pub struct PipelineSpec {
    pub method: Method,
    /// Prepend a constant to w before estimation.
    pub intercept: bool,
    pub stepwise: StepwiseOptions,
    pub fit: FitOptions,
}

impl Default for PipelineSpec {
    fn default() -> Self {
        PipelineSpec {
            method: Method::PooledProbit,
            intercept: true,
            stepwise: StepwiseOptions::default(),
            fit: FitOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ApeMode {
    Point,
    Bounds,
    Auto,
}

#[derive(Clone, Debug)]
pub struct PipelineFit {
    /// The panel as estimated (with the constant column when requested).
    pub data: PanelDataset,
    pub model: RfModel,
    pub rf: ReducedFormFit,
    pub cf: ControlFunctionSet,
    pub design: DMatrix<f64>,
    pub second: SecondStageFit,
}

pub fn fit(data: &PanelDataset, spec: &PipelineSpec) -> Result<PipelineFit> {
    let data = if spec.intercept { data.with_intercept() } else { data.clone() };
    let model = RfModel::new(&data);
    let rf = model.fit_stepwise(spec.stepwise)?;
    let cf = compute_control_functions(&data, &rf.params)?;
    let design = build_design(&data, &cf);
    let second = match spec.method {
        Method::PooledProbit => fit_pooled_probit(&data.y, &design, data.dx(), data.dw(), &spec.fit)?,
        Method::Gee => fit_gee(&data.y, &design, data.t(), data.dx(), data.dw(), &spec.fit)?,
    };
    Ok(PipelineFit { data, model, rf, cf, design, second })
}

impl PipelineFit {
    pub fn inputs(&self) -> EffectInputs<'_> {
        EffectInputs { data: &self.data, cf: &self.cf, theta: &self.second.theta }
    }

    pub fn two_step_cov(&self) -> Result<TwoStepCovariance> {
        inference::v2_star(self)
    }

    pub fn asf(&self, x_bar: &DVector<f64>) -> f64 {
        effects::asf_point(&self.inputs(), x_bar)
    }

    pub fn ape_point(&self, x_bar: &DVector<f64>, k: usize, delta_k: f64) -> Result<ApeEstimate> {
        effects::ape_point(&self.inputs(), x_bar, k, delta_k)
    }

    /// APE (or bounds) with delta-method σ̄ and 95% interval when `cov` is given.
    pub fn ape(
        &self,
        x_bar: &DVector<f64>,
        k: usize,
        delta_k: f64,
        mode: ApeMode,
        p_bar: Option<f64>,
        cov: Option<&TwoStepCovariance>,
    ) -> Result<ApeEstimate> {
        let inp = self.inputs();
        let p = p_bar.unwrap_or(DEFAULT_P_BAR);
        let mut est = match mode {
            ApeMode::Point => effects::ape_point(&inp, x_bar, k, delta_k)?,
            ApeMode::Bounds => effects::ape_bounds(&inp, x_bar, k, delta_k, p)?,
            ApeMode::Auto => effects::ape_auto(&inp, x_bar, k, delta_k, p)?,
        };
        if let Some(c) = cov {
            inference::attach_se(&mut est, c, &self.data)?;
        }
        Ok(est)
    }
}

#[derive(Clone, Debug)]
pub struct RankCheck {
    pub name: &'static str,
    /// Smallest / largest singular value.
    pub ratio: f64,
    pub rank: usize,
    pub required: usize,
    pub ok: bool,
}

#[derive(Clone, Debug)]
pub struct RankReport {
    pub checks: Vec<RankCheck>,
}

impl RankReport {
    pub fn all_ok(&self) -> bool {
        self.checks.iter().all(|c| c.ok)
    }

    pub fn into_result(self) -> Result<RankReport> {
        match self.checks.iter().find(|c| !c.ok) {
            Some(c) => Err(PanelError::Rank(format!(
                "{}: rank {} < {} (σ_min/σ_max = {:.3e})",
                c.name, c.rank, c.required, c.ratio
            ))),
            None => Ok(self),
        }
    }
}

fn rank_check(name: &'static str, a: &DMatrix<f64>, required: usize, tol: f64) -> RankCheck {
    let sv = a.clone().svd(false, false).singular_values;
    let smax = sv.max();
    let rank = if smax > 0.0 { sv.iter().filter(|&&s| s > tol * smax).count() } else { 0 };
    let smin = if sv.is_empty() { 0.0 } else { sv.min() };
    RankCheck {
        name,
        ratio: if smax > 0.0 { smin / smax } else { 0.0 },
        rank,
        required,
        ok: rank >= required,
    }
}

/// Identification checks at the estimates: second moments of x, of the
/// Mundlak instrument vector and of the second-stage design, and the rank
/// of the stacked reduced-form coefficients [π, π̄].
pub fn validate_rank_conditions(
    data: &PanelDataset,
    rf: &crate::data::ReducedFormParams,
    cf: &ControlFunctionSet,
    tol: Option<f64>,
) -> RankReport {
    let tol = tol.unwrap_or(TOL_RANK);
    let nt = data.nt() as f64;
    let model = RfModel::new(data);
    let exx = data.x.transpose() * &data.x / nt;
    let ezz = model.r.transpose() * &model.r / nt;
    let design = build_design(data, cf);
    let edd = design.transpose() * &design / nt;
    let m = data.dx();
    let mut pi = DMatrix::zeros(m, rf.pi.ncols() + rf.pi_bar.ncols());
    pi.view_mut((0, 0), rf.pi.shape()).copy_from(&rf.pi);
    pi.view_mut((0, rf.pi.ncols()), rf.pi_bar.shape()).copy_from(&rf.pi_bar);
    // only the excluded instruments count toward identification
    let (dw, dq) = (data.dw(), rf.pi.ncols());
    let cols: Vec<usize> = (dw..dq).chain(dq + dw..pi.ncols()).collect();
    let pz = DMatrix::from_fn(m, cols.len(), |r, c| pi[(r, cols[c])]);
    RankReport {
        checks: vec![
            rank_check("E[x x']", &exx, m, tol),
            rank_check("E[(q, q̄)(q, q̄)']", &ezz, ezz.nrows(), tol),
            rank_check("[π, π̄] on instruments", &pz, m, tol),
            rank_check("E[𝕏 𝕏']", &edd, edd.nrows(), tol),
        ],
    }
}
