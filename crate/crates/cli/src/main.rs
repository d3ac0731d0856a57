mod config;

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use panelcf::data::{load_panel_csv, PanelDataset};
use panelcf::effects::{ApeKind, DEFAULT_P_BAR};
use panelcf::inference::{bootstrap_two_step, TwoStepCovariance};
use panelcf::mc::{self, DgpSpec, Estimator, Instrument};
use panelcf::numerics::fmt_sig17 as f17;
use panelcf::pipeline::{self, ApeMode, PipelineFit, PipelineSpec};
use panelcf::second_stage::{LinearVariant, Method};
use panelcf::PanelError;
use serde_json::json;

type CliResult<T> = Result<T, PanelError>;

#[derive(Parser)]
#[command(name = "panelcf", version, about = "Control-function estimation for panel binary-response models")]
struct Cli {
    /// Cap on worker threads (falls back to PANELCF_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// TOML file with defaults for any flag.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Reduced form, control functions, second stage and two-step covariance.
    Fit(FitArgs),
    /// Average partial effects (points or bounds) with confidence intervals.
    Ape(ApeArgs),
    /// Monte Carlo experiments.
    Mc(McArgs),
    /// Linear-outcome control-function versus IV check on simulated fixtures.
    EquivalenceCheck(EqArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Probit,
    Gee,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Long-format CSV, one row per (unit, period).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    id_col: Option<String>,
    #[arg(long)]
    t_col: Option<String>,
    #[arg(long)]
    y_col: Option<String>,
    /// Endogenous regressors, comma separated.
    #[arg(long, value_delimiter = ',')]
    x_cols: Option<Vec<String>>,
    /// Instruments, comma separated.
    #[arg(long, value_delimiter = ',')]
    z_cols: Option<Vec<String>>,
    /// Exogenous covariates, comma separated.
    #[arg(long, value_delimiter = ',')]
    w_cols: Option<Vec<String>>,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    /// Do not add a constant to w.
    #[arg(long)]
    no_intercept: bool,
    /// Bootstrap replicates for the covariance (0 = analytic).
    #[arg(long)]
    bootstrap: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    common: DataArgs,
    /// Also write control_functions.csv.
    #[arg(long)]
    export_cf: bool,
}

#[derive(Clone, Copy, ValueEnum, PartialEq)]
enum ModeArg {
    Point,
    Bounds,
    Auto,
}

#[derive(Args)]
struct ApeArgs {
    #[command(flatten)]
    common: DataArgs,
    /// Evaluation point, comma separated; repeat for several points.
    #[arg(long = "x-bar", value_delimiter = ',', num_args = 1, action = clap::ArgAction::Append)]
    x_bar: Vec<f64>,
    /// Regressor (0-based) whose effect is reported.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    p_bar: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum, PartialEq)]
enum Preset {
    Table1,
    Table1Continuous,
    Table2,
    Fig2,
}

#[derive(Args)]
struct McArgs {
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma separated: crecf, crecf_gee, pw, pw_all, cre_probit, cond_logit.
    #[arg(long, value_delimiter = ',')]
    estimators: Option<Vec<String>>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum, PartialEq)]
enum VariantArg {
    Cf,
    Residual,
    Within,
}

#[derive(Args)]
struct EqArgs {
    #[arg(long, default_value_t = 20)]
    k: usize,
    #[arg(long, default_value_t = 300)]
    n: usize,
    #[arg(long, default_value_t = 4)]
    t: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = VariantArg::Cf)]
    variant: VariantArg,
    /// Drop one instrument on the IV side (negative control).
    #[arg(long)]
    mismatch: bool,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let payload = json!({ "code": e.code(), "module": e.module(), "message": e.to_string() });
            eprintln!("{payload}");
            match e {
                PanelError::Schema(_) | PanelError::Balance(_) | PanelError::MissingData(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let file = config::load(cli.config.as_deref())?;
    let threads = cli
        .threads
        .or(file.threads)
        .or_else(|| std::env::var("PANELCF_THREADS").ok().and_then(|v| v.parse().ok()));
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| PanelError::Config(format!("thread pool: {e}")))?;
    }
    match cli.cmd {
        Cmd::Fit(a) => cmd_fit(a, &file),
        Cmd::Ape(a) => cmd_ape(a, &file),
        Cmd::Mc(a) => cmd_mc(a, &file),
        Cmd::EquivalenceCheck(a) => cmd_equivalence(a, &file),
    }
}

struct Resolved {
    data: PanelDataset,
    spec: PipelineSpec,
    bootstrap: usize,
    seed: u64,
    out: PathBuf,
}

fn resolve(a: DataArgs, file: &config::FileConfig) -> CliResult<Resolved> {
    let path = a
        .data
        .or_else(|| file.data.clone())
        .ok_or_else(|| PanelError::Config("no input data (use --data or `data` in the config)".into()))?;
    let schema = config::schema(file.schema.as_ref(), a.id_col, a.t_col, a.y_col, a.x_cols, a.z_cols, a.w_cols)?;
    let data = load_panel_csv(&path, schema.as_ref())?;
    let method = match a.method {
        Some(MethodArg::Probit) => Method::PooledProbit,
        Some(MethodArg::Gee) => Method::Gee,
        None => match file.method.as_deref() {
            None | Some("probit") | Some("pooled_probit") => Method::PooledProbit,
            Some("gee") => Method::Gee,
            Some(other) => return Err(PanelError::Config(format!("unknown method '{other}'"))),
        },
    };
    let intercept = if a.no_intercept { false } else { file.intercept.unwrap_or(true) };
    let spec = PipelineSpec { method, intercept, ..PipelineSpec::default() };
    let out = a.out.or_else(|| file.out.clone()).unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out)?;
    Ok(Resolved {
        data,
        spec,
        bootstrap: a.bootstrap.or(file.bootstrap).unwrap_or(0),
        seed: a.seed.or(file.seed).unwrap_or(0),
        out,
    })
}

fn covariance(fit: &PipelineFit, r: &Resolved, target: Option<&panelcf::inference::ApeTarget>) -> CliResult<TwoStepCovariance> {
    if r.bootstrap > 0 {
        Ok(bootstrap_two_step(&r.data, &r.spec, r.bootstrap, r.seed, target)?.cov)
    } else {
        fit.two_step_cov()
    }
}

fn coef_names(fit: &PipelineFit) -> Vec<String> {
    let d = &fit.data;
    let mut v: Vec<String> = d.x_names.iter().chain(d.w_names.iter()).cloned().collect();
    v.extend(d.x_names.iter().map(|n| format!("alpha_hat_{n}")));
    v.extend(d.x_names.iter().map(|n| format!("eps_hat_{n}")));
    v
}

fn cmd_fit(a: FitArgs, file: &config::FileConfig) -> CliResult<()> {
    let r = resolve(a.common, file)?;
    let fit = pipeline::fit(&r.data, &r.spec)?;
    let cov = covariance(&fit, &r, None)?;
    let out = &r.out;

    let mut f = File::create(out.join("reduced_form.csv"))?;
    writeln!(f, "parameter,row,col,estimate")?;
    let p = &fit.rf.params;
    let qn = fit.data.q_names();
    for (name, m) in [("pi", &p.pi), ("pi_bar", &p.pi_bar), ("sigma_eps", &p.sigma_eps), ("lambda_alpha", &p.lambda_alpha)] {
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                let col = if name.starts_with("pi") { qn[j].clone() } else { fit.data.x_names[j].clone() };
                writeln!(f, "{name},{},{col},{}", fit.data.x_names[i], f17(m[(i, j)]))?;
            }
        }
    }

    let names = coef_names(&fit);
    let se = cov.se();
    let mut f = File::create(out.join("second_stage.csv"))?;
    writeln!(f, "name,estimate,naive_se,se,z")?;
    for (j, n) in names.iter().enumerate() {
        let est = fit.second.theta[j];
        let naive = fit.second.naive_cov[(j, j)].max(0.0).sqrt();
        writeln!(f, "{n},{},{},{},{}", f17(est), f17(naive), f17(se[j]), f17(est / se[j]))?;
    }
    write_matrix(&out.join("covariance.csv"), &names, &cov.cov())?;

    if a.export_cf {
        let d = &fit.data;
        let mut f = File::create(out.join("control_functions.csv"))?;
        let mut head = vec!["id".to_string(), "t".to_string()];
        head.extend((1..=d.dx()).map(|k| format!("alpha_hat_{k}")));
        head.extend((1..=d.dx()).map(|k| format!("eps_hat_{k}")));
        writeln!(f, "{}", head.join(","))?;
        for i in 0..d.n() {
            for t in 0..d.t() {
                let row = d.row(i, t);
                let mut cells = vec![d.unit_ids[i].clone(), (t + 1).to_string()];
                cells.extend((0..d.dx()).map(|k| f17(fit.cf.alpha_hat[(i, k)])));
                cells.extend((0..d.dx()).map(|k| f17(fit.cf.eps_hat[(row, k)])));
                writeln!(f, "{}", cells.join(","))?;
            }
        }
    }

    let dx = fit.data.dx();
    let dw = fit.data.dw();
    let exo: Vec<_> = (dx + dw..3 * dx + dw)
        .map(|j| json!({ "name": names[j], "z": fit.second.theta[j] / se[j] }))
        .collect();
    let summary = json!({
        "command": "fit",
        "method": r.spec.method.tag(),
        "covariance": if r.bootstrap > 0 { "bootstrap" } else { "analytic" },
        "bootstrap_effective": cov.b_effective,
        "n_units": fit.data.n(),
        "periods": fit.data.t(),
        "reduced_form": {
            "loglik": fit.rf.loglik,
            "iterations": fit.rf.n_iter,
            "converged": fit.rf.converged,
            "lambda_clipped": fit.rf.lambda_clipped,
        },
        "second_stage": {
            "objective": fit.second.loglik_or_objective,
            "iterations": fit.second.n_iter,
            "converged": fit.second.converged,
            "rho_work": fit.second.rho_work,
        },
        "v2_clipped": cov.clipped,
        "exogeneity_z": exo,
    });
    write_json(&out.join("fit_summary.json"), &summary)?;
    println!("{summary}");
    Ok(())
}

fn cmd_ape(a: ApeArgs, file: &config::FileConfig) -> CliResult<()> {
    let k = a.k.or(file.k).unwrap_or(0);
    let delta = a.delta.or(file.delta).unwrap_or(0.05);
    let p_bar = a.p_bar.or(file.p_bar).unwrap_or(DEFAULT_P_BAR);
    if !(p_bar > 0.0 && p_bar < 1.0) {
        return Err(PanelError::Config(format!("p̄ must lie in (0,1), got {p_bar}")));
    }
    let mode = match a.mode {
        Some(ModeArg::Point) => ApeMode::Point,
        Some(ModeArg::Bounds) => ApeMode::Bounds,
        Some(ModeArg::Auto) => ApeMode::Auto,
        None => match file.mode.as_deref() {
            None | Some("auto") => ApeMode::Auto,
            Some("point") => ApeMode::Point,
            Some("bounds") => ApeMode::Bounds,
            Some(other) => return Err(PanelError::Config(format!("unknown APE mode '{other}'"))),
        },
    };
    let x_flag = a.x_bar;
    let r = resolve(a.common, file)?;
    let dx = r.data.dx();
    let points: Vec<Vec<f64>> = if !x_flag.is_empty() {
        if x_flag.len() % dx != 0 {
            return Err(PanelError::Config(format!("--x-bar values must come in groups of d_x = {dx}")));
        }
        x_flag.chunks(dx).map(|c| c.to_vec()).collect()
    } else if let Some(p) = &file.x_bar {
        p.clone()
    } else {
        vec![r.data.x.row_mean().iter().cloned().collect()]
    };
    let fit = pipeline::fit(&r.data, &r.spec)?;
    let first = points.first().map(|p| DVector::from_vec(p.clone()));
    let target = first.map(|x_bar| panelcf::inference::ApeTarget { x_bar, k, delta_k: delta });
    let cov = covariance(&fit, &r, target.as_ref())?;

    let mut f = File::create(r.out.join("ape.csv"))?;
    writeln!(f, "point,x_bar,k,delta,kind,psi_l,psi_u,sigma_bar,ci_lo,ci_hi,p_xbar,p_xbar_delta,error")?;
    let mut rows = Vec::new();
    for (j, p) in points.iter().enumerate() {
        let xb = DVector::from_vec(p.clone());
        let xs = p.iter().map(|v| f17(*v)).collect::<Vec<_>>().join(";");
        match fit.ape(&xb, k, delta, mode.clone(), Some(p_bar), Some(&cov)) {
            Ok(e) => {
                let kind = if e.kind == ApeKind::Point { "point" } else { "bounds" };
                let (lo, hi) = e.ci95.unwrap_or((f64::NAN, f64::NAN));
                writeln!(
                    f,
                    "{j},{xs},{k},{},{kind},{},{},{},{},{},{},{},",
                    f17(delta),
                    f17(e.psi_l),
                    f17(e.psi_u),
                    f17(e.sigma_bar.unwrap_or(f64::NAN)),
                    f17(lo),
                    f17(hi),
                    f17(e.p_xbar),
                    f17(e.p_xbar_delta)
                )?;
                rows.push(json!({ "point": j, "kind": kind, "psi_l": e.psi_l, "psi_u": e.psi_u, "ci95": [lo, hi] }));
            }
            Err(err @ (PanelError::Support(_) | PanelError::Domain(_))) => {
                writeln!(f, "{j},{xs},{k},{},,,,,,,,,{}", f17(delta), err.code())?;
                rows.push(json!({ "point": j, "error": err.code(), "message": err.to_string() }));
            }
            Err(err) => return Err(err),
        }
    }
    let summary = json!({ "command": "ape", "method": r.spec.method.tag(), "p_bar": p_bar, "points": rows });
    println!("{summary}");
    Ok(())
}

fn cmd_mc(a: McArgs, file: &config::FileConfig) -> CliResult<()> {
    let mcf = file.mc.as_ref();
    let preset = match a.preset {
        Some(p) => p,
        None => match mcf.and_then(|m| m.preset.as_deref()) {
            None | Some("table1") => Preset::Table1,
            Some("table1-continuous") => Preset::Table1Continuous,
            Some("table2") => Preset::Table2,
            Some("fig2") => Preset::Fig2,
            Some(other) => return Err(PanelError::Config(format!("unknown preset '{other}'"))),
        },
    };
    let n = a.n.or(mcf.and_then(|m| m.n)).unwrap_or(1000);
    let m = a.m.or(mcf.and_then(|m| m.m)).unwrap_or(200);
    let seed = a.seed.or(file.seed).unwrap_or(0);
    let out = a.out.or_else(|| file.out.clone()).unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out)?;

    if preset == Preset::Fig2 {
        let cells = mc::cf_misspec_experiment(n, m, seed)?;
        mc::write_misspec_csv(&cells, &out.join("mc_draws.csv"))?;
        let mut f = File::create(out.join("mc_summary.csv"))?;
        writeln!(f, "instrument,control,mean_bias,m,failures")?;
        let mut rows = Vec::new();
        for c in &cells {
            let inst = if c.instrument == Instrument::Continuous { "continuous" } else { "binary" };
            let ctl = if c.control == panelcf::alternatives::PwControl::Own { "v_t" } else { "V" };
            writeln!(f, "{inst},{ctl},{},{},{}", f17(c.mean_bias), c.bias_draws.len(), c.failures)?;
            rows.push(json!({ "instrument": inst, "control": ctl, "mean_bias": c.mean_bias }));
        }
        println!("{}", json!({ "command": "mc", "preset": "fig2", "n": n, "m": m, "cells": rows }));
        return Ok(());
    }

    let (dgp, default_est): (DgpSpec, &[Estimator]) = match preset {
        Preset::Table1 => (
            DgpSpec::table1(n, Instrument::Binary),
            &[Estimator::Crecf, Estimator::Pw, Estimator::CreProbit, Estimator::CondLogit],
        ),
        Preset::Table1Continuous => (
            DgpSpec::table1(n, Instrument::Continuous),
            &[Estimator::Crecf, Estimator::Pw, Estimator::CreProbit, Estimator::CondLogit],
        ),
        _ => (DgpSpec::table2(n), &[Estimator::Crecf, Estimator::CreProbit, Estimator::CondLogit]),
    };
    let names = a.estimators.or_else(|| mcf.and_then(|m| m.estimators.clone()));
    let estimators = match names {
        Some(v) => v.iter().map(|s| Estimator::parse(s)).collect::<CliResult<Vec<_>>>()?,
        None => default_est.to_vec(),
    };
    let res = mc::run_experiment(&dgp, &estimators, m, seed)?;
    mc::write_summary_csv(&res, &out.join("mc_summary.csv"))?;
    mc::write_draws_csv(&res, &out.join("mc_draws.csv"))?;
    let rows: Vec<_> = res
        .summary
        .iter()
        .map(|s| json!({ "estimator": s.estimator.tag(), "regressor": s.regressor, "true_mean": s.true_mean, "mean": s.mean, "rmse": s.rmse, "failures": s.failures }))
        .collect();
    println!("{}", json!({ "command": "mc", "n": n, "m": m, "seed": seed, "summary": rows }));
    Ok(())
}

fn cmd_equivalence(a: EqArgs, file: &config::FileConfig) -> CliResult<()> {
    let variant = match a.variant {
        VariantArg::Cf => LinearVariant::ControlFunction,
        VariantArg::Residual => LinearVariant::Residual,
        VariantArg::Within => LinearVariant::Within,
    };
    let seed = a.seed.or(file.seed).unwrap_or(0);
    let rows = mc::run_equivalence_check(a.k, a.n, a.t, seed, variant, a.mismatch)?;
    let max = rows.iter().map(|r| r.max_abs_diff).fold(0.0, f64::max);
    let pass = max < a.tol;
    if let Some(out) = a.out.or_else(|| file.out.clone()) {
        std::fs::create_dir_all(&out)?;
        let mut f = File::create(out.join("equivalence.csv"))?;
        writeln!(f, "fixture,phi_cf,phi_iv,abs_diff")?;
        for r in &rows {
            writeln!(f, "{},{},{},{}", r.fixture, f17(r.phi_cf[0]), f17(r.phi_iv[0]), f17(r.max_abs_diff))?;
        }
    }
    let worst = rows.iter().max_by(|a, b| a.max_abs_diff.total_cmp(&b.max_abs_diff)).map(|r| r.fixture);
    println!(
        "{}",
        json!({ "command": "equivalence-check", "variant": format!("{variant:?}"), "fixtures": rows.len(), "max_abs_diff": max, "tolerance": a.tol, "pass": pass, "worst_fixture": worst })
    );
    Ok(())
}

fn write_matrix(path: &Path, names: &[String], m: &DMatrix<f64>) -> CliResult<()> {
    let mut f = File::create(path)?;
    writeln!(f, "name,{}", names.join(","))?;
    for (i, n) in names.iter().enumerate() {
        let row: Vec<String> = (0..m.ncols()).map(|j| f17(m[(i, j)])).collect();
        writeln!(f, "{n},{}", row.join(","))?;
    }
    Ok(())
}

fn write_json(path: &Path, v: &serde_json::Value) -> CliResult<()> {
    let mut f = File::create(path)?;
    writeln!(f, "{}", serde_json::to_string_pretty(v).map_err(|e| PanelError::Io(e.to_string()))?)?;
    Ok(())
}
