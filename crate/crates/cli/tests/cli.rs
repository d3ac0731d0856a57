use std::path::Path;
use std::process::{Command, Output};

use panelcf::data::save_panel_csv;
use panelcf::mc::{generate, DgpSpec, Instrument};
use serde_json::Value;

fn panelcf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_panelcf")).args(args).output().expect("binary runs")
}

fn stdout_json(o: &Output) -> Value {
    let text = String::from_utf8_lossy(&o.stdout);
    let line = text.lines().last().unwrap_or_else(|| panic!("no stdout; stderr: {}", String::from_utf8_lossy(&o.stderr)));
    serde_json::from_str(line).unwrap()
}

fn sample_csv(dir: &Path, n: usize, seed: u64) -> String {
    let (d, _) = generate(&DgpSpec::table1(n, Instrument::Binary), seed).unwrap();
    let p = dir.join("panel.csv");
    save_panel_csv(&d, &p).unwrap();
    p.to_str().unwrap().to_string()
}

fn header(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn fit_writes_every_output() {
    let dir = tempfile::tempdir().unwrap();
    let data = sample_csv(dir.path(), 300, 1);
    let out = dir.path().join("out");
    let o = panelcf(&["fit", "--data", &data, "--out", out.to_str().unwrap(), "--export-cf"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let j = stdout_json(&o);
    assert_eq!(j["command"], "fit");
    assert_eq!(j["n_units"], 300);
    assert_eq!(j["reduced_form"]["converged"], true);
    assert_eq!(header(&out.join("reduced_form.csv")), "parameter,row,col,estimate");
    assert_eq!(header(&out.join("second_stage.csv")), "name,estimate,naive_se,se,z");
    assert_eq!(header(&out.join("control_functions.csv")), "id,t,alpha_hat_1,eps_hat_1");
    assert!(header(&out.join("covariance.csv")).starts_with("name,x1,const,alpha_hat_x1,eps_hat_x1"));
    let s: Value = serde_json::from_str(&std::fs::read_to_string(out.join("fit_summary.json")).unwrap()).unwrap();
    assert_eq!(s, j);
    let rows = std::fs::read_to_string(out.join("control_functions.csv")).unwrap().lines().count();
    assert_eq!(rows, 1 + 300 * 5);
}

#[test]
fn malformed_input_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.csv");
    std::fs::write(&p, "id,t,y,x1,z1\na,1,3,0.5,1\na,2,1,1.5,0\n").unwrap();
    let o = panelcf(&["fit", "--data", p.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err: Value = serde_json::from_str(String::from_utf8_lossy(&o.stderr).trim()).unwrap();
    assert_eq!(err["code"], "SchemaError");
    assert!(!dir.path().join("second_stage.csv").exists());
}

#[test]
fn gee_method_runs() {
    let dir = tempfile::tempdir().unwrap();
    let data = sample_csv(dir.path(), 300, 2);
    let o = panelcf(&["fit", "--data", &data, "--method", "gee", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let j = stdout_json(&o);
    assert_eq!(j["method"], "gee");
    let rho = j["second_stage"]["rho_work"].as_f64().unwrap();
    assert!(rho > 0.0 && rho < 1.0);
}

#[test]
fn ape_point_and_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let data = sample_csv(dir.path(), 400, 3);
    let d = dir.path().to_str().unwrap();
    let o = panelcf(&["ape", "--data", &data, "--out", d, "--x-bar", "1", "--x-bar", "2", "--mode", "point"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let j = stdout_json(&o);
    let pts = j["points"].as_array().unwrap();
    assert_eq!(pts.len(), 2);
    for p in pts {
        assert_eq!(p["kind"], "point");
        let ci = p["ci95"].as_array().unwrap();
        assert!(ci[0].as_f64().unwrap() <= p["psi_l"].as_f64().unwrap());
    }
    assert_eq!(
        header(&dir.path().join("ape.csv")),
        "point,x_bar,k,delta,kind,psi_l,psi_u,sigma_bar,ci_lo,ci_hi,p_xbar,p_xbar_delta,error"
    );
    let o = panelcf(&["ape", "--data", &data, "--out", d, "--x-bar", "1", "--mode", "bounds"]);
    assert!(o.status.success());
    let p = &stdout_json(&o)["points"][0];
    assert_eq!(p["kind"], "bounds");
    let (l, u) = (p["psi_l"].as_f64().unwrap(), p["psi_u"].as_f64().unwrap());
    let ci = p["ci95"].as_array().unwrap();
    assert!(ci[0].as_f64().unwrap() <= l && l <= u && u <= ci[1].as_f64().unwrap());
}

#[test]
fn mc_output_is_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for (j, threads) in ["1", "3"].into_iter().enumerate() {
        let out = dir.path().join(format!("run{j}"));
        let o = panelcf(&[
            "--threads", threads, "mc", "--preset", "table1", "--n", "150", "--m", "4", "--seed", "9", "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        files.push((std::fs::read(out.join("mc_summary.csv")).unwrap(), std::fs::read(out.join("mc_draws.csv")).unwrap()));
    }
    assert_eq!(files[0], files[1]);
    assert!(String::from_utf8_lossy(&files[0].0).starts_with("estimator,regressor,true_mean,mean,bias,variance,rmse,m,failures"));
}

#[test]
fn equivalence_check_verdicts() {
    for variant in ["residual", "within"] {
        let o = panelcf(&["equivalence-check", "--k", "3", "--n", "150", "--variant", variant, "--seed", "4"]);
        assert!(o.status.success());
        assert_eq!(stdout_json(&o)["pass"], true, "{variant}");
    }
    let o = panelcf(&["equivalence-check", "--k", "3", "--n", "150", "--variant", "residual", "--mismatch", "--seed", "4"]);
    assert!(o.status.success());
    assert_eq!(stdout_json(&o)["pass"], false);
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let data = sample_csv(dir.path(), 200, 5);
    let cfg = dir.path().join("run.toml");
    let out_cfg = dir.path().join("from_config");
    std::fs::write(
        &cfg,
        format!("data = {data:?}\nout = {:?}\nmethod = \"gee\"\n", out_cfg.to_str().unwrap()),
    )
    .unwrap();
    let o = panelcf(&["--config", cfg.to_str().unwrap(), "fit"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout_json(&o)["method"], "gee");
    assert!(out_cfg.join("second_stage.csv").exists());
    let o = panelcf(&["--config", cfg.to_str().unwrap(), "fit", "--method", "probit"]);
    assert_eq!(stdout_json(&o)["method"], "pooled_probit");
    std::fs::write(&cfg, "colour = 3\n").unwrap();
    let o = panelcf(&["--config", cfg.to_str().unwrap(), "fit"]);
    assert_eq!(o.status.code(), Some(1));
    let err: Value = serde_json::from_str(String::from_utf8_lossy(&o.stderr).trim()).unwrap();
    assert_eq!(err["code"], "ConfigError");
}
