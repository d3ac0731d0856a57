//! Balanced panel container, CSV I/O and the parameter types shared by every
//! estimator.
//!
//! Observations are stored unit-major: row `i*T + t` of `x`, `z`, `w` holds
//! unit `i` in period `t`.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{PanelError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PanelDataset {
    pub unit_ids: Vec<String>,
    pub periods: usize,
    /// NT outcomes in {0, 1}.
    pub y: DVector<f64>,
    /// NT × d_x endogenous regressors.
    pub x: DMatrix<f64>,
    /// NT × d_z exogenous variables and instruments.
    pub z: DMatrix<f64>,
    /// NT × d_w structural exogenous variables (may have zero columns).
    pub w: DMatrix<f64>,
    /// N × d_z unit means of `z`.
    pub z_bar: DMatrix<f64>,
    pub x_names: Vec<String>,
    pub z_names: Vec<String>,
    pub w_names: Vec<String>,
}

fn unit_means(a: &DMatrix<f64>, n: usize, t: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(n, a.ncols());
    for i in 0..n {
        for c in 0..a.ncols() {
            let mut s = 0.0;
            for p in 0..t {
                s += a[(i * t + p, c)];
            }
            out[(i, c)] = s / t as f64;
        }
    }
    out
}

fn default_names(prefix: &str, k: usize) -> Vec<String> {
    (1..=k).map(|j| format!("{prefix}{j}")).collect()
}

impl PanelDataset {
    pub fn new(
        unit_ids: Vec<String>,
        periods: usize,
        y: DVector<f64>,
        x: DMatrix<f64>,
        z: DMatrix<f64>,
        w: DMatrix<f64>,
    ) -> Result<PanelDataset> {
        let n = unit_ids.len();
        if periods < 2 {
            return Err(PanelError::Schema(format!("need at least 2 periods, got {periods}")));
        }
        let nt = n * periods;
        if y.len() != nt || x.nrows() != nt || z.nrows() != nt || w.nrows() != nt {
            return Err(PanelError::Shape(format!(
                "expected {nt} rows; got y={}, x={}, z={}, w={}",
                y.len(),
                x.nrows(),
                z.nrows(),
                w.nrows()
            )));
        }
        if y.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(PanelError::Schema("outcome y must be 0 or 1".into()));
        }
        if x.ncols() == 0 {
            return Err(PanelError::Schema("at least one endogenous regressor required".into()));
        }
        if z.ncols() < x.ncols() {
            return Err(PanelError::Schema(format!(
                "order condition fails: d_z={} < d_x={}",
                z.ncols(),
                x.ncols()
            )));
        }
        let z_bar = unit_means(&z, n, periods);
        let (dx, dz, dw) = (x.ncols(), z.ncols(), w.ncols());
        Ok(PanelDataset {
            unit_ids,
            periods,
            y,
            x,
            z,
            w,
            z_bar,
            x_names: default_names("x", dx),
            z_names: default_names("z", dz),
            w_names: default_names("w", dw),
        })
    }

    pub fn n(&self) -> usize {
        self.unit_ids.len()
    }
    pub fn t(&self) -> usize {
        self.periods
    }
    pub fn nt(&self) -> usize {
        self.n() * self.periods
    }
    pub fn dx(&self) -> usize {
        self.x.ncols()
    }
    pub fn dz(&self) -> usize {
        self.z.ncols()
    }
    pub fn dw(&self) -> usize {
        self.w.ncols()
    }
    pub fn row(&self, i: usize, t: usize) -> usize {
        i * self.periods + t
    }

    /// Copy with a constant column prepended to `w`.
    pub fn with_intercept(&self) -> PanelDataset {
        let nt = self.nt();
        let mut w = DMatrix::from_element(nt, self.dw() + 1, 1.0);
        if self.dw() > 0 {
            w.view_mut((0, 1), (nt, self.dw())).copy_from(&self.w);
        }
        let mut out = self.clone();
        out.w = w;
        out.w_names.insert(0, "const".into());
        out
    }

    /// Reduced-form regressors q_it = (w_it′, z_it′)′ (NT × (d_w + d_z)).
    pub fn q(&self) -> DMatrix<f64> {
        let nt = self.nt();
        let mut q = DMatrix::zeros(nt, self.dw() + self.dz());
        if self.dw() > 0 {
            q.view_mut((0, 0), (nt, self.dw())).copy_from(&self.w);
        }
        q.view_mut((0, self.dw()), (nt, self.dz())).copy_from(&self.z);
        q
    }

    pub fn q_names(&self) -> Vec<String> {
        self.w_names.iter().chain(self.z_names.iter()).cloned().collect()
    }

    /// Columns of q that vary within at least one unit. Only these receive a
    /// Mundlak mean term; a time-invariant column would duplicate its mean.
    pub fn mundlak_cols(&self) -> Vec<usize> {
        let q = self.q();
        let t = self.periods;
        (0..q.ncols())
            .filter(|&c| {
                (0..self.n()).any(|i| (1..t).any(|p| q[(i * t + p, c)] != q[(i * t, c)]))
            })
            .collect()
    }

    /// N × d_x unit means of x.
    pub fn x_bar(&self) -> DMatrix<f64> {
        unit_means(&self.x, self.n(), self.periods)
    }

    pub fn unit_means_of(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        unit_means(a, self.n(), self.periods)
    }

    /// New panel made of the listed units (repeats allowed, relabelled so
    /// that each draw is its own unit).
    pub fn resample(&self, units: &[usize]) -> PanelDataset {
        let t = self.periods;
        let rows: Vec<usize> = units.iter().flat_map(|&i| (0..t).map(move |p| i * t + p)).collect();
        let pick = |a: &DMatrix<f64>| DMatrix::from_fn(rows.len(), a.ncols(), |r, c| a[(rows[r], c)]);
        let mut out = self.clone();
        out.unit_ids = units.iter().enumerate().map(|(k, &i)| format!("{}#{k}", self.unit_ids[i])).collect();
        out.y = DVector::from_fn(rows.len(), |r, _| self.y[rows[r]]);
        out.x = pick(&self.x);
        out.z = pick(&self.z);
        out.w = pick(&self.w);
        out.z_bar = unit_means(&out.z, units.len(), t);
        out
    }
}

/// Column-role map for long-format CSV files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub id: String,
    pub t: String,
    pub y: String,
    pub x: Vec<String>,
    pub z: Vec<String>,
    #[serde(default)]
    pub w: Vec<String>,
}

impl Schema {
    /// `id,t,y` plus every header starting with `x`, `z`, `w` followed by digits.
    pub fn infer(header: &[String]) -> Schema {
        let pick = |p: char| -> Vec<String> {
            let mut v: Vec<String> = header
                .iter()
                .filter(|h| h.starts_with(p) && h.len() > 1 && h[1..].chars().all(|c| c.is_ascii_digit()))
                .cloned()
                .collect();
            v.sort_by_key(|h| h[1..].parse::<usize>().unwrap_or(0));
            v
        };
        Schema { id: "id".into(), t: "t".into(), y: "y".into(), x: pick('x'), z: pick('z'), w: pick('w') }
    }
}

/// Load a long-format panel. Rows are sorted by (unit, period); units keep
/// the order of first appearance in the file.
pub fn load_panel_csv(path: &Path, schema: Option<&Schema>) -> Result<PanelDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => PanelError::Io(e.to_string()),
        _ => PanelError::Schema(e.to_string()),
    })?;
    let header: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
    let schema = match schema {
        Some(s) => s.clone(),
        None => Schema::infer(&header),
    };
    let col = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| PanelError::Schema(format!("column `{name}` not found in header")))
    };
    let id_c = col(&schema.id)?;
    let t_c = col(&schema.t)?;
    let y_c = col(&schema.y)?;
    let x_c: Vec<usize> = schema.x.iter().map(|n| col(n)).collect::<Result<_>>()?;
    let z_c: Vec<usize> = schema.z.iter().map(|n| col(n)).collect::<Result<_>>()?;
    let w_c: Vec<usize> = schema.w.iter().map(|n| col(n)).collect::<Result<_>>()?;

    struct Row {
        t: f64,
        y: f64,
        x: Vec<f64>,
        z: Vec<f64>,
        w: Vec<f64>,
    }
    let mut order: Vec<String> = Vec::new();
    let mut units: BTreeMap<String, Vec<Row>> = BTreeMap::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| PanelError::Schema(e.to_string()))?;
        let lineno = line + 2;
        let num = |c: usize, name: &str| -> Result<f64> {
            let s = rec.get(c).map(str::trim).unwrap_or("");
            if s.is_empty() || s.eq_ignore_ascii_case("na") || s.eq_ignore_ascii_case("nan") {
                return Err(PanelError::MissingData(format!("line {lineno}: `{name}` is empty")));
            }
            let v: f64 = s
                .parse()
                .map_err(|_| PanelError::Schema(format!("line {lineno}: `{name}`=`{s}` is not numeric")))?;
            if !v.is_finite() {
                return Err(PanelError::MissingData(format!("line {lineno}: `{name}` is not finite")));
            }
            Ok(v)
        };
        let id = rec.get(id_c).map(str::trim).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(PanelError::MissingData(format!("line {lineno}: empty unit id")));
        }
        let y = num(y_c, &schema.y)?;
        if y != 0.0 && y != 1.0 {
            return Err(PanelError::Schema(format!("line {lineno}: y={y} is not binary")));
        }
        let row = Row {
            t: num(t_c, &schema.t)?,
            y,
            x: x_c.iter().zip(&schema.x).map(|(&c, n)| num(c, n)).collect::<Result<_>>()?,
            z: z_c.iter().zip(&schema.z).map(|(&c, n)| num(c, n)).collect::<Result<_>>()?,
            w: w_c.iter().zip(&schema.w).map(|(&c, n)| num(c, n)).collect::<Result<_>>()?,
        };
        if !units.contains_key(&id) {
            order.push(id.clone());
        }
        units.entry(id).or_default().push(row);
    }
    if order.is_empty() {
        return Err(PanelError::Schema("no data rows".into()));
    }
    let mut periods: Option<Vec<f64>> = None;
    for id in &order {
        let rows = units.get_mut(id).expect("unit present");
        rows.sort_by(|a, b| a.t.total_cmp(&b.t));
        let ts: Vec<f64> = rows.iter().map(|r| r.t).collect();
        if ts.windows(2).any(|w| w[0] == w[1]) {
            return Err(PanelError::Balance(format!("unit {id} has duplicate periods")));
        }
        match &periods {
            None => periods = Some(ts),
            Some(p) if *p != ts => {
                return Err(PanelError::Balance(format!(
                    "unit {id} has {} periods {:?}, expected {:?}",
                    ts.len(),
                    ts,
                    p
                )))
            }
            _ => {}
        }
    }
    let t = periods.map(|p| p.len()).unwrap_or(0);
    let nt = order.len() * t;
    let (dx, dz, dw) = (x_c.len(), z_c.len(), w_c.len());
    let mut y = DVector::zeros(nt);
    let mut x = DMatrix::zeros(nt, dx);
    let mut z = DMatrix::zeros(nt, dz);
    let mut w = DMatrix::zeros(nt, dw);
    for (i, id) in order.iter().enumerate() {
        for (p, r) in units[id].iter().enumerate() {
            let k = i * t + p;
            y[k] = r.y;
            for j in 0..dx {
                x[(k, j)] = r.x[j];
            }
            for j in 0..dz {
                z[(k, j)] = r.z[j];
            }
            for j in 0..dw {
                w[(k, j)] = r.w[j];
            }
        }
    }
    let mut ds = PanelDataset::new(order, t, y, x, z, w)?;
    ds.x_names = schema.x.clone();
    ds.z_names = schema.z.clone();
    ds.w_names = schema.w.clone();
    Ok(ds)
}

/// Write the panel in long format with the default `x1.., z1.., w1..` names.
/// Values use Rust's shortest round-trip formatting, so reloading is exact.
pub fn save_panel_csv(data: &PanelDataset, path: &Path) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| PanelError::Io(e.to_string()))?;
    let mut header = vec!["id".to_string(), "t".to_string(), "y".to_string()];
    header.extend(default_names("x", data.dx()));
    header.extend(default_names("z", data.dz()));
    header.extend(default_names("w", data.dw()));
    wtr.write_record(&header)?;
    for i in 0..data.n() {
        for p in 0..data.t() {
            let k = data.row(i, p);
            let mut rec = vec![data.unit_ids[i].clone(), (p + 1).to_string(), data.y[k].to_string()];
            rec.extend(data.x.row(k).iter().map(|v| v.to_string()));
            rec.extend(data.z.row(k).iter().map(|v| v.to_string()));
            rec.extend(data.w.row(k).iter().map(|v| v.to_string()));
            wtr.write_record(&rec)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Θ₁ = {π, π̄, Σ_εε, Λ_αα}. Columns of `pi` and `pi_bar` follow q = (w, z);
/// `pi_bar` columns of time-invariant q columns are identically zero.
#[derive(Clone, Debug, PartialEq)]
pub struct ReducedFormParams {
    pub pi: DMatrix<f64>,
    pub pi_bar: DMatrix<f64>,
    pub sigma_eps: DMatrix<f64>,
    pub lambda_alpha: DMatrix<f64>,
}

/// Θ₂ in design order (x, w, α̂, ε̂), already divided by σ_η.
#[derive(Clone, Debug, PartialEq)]
pub struct SecondStageParams {
    pub phi: DVector<f64>,
    pub phi_alpha: DVector<f64>,
    pub phi_eps: DVector<f64>,
    pub rho_work: Option<f64>,
}

impl SecondStageParams {
    pub fn from_vec(theta: &DVector<f64>, dx: usize, dw: usize) -> SecondStageParams {
        SecondStageParams {
            phi: theta.rows(0, dx + dw).into_owned(),
            phi_alpha: theta.rows(dx + dw, dx).into_owned(),
            phi_eps: theta.rows(2 * dx + dw, dx).into_owned(),
            rho_work: None,
        }
    }

    pub fn to_vec(&self) -> DVector<f64> {
        let v: Vec<f64> =
            self.phi.iter().chain(self.phi_alpha.iter()).chain(self.phi_eps.iter()).cloned().collect();
        DVector::from_vec(v)
    }
}
