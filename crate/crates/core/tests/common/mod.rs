#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use panelcf::data::PanelDataset;
use panelcf::numerics::stream_rng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    stream_rng(seed, 17)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// AᵀA/m + c·I with A standard normal.
pub fn random_spd(rng: &mut ChaCha8Rng, m: usize, ridge: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(m, m, |_, _| normal(rng));
    (a.transpose() * &a) / m as f64 + DMatrix::identity(m, m) * ridge
}

pub struct SimOpts {
    pub dx: usize,
    pub dz: usize,
    pub dw: usize,
    /// Loading of α on z̄ (drives correlated effects).
    pub corr: f64,
    /// Endogeneity: Cov(ζ, ε).
    pub endog: f64,
}

impl Default for SimOpts {
    fn default() -> Self {
        SimOpts { dx: 1, dz: 1, dw: 0, corr: 0.5, endog: 0.5 }
    }
}

/// Continuous-instrument panel: x = πz + α + ε, y = 1{x′φ + 0.5·ᾱ + ζ > 0}.
pub fn sim_panel(seed: u64, n: usize, t: usize, o: &SimOpts) -> PanelDataset {
    let mut r = rng(seed);
    let nt = n * t;
    let z = DMatrix::from_fn(nt, o.dz, |_, _| normal(&mut r));
    let w = DMatrix::from_fn(nt, o.dw, |_, _| normal(&mut r));
    let pi = DMatrix::from_fn(o.dx, o.dz, |i, j| if i == j { 1.0 } else { 0.3 });
    let mut x = DMatrix::zeros(nt, o.dx);
    let mut y = DVector::zeros(nt);
    for i in 0..n {
        let zbar: f64 = (0..t).map(|p| z.row(i * t + p).sum()).sum::<f64>() / t as f64;
        let alpha: Vec<f64> = (0..o.dx).map(|_| o.corr * zbar + normal(&mut r)).collect();
        for p in 0..t {
            let k = i * t + p;
            let zeta = normal(&mut r);
            let mut idx = zeta + 0.5 * alpha[0];
            for j in 0..o.dx {
                let eps = o.endog * zeta + (1.0 - o.endog * o.endog).sqrt() * normal(&mut r);
                let mut v = alpha[j] + eps;
                for c in 0..o.dz {
                    v += pi[(j, c)] * z[(k, c)];
                }
                for c in 0..o.dw {
                    v += 0.2 * w[(k, c)];
                }
                x[(k, j)] = v;
                idx += if j == 0 { -0.7 * v } else { 0.3 * v };
            }
            for c in 0..o.dw {
                idx += 0.25 * w[(k, c)];
            }
            y[k] = (idx > 0.0) as u8 as f64;
        }
    }
    let ids = (0..n).map(|i| format!("u{i}")).collect();
    PanelDataset::new(ids, t, y, x, z, w).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-3)
}

pub fn max_rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let scale = b.amax().max(1e-8);
    (a - b).amax() / scale
}

/// E[a | X] = Cov(a, X) Var(X)⁻¹ (X − E X) by a dense LU solve.
pub fn mvn_condition(cov_ax: &DMatrix<f64>, var_x: &DMatrix<f64>, centred: &DVector<f64>) -> DVector<f64> {
    cov_ax * var_x.clone().lu().solve(centred).expect("Var(X) invertible")
}

/// Panel with d_x regressors, d_z = d_x + 1 instruments and an intercept,
/// together with a random reduced form (not fitted).
pub fn cf_fixture(seed: u64, n: usize, t: usize, dx: usize) -> (PanelDataset, panelcf::data::ReducedFormParams) {
    let o = SimOpts { dx, dz: dx + 1, ..Default::default() };
    let d = sim_panel(seed, n, t, &o).with_intercept();
    let mut r = rng(seed + 1000);
    let dq = d.dw() + d.dz();
    let pi = DMatrix::from_fn(dx, dq, |_, _| normal(&mut r));
    let mut pi_bar = DMatrix::from_fn(dx, dq, |_, _| normal(&mut r));
    pi_bar.column_mut(0).fill(0.0);
    let rf = panelcf::data::ReducedFormParams {
        pi,
        pi_bar,
        sigma_eps: random_spd(&mut r, dx, 0.2),
        lambda_alpha: random_spd(&mut r, dx, 0.1),
    };
    (d, rf)
}

/// Conditional mean of a_i = α_i − π̄q̄_i given X_i in the homoscedastic
/// system, stacking X_i period-major.
pub fn posterior_oracle(d: &PanelDataset, rf: &panelcf::data::ReducedFormParams, i: usize) -> DVector<f64> {
    let (t, m) = (d.t(), d.dx());
    let q = d.q();
    let qbar = d.unit_means_of(&q);
    let prior = &rf.pi_bar * qbar.row(i).transpose();
    let mut centred = DVector::zeros(m * t);
    for p in 0..t {
        let k = i * t + p;
        let v = d.x.row(k).transpose() - &rf.pi * q.row(k).transpose() - &prior;
        centred.rows_mut(p * m, m).copy_from(&v);
    }
    let var = DMatrix::from_fn(m * t, m * t, |r, c| {
        rf.lambda_alpha[(r % m, c % m)] + if r / m == c / m { rf.sigma_eps[(r % m, c % m)] } else { 0.0 }
    });
    let cov = DMatrix::from_fn(m, m * t, |r, c| rf.lambda_alpha[(r, c % m)]);
    mvn_condition(&cov, &var, &centred)
}

/// Scalar nonspherical case: E[a_i | X_i] with Var(X_i) = Ω + σ_a²11′.
pub fn nonspherical_oracle(
    d: &PanelDataset,
    rf: &panelcf::data::ReducedFormParams,
    om: &DMatrix<f64>,
    s2a: f64,
    i: usize,
) -> f64 {
    let t = d.t();
    let q = d.q();
    let qbar = d.unit_means_of(&q);
    let prior = (&rf.pi_bar * qbar.row(i).transpose())[0];
    let centred = DVector::from_fn(t, |p, _| d.x[(i * t + p, 0)] - (&rf.pi * q.row(i * t + p).transpose())[0] - prior);
    let var = om + DMatrix::from_element(t, t, s2a);
    mvn_condition(&DMatrix::from_element(1, t, s2a), &var, &centred)[0]
}

/// Random coefficients x_it = z_it′(ā + a_i) + ε_it: E[a_i | X_i].
pub fn random_coeff_oracle(d: &PanelDataset, abar: &DVector<f64>, sa: &DMatrix<f64>, s2: f64, i: usize) -> DVector<f64> {
    let t = d.t();
    let zi = d.z.rows(i * t, t).into_owned();
    let xi = d.x.rows(i * t, t).column(0).into_owned();
    let var = DMatrix::identity(t, t) * s2 + &zi * sa * zi.transpose();
    mvn_condition(&(sa * zi.transpose()), &var, &(xi - &zi * abar))
}
