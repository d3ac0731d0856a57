//! Shared numerical kernels: normal distribution functions, SPD algebra,
//! the Kronecker-structured error-component inverse, MVN sampling, seeded
//! RNG streams and a finite-difference harness.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{PanelError, Result};

pub const TOL_PSD: f64 = 1e-10;
pub const TOL_RANK: f64 = 1e-8;

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

pub fn norm_pdf(x: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// ln Φ(x), finite far into the lower tail.
pub fn log_norm_cdf(x: f64) -> f64 {
    if x > -30.0 {
        norm_cdf(x).ln()
    } else {
        let x2 = x * x;
        -0.5 * x2 - (-x).ln() - LN_SQRT_2PI + (1.0 - 1.0 / x2 + 3.0 / (x2 * x2)).ln()
    }
}

/// Inverse Mills ratio φ(x)/Φ(x), stable for very negative x.
pub fn mills(x: f64) -> f64 {
    if x > -30.0 {
        norm_pdf(x) / norm_cdf(x)
    } else {
        let x2 = x * x;
        -x / (1.0 - 1.0 / x2 + 3.0 / (x2 * x2) - 15.0 / (x2 * x2 * x2))
    }
}

/// Φ⁻¹(p). A library starting value polished by two Newton steps.
pub fn norm_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(PanelError::Domain(format!("normal quantile needs p in (0,1), got {p}")));
    }
    let mut x = -std::f64::consts::SQRT_2 * statrs::function::erf::erfc_inv(2.0 * p);
    for _ in 0..2 {
        let d = norm_pdf(x);
        if d < 1e-300 {
            break;
        }
        // work on the smaller tail so the residual keeps its digits
        let r = if x < 0.0 { norm_cdf(x) - p } else { (1.0 - p) - norm_cdf(-x) };
        x -= r / d;
    }
    Ok(x)
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Eigenvalue clipping onto {A : λ_min(A) ≥ floor}.
pub fn psd_clip(a: &DMatrix<f64>, floor: f64) -> (DMatrix<f64>, bool) {
    let eig = SymmetricEigen::new(symmetrize(a));
    let clipped = eig.eigenvalues.iter().any(|&l| l < floor);
    if !clipped {
        return (symmetrize(a), false);
    }
    let vals = eig.eigenvalues.map(|l| l.max(floor));
    let out = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    (symmetrize(&out), true)
}

/// Symmetric positive definite matrix with a cached factorization:
/// Cholesky when it succeeds, otherwise an eigendecomposition (which still
/// requires every eigenvalue above `TOL_PSD` relative to the largest).
#[derive(Clone, Debug)]
pub struct Spd {
    pub mat: DMatrix<f64>,
    inv: DMatrix<f64>,
    logdet: f64,
}

impl Spd {
    pub fn new(a: &DMatrix<f64>) -> Result<Spd> {
        if !a.is_square() {
            return Err(PanelError::Domain("SPD matrix must be square".into()));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(PanelError::Domain("non-finite entry in SPD matrix".into()));
        }
        let a = symmetrize(a);
        if let Some(ch) = Cholesky::new(a.clone()) {
            let l = ch.l();
            let logdet = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
            if logdet.is_finite() {
                let inv = symmetrize(&ch.inverse());
                return Ok(Spd { mat: a, inv, logdet });
            }
        }
        let eig = SymmetricEigen::new(a.clone());
        let lmax = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
        if eig.eigenvalues.iter().any(|&l| !(l > TOL_PSD * lmax.max(1.0))) {
            return Err(PanelError::Domain("matrix is not positive definite".into()));
        }
        let inv = &eig.eigenvectors
            * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l))
            * eig.eigenvectors.transpose();
        let logdet = eig.eigenvalues.iter().map(|l| l.ln()).sum();
        Ok(Spd { mat: a, inv: symmetrize(&inv), logdet })
    }

    pub fn inverse(&self) -> &DMatrix<f64> {
        &self.inv
    }

    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        &self.inv * b
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        &self.inv * b
    }
}

/// Solve a symmetric (possibly semidefinite) normal-equations system,
/// raising `Rank` when the matrix is numerically singular. Conditioning is
/// judged after scaling to unit diagonal so that column units do not matter.
pub fn solve_normal(a: &DMatrix<f64>, b: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    let a = symmetrize(a);
    let k = a.nrows();
    let singular = || PanelError::Rank(format!("{what}: normal-equations matrix is singular"));
    if a.iter().any(|v| !v.is_finite()) {
        return Err(singular());
    }
    let d = a.diagonal();
    if d.iter().any(|&v| !(v > 0.0)) {
        return Err(singular());
    }
    let s = d.map(|v| 1.0 / v.sqrt());
    let scaled = DMatrix::from_fn(k, k, |r, c| a[(r, c)] * s[r] * s[c]);
    let eig = SymmetricEigen::new(scaled.clone());
    let lmax = eig.eigenvalues.iter().cloned().fold(0.0_f64, |m, v| m.max(v.abs()));
    let lmin = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(lmax > 0.0) || lmin <= TOL_RANK * TOL_RANK * lmax {
        return Err(singular());
    }
    let bs = b.component_mul(&s);
    let sol = match Cholesky::new(scaled) {
        Some(ch) => ch.solve(&bs),
        None => {
            let vt = eig.eigenvectors.transpose() * &bs;
            let w = DVector::from_iterator(vt.len(), vt.iter().zip(eig.eigenvalues.iter()).map(|(v, l)| v / l));
            &eig.eigenvectors * w
        }
    };
    Ok(sol.component_mul(&s))
}

/// Least squares of y on the columns of x via normal equations.
pub fn ols(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    solve_normal(&(x.transpose() * x), &(x.transpose() * y), "ols")
}

/// Applicator for Ω_u(T)⁻¹ = K_T⊗Σ⁻¹ + J_T⊗Σ_(T)⁻¹ where
/// Ω_u(T) = I_T⊗Σ + E_T⊗Λ, Σ_(T) = Σ + TΛ, J_T = E_T/T and K_T = I_T − J_T.
#[derive(Clone, Debug)]
pub struct KronInverse {
    pub t: usize,
    pub sigma: Spd,
    pub sigma_t: Spd,
}

impl KronInverse {
    pub fn new(sigma: &DMatrix<f64>, lambda: &DMatrix<f64>, t: usize) -> Result<KronInverse> {
        if sigma.shape() != lambda.shape() {
            return Err(PanelError::Domain("Σ and Λ shapes differ".into()));
        }
        let sigma_spd = Spd::new(sigma)?;
        let sigma_t = Spd::new(&(sigma + lambda * t as f64))?;
        Ok(KronInverse { t, sigma: sigma_spd, sigma_t })
    }

    /// ln|Ω_u(T)| = ln|Σ_(T)| + (T−1) ln|Σ|.
    pub fn logdet(&self) -> f64 {
        self.sigma_t.logdet() + (self.t as f64 - 1.0) * self.sigma.logdet()
    }

    /// Ω_u⁻¹ applied to the m×T matrix whose columns are the period blocks.
    pub fn apply(&self, u: &DMatrix<f64>) -> DMatrix<f64> {
        let ubar = u.column_mean();
        let mut out = self.sigma.inverse() * u;
        let a = self.sigma.inverse() * &ubar;
        let b = self.sigma_t.inverse() * &ubar;
        for mut c in out.column_iter_mut() {
            c -= &a;
            c += &b;
        }
        out
    }

    /// Dense Ω_u⁻¹ (mT×mT), period-major blocks. Test sized only.
    pub fn dense(&self) -> DMatrix<f64> {
        let m = self.sigma.mat.nrows();
        let t = self.t;
        let tf = t as f64;
        let mut out = DMatrix::zeros(m * t, m * t);
        for s in 0..t {
            for r in 0..t {
                let k = if s == r { 1.0 - 1.0 / tf } else { -1.0 / tf };
                let blk = self.sigma.inverse() * k + self.sigma_t.inverse() * (1.0 / tf);
                out.view_mut((s * m, r * m), (m, m)).copy_from(&blk);
            }
        }
        out
    }
}

/// Number of free elements of an m×m symmetric matrix.
pub fn vech_len(m: usize) -> usize {
    m * (m + 1) / 2
}

/// (row, col) pairs of the vech ordering: column-major lower triangle.
pub fn vech_index(m: usize) -> Vec<(usize, usize)> {
    let mut idx = Vec::with_capacity(vech_len(m));
    for c in 0..m {
        for r in c..m {
            idx.push((r, c));
        }
    }
    idx
}

pub fn vech(a: &DMatrix<f64>) -> DVector<f64> {
    let idx = vech_index(a.nrows());
    DVector::from_iterator(idx.len(), idx.iter().map(|&(r, c)| a[(r, c)]))
}

pub fn unvech(v: &[f64], m: usize) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(m, m);
    for (k, &(r, c)) in vech_index(m).iter().enumerate() {
        a[(r, c)] = v[k];
        a[(c, r)] = v[k];
    }
    a
}

/// ∂A/∂vech(A)_p for symmetric A: ones at (r,c) and (c,r).
pub fn sym_basis(m: usize, p: usize) -> DMatrix<f64> {
    let (r, c) = vech_index(m)[p];
    let mut e = DMatrix::zeros(m, m);
    e[(r, c)] = 1.0;
    e[(c, r)] = 1.0;
    e
}

/// Column-major vec.
pub fn vec_of(a: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(a.as_slice())
}

/// Independent, reproducible RNG stream `stream` under `master` seed.
pub fn stream_rng(master: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream);
    rng
}

/// Multivariate normal sampler through a Cholesky (eigen fallback) root.
#[derive(Clone, Debug)]
pub struct MvnSampler {
    mean: DVector<f64>,
    root: DMatrix<f64>,
}

impl MvnSampler {
    pub fn new(mean: DVector<f64>, cov: &DMatrix<f64>) -> Result<MvnSampler> {
        if cov.nrows() != mean.len() || !cov.is_square() {
            return Err(PanelError::Domain("MVN mean/covariance dimension mismatch".into()));
        }
        let root = match Cholesky::new(symmetrize(cov)) {
            Some(ch) => ch.l(),
            None => {
                let eig = SymmetricEigen::new(symmetrize(cov));
                if eig.eigenvalues.iter().any(|&l| l < -1e-12) {
                    return Err(PanelError::Domain("MVN covariance is not PSD".into()));
                }
                &eig.eigenvectors * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()))
            }
        };
        Ok(MvnSampler { mean, root })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let e = DVector::from_fn(self.dim(), |_, _| StandardNormal.sample(rng));
        &self.mean + &self.root * e
    }
}

pub fn std_normal_draw<R: rand::Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Step size cbrt(ε)·max(1,|x|).
pub fn fd_step(x: f64) -> f64 {
    f64::EPSILON.cbrt() * x.abs().max(1.0)
}

/// Central-difference gradient. With `richardson`, the h and h/2 estimates
/// are combined to cancel the O(h²) term.
pub fn finite_diff<F: Fn(&DVector<f64>) -> f64>(f: F, x: &DVector<f64>, richardson: bool) -> DVector<f64> {
    let jac = finite_diff_jacobian(|v| DVector::from_element(1, f(v)), x, richardson);
    jac.row(0).transpose()
}

/// Central-difference Jacobian (rows = outputs, cols = inputs).
pub fn finite_diff_jacobian<F: Fn(&DVector<f64>) -> DVector<f64>>(
    f: F,
    x: &DVector<f64>,
    richardson: bool,
) -> DMatrix<f64> {
    let central = |j: usize, h: f64| {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        (f(&xp) - f(&xm)) / (2.0 * h)
    };
    let f0 = f(x);
    let mut jac = DMatrix::zeros(f0.len(), x.len());
    for j in 0..x.len() {
        let h = fd_step(x[j]);
        let col = if richardson {
            let d1 = central(j, h);
            let d2 = central(j, h / 2.0);
            (d2 * 4.0 - d1) / 3.0
        } else {
            central(j, h)
        };
        jac.set_column(j, &col);
    }
    jac
}

/// Scientific notation with 17 significant digits, enough to round-trip any f64.
pub fn fmt_sig17(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}
