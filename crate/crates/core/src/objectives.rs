//! Objective oracles: the strongly convex quadratic `½xᵀAx + bᵀx` and
//! ℓ₂-regularized logistic regression over unit-norm rows.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{self, SpdMatrix};

/// Strong convexity `mu`, gradient Lipschitz constant `lip`, strong
/// self-concordance constant `sc` and dimension.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemConstants {
    pub mu: f64,
    pub lip: f64,
    pub sc: f64,
    pub dim: usize,
}

impl ProblemConstants {
    pub fn new(mu: f64, lip: f64, sc: f64, dim: usize) -> Result<Self> {
        if !(mu > 0.0) || !(lip >= mu) || !(sc >= 0.0) || dim == 0 {
            return Err(Error::Domain(format!(
                "invalid constants mu={mu} L={lip} M={sc} d={dim}"
            )));
        }
        Ok(Self { mu, lip, sc, dim })
    }

    pub fn kappa(&self) -> f64 {
        self.lip / self.mu
    }
}

/// What the solvers may ask of an objective.
pub trait Objective: Send + Sync {
    fn dim(&self) -> usize;

    fn value(&self, x: &DVector<f64>) -> f64;

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64>;

    /// Gradient at `x_new = x_old + step`, given the gradient at `x_old`.
    fn gradient_after_step(
        &self,
        x_new: &DVector<f64>,
        _grad_old: &DVector<f64>,
        _step: &DVector<f64>,
    ) -> DVector<f64> {
        self.gradient(x_new)
    }

    fn hess_vec(&self, x: &DVector<f64>, v: &DVector<f64>) -> DVector<f64>;

    fn hess_diag(&self, x: &DVector<f64>) -> DVector<f64>;

    /// Dense Hessian when the oracle can form it more cheaply than `d`
    /// Hessian-vector products.
    fn hess_full(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }

    fn constants(&self) -> ProblemConstants;

    /// The constant Hessian of a quadratic objective.
    fn fixed_hessian(&self) -> Option<&SpdMatrix> {
        None
    }

    /// Short content hash identifying the problem data.
    fn fingerprint(&self) -> String;
}

/// `∇²f(x)` as an SPD matrix, from `hess_full` or `d` Hessian-vector
/// products.
pub fn hessian(oracle: &dyn Objective, x: &DVector<f64>) -> Result<SpdMatrix> {
    if let Some(a) = oracle.fixed_hessian() {
        return Ok(a.clone());
    }
    let h = match oracle.hess_full(x) {
        Some(h) => h,
        None => {
            let d = oracle.dim();
            let mut h = DMatrix::zeros(d, d);
            let mut e = DVector::zeros(d);
            for i in 0..d {
                e[i] = 1.0;
                h.set_column(i, &oracle.hess_vec(x, &e));
                e[i] = 0.0;
            }
            h
        }
    };
    SpdMatrix::new(h)
}

/// `‖v‖_z = √(vᵀ∇²f(z)v)`.
pub fn local_norm(oracle: &dyn Objective, z: &DVector<f64>, v: &DVector<f64>) -> f64 {
    v.dot(&oracle.hess_vec(z, v)).max(0.0).sqrt()
}

/// Newton decrement `λ_f(x) = √(∇fᵀ ∇²f⁻¹ ∇f)`.
pub fn newton_decrement(oracle: &dyn Objective, x: &DVector<f64>) -> Result<f64> {
    let g = oracle.gradient(x);
    newton_decrement_at(&hessian(oracle, x)?, &g)
}

/// Newton decrement from an already assembled Hessian and gradient.
pub fn newton_decrement_at(hess: &SpdMatrix, grad: &DVector<f64>) -> Result<f64> {
    Ok(hess.inv_quad_form(grad)?.sqrt())
}

/// Composite Simpson approximation of `∫₀¹ ∇²f(x + τs) dτ` on `nodes` points.
pub fn averaged_hessian(
    oracle: &dyn Objective,
    x: &DVector<f64>,
    s: &DVector<f64>,
    nodes: usize,
) -> Result<SpdMatrix> {
    if nodes < 3 || nodes.is_multiple_of(2) {
        return Err(Error::Domain(format!(
            "Simpson quadrature needs an odd node count ≥ 3, got {nodes}"
        )));
    }
    if let Some(a) = oracle.fixed_hessian() {
        return Ok(a.clone());
    }
    let d = oracle.dim();
    let h = 1.0 / (nodes - 1) as f64;
    let mut acc = DMatrix::<f64>::zeros(d, d);
    for k in 0..nodes {
        let weight = if k == 0 || k == nodes - 1 {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let point = x + s * (k as f64 * h);
        acc += hessian(oracle, &point)?.entries() * weight;
    }
    SpdMatrix::new(acc * (h / 3.0))
}

fn hash_floats<'a>(hasher: &mut Sha256, values: impl Iterator<Item = &'a f64>) {
    for v in values {
        hasher.update(v.to_le_bytes());
    }
}

fn finish_hash(hasher: Sha256) -> String {
    hex::encode(&hasher.finalize()[..8])
}

/// `f(x) = ½xᵀAx + bᵀx` with `μI ⪯ A ⪯ LI`.
#[derive(Clone, Debug)]
pub struct QuadraticProblem {
    a: SpdMatrix,
    b: DVector<f64>,
    mu: f64,
    lip: f64,
}

impl QuadraticProblem {
    /// Takes `μ` and `L` as the extreme eigenvalues of `A`.
    pub fn new(a: SpdMatrix, b: DVector<f64>) -> Result<Self> {
        if b.len() != a.dim() {
            return Err(Error::DimensionMismatch {
                expected: a.dim(),
                found: b.len(),
            });
        }
        let eig = SymmetricEigen::new(a.entries().clone()).eigenvalues;
        let mu = eig.iter().copied().fold(f64::INFINITY, f64::min);
        let lip = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self { a, b, mu, lip })
    }

    /// Uses caller-supplied bounds, checked against 200 steps of power and
    /// inverse power iteration at relative tolerance 1e-6.
    pub fn with_bounds(a: SpdMatrix, b: DVector<f64>, mu: f64, lip: f64) -> Result<Self> {
        if b.len() != a.dim() {
            return Err(Error::DimensionMismatch {
                expected: a.dim(),
                found: b.len(),
            });
        }
        let (lo, hi) = linalg::power_iteration_bounds(&a, 200, 1e-6);
        if lo < mu * (1.0 - 1e-6) || hi > lip * (1.0 + 1e-6) || !(mu > 0.0) || mu > lip {
            return Err(Error::Domain(format!(
                "claimed spectrum [{mu}, {lip}] does not contain estimates [{lo}, {hi}]"
            )));
        }
        Ok(Self { a, b, mu, lip })
    }

    pub fn a(&self) -> &SpdMatrix {
        &self.a
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    /// `x* = −A⁻¹b`.
    pub fn minimizer(&self) -> DVector<f64> {
        -self.a.solve(&self.b).expect("dimension checked at construction")
    }
}

impl Objective for QuadraticProblem {
    fn dim(&self) -> usize {
        self.a.dim()
    }

    fn value(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&self.a.mul_vec(x)) + self.b.dot(x)
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        self.a.mul_vec(x) + &self.b
    }

    /// `∇f(x + s) = ∇f(x) + As` holds exactly for a quadratic; updating the
    /// gradient this way avoids the cancellation in `Ax + b` near `x*`.
    fn gradient_after_step(
        &self,
        _x_new: &DVector<f64>,
        grad_old: &DVector<f64>,
        step: &DVector<f64>,
    ) -> DVector<f64> {
        grad_old + self.a.mul_vec(step)
    }

    fn hess_vec(&self, _x: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        self.a.mul_vec(v)
    }

    fn hess_diag(&self, _x: &DVector<f64>) -> DVector<f64> {
        self.a.diagonal()
    }

    fn hess_full(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(self.a.entries().clone())
    }

    fn constants(&self) -> ProblemConstants {
        ProblemConstants {
            mu: self.mu,
            lip: self.lip,
            sc: 0.0,
            dim: self.dim(),
        }
    }

    fn fixed_hessian(&self) -> Option<&SpdMatrix> {
        Some(&self.a)
    }

    fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"quadratic");
        h.update((self.dim() as u64).to_le_bytes());
        hash_floats(&mut h, self.a.entries().iter());
        hash_floats(&mut h, self.b.iter());
        finish_hash(h)
    }
}

/// `max |d/dt σ(t)(1 − σ(t))| = 1/(6√3)`.
const LOGISTIC_WEIGHT_SLOPE: f64 = 0.096_225_044_864_937_63;

/// `f(x) = (1/N) Σ ln(1 + exp(−yᵢ zᵢᵀx)) + (μ/2)‖x‖²`.
#[derive(Clone, Debug)]
pub struct LogisticProblem {
    z: DMatrix<f64>,
    y: DVector<f64>,
    mu_reg: f64,
    sc: f64,
}

impl LogisticProblem {
    /// Rows of `z` must have unit norm (±1e-10) and labels must be ±1. The
    /// self-concordance constant defaults to `default_sc`.
    pub fn new(z: DMatrix<f64>, y: DVector<f64>, mu_reg: f64) -> Result<Self> {
        if z.nrows() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: z.nrows(),
                found: y.len(),
            });
        }
        if z.nrows() == 0 {
            return Err(Error::EmptyDataset("logistic problem".into()));
        }
        if !(mu_reg > 0.0) {
            return Err(Error::Domain(format!(
                "regularization must be positive, got {mu_reg}"
            )));
        }
        for (i, row) in z.row_iter().enumerate() {
            let n = row.norm();
            if (n - 1.0).abs() > 1e-10 {
                return Err(Error::Domain(format!("row {i} has norm {n}, expected 1")));
            }
        }
        if let Some(i) = y.iter().position(|v| *v != 1.0 && *v != -1.0) {
            return Err(Error::Domain(format!("label {} at row {i} is not ±1", y[i])));
        }
        let sc = Self::default_sc(&z, mu_reg);
        Ok(Self { z, y, mu_reg, sc })
    }

    /// Lipschitz-Hessian bound on the strong self-concordance constant:
    /// `M = (1/(6√3)) · R³ / μ^{3/2}` with `R = maxᵢ ‖zᵢ‖`.
    pub fn default_sc(z: &DMatrix<f64>, mu_reg: f64) -> f64 {
        let r = z.row_iter().map(|row| row.norm()).fold(0.0, f64::max);
        LOGISTIC_WEIGHT_SLOPE * r.powi(3) / mu_reg.powf(1.5)
    }

    pub fn with_sc(mut self, sc: f64) -> Result<Self> {
        if !(sc >= 0.0) {
            return Err(Error::Domain(format!("M must be non-negative, got {sc}")));
        }
        self.sc = sc;
        Ok(self)
    }

    pub fn n_samples(&self) -> usize {
        self.z.nrows()
    }

    pub fn mu_reg(&self) -> f64 {
        self.mu_reg
    }

    /// Per-sample curvature weights `σ(mᵢ)σ(−mᵢ)` at `x`.
    fn weights(&self, x: &DVector<f64>) -> DVector<f64> {
        let zx = &self.z * x;
        zx.map(|t| sigmoid(t) * sigmoid(-t))
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eᵗ)`.
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

impl Objective for LogisticProblem {
    fn dim(&self) -> usize {
        self.z.ncols()
    }

    fn value(&self, x: &DVector<f64>) -> f64 {
        let margins = (&self.z * x).component_mul(&self.y);
        let loss: f64 = margins.iter().map(|m| softplus(-m)).sum();
        loss / self.n_samples() as f64 + 0.5 * self.mu_reg * x.norm_squared()
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let margins = (&self.z * x).component_mul(&self.y);
        let coef = DVector::from_fn(self.n_samples(), |i, _| {
            -self.y[i] * sigmoid(-margins[i])
        });
        self.z.tr_mul(&coef) / self.n_samples() as f64 + x * self.mu_reg
    }

    fn hess_vec(&self, x: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let w = self.weights(x);
        let zv = (&self.z * v).component_mul(&w);
        self.z.tr_mul(&zv) / self.n_samples() as f64 + v * self.mu_reg
    }

    fn hess_diag(&self, x: &DVector<f64>) -> DVector<f64> {
        let w = self.weights(x);
        let n = self.n_samples() as f64;
        DVector::from_fn(self.dim(), |j, _| {
            self.z
                .column(j)
                .iter()
                .zip(w.iter())
                .map(|(z, w)| w * z * z)
                .sum::<f64>()
                / n
                + self.mu_reg
        })
    }

    fn hess_full(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        let w = self.weights(x);
        let mut scaled = self.z.clone();
        for (i, mut row) in scaled.row_iter_mut().enumerate() {
            row *= w[i];
        }
        let d = self.dim();
        let h = self.z.tr_mul(&scaled) / self.n_samples() as f64
            + DMatrix::<f64>::identity(d, d) * self.mu_reg;
        Some(linalg::symmetrize(h))
    }

    fn constants(&self) -> ProblemConstants {
        ProblemConstants {
            mu: self.mu_reg,
            lip: 0.25 + self.mu_reg,
            sc: self.sc,
            dim: self.dim(),
        }
    }

    fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"logistic");
        h.update((self.n_samples() as u64).to_le_bytes());
        h.update((self.dim() as u64).to_le_bytes());
        hash_floats(&mut h, self.z.iter());
        hash_floats(&mut h, self.y.iter());
        h.update(self.mu_reg.to_le_bytes());
        finish_hash(h)
    }
}
