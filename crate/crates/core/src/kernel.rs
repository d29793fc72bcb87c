//! The BFGS operator acting on a paired approximation `(G, H = G⁻¹)`, plus
//! the potentials used to measure how close `G` is to a target operator.

use log::debug;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{self, SpdMatrix, UpperTriangular};

/// Directions with `uᵀGu` or `uᵀAu` at or below this fraction of `‖u‖²` are
/// rejected.
pub const DIRECTION_TOL: f64 = 1e-14;

/// Secant pairs with `sᵀy ≤ CURVATURE_TOL · ‖s‖‖y‖` are skipped.
pub const CURVATURE_TOL: f64 = 1e-12;

/// `‖GH − I‖_F / √d` above which `H` is recomputed from `G`.
pub const INVERSE_DRIFT_TOL: f64 = 1e-7;

/// Hessian approximation `G` together with its inverse `H`, both updated in
/// `O(d²)` per rank-two correction.
#[derive(Clone, Debug)]
pub struct HessianApproxState {
    g: DMatrix<f64>,
    h: DMatrix<f64>,
    update_count: usize,
    refactorizations: usize,
}

impl HessianApproxState {
    /// `G = scale · I`.
    pub fn scaled_identity(dim: usize, scale: f64) -> Self {
        assert!(scale > 0.0, "initial approximation must be positive definite");
        Self {
            g: DMatrix::identity(dim, dim) * scale,
            h: DMatrix::identity(dim, dim) / scale,
            update_count: 0,
            refactorizations: 0,
        }
    }

    pub fn from_spd(g: &SpdMatrix) -> Self {
        Self {
            g: g.entries().clone(),
            h: g.inverse(),
            update_count: 0,
            refactorizations: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.g.nrows()
    }

    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn update_count(&self) -> usize {
        self.update_count
    }

    pub fn refactorizations(&self) -> usize {
        self.refactorizations
    }

    /// Factors `G`; fails if it has drifted out of the SPD cone.
    pub fn g_spd(&self) -> Result<SpdMatrix> {
        SpdMatrix::new(self.g.clone())
    }

    /// `H v`, i.e. `G⁻¹ v`.
    pub fn apply_inverse(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.h * v
    }

    /// `‖G H − I‖_F`.
    pub fn inverse_drift(&self) -> f64 {
        let d = self.dim();
        (&self.g * &self.h - DMatrix::<f64>::identity(d, d)).norm()
    }

    /// Recomputes `H` from a fresh factorization of `G`.
    pub fn refresh_inverse(&mut self) -> Result<()> {
        self.h = self.g_spd()?.inverse();
        self.refactorizations += 1;
        Ok(())
    }

    /// Measures `‖GH − I‖_F` and refactors when it exceeds
    /// `INVERSE_DRIFT_TOL · √d`. Returns the drift measured before any repair.
    pub fn monitor_drift(&mut self) -> Result<f64> {
        let drift = self.inverse_drift();
        if !(drift <= INVERSE_DRIFT_TOL * (self.dim() as f64).sqrt()) {
            debug!("inverse drift {drift:e}, refactoring");
            self.refresh_inverse()?;
        }
        Ok(drift)
    }

    /// `G₊ = G − GuuᵀG/(uᵀGu) + (Au)(Au)ᵀ/(uᵀAu)`, with `H` updated by the
    /// matching product form. On a degenerate direction the state is left
    /// untouched.
    pub fn bfgs_update(&mut self, au: &DVector<f64>, u: &DVector<f64>) -> Result<()> {
        let d = self.dim();
        if u.len() != d || au.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: if u.len() != d { u.len() } else { au.len() },
            });
        }
        let uu = u.norm_squared();
        let gu = &self.g * u;
        let ugu = u.dot(&gu);
        let uau = u.dot(au);
        if !(ugu > DIRECTION_TOL * uu) {
            debug!("skipping update: uᵀGu = {ugu:e}");
            return Err(Error::DegenerateDirection { curvature: ugu });
        }
        if !(uau > DIRECTION_TOL * uu) {
            debug!("skipping update: uᵀAu = {uau:e}");
            return Err(Error::DegenerateDirection { curvature: uau });
        }

        // G ← G − gu guᵀ / ugu + au auᵀ / uau
        let inv_ugu = 1.0 / ugu;
        let inv_uau = 1.0 / uau;
        for j in 0..d {
            for i in 0..d {
                self.g[(i, j)] += au[i] * au[j] * inv_uau - gu[i] * gu[j] * inv_ugu;
            }
        }

        // H ← (I − ρ u auᵀ) H (I − ρ au uᵀ) + ρ u uᵀ, ρ = 1/uᵀAu
        //   = H − ρ (u wᵀ + w uᵀ) + (ρ² auᵀ w + ρ) u uᵀ,  w = H au
        let w = &self.h * au;
        let rho = inv_uau;
        let coef = rho * rho * au.dot(&w) + rho;
        for j in 0..d {
            for i in 0..d {
                self.h[(i, j)] += coef * u[i] * u[j] - rho * (u[i] * w[j] + w[i] * u[j]);
            }
        }
        self.update_count += 1;
        Ok(())
    }

    /// Classic secant update: the BFGS operator with `Au = y` along `u = s`.
    pub fn bfgs_update_secant(&mut self, s: &DVector<f64>, y: &DVector<f64>) -> Result<()> {
        let sy = s.dot(y);
        if !(sy > CURVATURE_TOL * s.norm() * y.norm()) {
            debug!("skipping secant update: sᵀy = {sy:e}");
            return Err(Error::CurvatureSkip { sy });
        }
        self.bfgs_update(y, s)
    }

    /// `G ← factor·G`, `H ← H/factor`.
    pub fn scale(&mut self, factor: f64) -> Result<()> {
        if !(factor >= 1.0) || !factor.is_finite() {
            return Err(Error::Domain(format!("scaling factor {factor} < 1")));
        }
        if factor != 1.0 {
            self.g *= factor;
            self.h /= factor;
        }
        Ok(())
    }
}

/// Trace potential `σ(A, G) = Tr(A⁻¹G) − d`.
pub fn sigma(a: &SpdMatrix, g: &DMatrix<f64>) -> Result<f64> {
    Ok(linalg::trace_solve_dense(a, g)? - a.dim() as f64)
}

/// `θ(A, G, u) = √( uᵀ(G−A)A⁻¹(G−A)u / uᵀGA⁻¹Gu )`: discrepancy between `G`
/// and `A` along `u`, measured in the `A⁻¹` norm.
pub fn theta(a: &SpdMatrix, g: &DMatrix<f64>, u: &DVector<f64>) -> Result<f64> {
    let gu = g * u;
    let diff = &gu - a.mul_vec(u);
    let num = a.inv_quad_form(&diff)?;
    let den = a.inv_quad_form(&gu)?;
    if !(den > 1e-300) {
        return Err(Error::DegenerateDirection { curvature: den });
    }
    Ok((num / den).sqrt())
}

/// `ψ(A, G) = σ(A, G) − ln Det(A⁻¹G)`.
pub fn psi(a: &SpdMatrix, g: &SpdMatrix) -> Result<f64> {
    Ok(sigma(a, g.entries())? - (g.log_det() - a.log_det()))
}

/// `ω(t) = t − ln(1 + t)`.
pub fn omega(t: f64) -> Result<f64> {
    if !(t > -1.0 + 1e-12) {
        return Err(Error::Domain(format!("omega undefined at t = {t}")));
    }
    Ok(t - t.ln_1p())
}

/// Access to a target operator for greedy coordinate selection: its diagonal
/// and, on demand, single columns `A eᵢ`.
pub struct DirectionQuery<'a> {
    a_diag: DVector<f64>,
    a_column: Box<dyn Fn(usize) -> DVector<f64> + 'a>,
}

impl<'a> DirectionQuery<'a> {
    pub fn new(
        a_diag: DVector<f64>,
        a_column: impl Fn(usize) -> DVector<f64> + 'a,
    ) -> Result<Self> {
        if let Some(i) = a_diag.iter().position(|v| !(*v > 0.0)) {
            return Err(Error::NotPositiveDefinite {
                index: i,
                pivot: a_diag[i],
            });
        }
        Ok(Self {
            a_diag,
            a_column: Box::new(a_column),
        })
    }

    pub fn from_spd(a: &'a SpdMatrix) -> Self {
        Self {
            a_diag: a.diagonal(),
            a_column: Box::new(move |i| a.entries().column(i).into_owned()),
        }
    }

    pub fn a_diag(&self) -> &DVector<f64> {
        &self.a_diag
    }

    pub fn column(&self, i: usize) -> DVector<f64> {
        (self.a_column)(i)
    }
}

/// Coordinate `i` maximizing `G_ii / A_ii`; the lowest index wins ties.
pub fn greedy_direction(query: &DirectionQuery<'_>, g_diag: &DVector<f64>) -> usize {
    let mut best = 0;
    let mut best_ratio = f64::NEG_INFINITY;
    for (i, (g, a)) in g_diag.iter().zip(query.a_diag.iter()).enumerate() {
        let ratio = g / a;
        if ratio > best_ratio {
            best = i;
            best_ratio = ratio;
        }
    }
    best
}

/// `Rᵀũ` with `ũ ~ N(0, I)` drawn from `rng`.
pub fn random_direction<R: Rng + ?Sized>(r: &UpperTriangular, rng: &mut R) -> DVector<f64> {
    r.tr_mul_vec(&standard_normal(r.dim(), rng))
}

pub fn standard_normal<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Greedy update: direction from `greedy_direction`, `Au` from one column.
/// Returns the chosen coordinate.
pub fn greedy_update(state: &mut HessianApproxState, query: &DirectionQuery<'_>) -> Result<usize> {
    let i = greedy_direction(query, &state.g().diagonal());
    let mut e = DVector::zeros(state.dim());
    e[i] = 1.0;
    state.bfgs_update(&query.column(i), &e)?;
    Ok(i)
}
