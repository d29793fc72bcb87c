//! Dense symmetric linear algebra: SPD matrices with a cached Cholesky
//! factor, triangular solves, quadratic forms and trace-of-solve.
//!
//! Storage and products come from `nalgebra`; the factorization itself is
//! written out here so the pivot tolerance is under our control.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative pivot tolerance: a pivot `≤ PIVOT_TOL · max diag` is treated as
/// loss of positive definiteness.
pub const PIVOT_TOL: f64 = 1e-14;

/// Dense symmetric positive-definite matrix.
///
/// The entries are symmetrized on construction and the lower Cholesky factor
/// `L` (with `M = L Lᵀ`) is computed once and kept; a failed factorization
/// rejects the matrix.
#[derive(Clone, Debug)]
pub struct SpdMatrix {
    entries: DMatrix<f64>,
    lower: DMatrix<f64>,
}

impl SpdMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch {
                expected: m.nrows(),
                found: m.ncols(),
            });
        }
        let entries = symmetrize(m);
        let lower = cholesky_lower(&entries)?;
        Ok(Self { entries, lower })
    }

    pub fn identity(dim: usize) -> Self {
        Self::scaled_identity(dim, 1.0)
    }

    pub fn scaled_identity(dim: usize, scale: f64) -> Self {
        assert!(scale > 0.0, "scaled identity needs a positive scale");
        Self {
            entries: DMatrix::identity(dim, dim) * scale,
            lower: DMatrix::identity(dim, dim) * scale.sqrt(),
        }
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn into_entries(self) -> DMatrix<f64> {
        self.entries
    }

    /// Lower-triangular `L` with `self = L Lᵀ`.
    pub fn lower_factor(&self) -> &DMatrix<f64> {
        &self.lower
    }

    pub fn diagonal(&self) -> DVector<f64> {
        self.entries.diagonal()
    }

    pub fn mul_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.entries * v
    }

    /// Solves `self · x = b` through the cached factor.
    pub fn solve(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.dim(), b.len())?;
        let z = self
            .lower
            .solve_lower_triangular(b)
            .expect("cholesky factor has a positive diagonal");
        Ok(self
            .lower
            .tr_solve_lower_triangular(&z)
            .expect("cholesky factor has a positive diagonal"))
    }

    /// `self⁻¹ · B` for a dense right-hand side.
    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim(self.dim(), b.nrows())?;
        let z = self
            .lower
            .solve_lower_triangular(b)
            .expect("cholesky factor has a positive diagonal");
        Ok(self
            .lower
            .tr_solve_lower_triangular(&z)
            .expect("cholesky factor has a positive diagonal"))
    }

    /// Explicit inverse, symmetrized.
    pub fn inverse(&self) -> DMatrix<f64> {
        let inv = self
            .solve_matrix(&DMatrix::identity(self.dim(), self.dim()))
            .expect("square identity has matching dimension");
        symmetrize(inv)
    }

    /// `uᵀ M⁻¹ u`, computed as `‖L⁻¹u‖²`.
    pub fn inv_quad_form(&self, u: &DVector<f64>) -> Result<f64> {
        check_dim(self.dim(), u.len())?;
        let z = self
            .lower
            .solve_lower_triangular(u)
            .expect("cholesky factor has a positive diagonal");
        Ok(z.norm_squared())
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.lower.diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }
}

/// Upper-triangular factor with strictly positive diagonal.
#[derive(Clone, Debug)]
pub struct UpperTriangular {
    entries: DMatrix<f64>,
}

impl UpperTriangular {
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        let d = entries.nrows();
        check_dim(d, entries.ncols())?;
        for i in 0..d {
            let pivot = entries[(i, i)];
            if !(pivot > 0.0) {
                return Err(Error::NotPositiveDefinite { index: i, pivot });
            }
            for j in 0..i {
                if entries[(i, j)] != 0.0 {
                    return Err(Error::Domain(format!(
                        "entry ({i},{j}) below the diagonal is nonzero"
                    )));
                }
            }
        }
        Ok(Self { entries })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            entries: DMatrix::identity(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    /// `Rᵀ v`.
    pub fn tr_mul_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        self.entries.tr_mul(v)
    }
}

/// `(M + Mᵀ) / 2`.
pub fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    let t = m.transpose();
    (m + t) * 0.5
}

fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}

/// Lower Cholesky factor of a symmetric matrix, rejecting pivots at or below
/// `PIVOT_TOL · max diag`.
pub fn cholesky_lower(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = m.nrows();
    check_dim(d, m.ncols())?;
    let max_diag = (0..d).map(|i| m[(i, i)]).fold(0.0_f64, f64::max);
    let floor = PIVOT_TOL * max_diag;
    let mut l = DMatrix::<f64>::zeros(d, d);
    for j in 0..d {
        let mut pivot = m[(j, j)];
        for k in 0..j {
            pivot -= l[(j, k)] * l[(j, k)];
        }
        if !(pivot > floor) || !pivot.is_finite() {
            return Err(Error::NotPositiveDefinite { index: j, pivot });
        }
        let ljj = pivot.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..d {
            let mut acc = m[(i, j)];
            for k in 0..j {
                acc -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = acc / ljj;
        }
    }
    Ok(l)
}

/// Upper-triangular `R` with `m⁻¹ = Rᵀ R`.
///
/// Factors the index-reversed matrix so that `m = U Uᵀ` with `U` upper, then
/// returns `R = U⁻¹`.
pub fn cholesky(m: &SpdMatrix) -> Result<UpperTriangular> {
    let d = m.dim();
    let rev = |i: usize| d - 1 - i;
    let reversed = DMatrix::from_fn(d, d, |i, j| m.entries()[(rev(i), rev(j))]);
    let lower = cholesky_lower(&reversed)?;
    let upper = DMatrix::from_fn(d, d, |i, j| lower[(rev(i), rev(j))]);
    let mut r = upper
        .solve_upper_triangular(&DMatrix::identity(d, d))
        .ok_or(Error::NotPositiveDefinite {
            index: 0,
            pivot: 0.0,
        })?;
    // Clear round-off below the diagonal.
    for j in 0..d {
        for i in (j + 1)..d {
            r[(i, j)] = 0.0;
        }
    }
    UpperTriangular::new(r)
}

pub fn solve(m: &SpdMatrix, b: &DVector<f64>) -> Result<DVector<f64>> {
    m.solve(b)
}

/// `uᵀ M u`.
pub fn quad_form(m: &SpdMatrix, u: &DVector<f64>) -> Result<f64> {
    check_dim(m.dim(), u.len())?;
    Ok(u.dot(&(m.entries() * u)))
}

/// `Tr(A⁻¹ G)`, evaluated as `Tr(L⁻¹ G L⁻ᵀ)` with `A = L Lᵀ`.
pub fn trace_solve(a: &SpdMatrix, g: &SpdMatrix) -> Result<f64> {
    trace_solve_dense(a, g.entries())
}

/// `Tr(A⁻¹ G)` for a symmetric `G` that has not been factored.
pub fn trace_solve_dense(a: &SpdMatrix, g: &DMatrix<f64>) -> Result<f64> {
    let w = whiten(a, g)?;
    Ok(w.trace())
}

/// `L⁻¹ G L⁻ᵀ` where `A = L Lᵀ`; its spectrum is the generalized spectrum of
/// the pencil `(G, A)`.
pub fn whiten(a: &SpdMatrix, g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_dim(a.dim(), g.nrows())?;
    check_dim(a.dim(), g.ncols())?;
    let l = a.lower_factor();
    let x = l
        .solve_lower_triangular(g)
        .expect("cholesky factor has a positive diagonal");
    let w = l
        .solve_lower_triangular(&x.transpose())
        .expect("cholesky factor has a positive diagonal");
    Ok(symmetrize(w))
}

/// Smallest and largest generalized eigenvalues of `G v = λ A v`.
pub fn generalized_eigen_range(a: &SpdMatrix, g: &DMatrix<f64>) -> Result<(f64, f64)> {
    let w = whiten(a, g)?;
    let eig = SymmetricEigen::new(w).eigenvalues;
    let lo = eig.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((lo, hi))
}

/// Extreme eigenvalue estimates by power iteration (largest) and inverse
/// power iteration (smallest), each capped at `max_iters` steps and stopped
/// once the Rayleigh quotient changes by less than `rel_tol`.
///
/// Both estimates are Rayleigh quotients and therefore lie inside
/// `[λ_min, λ_max]`.
pub fn power_iteration_bounds(m: &SpdMatrix, max_iters: usize, rel_tol: f64) -> (f64, f64) {
    let d = m.dim();
    let start = DVector::from_fn(d, |i, _| 1.0 + (i as f64 + 1.0).sqrt() * 1e-3);

    let mut v = start.normalize();
    let mut hi = quad_form(m, &v).expect("dimension matches");
    for _ in 0..max_iters {
        let w = m.mul_vec(&v);
        let norm = w.norm();
        if norm == 0.0 {
            break;
        }
        v = w / norm;
        let next = quad_form(m, &v).expect("dimension matches");
        let done = (next - hi).abs() <= rel_tol * next.abs();
        hi = next;
        if done {
            break;
        }
    }

    let mut v = start.normalize();
    let mut lo = quad_form(m, &v).expect("dimension matches");
    for _ in 0..max_iters {
        let w = m.solve(&v).expect("dimension matches");
        let norm = w.norm();
        if norm == 0.0 {
            break;
        }
        v = w / norm;
        let next = quad_form(m, &v).expect("dimension matches");
        let done = (next - lo).abs() <= rel_tol * next.abs();
        lo = next;
        if done {
            break;
        }
    }
    (lo, hi)
}


#[cfg(test)]
mod tests {
    use super::test_util::*;
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn cholesky_of_identity_is_identity() {
        let r = cholesky(&SpdMatrix::identity(3)).unwrap();
        assert_eq!(r.entries(), &DMatrix::<f64>::identity(3, 3));
    }

    #[test]
    fn cholesky_of_diagonal() {
        let m = SpdMatrix::from_diagonal(&[4.0, 9.0]).unwrap();
        let r = cholesky(&m).unwrap();
        assert_relative_eq!(r.entries()[(0, 0)], 0.5, epsilon = 1e-15);
        assert_relative_eq!(r.entries()[(1, 1)], 1.0 / 3.0, epsilon = 1e-15);
        assert_eq!(r.entries()[(0, 1)], 0.0);
    }

    #[test]
    fn cholesky_inverts_random_spd() {
        let mut g = rng(5);
        let m = SpdMatrix::new(random_spd(&mut g, 5, 0.5)).unwrap();
        let r = cholesky(&m).unwrap();
        let prod = m.entries() * r.entries().transpose() * r.entries();
        let err = (prod - DMatrix::<f64>::identity(5, 5)).norm();
        assert!(err <= 1e-8 * 5f64.sqrt(), "‖m RᵀR − I‖ = {err}");
        for i in 0..5 {
            for j in 0..i {
                assert_eq!(r.entries()[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn rejects_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            SpdMatrix::new(m),
            Err(Error::NotPositiveDefinite { index: 1, .. })
        ));
        let tiny = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1e-15]));
        assert!(SpdMatrix::new(tiny).is_err());
    }

    #[test]
    fn construction_symmetrizes() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.0, 2.0]);
        let s = SpdMatrix::new(m).unwrap();
        assert_eq!(s.entries()[(0, 1)], 0.5);
        assert_eq!(s.entries()[(1, 0)], 0.5);
        let l = s.lower_factor();
        let err = (l * l.transpose() - s.entries()).norm();
        assert!(err <= 1e-10 * s.entries().norm());
    }

    #[test]
    fn solve_examples() {
        let b = DVector::from_vec(vec![1.0, -2.0, 3.0]);
        assert_eq!(solve(&SpdMatrix::identity(3), &b).unwrap(), b);
        let m = SpdMatrix::from_diagonal(&[2.0, 4.0]).unwrap();
        let x = solve(&m, &DVector::from_vec(vec![2.0, 4.0])).unwrap();
        assert_relative_eq!(x[0], 1.0, epsilon = 1e-15);
        assert_relative_eq!(x[1], 1.0, epsilon = 1e-15);

        let mut g = rng(6);
        let m = SpdMatrix::new(random_spd(&mut g, 6, 0.1)).unwrap();
        let ones = DVector::from_element(6, 1.0);
        let x = solve(&m, &ones).unwrap();
        assert!((m.mul_vec(&x) - &ones).norm() <= 1e-9 * ones.norm());
    }

    #[test]
    fn solve_dimension_mismatch() {
        let m = SpdMatrix::identity(3);
        assert!(matches!(
            solve(&m, &DVector::zeros(2)),
            Err(Error::DimensionMismatch {
                expected: 3,
                found: 2
            })
        ));
    }

    #[test]
    fn solve_ill_conditioned() {
        // condition number 1e6 at d = 512
        let d = 512;
        let mut g = rng(11);
        let q = gaussian_matrix(&mut g, d, d).qr().q();
        let spectrum = DVector::from_fn(d, |i, _| 10f64.powf(6.0 * i as f64 / (d - 1) as f64));
        let a = &q * DMatrix::from_diagonal(&spectrum) * q.transpose();
        let m = SpdMatrix::new(a).unwrap();
        let b = gaussian_vector(&mut g, d);
        let x = m.solve(&b).unwrap();
        assert!((m.mul_vec(&x) - &b).norm() <= 1e-9 * b.norm());
    }

    #[test]
    fn quad_form_examples() {
        let e1 = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        assert_eq!(quad_form(&SpdMatrix::identity(3), &e1).unwrap(), 1.0);
        let m = SpdMatrix::from_diagonal(&[3.0, 5.0]).unwrap();
        assert_eq!(
            quad_form(&m, &DVector::from_vec(vec![1.0, 1.0])).unwrap(),
            8.0
        );
        assert!(quad_form(&m, &e1).is_err());
    }

    #[test]
    fn quad_form_matches_double_loop() {
        let mut g = rng(7);
        let m = SpdMatrix::new(random_spd(&mut g, 7, 0.2)).unwrap();
        let u = gaussian_vector(&mut g, 7);
        let mut naive = 0.0;
        for i in 0..7 {
            for j in 0..7 {
                naive += u[i] * m.entries()[(i, j)] * u[j];
            }
        }
        assert_relative_eq!(quad_form(&m, &u).unwrap(), naive, max_relative = 1e-12);
    }

    #[test]
    fn trace_solve_examples() {
        let i4 = SpdMatrix::identity(4);
        assert_relative_eq!(trace_solve(&i4, &i4).unwrap(), 4.0, epsilon = 1e-14);
        let a = SpdMatrix::from_diagonal(&[1.0, 2.0]).unwrap();
        let g = SpdMatrix::from_diagonal(&[2.0, 2.0]).unwrap();
        assert_relative_eq!(trace_solve(&a, &g).unwrap(), 3.0, epsilon = 1e-14);
    }

    #[test]
    fn trace_solve_matches_explicit_inverse() {
        let mut r = rng(8);
        let a = SpdMatrix::new(random_spd(&mut r, 5, 0.3)).unwrap();
        let g = SpdMatrix::new(random_spd(&mut r, 5, 0.3)).unwrap();
        let explicit = (a.entries().clone().try_inverse().unwrap() * g.entries()).trace();
        assert_relative_eq!(
            trace_solve(&a, &g).unwrap(),
            explicit,
            max_relative = 1e-10
        );
    }

    #[test]
    fn power_iteration_brackets_spectrum() {
        let m = SpdMatrix::from_diagonal(&[1.0, 3.0, 10.0, 2.0]).unwrap();
        let (lo, hi) = power_iteration_bounds(&m, 200, 1e-12);
        assert_relative_eq!(lo, 1.0, max_relative = 1e-6);
        assert_relative_eq!(hi, 10.0, max_relative = 1e-6);
    }

    #[test]
    fn generalized_range_of_scaled_pair() {
        let a = SpdMatrix::from_diagonal(&[1.0, 2.0]).unwrap();
        let g = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 2.0]));
        let (lo, hi) = generalized_eigen_range(&a, &g).unwrap();
        assert_relative_eq!(lo, 1.0, epsilon = 1e-14);
        assert_relative_eq!(hi, 3.0, epsilon = 1e-14);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn quad_form_positive(seed in any::<u64>(), d in 1usize..9) {
                let mut g = rng(seed);
                let m = SpdMatrix::new(random_spd(&mut g, d, 0.05)).unwrap();
                let u = gaussian_vector(&mut g, d);
                prop_assume!(u.norm() > 1e-6);
                prop_assert!(quad_form(&m, &u).unwrap() > 0.0);
                prop_assert_eq!(quad_form(&m, &DVector::zeros(d)).unwrap(), 0.0);
            }

            #[test]
            fn trace_solve_self_is_dim(seed in any::<u64>(), d in 1usize..12) {
                let mut g = rng(seed);
                let a = SpdMatrix::new(random_spd(&mut g, d, 0.05)).unwrap();
                let t = trace_solve(&a, &a).unwrap();
                prop_assert!((t - d as f64).abs() <= 1e-9 * d as f64);
            }

            #[test]
            fn cholesky_round_trip(seed in any::<u64>(), d in 1usize..12) {
                let mut g = rng(seed);
                let m = SpdMatrix::new(random_spd(&mut g, d, 0.05)).unwrap();
                let r = cholesky(&m).unwrap();
                let prod = m.entries() * r.entries().transpose() * r.entries();
                let err = (prod - DMatrix::<f64>::identity(d, d)).norm();
                prop_assert!(err <= 1e-8 * (d as f64).sqrt());
            }
        }
    }
}
