//! Symmetric positive semidefinite linear algebra.
//!
//! Every function here goes through a symmetric eigendecomposition of the
//! symmetrized argument `(S + S')/2`. Eigenvalues below
//! `rank_tol * max|eigenvalue|` are truncated to exactly zero, and that same
//! threshold defines the range and null projections of a covariance.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{BridgeError, Result};

/// Relative eigenvalue threshold below which a matrix is treated as singular.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

/// Relative asymmetry tolerated before a covariance is rejected.
pub const SYMMETRY_TOL: f64 = 1e-9;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub(crate) fn check_square(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(BridgeError::Dimension(format!(
            "{what} must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

pub(crate) fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    let scale = m.amax().max(1.0);
    let residual = (m - m.transpose()).amax();
    let tolerance = SYMMETRY_TOL * scale;
    if !(residual <= tolerance) {
        return Err(BridgeError::NotSymmetric { residual, tolerance });
    }
    Ok(())
}

/// Eigendecomposition of a symmetric matrix with eigenvalues sorted in
/// descending order (columns of `vectors` follow the same order).
#[derive(Debug, Clone)]
pub struct SortedEigen {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

impl SortedEigen {
    pub fn new(s: &DMatrix<f64>) -> Self {
        let n = s.nrows();
        if n == 0 {
            return Self { values: DVector::zeros(0), vectors: DMatrix::zeros(0, 0) };
        }
        let eig = SymmetricEigen::new(symmetrize(s));
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
        let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
        let mut vectors = DMatrix::zeros(n, n);
        for (dst, &src) in order.iter().enumerate() {
            vectors.set_column(dst, &eig.eigenvectors.column(src));
        }
        Self { values, vectors }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |a, v| a.max(v.abs()))
    }

    /// `V diag(f(λ)) V'`, symmetrized.
    pub fn map<F: Fn(f64) -> f64>(&self, f: F) -> DMatrix<f64> {
        let n = self.values.len();
        let mut scaled = self.vectors.clone();
        for j in 0..n {
            let w = f(self.values[j]);
            scaled.column_mut(j).scale_mut(w);
        }
        symmetrize(&(scaled * self.vectors.transpose()))
    }

    /// Clamps eigenvalues that are negative within `tol * max|λ|` to zero.
    fn clamp_psd(&mut self, tol: f64) -> Result<()> {
        let floor = tol * self.max_abs();
        for v in self.values.iter_mut() {
            if *v < -floor {
                return Err(BridgeError::NotPsd { eigenvalue: *v });
            }
            if *v <= floor {
                *v = 0.0;
            }
        }
        Ok(())
    }
}

/// Unique symmetric PSD square root.
pub fn psd_sqrt(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    psd_sqrt_with_tol(s, DEFAULT_RANK_TOL)
}

pub fn psd_sqrt_with_tol(s: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>> {
    check_square(s, "psd_sqrt argument")?;
    let mut eig = SortedEigen::new(s);
    eig.clamp_psd(tol)?;
    Ok(eig.map(f64::sqrt))
}

/// Largest eigenvalue of a symmetric matrix (`-inf` for the empty matrix).
pub fn max_eigenvalue(s: &DMatrix<f64>) -> f64 {
    SortedEigen::new(s).values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Smallest eigenvalue of a symmetric matrix (`+inf` for the empty matrix).
pub fn min_eigenvalue(s: &DMatrix<f64>) -> f64 {
    SortedEigen::new(s).values.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Inverse of a general square matrix, rejecting numerically singular input.
///
/// Singularity is judged on the singular values with the same relative
/// threshold used for rank detection.
pub fn checked_inverse(m: &DMatrix<f64>, tol: f64, what: &str) -> Result<DMatrix<f64>> {
    check_square(m, what)?;
    if m.nrows() == 0 {
        return Ok(m.clone());
    }
    if !m.iter().all(|x| x.is_finite()) {
        return Err(BridgeError::NumericalFailure(format!("{what} has non-finite entries")));
    }
    let sv = m.clone().svd(false, false).singular_values;
    let smax = sv.max();
    let smin = sv.min();
    if !(smin > tol * smax) {
        return Err(BridgeError::NumericalFailure(format!(
            "{what} is singular (singular value ratio {:.3e})",
            if smax > 0.0 { smin / smax } else { 0.0 }
        )));
    }
    m.clone()
        .lu()
        .try_inverse()
        .ok_or_else(|| BridgeError::NumericalFailure(format!("{what} could not be inverted")))
}

/// [`checked_inverse`] for matrices that are symmetric in exact arithmetic.
pub fn sym_inverse(m: &DMatrix<f64>, tol: f64, what: &str) -> Result<DMatrix<f64>> {
    checked_inverse(&symmetrize(m), tol, what).map(|x| symmetrize(&x))
}

/// A zero-mean Gaussian law described by a possibly singular covariance,
/// together with the spectral operators derived from it.
#[derive(Debug, Clone)]
pub struct GaussianMarginal {
    sigma: DMatrix<f64>,
    rank: usize,
    eigen: SortedEigen,
    sqrt: DMatrix<f64>,
    pinv: DMatrix<f64>,
    pinv_sqrt: DMatrix<f64>,
    proj_range: DMatrix<f64>,
    proj_null: DMatrix<f64>,
    rank_tol: f64,
}

impl GaussianMarginal {
    pub fn new(sigma: &DMatrix<f64>) -> Result<Self> {
        Self::with_tolerance(sigma, DEFAULT_RANK_TOL)
    }

    pub fn with_tolerance(sigma: &DMatrix<f64>, rank_tol: f64) -> Result<Self> {
        check_square(sigma, "covariance")?;
        if sigma.nrows() == 0 {
            return Err(BridgeError::Dimension("covariance must be at least 1x1".into()));
        }
        if !sigma.iter().all(|x| x.is_finite()) {
            return Err(BridgeError::InvalidArgument("covariance has non-finite entries".into()));
        }
        check_symmetric(sigma)?;
        let mut eigen = SortedEigen::new(sigma);
        eigen.clamp_psd(rank_tol)?;
        let rank = eigen.values.iter().filter(|&&v| v > 0.0).count();
        let positive = |f: fn(f64) -> f64| move |v: f64| if v > 0.0 { f(v) } else { 0.0 };
        let sqrt = eigen.map(positive(f64::sqrt));
        let pinv = eigen.map(positive(|v| 1.0 / v));
        let pinv_sqrt = eigen.map(positive(|v| 1.0 / v.sqrt()));
        let proj_range = eigen.map(positive(|_| 1.0));
        let n = sigma.nrows();
        let proj_null = symmetrize(&(DMatrix::identity(n, n) - &proj_range));
        let sigma = eigen.map(|v| v);
        Ok(Self { sigma, rank, eigen, sqrt, pinv, pinv_sqrt, proj_range, proj_null, rank_tol })
    }

    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }

    /// Covariance rebuilt from the truncated eigendecomposition.
    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn is_singular(&self) -> bool {
        self.rank < self.dim()
    }

    pub fn rank_tol(&self) -> f64 {
        self.rank_tol
    }

    pub fn sqrt(&self) -> &DMatrix<f64> {
        &self.sqrt
    }

    pub fn pinv(&self) -> &DMatrix<f64> {
        &self.pinv
    }

    pub fn pinv_sqrt(&self) -> &DMatrix<f64> {
        &self.pinv_sqrt
    }

    pub fn proj_range(&self) -> &DMatrix<f64> {
        &self.proj_range
    }

    pub fn proj_null(&self) -> &DMatrix<f64> {
        &self.proj_null
    }

    /// Orthogonal basis in which the covariance reads `diag(Λ, 0)`, range first.
    pub fn block_basis(&self) -> &DMatrix<f64> {
        &self.eigen.vectors
    }

    /// Positive eigenvalues `Λ` (descending), the nonzero block of the covariance.
    pub fn range_eigenvalues(&self) -> DVector<f64> {
        self.eigen.values.rows(0, self.rank).into_owned()
    }

    /// `Σ + ε Π_N`, positive definite for every `ε > 0`.
    pub fn perturb(&self, eps: f64) -> Result<DMatrix<f64>> {
        if !(eps > 0.0) || !eps.is_finite() {
            return Err(BridgeError::InvalidArgument(format!("perturbation must be positive, got {eps}")));
        }
        Ok(symmetrize(&(&self.sigma + &self.proj_null * eps)))
    }
}

pub fn make_marginal(sigma: &DMatrix<f64>) -> Result<GaussianMarginal> {
    GaussianMarginal::new(sigma)
}

pub fn perturb(marginal: &GaussianMarginal, eps: f64) -> Result<DMatrix<f64>> {
    marginal.perturb(eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rotation(theta: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[theta.cos(), -theta.sin(), theta.sin(), theta.cos()])
    }

    fn close(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> bool {
        (a - b).amax() <= tol
    }

    #[test]
    fn diagonal_degenerate_marginal() {
        let m = make_marginal(&DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0]))).unwrap();
        assert_eq!(m.rank(), 1);
        assert!(m.is_singular());
        let diag = |a: f64, b: f64| DMatrix::from_diagonal(&DVector::from_vec(vec![a, b]));
        assert!(close(m.proj_null(), &diag(0.0, 1.0), 1e-15));
        assert!(close(m.pinv(), &diag(1.0, 0.0), 1e-15));
        assert!(close(&m.perturb(0.01).unwrap(), &diag(1.0, 0.01), 1e-15));
    }

    #[test]
    fn identity_marginal() {
        let m = make_marginal(&DMatrix::identity(3, 3)).unwrap();
        assert_eq!(m.rank(), 3);
        assert!(!m.is_singular());
        assert!(m.proj_null().amax() < 1e-15);
        assert!(close(m.pinv(), &DMatrix::identity(3, 3), 1e-14));
        assert!(close(&m.perturb(0.7).unwrap(), &DMatrix::identity(3, 3), 1e-14));
    }

    #[test]
    fn rotated_rank_one() {
        let u = rotation(0.83);
        let d = |a: f64, b: f64| DMatrix::from_diagonal(&DVector::from_vec(vec![a, b]));
        let sigma = &u * d(2.0, 0.0) * u.transpose();
        let m = make_marginal(&sigma).unwrap();
        assert_eq!(m.rank(), 1);
        assert!(close(m.proj_range(), &(&u * d(1.0, 0.0) * u.transpose()), 1e-12));
        let expected = &u * d(2.0, 1e-3) * u.transpose();
        assert!(close(&m.perturb(1e-3).unwrap(), &expected, 1e-12));
    }

    #[test]
    fn zero_covariance_is_rank_zero() {
        let m = make_marginal(&DMatrix::zeros(2, 2)).unwrap();
        assert_eq!(m.rank(), 0);
        assert!(close(m.proj_null(), &DMatrix::identity(2, 2), 0.0));
        assert_eq!(m.range_eigenvalues().len(), 0);
    }

    #[test]
    fn rejects_bad_covariances() {
        let neg = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5]);
        assert!(matches!(make_marginal(&neg), Err(BridgeError::NotPsd { .. })));
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.0, 1.0]);
        assert!(matches!(make_marginal(&asym), Err(BridgeError::NotSymmetric { .. })));
        let rect = DMatrix::zeros(2, 3);
        assert!(matches!(make_marginal(&rect), Err(BridgeError::Dimension(_))));
        let m = make_marginal(&DMatrix::identity(2, 2)).unwrap();
        assert!(m.perturb(0.0).is_err());
    }

    #[test]
    fn sqrt_examples() {
        let s = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]));
        assert!(close(&psd_sqrt(&s).unwrap(), &DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0])), 1e-15));
        let q = DMatrix::identity(3, 3) * 0.25;
        assert!(close(&psd_sqrt(&q).unwrap(), &(DMatrix::identity(3, 3) * 0.5), 1e-15));
        let neg = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(psd_sqrt(&neg).is_err());
    }

    #[test]
    fn checked_inverse_rejects_singular() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(checked_inverse(&s, DEFAULT_RANK_TOL, "s").is_err());
        let inv = checked_inverse(&DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 4.0]), 1e-10, "d").unwrap();
        assert!((inv[(1, 1)] - 0.25).abs() < 1e-15);
    }

    fn psd_strategy() -> impl Strategy<Value = (DMatrix<f64>, usize)> {
        (1usize..5, 0usize..5, proptest::collection::vec(-2.0f64..2.0, 25))
            .prop_map(|(n, r, entries)| {
                let rank = r.min(n);
                let g = DMatrix::from_fn(n, rank.max(1), |i, j| entries[i * 5 + j]);
                let g = if rank == 0 { DMatrix::zeros(n, 1) } else { g };
                (&g * g.transpose(), n)
            })
    }

    proptest! {
        #[test]
        fn marginal_operator_identities((sigma, n) in psd_strategy()) {
            let m = make_marginal(&sigma).unwrap();
            let id = DMatrix::<f64>::identity(n, n);
            let scale = sigma.amax().max(1.0);
            let tol = 1e-9 * scale;
            prop_assert!(close(&(m.proj_range() + m.proj_null()), &id, 1e-12));
            prop_assert!(close(&(m.proj_range() * m.proj_range()), m.proj_range(), 1e-10));
            prop_assert!(close(&(m.proj_null() * m.proj_null()), m.proj_null(), 1e-10));
            prop_assert!(close(&(m.proj_range() * m.sigma() * m.proj_range()), m.sigma(), tol));
            prop_assert!(close(&(m.sqrt() * m.sqrt()), m.sigma(), tol));
            prop_assert!(close(&(m.sigma() * m.pinv() * m.sigma()), m.sigma(), tol));
            prop_assert!(close(&(m.pinv_sqrt() * m.pinv_sqrt()), m.pinv(), 1e-9 * m.pinv().amax().max(1.0)));
            prop_assert!(close(&(m.sqrt() * m.pinv_sqrt()), m.proj_range(), 1e-8));
            prop_assert!((m.proj_null() * m.sigma()).amax() <= tol);
        }

        #[test]
        fn sqrt_is_self_consistent((s, _n) in psd_strategy()) {
            let r = psd_sqrt(&s).unwrap();
            prop_assert!(close(&(&r * &r), &s, 1e-10 * s.amax().max(1.0)));
            prop_assert!(close(&r, &r.transpose(), 0.0));
        }

        #[test]
        fn perturbation_is_monotone_in_eps((sigma, _n) in psd_strategy(), e1 in 1e-6f64..1.0, scale in 1.1f64..10.0) {
            let m = make_marginal(&sigma).unwrap();
            let small = m.perturb(e1).unwrap();
            let large = m.perturb(e1 * scale).unwrap();
            prop_assert!(min_eigenvalue(&(&large - &small)) >= -1e-12);
            prop_assert!(min_eigenvalue(&small) > 0.0);
        }
    }
}
