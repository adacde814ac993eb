//! Dense linear-algebra contracts: ridge-shifted SPD solves, symmetric
//! eigendecomposition, SVD and pseudo square roots.
//!
//! Factorizations are delegated to `nalgebra`; this module fixes ordering
//! (descending), sign conventions and rank handling so that every caller sees
//! deterministic, reproducible bases.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen, SVD};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Eigenpairs of a symmetric matrix, eigenvalues descending.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralDecomposition<T: Scalar> {
    pub eigenvalues: DVector<T>,
    /// Orthonormal eigenvectors stored as columns.
    pub eigenvectors: DMatrix<T>,
}

impl<T: Scalar> SpectralDecomposition<T> {
    /// `V Λ Vᵀ`.
    pub fn reconstruct(&self) -> DMatrix<T> {
        let v = &self.eigenvectors;
        v * DMatrix::from_diagonal(&self.eigenvalues) * v.transpose()
    }
}

/// `(A^{1/2}, A^{+1/2}, rank)` restricted to the retained eigenspace.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoRoots<T: Scalar> {
    pub sqrt: DMatrix<T>,
    pub inv_sqrt: DMatrix<T>,
    pub rank: usize,
}

/// Thin singular value decomposition `M = U diag(σ) Vᵀ`, σ descending.
#[derive(Debug, Clone, PartialEq)]
pub struct Svd<T: Scalar> {
    pub u: DMatrix<T>,
    pub singular_values: DVector<T>,
    pub v: DMatrix<T>,
}

impl<T: Scalar> Svd<T> {
    pub fn reconstruct(&self) -> DMatrix<T> {
        &self.u * DMatrix::from_diagonal(&self.singular_values) * self.v.transpose()
    }
}

fn max_iterations(n: usize) -> usize {
    1000 * n.max(1)
}

/// Solves `(A + ridge·I) X = B` through a Cholesky factorization.
///
/// Fails with [`Error::NotPositiveDefinite`] instead of falling back to a
/// pseudo-inverse.
pub fn spd_solve<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>, ridge: T) -> Result<DMatrix<T>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::DimensionMismatch { expected: n, found: a.ncols() });
    }
    if b.nrows() != n {
        return Err(Error::DimensionMismatch { expected: n, found: b.nrows() });
    }
    if !(ridge >= T::zero()) {
        return Err(Error::InvalidParameter(format!("ridge must be >= 0, got {ridge:e}")));
    }
    let mut shifted = a.clone();
    for i in 0..n {
        shifted[(i, i)] += ridge;
    }
    let chol = Cholesky::new(shifted).ok_or(Error::NotPositiveDefinite { ridge: ridge.as_f64() })?;
    Ok(chol.solve(b))
}

/// Vector right-hand side variant of [`spd_solve`].
pub fn spd_solve_vec<T: Scalar>(a: &DMatrix<T>, b: &DVector<T>, ridge: T) -> Result<DVector<T>> {
    let x = spd_solve(a, &DMatrix::from_column_slice(b.len(), 1, b.as_slice()), ridge)?;
    Ok(x.column(0).into_owned())
}

/// Flips `col` of `m` (and the same column of `partner`) so that its entry of
/// largest magnitude is positive; the lowest index wins ties.
fn fix_sign<T: Scalar>(m: &mut DMatrix<T>, partner: Option<&mut DMatrix<T>>, col: usize) {
    let mut best = 0;
    let mut best_abs = T::zero();
    for (i, v) in m.column(col).iter().enumerate() {
        if v.abs() > best_abs {
            best_abs = v.abs();
            best = i;
        }
    }
    if m[(best, col)] < T::zero() {
        m.column_mut(col).neg_mut();
        if let Some(p) = partner {
            p.column_mut(col).neg_mut();
        }
    }
}

/// Descending permutation of `values`; equal values keep their input order.
fn descending_order<T: Scalar>(values: &DVector<T>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap_or(std::cmp::Ordering::Equal));
    idx
}

fn permute_columns<T: Scalar>(m: &DMatrix<T>, order: &[usize]) -> DMatrix<T> {
    DMatrix::from_fn(m.nrows(), order.len(), |i, j| m[(i, order[j])])
}

/// Symmetric eigendecomposition of `(A + Aᵀ)/2`.
pub fn sym_eig<T: Scalar>(a: &DMatrix<T>) -> Result<SpectralDecomposition<T>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::DimensionMismatch { expected: n, found: a.ncols() });
    }
    if n == 0 {
        return Ok(SpectralDecomposition {
            eigenvalues: DVector::zeros(0),
            eigenvectors: DMatrix::zeros(0, 0),
        });
    }
    let sym = (a + a.transpose()) * T::lit(0.5);
    let eig = SymmetricEigen::try_new(sym, T::default_epsilon(), max_iterations(n))
        .ok_or(Error::NoConvergence("symmetric eigendecomposition"))?;
    let order = descending_order(&eig.eigenvalues);
    let eigenvalues = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut eigenvectors = permute_columns(&eig.eigenvectors, &order);
    for j in 0..n {
        fix_sign(&mut eigenvectors, None, j);
    }
    Ok(SpectralDecomposition { eigenvalues, eigenvectors })
}

/// Square root and pseudo-inverse square root of a symmetric PSD matrix.
///
/// Eigenvalues below `rel_cut · λ_max` are treated as zero in both outputs.
pub fn psqrt_and_pinvsqrt<T: Scalar>(a: &DMatrix<T>, rel_cut: T) -> Result<PseudoRoots<T>> {
    let eig = sym_eig(a)?;
    let n = eig.eigenvalues.len();
    let top = if n == 0 { T::zero() } else { eig.eigenvalues[0] };
    if !(top > T::zero()) {
        return Err(Error::NumericallyZero);
    }
    let cut = rel_cut * top;
    let rank = eig.eigenvalues.iter().take_while(|&&l| l >= cut && l > T::zero()).count();
    let basis = eig.eigenvectors.columns(0, rank);
    let roots = eig.eigenvalues.rows(0, rank).map(|l| l.sqrt());
    let inv_roots = roots.map(|r| T::one() / r);
    let sqrt = basis * DMatrix::from_diagonal(&roots) * basis.transpose();
    let inv_sqrt = basis * DMatrix::from_diagonal(&inv_roots) * basis.transpose();
    Ok(PseudoRoots { sqrt, inv_sqrt, rank })
}

/// Thin SVD with descending singular values.
///
/// Each column of `U` has its largest-magnitude entry positive; the matching
/// column of `V` is flipped with it so the product is preserved.
pub fn svd<T: Scalar>(m: &DMatrix<T>) -> Result<Svd<T>> {
    let k = m.nrows().min(m.ncols());
    if k == 0 {
        return Ok(Svd {
            u: DMatrix::zeros(m.nrows(), 0),
            singular_values: DVector::zeros(0),
            v: DMatrix::zeros(m.ncols(), 0),
        });
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("matrix has non-finite entries".into()));
    }
    let dec = SVD::try_new_unordered(
        m.clone(),
        true,
        true,
        T::default_epsilon(),
        max_iterations(m.nrows().max(m.ncols())),
    )
    .ok_or(Error::NoConvergence("singular value decomposition"))?;
    let (u, vt) = match (dec.u, dec.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Err(Error::NoConvergence("singular value decomposition")),
    };
    let order = descending_order(&dec.singular_values);
    let singular_values = DVector::from_iterator(k, order.iter().map(|&i| dec.singular_values[i]));
    let mut u = permute_columns(&u, &order);
    let mut v = permute_columns(&vt.transpose(), &order);
    for j in 0..k {
        fix_sign(&mut u, Some(&mut v), j);
    }
    Ok(Svd { u, singular_values, v })
}

/// Orthonormal basis for the column span of `e`, dropping directions whose
/// singular value falls below `n·ε·σ_max`.
pub fn orthonormal_basis<T: Scalar>(e: &DMatrix<T>) -> Result<DMatrix<T>> {
    let dec = svd(e)?;
    if dec.singular_values.is_empty() {
        return Ok(DMatrix::zeros(e.nrows(), 0));
    }
    let top = dec.singular_values[0];
    let tol = T::from_count(e.nrows().max(e.ncols())) * T::default_epsilon() * top;
    let rank = dec.singular_values.iter().filter(|&&s| s > tol).count();
    Ok(dec.u.columns(0, rank).into_owned())
}

/// Hilbert–Schmidt sin-Θ distance `‖(I − P₁) P₂‖_HS` between two finite
/// subspaces of a Hilbert space.
///
/// Both subspaces are spanned by combinations of a common generating family
/// whose Gram matrix is `gram`; the columns of `c1` and `c2` hold the
/// combination coefficients. Each side is orthonormalized in the Gram metric,
/// and the residual `W₂ − W₁(W₁ᵀ G W₂)` is formed in coefficient space before
/// its norm is taken, so close subspaces expressed over the same family keep
/// their small distance instead of losing it to cancellation.
pub fn subspace_sin_theta<T: Scalar>(gram: &DMatrix<T>, c1: &DMatrix<T>, c2: &DMatrix<T>) -> Result<T> {
    let n = gram.nrows();
    if c1.nrows() != n {
        return Err(Error::DimensionMismatch { expected: n, found: c1.nrows() });
    }
    if c2.nrows() != n {
        return Err(Error::DimensionMismatch { expected: n, found: c2.nrows() });
    }
    let w1 = gram_orthonormalize(gram, c1)?;
    let w2 = gram_orthonormalize(gram, c2)?;
    let residual = &w2 - &w1 * (w1.transpose() * gram * &w2);
    let sq = (residual.transpose() * gram * &residual).trace();
    Ok(sq.max(T::zero()).sqrt())
}

/// `c·V·Λ^{-1/2}` from the eigenpairs of `cᵀ G c`, dropping numerically null
/// directions, so that the result `W` satisfies `Wᵀ G W = I`.
fn gram_orthonormalize<T: Scalar>(gram: &DMatrix<T>, c: &DMatrix<T>) -> Result<DMatrix<T>> {
    let inner = c.transpose() * gram * c;
    let eig = sym_eig(&inner)?;
    if eig.eigenvalues.is_empty() || eig.eigenvalues[0] <= T::zero() {
        return Ok(DMatrix::zeros(c.nrows(), 0));
    }
    let tol = T::from_count(gram.nrows().max(1)) * T::default_epsilon() * eig.eigenvalues[0];
    let rank = eig.eigenvalues.iter().filter(|&&l| l > tol).count();
    let scale = eig.eigenvalues.rows(0, rank).map(|l| T::one() / l.sqrt());
    Ok(c * eig.eigenvectors.columns(0, rank) * DMatrix::from_diagonal(&scale))
}
