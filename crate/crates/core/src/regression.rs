//! Per-task kernel ridge regression with data splitting, and RKHS inner
//! products between fitted estimators.
//!
//! A fit on `n` samples solves `(K + nλI) α = Y` and represents
//! `f̂(x) = Σ_j α_j K(x_j, x)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::numerics::spd_solve_vec;
use crate::scalar::Scalar;

/// A fitted kernel expansion `Σ_j α_j K(x_j, ·)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskRegressor<T: Scalar = f64> {
    kernel: KernelSpec<T>,
    anchors: DMatrix<T>,
    dual_coeffs: DVector<T>,
    lambda: T,
    rkhs_norm_sq: T,
}

/// Two independent fits of one task on disjoint halves of its samples.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitTaskFit<T: Scalar = f64> {
    /// Fit on rows `0..n`.
    pub first_half: TaskRegressor<T>,
    /// Fit on rows `n..2n`.
    pub second_half: TaskRegressor<T>,
}

/// Ridge estimate on `(x, y)` with penalty `n·λ‖f‖²_H`.
pub fn fit_krr<T: Scalar>(
    kernel: &KernelSpec<T>,
    x: &DMatrix<T>,
    y: &DVector<T>,
    lambda: T,
) -> Result<TaskRegressor<T>> {
    let n = x.nrows();
    if n == 0 {
        return Err(Error::InsufficientData("ridge fit needs at least one sample".into()));
    }
    if y.len() != n {
        return Err(Error::DimensionMismatch { expected: n, found: y.len() });
    }
    if !(lambda > T::zero()) || !lambda.is_finite() {
        return Err(Error::InvalidParameter(format!("lambda must be positive, got {lambda:e}")));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("labels must be finite".into()));
    }
    let gram = kernel.gram(x)?;
    let alpha = spd_solve_vec(&gram, y, T::from_count(n) * lambda)?;
    let norm_sq = quadratic_form(&gram, &alpha);
    Ok(TaskRegressor {
        kernel: kernel.clone(),
        anchors: x.clone(),
        dual_coeffs: alpha,
        lambda,
        rkhs_norm_sq: norm_sq,
    })
}

/// Fits rows `0..n` and `n..2n` separately with a shared kernel and `λ`.
pub fn fit_split<T: Scalar>(
    kernel: &KernelSpec<T>,
    x: &DMatrix<T>,
    y: &DVector<T>,
    lambda: T,
) -> Result<SplitTaskFit<T>> {
    let total = x.nrows();
    if total % 2 != 0 {
        return Err(Error::OddSampleCount(total));
    }
    if total == 0 {
        return Err(Error::InsufficientData("split fit needs at least two samples".into()));
    }
    if y.len() != total {
        return Err(Error::DimensionMismatch { expected: total, found: y.len() });
    }
    let n = total / 2;
    let first_half = fit_krr(kernel, &x.rows(0, n).into_owned(), &y.rows(0, n).into_owned(), lambda)?;
    let second_half = fit_krr(kernel, &x.rows(n, n).into_owned(), &y.rows(n, n).into_owned(), lambda)?;
    Ok(SplitTaskFit { first_half, second_half })
}

/// `⟨a, b⟩_H = α_aᵀ K(A, B) α_b`.
pub fn rkhs_inner<T: Scalar>(a: &TaskRegressor<T>, b: &TaskRegressor<T>) -> Result<T> {
    if a.kernel != b.kernel {
        return Err(Error::KernelMismatch(format!("{} vs {}", a.kernel, b.kernel)));
    }
    let cross = a.kernel.cross_gram(&a.anchors, &b.anchors)?;
    Ok(a.dual_coeffs.dot(&(cross * &b.dual_coeffs)))
}

fn quadratic_form<T: Scalar>(m: &DMatrix<T>, v: &DVector<T>) -> T {
    v.dot(&(m * v)).max(T::zero())
}

impl<T: Scalar> TaskRegressor<T> {
    /// Wraps an explicit expansion `Σ_j c_j K(a_j, ·)`; `lambda` is recorded
    /// as metadata only.
    pub fn from_expansion(
        kernel: &KernelSpec<T>,
        anchors: DMatrix<T>,
        coeffs: DVector<T>,
        lambda: T,
    ) -> Result<Self> {
        if anchors.nrows() != coeffs.len() {
            return Err(Error::DimensionMismatch { expected: anchors.nrows(), found: coeffs.len() });
        }
        if anchors.nrows() == 0 {
            return Err(Error::InsufficientData("expansion needs at least one anchor".into()));
        }
        if !(lambda > T::zero()) {
            return Err(Error::InvalidParameter(format!("lambda must be positive, got {lambda:e}")));
        }
        let gram = kernel.gram(&anchors)?;
        let rkhs_norm_sq = quadratic_form(&gram, &coeffs);
        Ok(Self { kernel: kernel.clone(), anchors, dual_coeffs: coeffs, lambda, rkhs_norm_sq })
    }

    /// `f̂(x)` at every row of `x_new`.
    pub fn predict(&self, x_new: &DMatrix<T>) -> Result<DVector<T>> {
        if x_new.ncols() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), found: x_new.ncols() });
        }
        Ok(self.kernel.cross_gram(x_new, &self.anchors)? * &self.dual_coeffs)
    }

    pub fn kernel(&self) -> &KernelSpec<T> {
        &self.kernel
    }

    pub fn anchors(&self) -> &DMatrix<T> {
        &self.anchors
    }

    pub fn dual_coeffs(&self) -> &DVector<T> {
        &self.dual_coeffs
    }

    pub fn lambda(&self) -> T {
        self.lambda
    }

    /// `‖f̂‖²_H`, cached at construction.
    pub fn rkhs_norm_sq(&self) -> T {
        self.rkhs_norm_sq
    }

    /// Input dimension.
    pub fn dim(&self) -> usize {
        self.anchors.ncols()
    }

    /// Number of anchors in the expansion.
    pub fn len(&self) -> usize {
        self.anchors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.nrows() == 0
    }

    /// The same anchors with coefficients multiplied by `c`.
    pub fn scaled(&self, c: T) -> Self {
        Self {
            kernel: self.kernel.clone(),
            anchors: self.anchors.clone(),
            dual_coeffs: &self.dual_coeffs * c,
            lambda: self.lambda,
            rkhs_norm_sq: self.rkhs_norm_sq * c * c,
        }
    }
}

impl<T: Scalar> SplitTaskFit<T> {
    /// The same fits with the halves exchanged.
    pub fn swapped(&self) -> Self {
        Self { first_half: self.second_half.clone(), second_half: self.first_half.clone() }
    }
}

pub(crate) fn matrix_to_rows<T: Scalar>(m: &DMatrix<T>) -> Vec<Vec<T>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub(crate) fn rows_to_matrix<T: Scalar>(rows: &[Vec<T>], cols_hint: usize) -> Result<DMatrix<T>> {
    let cols = rows.first().map_or(cols_hint, Vec::len);
    if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
        return Err(Error::DimensionMismatch { expected: cols, found: bad.len() });
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

/// Kernel expansion without its kernel, used inside larger records.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
pub(crate) struct ExpansionRecord<T> {
    pub anchors: Vec<Vec<T>>,
    pub dual_coeffs: Vec<T>,
}

impl<T: Scalar> ExpansionRecord<T> {
    pub fn from_regressor(r: &TaskRegressor<T>) -> Self {
        Self { anchors: matrix_to_rows(&r.anchors), dual_coeffs: r.dual_coeffs.as_slice().to_vec() }
    }

    pub fn into_regressor(self, kernel: &KernelSpec<T>, lambda: T) -> Result<TaskRegressor<T>> {
        let anchors = rows_to_matrix(&self.anchors, 0)?;
        TaskRegressor::from_expansion(kernel, anchors, DVector::from_vec(self.dual_coeffs), lambda)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
struct RegressorRecord<T: Scalar> {
    kernel: KernelSpec<T>,
    lambda: T,
    #[serde(flatten)]
    expansion: ExpansionRecord<T>,
}

impl<T: Scalar> Serialize for TaskRegressor<T> {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        RegressorRecord {
            kernel: self.kernel.clone(),
            lambda: self.lambda,
            expansion: ExpansionRecord::from_regressor(self),
        }
        .serialize(s)
    }
}

impl<'de, T: Scalar> Deserialize<'de> for TaskRegressor<T> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rec = RegressorRecord::<T>::deserialize(d)?;
        rec.expansion.into_regressor(&rec.kernel, rec.lambda).map_err(serde::de::Error::custom)
    }
}
