//! Subspace pretraining: split fits on every source task, the Gram matrices
//! `J` (second halves) and `Q` (first halves), and the whitened SVD that
//! yields the learned basis.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::numerics::{psqrt_and_pinvsqrt, subspace_sin_theta, svd};
use crate::regression::{
    fit_split, matrix_to_rows, rkhs_inner, rows_to_matrix, ExpansionRecord, SplitTaskFit, TaskRegressor,
};
use crate::scalar::Scalar;

/// One source task: `2n` inputs (rows of `x`) and their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData<T: Scalar = f64> {
    pub x: DMatrix<T>,
    pub y: DVector<T>,
}

impl<T: Scalar> TaskData<T> {
    pub fn new(x: DMatrix<T>, y: DVector<T>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::DimensionMismatch { expected: x.nrows(), found: y.len() });
        }
        Ok(Self { x, y })
    }
}

/// Output of [`solve_subspace`].
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceSolution<T: Scalar = f64> {
    /// `N×s`, first-half coordinates.
    pub alpha: DMatrix<T>,
    /// `N×s`, second-half coordinates.
    pub beta: DMatrix<T>,
    /// Top `s` singular values of the cross-covariance estimate.
    pub gammas: DVector<T>,
    /// Every singular value on the retained space, descending.
    pub spectrum: DVector<T>,
}

/// `J[i][j] = ⟨f̂_i, f̂_j⟩` over second halves, `Q[i][j]` likewise over first
/// halves. Pairs are evaluated in parallel; the result is exactly symmetric.
pub fn assemble_jq<T: Scalar>(fits: &[SplitTaskFit<T>]) -> Result<(DMatrix<T>, DMatrix<T>)> {
    let n = fits.len();
    if n == 0 {
        return Err(Error::InsufficientData("at least one source task is required".into()));
    }
    let kernel = fits[0].second_half.kernel();
    let lambda = fits[0].second_half.lambda();
    for f in fits {
        for half in [&f.first_half, &f.second_half] {
            if half.kernel() != kernel {
                return Err(Error::KernelMismatch(format!("{} vs {}", half.kernel(), kernel)));
            }
            if half.lambda() != lambda {
                return Err(Error::InvalidParameter(format!(
                    "source fits disagree on lambda: {:e} vs {:e}",
                    half.lambda(),
                    lambda
                )));
            }
        }
    }
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..=i).map(move |j| (i, j))).collect();
    let entries = pairs
        .par_iter()
        .map(|&(i, j)| {
            let jv = rkhs_inner(&fits[i].second_half, &fits[j].second_half)?;
            let qv = rkhs_inner(&fits[i].first_half, &fits[j].first_half)?;
            Ok((jv, qv))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut jm = DMatrix::zeros(n, n);
    let mut qm = DMatrix::zeros(n, n);
    for (&(i, j), &(jv, qv)) in pairs.iter().zip(&entries) {
        jm[(i, j)] = jv;
        jm[(j, i)] = jv;
        qm[(i, j)] = qv;
        qm[(j, i)] = qv;
    }
    Ok((jm, qm))
}

/// Top-`s` generalized singular pairs of `(J, Q)`.
///
/// With `M = Q^{1/2} J^{1/2} = Ũ Σ Ṽᵀ`, returns `alpha = Q^{+1/2} Ũ_s`,
/// `beta = J^{+1/2} Ṽ_s` and `gammas = σ_{1..s} / N`. Eigenvalues of `J` and
/// `Q` below `rel_cut·λ_max` are discarded rather than jittered.
pub fn solve_subspace<T: Scalar>(
    j: &DMatrix<T>,
    q: &DMatrix<T>,
    s: usize,
    rel_cut: T,
) -> Result<SubspaceSolution<T>> {
    let n = j.nrows();
    if !j.is_square() {
        return Err(Error::DimensionMismatch { expected: n, found: j.ncols() });
    }
    if q.shape() != j.shape() {
        return Err(Error::DimensionMismatch { expected: n, found: q.nrows() });
    }
    if s == 0 {
        return Err(Error::InvalidParameter("subspace dimension must be >= 1".into()));
    }
    if s > n {
        return Err(Error::RankDeficient { requested: s, achieved: n });
    }
    let roots = |m: &DMatrix<T>| match psqrt_and_pinvsqrt(m, rel_cut) {
        Err(Error::NumericallyZero) => Err(Error::RankDeficient { requested: s, achieved: 0 }),
        other => other,
    };
    let qr = roots(q)?;
    let jr = roots(j)?;
    let rank = qr.rank.min(jr.rank);
    if s > rank {
        return Err(Error::RankDeficient { requested: s, achieved: rank });
    }
    let dec = svd(&(&qr.sqrt * &jr.sqrt))?;
    let top = dec.singular_values[0];
    let effective = dec.singular_values.iter().take(rank).filter(|&&v| v > rel_cut * top).count();
    if s > effective {
        return Err(Error::RankDeficient { requested: s, achieved: effective });
    }
    let count = T::from_count(n);
    Ok(SubspaceSolution {
        alpha: &qr.inv_sqrt * dec.u.columns(0, s),
        beta: &jr.inv_sqrt * dec.v.columns(0, s),
        gammas: dec.singular_values.rows(0, s) / count,
        spectrum: dec.singular_values.rows(0, effective) / count,
    })
}

/// Fits every task on its two halves and solves for an `s`-dimensional
/// subspace, with the default rank cut.
pub fn pretrain<T: Scalar>(
    kernel: &KernelSpec<T>,
    tasks: &[TaskData<T>],
    lambda: T,
    s: usize,
) -> Result<SubspaceModel<T>> {
    pretrain_with_cut(kernel, tasks, lambda, s, T::default_rel_cut())
}

/// [`pretrain`] with an explicit relative eigenvalue cut.
pub fn pretrain_with_cut<T: Scalar>(
    kernel: &KernelSpec<T>,
    tasks: &[TaskData<T>],
    lambda: T,
    s: usize,
    rel_cut: T,
) -> Result<SubspaceModel<T>> {
    check_tasks(tasks, s)?;
    let fits = tasks
        .par_iter()
        .map(|t| fit_split(kernel, &t.x, &t.y, lambda))
        .collect::<Result<Vec<_>>>()?;
    SubspaceModel::from_fits(fits, s, rel_cut)
}

fn check_tasks<T: Scalar>(tasks: &[TaskData<T>], s: usize) -> Result<()> {
    let first = tasks.first().ok_or_else(|| Error::InsufficientData("no source tasks".into()))?;
    if tasks.len() < s {
        return Err(Error::RankDeficient { requested: s, achieved: tasks.len() });
    }
    let (rows, dim) = first.x.shape();
    for t in tasks {
        if t.x.ncols() != dim {
            return Err(Error::DimensionMismatch { expected: dim, found: t.x.ncols() });
        }
        if t.x.nrows() != rows {
            return Err(Error::DimensionMismatch { expected: rows, found: t.x.nrows() });
        }
    }
    Ok(())
}

/// [`pretrain`] over several values of `λ` at once. Each kernel block
/// between two tasks is evaluated once and reused for every `λ`, which makes
/// a sweep cost little more than a single fit.
pub fn pretrain_path<T: Scalar>(
    kernel: &KernelSpec<T>,
    tasks: &[TaskData<T>],
    lambdas: &[T],
    s: usize,
) -> Result<Vec<SubspaceModel<T>>> {
    if lambdas.is_empty() {
        return Err(Error::InvalidParameter("empty lambda path".into()));
    }
    check_tasks(tasks, s)?;
    // fits[i][l]: task i at lambdas[l].
    let fits = tasks
        .par_iter()
        .map(|t| lambdas.iter().map(|&l| fit_split(kernel, &t.x, &t.y, l)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let n = tasks.len();
    let paths = lambdas.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..=i).map(move |j| (i, j))).collect();
    let entries = pairs
        .par_iter()
        .map(|&(i, j)| {
            let block = |pick: fn(&SplitTaskFit<T>) -> &TaskRegressor<T>| -> Result<Vec<T>> {
                let a = pick(&fits[i][0]);
                let b = pick(&fits[j][0]);
                let cross = kernel.cross_gram(a.anchors(), b.anchors())?;
                Ok((0..paths)
                    .map(|l| pick(&fits[i][l]).dual_coeffs().dot(&(&cross * pick(&fits[j][l]).dual_coeffs())))
                    .collect())
            };
            Ok((block(|f| &f.second_half)?, block(|f| &f.first_half)?))
        })
        .collect::<Result<Vec<_>>>()?;
    (0..paths)
        .map(|l| {
            let mut jm = DMatrix::zeros(n, n);
            let mut qm = DMatrix::zeros(n, n);
            for (&(i, j), (jv, qv)) in pairs.iter().zip(&entries) {
                jm[(i, j)] = jv[l];
                jm[(j, i)] = jv[l];
                qm[(i, j)] = qv[l];
                qm[(j, i)] = qv[l];
            }
            let set = fits.iter().map(|f| f[l].clone()).collect();
            SubspaceModel::from_assembled(set, jm, qm, s, T::default_rel_cut())
        })
        .collect()
}

/// The learned subspace `span{v̂_1, …, v̂_s}` with `v̂_k = Σ_i beta[i][k] f̂_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceModel<T: Scalar = f64> {
    s: usize,
    lambda: T,
    kernel: KernelSpec<T>,
    second_halves: Vec<TaskRegressor<T>>,
    first_halves: Option<Vec<TaskRegressor<T>>>,
    beta: DMatrix<T>,
    alpha: Option<DMatrix<T>>,
    singular_values: DVector<T>,
    spectrum: DVector<T>,
    j: DMatrix<T>,
    q: DMatrix<T>,
}

impl<T: Scalar> SubspaceModel<T> {
    /// Builds the model from already fitted split tasks.
    pub fn from_fits(fits: Vec<SplitTaskFit<T>>, s: usize, rel_cut: T) -> Result<Self> {
        let (j, q) = assemble_jq(&fits)?;
        Self::from_assembled(fits, j, q, s, rel_cut)
    }

    fn from_assembled(fits: Vec<SplitTaskFit<T>>, j: DMatrix<T>, q: DMatrix<T>, s: usize, rel_cut: T) -> Result<Self> {
        let sol = solve_subspace(&j, &q, s, rel_cut)?;
        let kernel = fits[0].second_half.kernel().clone();
        let lambda = fits[0].second_half.lambda();
        let (first, second): (Vec<_>, Vec<_>) = fits.into_iter().map(|f| (f.first_half, f.second_half)).unzip();
        Ok(Self {
            s,
            lambda,
            kernel,
            second_halves: second,
            first_halves: Some(first),
            beta: sol.beta,
            alpha: Some(sol.alpha),
            singular_values: sol.gammas,
            spectrum: sol.spectrum,
            j,
            q,
        })
    }

    pub fn s(&self) -> usize {
        self.s
    }

    /// Number of source tasks `N`.
    pub fn num_tasks(&self) -> usize {
        self.second_halves.len()
    }

    pub fn lambda(&self) -> T {
        self.lambda
    }

    pub fn kernel(&self) -> &KernelSpec<T> {
        &self.kernel
    }

    /// Input dimension.
    pub fn dim(&self) -> usize {
        self.second_halves[0].dim()
    }

    pub fn beta(&self) -> &DMatrix<T> {
        &self.beta
    }

    pub fn alpha(&self) -> Option<&DMatrix<T>> {
        self.alpha.as_ref()
    }

    /// `γ̂_1 ≥ … ≥ γ̂_s`.
    pub fn singular_values(&self) -> &DVector<T> {
        &self.singular_values
    }

    /// Full retained singular-value profile, for eigen-gap inspection.
    pub fn spectrum(&self) -> &DVector<T> {
        &self.spectrum
    }

    pub fn j(&self) -> &DMatrix<T> {
        &self.j
    }

    pub fn q(&self) -> &DMatrix<T> {
        &self.q
    }

    pub fn second_halves(&self) -> &[TaskRegressor<T>] {
        &self.second_halves
    }

    pub fn first_halves(&self) -> Option<&[TaskRegressor<T>]> {
        self.first_halves.as_deref()
    }

    /// The model with first-half regressors and `alpha` dropped; it embeds
    /// and predicts identically.
    pub fn without_first_halves(&self) -> Self {
        Self { first_halves: None, alpha: None, ..self.clone() }
    }

    /// `F[r][i] = f̂_i(x_r)` over the second-half regressors.
    pub fn source_values(&self, x: &DMatrix<T>) -> Result<DMatrix<T>> {
        if x.ncols() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), found: x.ncols() });
        }
        let cols = self
            .second_halves
            .par_iter()
            .map(|r| r.predict(x))
            .collect::<Result<Vec<_>>>()?;
        Ok(DMatrix::from_columns(&cols))
    }

    /// `⟨f̂_i, g⟩_H` for every second-half regressor.
    pub fn source_inner(&self, g: &TaskRegressor<T>) -> Result<DVector<T>> {
        let v = self.second_halves.iter().map(|r| rkhs_inner(r, g)).collect::<Result<Vec<_>>>()?;
        Ok(DVector::from_vec(v))
    }

    /// `v̂_k` written out as a single kernel expansion.
    pub fn basis_function(&self, k: usize) -> Result<TaskRegressor<T>> {
        if k >= self.s {
            return Err(Error::InvalidParameter(format!("basis index {k} out of range for s = {}", self.s)));
        }
        let total: usize = self.second_halves.iter().map(TaskRegressor::len).sum();
        let mut anchors = DMatrix::zeros(total, self.dim());
        let mut coeffs = DVector::zeros(total);
        let mut at = 0;
        for (i, r) in self.second_halves.iter().enumerate() {
            let m = r.len();
            anchors.rows_mut(at, m).copy_from(r.anchors());
            coeffs.rows_mut(at, m).copy_from(&(r.dual_coeffs() * self.beta[(i, k)]));
            at += m;
        }
        TaskRegressor::from_expansion(&self.kernel, anchors, coeffs, self.lambda)
    }

    /// HS sin-Θ distance between this model's subspace and another's.
    pub fn sin_theta_to(&self, other: &SubspaceModel<T>) -> Result<T> {
        span_sin_theta(&self.second_halves, &self.beta, &other.second_halves, &other.beta)
    }

    /// HS sin-Θ distance from the left (first-half) subspace of this model
    /// to the subspace of `other`.
    pub fn left_sin_theta_to(&self, other: &SubspaceModel<T>) -> Result<T> {
        let (first, alpha) = self
            .first_halves
            .as_ref()
            .zip(self.alpha.as_ref())
            .ok_or_else(|| Error::InvalidParameter("model has no first-half regressors".into()))?;
        span_sin_theta(first, alpha, &other.second_halves, &other.beta)
    }
}

/// HS sin-Θ distance between `span{Σ_i ca[i][k] a_i}` and
/// `span{Σ_i cb[i][k] b_i}`. Regressors present on both sides are merged so
/// that shared directions cancel exactly.
pub fn span_sin_theta<T: Scalar>(
    a: &[TaskRegressor<T>],
    ca: &DMatrix<T>,
    b: &[TaskRegressor<T>],
    cb: &DMatrix<T>,
) -> Result<T> {
    if ca.nrows() != a.len() {
        return Err(Error::DimensionMismatch { expected: a.len(), found: ca.nrows() });
    }
    if cb.nrows() != b.len() {
        return Err(Error::DimensionMismatch { expected: b.len(), found: cb.nrows() });
    }
    let mut family: Vec<&TaskRegressor<T>> = a.iter().collect();
    let slots: Vec<usize> = b
        .iter()
        .map(|r| {
            a.iter().position(|x| x == r).unwrap_or_else(|| {
                family.push(r);
                family.len() - 1
            })
        })
        .collect();
    let gram = inner_gram(&family)?;
    let m = family.len();
    let mut c1 = DMatrix::zeros(m, ca.ncols());
    c1.rows_mut(0, a.len()).copy_from(ca);
    let mut c2 = DMatrix::zeros(m, cb.ncols());
    for (row, &slot) in slots.iter().enumerate() {
        let add = cb.row(row).into_owned();
        let mut target = c2.row_mut(slot);
        target += add;
    }
    subspace_sin_theta(&gram, &c1, &c2)
}

/// Gram matrix of a list of expansions under the RKHS inner product.
pub fn inner_gram<T: Scalar>(fs: &[&TaskRegressor<T>]) -> Result<DMatrix<T>> {
    let m = fs.len();
    let pairs: Vec<(usize, usize)> = (0..m).flat_map(|i| (0..=i).map(move |j| (i, j))).collect();
    let vals = pairs
        .par_iter()
        .map(|&(i, j)| rkhs_inner(fs[i], fs[j]))
        .collect::<Result<Vec<_>>>()?;
    let mut g = DMatrix::zeros(m, m);
    for (&(i, j), &v) in pairs.iter().zip(&vals) {
        g[(i, j)] = v;
        g[(j, i)] = v;
    }
    Ok(g)
}

const SUBSPACE_FORMAT: &str = "kmeta.subspace";
const SUBSPACE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
struct TaskRecord<T> {
    second_half: ExpansionRecord<T>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    first_half: Option<ExpansionRecord<T>>,
}

#[derive(Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
struct SubspaceRecord<T: Scalar> {
    format: String,
    version: u32,
    s: usize,
    lambda: T,
    kernel: KernelSpec<T>,
    tasks: Vec<TaskRecord<T>>,
    beta: Vec<Vec<T>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alpha: Option<Vec<Vec<T>>>,
    singular_values: Vec<T>,
    spectrum: Vec<T>,
    #[serde(rename = "J")]
    j: Vec<Vec<T>>,
    #[serde(rename = "Q")]
    q: Vec<Vec<T>>,
}

impl<T: Scalar> Serialize for SubspaceModel<T> {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        let tasks = self
            .second_halves
            .iter()
            .enumerate()
            .map(|(i, r)| TaskRecord {
                second_half: ExpansionRecord::from_regressor(r),
                first_half: self.first_halves.as_ref().map(|f| ExpansionRecord::from_regressor(&f[i])),
            })
            .collect();
        SubspaceRecord {
            format: SUBSPACE_FORMAT.into(),
            version: SUBSPACE_VERSION,
            s: self.s,
            lambda: self.lambda,
            kernel: self.kernel.clone(),
            tasks,
            beta: matrix_to_rows(&self.beta),
            alpha: self.alpha.as_ref().map(matrix_to_rows),
            singular_values: self.singular_values.as_slice().to_vec(),
            spectrum: self.spectrum.as_slice().to_vec(),
            j: matrix_to_rows(&self.j),
            q: matrix_to_rows(&self.q),
        }
        .serialize(ser)
    }
}

impl<T: Scalar> SubspaceRecord<T> {
    fn into_model(self) -> Result<SubspaceModel<T>> {
        if self.format != SUBSPACE_FORMAT || self.version != SUBSPACE_VERSION {
            return Err(Error::InvalidParameter(format!(
                "unsupported subspace format {} v{}",
                self.format, self.version
            )));
        }
        let n = self.tasks.len();
        if n == 0 || self.s == 0 || self.s > n {
            return Err(Error::InvalidParameter(format!("invalid model shape: N = {n}, s = {}", self.s)));
        }
        let with_first = self.tasks.iter().all(|t| t.first_half.is_some());
        let mut second = Vec::with_capacity(n);
        let mut first = Vec::with_capacity(n);
        for t in self.tasks {
            second.push(t.second_half.into_regressor(&self.kernel, self.lambda)?);
            if let Some(f) = t.first_half.filter(|_| with_first) {
                first.push(f.into_regressor(&self.kernel, self.lambda)?);
            }
        }
        let dim = second[0].dim();
        if second.iter().chain(&first).any(|r| r.dim() != dim) {
            return Err(Error::InvalidParameter("source regressors disagree on input dimension".into()));
        }
        let shaped = |rows: &[Vec<T>], r: usize, c: usize| -> Result<DMatrix<T>> {
            let m = rows_to_matrix(rows, c)?;
            if m.shape() != (r, c) {
                return Err(Error::DimensionMismatch { expected: r * c, found: m.len() });
            }
            Ok(m)
        };
        let beta = shaped(&self.beta, n, self.s)?;
        let alpha = match self.alpha {
            Some(a) if with_first => Some(shaped(&a, n, self.s)?),
            _ => None,
        };
        if self.singular_values.len() != self.s {
            return Err(Error::DimensionMismatch { expected: self.s, found: self.singular_values.len() });
        }
        Ok(SubspaceModel {
            s: self.s,
            lambda: self.lambda,
            kernel: self.kernel,
            second_halves: second,
            first_halves: with_first.then_some(first),
            beta,
            alpha,
            singular_values: DVector::from_vec(self.singular_values),
            spectrum: DVector::from_vec(self.spectrum),
            j: shaped(&self.j, n, n)?,
            q: shaped(&self.q, n, n)?,
        })
    }
}

impl<'de, T: Scalar> Deserialize<'de> for SubspaceModel<T> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        SubspaceRecord::<T>::deserialize(d)?.into_model().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::sym_eig;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random(n: usize, m: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_spd(n: usize, seed: u64) -> DMatrix<f64> {
        let a = random(n, n + 5, seed);
        &a * a.transpose()
    }

    fn identity_gap(m: &DMatrix<f64>) -> f64 {
        (m - DMatrix::identity(m.nrows(), m.ncols())).amax()
    }

    fn tasks(n_tasks: usize, n: usize, d: usize, seed: u64) -> Vec<TaskData<f64>> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        // Labels mix three fixed directions so the task family has rank 3.
        let w = random(3, d, seed + 1);
        (0..n_tasks)
            .map(|_| {
                let mix: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
                let x = DMatrix::from_fn(2 * n, d, |_, _| rng.random_range(-1.0..1.0));
                let y = DVector::from_fn(2 * n, |r, _| {
                    let mut v = 0.0;
                    for (k, m) in mix.iter().enumerate() {
                        v += m * (x.row(r).dot(&w.row(k)) * 1.5).sin();
                    }
                    v + 0.05 * rng.random_range(-1.0..1.0)
                });
                TaskData::new(x, y).unwrap()
            })
            .collect()
    }

    #[test]
    fn single_task_normalization() {
        let m = DMatrix::from_element(1, 1, 4.0f64);
        let sol = solve_subspace(&m, &m, 1, 1e-10).unwrap();
        assert!((sol.alpha[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((sol.beta[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((sol.gammas[0] - 4.0).abs() < 1e-14);
    }

    #[test]
    fn identity_problem() {
        let i = DMatrix::<f64>::identity(5, 5);
        let sol = solve_subspace(&i, &i, 2, 1e-10).unwrap();
        assert!((sol.gammas.add_scalar(-0.2)).amax() < 1e-15);
        assert!(identity_gap(&(sol.beta.transpose() * &sol.beta)) < 1e-14);
    }

    #[test]
    fn rank_errors_name_achieved_rank() {
        let v = DVector::from_vec(vec![1.0, 2.0, -1.0]);
        let j = &v * v.transpose();
        let q = random_spd(3, 1);
        assert_eq!(solve_subspace(&j, &q, 2, 1e-10), Err(Error::RankDeficient { requested: 2, achieved: 1 }));
        assert_eq!(
            solve_subspace(&DMatrix::zeros(3, 3), &q, 1, 1e-10),
            Err(Error::RankDeficient { requested: 1, achieved: 0 })
        );
        assert_eq!(solve_subspace(&q, &q, 4, 1e-10), Err(Error::RankDeficient { requested: 4, achieved: 3 }));
        assert!(solve_subspace(&q, &q, 0, 1e-10).is_err());
    }

    #[test]
    fn invariants_on_random_pairs() {
        for seed in 0..10 {
            let j = random_spd(8, seed);
            let q = random_spd(8, seed + 100);
            let sol = solve_subspace(&j, &q, 3, 1e-10).unwrap();
            assert!(identity_gap(&(sol.beta.transpose() * &j * &sol.beta)) < 1e-8);
            assert!(identity_gap(&(sol.alpha.transpose() * &q * &sol.alpha)) < 1e-8);
            let cross = sol.alpha.transpose() * &q * &j * &sol.beta;
            let want = DMatrix::from_diagonal(&(&sol.gammas * 8.0));
            assert!((cross - &want).amax() <= 1e-7 * want.amax());
            assert!(sol.gammas.iter().zip(sol.gammas.iter().skip(1)).all(|(a, b)| a >= b));
            assert_eq!(sol.spectrum.len(), 8);
        }
    }

    #[test]
    fn agrees_with_block_pencil() {
        // [[0, QJ], [JQ, 0]] w = γ [[Q, 0], [0, J]] w, reduced by the Cholesky
        // factor of the right-hand side.
        for seed in 0..5 {
            let n = 5;
            let s = 2;
            let j = random_spd(n, seed + 7);
            let q = random_spd(n, seed + 70);
            let mut a = DMatrix::zeros(2 * n, 2 * n);
            a.view_mut((0, n), (n, n)).copy_from(&(&q * &j));
            a.view_mut((n, 0), (n, n)).copy_from(&(&j * &q));
            let mut b = DMatrix::zeros(2 * n, 2 * n);
            b.view_mut((0, 0), (n, n)).copy_from(&q);
            b.view_mut((n, n), (n, n)).copy_from(&j);
            let l = b.cholesky().unwrap().l();
            let l_inv = l.clone().try_inverse().unwrap();
            let c = &l_inv * a * l_inv.transpose();
            let eig = sym_eig(&c).unwrap();
            let w = l_inv.transpose() * eig.eigenvectors.columns(0, s);
            let pencil_beta = w.rows(n, n).into_owned();
            let sol = solve_subspace(&j, &q, s, 1e-12).unwrap();
            for k in 0..s {
                assert!((eig.eigenvalues[k] - n as f64 * sol.gammas[k]).abs() < 1e-9 * eig.eigenvalues[0]);
            }
            let dist = subspace_sin_theta(&j, &pencil_beta, &sol.beta).unwrap();
            assert!(dist < 1e-8, "seed {seed}: {dist}");
        }
    }

    #[test]
    fn assemble_small_cases() {
        let k = KernelSpec::gaussian(0.8).unwrap();
        let data = tasks(6, 10, 2, 3);
        let mut fits: Vec<_> = data.iter().map(|t| fit_split(&k, &t.x, &t.y, 0.05).unwrap()).collect();

        let (j1, q1) = assemble_jq(&fits[..1]).unwrap();
        assert_eq!(j1[(0, 0)], fits[0].second_half.rkhs_norm_sq());
        assert!((q1[(0, 0)] - fits[0].first_half.rkhs_norm_sq()).abs() < 1e-14);

        let (j, q) = assemble_jq(&fits).unwrap();
        for a in 0..6 {
            for b in 0..6 {
                let jj = rkhs_inner(&fits[a].second_half, &fits[b].second_half).unwrap();
                let qq = rkhs_inner(&fits[a].first_half, &fits[b].first_half).unwrap();
                assert!((j[(a, b)] - jj).abs() < 1e-13);
                assert!((q[(a, b)] - qq).abs() < 1e-13);
            }
        }
        assert_eq!(j, j.transpose());
        for m in [&j, &q] {
            let e = sym_eig(m).unwrap().eigenvalues;
            assert!(e.min() >= -1e-10 * e.max());
        }

        fits[2] = fit_split(&k, &data[2].x, &DVector::zeros(20), 0.05).unwrap();
        let (j, q) = assemble_jq(&fits).unwrap();
        assert!(j.row(2).iter().chain(q.column(2).iter()).all(|&v| v == 0.0));

        let other = fit_split(&k, &data[0].x, &data[0].y, 0.1).unwrap();
        assert!(assemble_jq(&[fits[0].clone(), other]).is_err());
    }

    #[test]
    fn matches_explicit_feature_space() {
        // Polynomial kernel with a finite feature map: form the cross-covariance
        // operator as a k×k matrix and compare its top right singular space.
        let k = KernelSpec::polynomial(2, 1.0, 2.0).unwrap();
        let data = tasks(12, 30, 3, 11);
        let model = pretrain(&k, &data, 1e-3, 3).unwrap();
        let weights = |r: &TaskRegressor<f64>| k.explicit_features(r.anchors()).unwrap().transpose() * r.dual_coeffs();
        let dim = k.feature_dim(3).unwrap();
        let mut c = DMatrix::zeros(dim, dim);
        let mut w_right = DMatrix::zeros(dim, 12);
        for (i, (f, s)) in model.first_halves().unwrap().iter().zip(model.second_halves()).enumerate() {
            let wf = weights(f);
            let ws = weights(s);
            c += &wf * ws.transpose() / 12.0;
            w_right.set_column(i, &ws);
        }
        let dec = svd(&c).unwrap();
        for t in 0..3 {
            let rel = (dec.singular_values[t] - model.singular_values()[t]).abs() / dec.singular_values[0];
            assert!(rel < 1e-9, "{rel}");
        }
        let learned = &w_right * model.beta();
        let dist = subspace_sin_theta(&DMatrix::identity(dim, dim), &dec.v.columns(0, 3).into_owned(), &learned)
            .unwrap();
        assert!(dist < 1e-7, "{dist}");
    }

    #[test]
    fn single_and_duplicated_tasks() {
        let k = KernelSpec::gaussian(0.7).unwrap();
        let data = tasks(1, 15, 2, 21);
        let m1 = pretrain(&k, &data, 0.01, 1).unwrap();
        let f = &m1.second_halves()[0];
        assert!((m1.beta()[(0, 0)] - 1.0 / f.rkhs_norm_sq().sqrt()).abs() < 1e-12 * m1.beta()[(0, 0)]);

        let m2 = pretrain(&k, &[data[0].clone(), data[0].clone()], 0.01, 1).unwrap();
        assert!((m2.beta()[(0, 0)] - m2.beta()[(1, 0)]).abs() < 1e-12 * m2.beta()[(0, 0)].abs());
        assert!((m2.singular_values()[0] - m1.singular_values()[0]).abs() < 1e-12 * m1.singular_values()[0]);
        assert!(m2.sin_theta_to(&m1).unwrap() < 1e-8);

        assert_eq!(pretrain(&k, &data, 0.01, 2), Err(Error::RankDeficient { requested: 2, achieved: 1 }));
    }

    #[test]
    fn scale_equivariance_and_split_exchange() {
        let k = KernelSpec::gaussian(0.9).unwrap();
        let data = tasks(10, 20, 2, 31);
        let base = pretrain(&k, &data, 0.02, 3).unwrap();

        let c = 3.5;
        let scaled: Vec<_> = data.iter().map(|t| TaskData::new(t.x.clone(), &t.y * c).unwrap()).collect();
        let m = pretrain(&k, &scaled, 0.02, 3).unwrap();
        let ratio = (m.singular_values() - base.singular_values() * (c * c)).amax() / m.singular_values()[0];
        assert!(ratio < 1e-10);
        // The scaled regressors are c·f̂_i, so both bases live over the same family.
        let dist = subspace_sin_theta(base.j(), base.beta(), &(m.beta() * c)).unwrap();
        assert!(dist < 1e-8, "{dist}");

        let swapped: Vec<_> = data
            .iter()
            .map(|t| {
                let n = t.x.nrows() / 2;
                let mut x = t.x.clone();
                let mut y = t.y.clone();
                x.rows_mut(0, n).copy_from(&t.x.rows(n, n));
                x.rows_mut(n, n).copy_from(&t.x.rows(0, n));
                y.rows_mut(0, n).copy_from(&t.y.rows(n, n));
                y.rows_mut(n, n).copy_from(&t.y.rows(0, n));
                TaskData::new(x, y).unwrap()
            })
            .collect();
        let m = pretrain(&k, &swapped, 0.02, 3).unwrap();
        let dist = base.left_sin_theta_to(&m).unwrap();
        assert!(dist < 1e-8, "{dist}");
    }

    #[test]
    fn basis_functions_are_orthonormal() {
        let k = KernelSpec::laplacian(1.0).unwrap();
        let m = pretrain(&k, &tasks(8, 12, 2, 41), 0.05, 3).unwrap();
        let fs: Vec<_> = (0..3).map(|i| m.basis_function(i).unwrap()).collect();
        let refs: Vec<_> = fs.iter().collect();
        assert!(identity_gap(&inner_gram(&refs).unwrap()) < 1e-8);
        assert!(m.basis_function(3).is_err());
    }

    #[test]
    fn serde_round_trip() {
        let k = KernelSpec::gaussian(0.6).unwrap();
        let m = pretrain(&k, &tasks(5, 8, 2, 51), 0.03, 2).unwrap();
        let text = serde_json::to_string(&m).unwrap();
        let back: SubspaceModel<f64> = serde_json::from_str(&text).unwrap();
        assert_eq!(back, m);
        let compact = m.without_first_halves();
        let back: SubspaceModel<f64> = serde_json::from_str(&serde_json::to_string(&compact).unwrap()).unwrap();
        assert_eq!(back, compact);
        assert!(back.first_halves().is_none());
        assert!(serde_json::from_str::<SubspaceModel<f64>>(&text.replace("\"version\":1", "\"version\":9")).is_err());
    }

    #[test]
    fn lambda_path_matches_single_fits() {
        let k = KernelSpec::gaussian(0.7).unwrap();
        let data = tasks(6, 10, 2, 71);
        let lambdas = [1e-3, 1e-2, 0.1];
        let path = pretrain_path(&k, &data, &lambdas, 2).unwrap();
        assert_eq!(path.len(), 3);
        for (m, &l) in path.iter().zip(&lambdas) {
            let single = pretrain(&k, &data, l, 2).unwrap();
            assert_eq!(m.lambda(), l);
            assert!((m.j() - single.j()).amax() < 1e-12 * single.j().amax());
            assert!((m.q() - single.q()).amax() < 1e-12 * single.q().amax());
            assert!(subspace_sin_theta(single.j(), single.beta(), m.beta()).unwrap() < 1e-8);
        }
        assert!(pretrain_path(&k, &data, &[], 2).is_err());
        assert!(pretrain_path(&k, &data[..1], &lambdas, 2).is_err());
    }

    #[test]
    fn pretrain_validates_tasks() {
        let k = KernelSpec::gaussian(1.0).unwrap();
        let mut data = tasks(3, 5, 2, 61);
        data[1].x = random(10, 3, 1);
        assert!(pretrain(&k, &data, 0.1, 1).is_err());
        let data = tasks(3, 5, 2, 61);
        assert!(pretrain(&k, &data, 0.0, 1).is_err());
        assert!(pretrain::<f64>(&k, &[], 0.1, 1).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn orthonormality_holds(seed in 0u64..10_000, n in 2usize..10, s_frac in 0.0f64..1.0) {
            let s = 1 + ((n - 1) as f64 * s_frac) as usize;
            let j = random_spd(n, seed);
            let q = random_spd(n, seed ^ 0xabc);
            let sol = solve_subspace(&j, &q, s, 1e-10).unwrap();
            prop_assert!(identity_gap(&(sol.beta.transpose() * &j * &sol.beta)) < 1e-8);
            prop_assert!(identity_gap(&(sol.alpha.transpose() * &q * &sol.alpha)) < 1e-8);
            prop_assert!(sol.gammas.iter().all(|&g| g >= 0.0));
        }
    }
}
