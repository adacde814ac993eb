//! Target-task inference on a learned subspace: embed inputs into basis
//! coordinates and fit an `s`-dimensional ridge regressor.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{spd_solve_vec, spd_solve};
use crate::pretrain::SubspaceModel;
use crate::regression::TaskRegressor;
use crate::scalar::Scalar;

/// Smallest confidence parameter admitted by the default regularization rule.
pub const MIN_TAU: f64 = 2.6;

/// A ridge fit in subspace coordinates: `f(x) = beta_targetᵀ embed(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetModel<T: Scalar = f64> {
    subspace: Arc<SubspaceModel<T>>,
    beta_target: DVector<T>,
    lambda_star: T,
    n_t: usize,
}

/// Default target regularization together with its sample-size check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaStar<T> {
    pub value: T,
    /// Whether `n_T ≥ 12κ²·max(ln s, τ)`.
    pub sample_size_ok: bool,
}

/// Coordinates of `P̂φ(x)` in the learned basis, one row per input row:
/// `x̃_k = Σ_i beta[i][k] f̂_i(x)`.
pub fn embed<T: Scalar>(m: &SubspaceModel<T>, x_new: &DMatrix<T>) -> Result<DMatrix<T>> {
    Ok(m.source_values(x_new)? * m.beta())
}

/// Coordinates of the projection of an arbitrary expansion `g` onto the
/// learned subspace: `⟨v̂_k, g⟩_H`.
pub fn project_function<T: Scalar>(m: &SubspaceModel<T>, g: &TaskRegressor<T>) -> Result<DVector<T>> {
    Ok(m.beta().transpose() * m.source_inner(g)?)
}

/// `(X̃ᵀX̃ + nλI_s)⁻¹ X̃ᵀ Y` with `X̃` holding one embedded point per row.
pub fn ridge_primal<T: Scalar>(xe: &DMatrix<T>, y: &DVector<T>, lambda: T) -> Result<DVector<T>> {
    check_ridge(xe, y, lambda)?;
    let n = T::from_count(xe.nrows());
    spd_solve_vec(&(xe.transpose() * xe), &(xe.transpose() * y), n * lambda)
}

/// `X̃ᵀ (X̃X̃ᵀ + nλI_n)⁻¹ Y`; equal to [`ridge_primal`] in exact arithmetic.
pub fn ridge_dual<T: Scalar>(xe: &DMatrix<T>, y: &DVector<T>, lambda: T) -> Result<DVector<T>> {
    check_ridge(xe, y, lambda)?;
    let n = T::from_count(xe.nrows());
    let rhs = DMatrix::from_column_slice(y.len(), 1, y.as_slice());
    let w = spd_solve(&(xe * xe.transpose()), &rhs, n * lambda)?;
    Ok(xe.transpose() * w.column(0))
}

fn check_ridge<T: Scalar>(xe: &DMatrix<T>, y: &DVector<T>, lambda: T) -> Result<()> {
    if xe.nrows() == 0 {
        return Err(Error::InsufficientData("target fit needs at least one sample".into()));
    }
    if y.len() != xe.nrows() {
        return Err(Error::DimensionMismatch { expected: xe.nrows(), found: y.len() });
    }
    if !(lambda > T::zero()) || !lambda.is_finite() {
        return Err(Error::InvalidParameter(format!("lambda_star must be positive, got {lambda:e}")));
    }
    Ok(())
}

/// Fits the target ridge problem, solving whichever of the primal (`s×s`)
/// and dual (`n_T×n_T`) systems is smaller.
pub fn fit_target<T: Scalar>(
    m: impl Into<Arc<SubspaceModel<T>>>,
    x_t: &DMatrix<T>,
    y_t: &DVector<T>,
    lambda_star: T,
) -> Result<TargetModel<T>> {
    let subspace = m.into();
    if x_t.nrows() == 0 {
        return Err(Error::InsufficientData("target fit needs at least one sample".into()));
    }
    let xe = embed(&subspace, x_t)?;
    let beta_target = if xe.nrows() > subspace.s() {
        ridge_primal(&xe, y_t, lambda_star)?
    } else {
        ridge_dual(&xe, y_t, lambda_star)?
    };
    Ok(TargetModel { subspace, beta_target, lambda_star, n_t: x_t.nrows() })
}

/// `beta_targetᵀ embed(x)` at each row of `x_new`.
pub fn predict_target<T: Scalar>(t: &TargetModel<T>, x_new: &DMatrix<T>) -> Result<DVector<T>> {
    Ok(embed(&t.subspace, x_new)? * &t.beta_target)
}

/// `12κ²·max(ln s, τ)/n_T`, clipped to 1, with the sample-size flag.
pub fn default_lambda_star<T: Scalar>(s: usize, n_t: usize, kappa_sq: T, tau: T) -> Result<LambdaStar<T>> {
    if s == 0 || n_t == 0 {
        return Err(Error::InvalidParameter("s and n_T must be >= 1".into()));
    }
    if !(tau >= T::lit(MIN_TAU)) {
        return Err(Error::InvalidParameter(format!("tau must be >= {MIN_TAU}, got {tau:e}")));
    }
    if !(kappa_sq > T::zero()) {
        return Err(Error::InvalidParameter(format!("kappa_sq must be positive, got {kappa_sq:e}")));
    }
    let budget = T::lit(12.0) * kappa_sq * T::from_count(s).ln().max(tau);
    let n = T::from_count(n_t);
    Ok(LambdaStar { value: (budget / n).min(T::one()), sample_size_ok: n >= budget })
}

impl<T: Scalar> TargetModel<T> {
    pub fn predict(&self, x_new: &DMatrix<T>) -> Result<DVector<T>> {
        predict_target(self, x_new)
    }

    pub fn subspace(&self) -> &Arc<SubspaceModel<T>> {
        &self.subspace
    }

    pub fn beta_target(&self) -> &DVector<T> {
        &self.beta_target
    }

    pub fn lambda_star(&self) -> T {
        self.lambda_star
    }

    pub fn n_t(&self) -> usize {
        self.n_t
    }
}

const TARGET_FORMAT: &str = "kmeta.target";
const TARGET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
struct TargetRecord<T: Scalar> {
    format: String,
    version: u32,
    subspace: SubspaceModel<T>,
    beta_target: Vec<T>,
    lambda_star: T,
    n_t: usize,
}

impl<T: Scalar> Serialize for TargetModel<T> {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        TargetRecord {
            format: TARGET_FORMAT.into(),
            version: TARGET_VERSION,
            subspace: (*self.subspace).clone(),
            beta_target: self.beta_target.as_slice().to_vec(),
            lambda_star: self.lambda_star,
            n_t: self.n_t,
        }
        .serialize(ser)
    }
}

impl<'de, T: Scalar> Deserialize<'de> for TargetModel<T> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let rec = TargetRecord::<T>::deserialize(d)?;
        if rec.format != TARGET_FORMAT || rec.version != TARGET_VERSION {
            return Err(D::Error::custom(format!("unsupported target format {} v{}", rec.format, rec.version)));
        }
        if rec.beta_target.len() != rec.subspace.s() {
            return Err(D::Error::custom(format!(
                "beta_target has {} entries, subspace dimension is {}",
                rec.beta_target.len(),
                rec.subspace.s()
            )));
        }
        Ok(TargetModel {
            subspace: Arc::new(rec.subspace),
            beta_target: DVector::from_vec(rec.beta_target),
            lambda_star: rec.lambda_star,
            n_t: rec.n_t,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelSpec;
    use crate::numerics::svd;
    use crate::pretrain::{pretrain, TaskData};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random(n: usize, m: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0))
    }

    fn tasks(n_tasks: usize, n: usize, d: usize, seed: u64) -> Vec<TaskData<f64>> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let w = random(3, d, seed + 1);
        (0..n_tasks)
            .map(|_| {
                let mix: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
                let x = DMatrix::from_fn(2 * n, d, |_, _| rng.random_range(-1.0..1.0));
                let y = DVector::from_fn(2 * n, |r, _| {
                    mix.iter().enumerate().map(|(k, m)| m * x.row(r).dot(&w.row(k)).cos()).sum::<f64>()
                        + 0.05 * rng.random_range(-1.0..1.0)
                });
                TaskData::new(x, y).unwrap()
            })
            .collect()
    }

    fn model(kernel: &KernelSpec<f64>, s: usize, seed: u64) -> Arc<SubspaceModel<f64>> {
        Arc::new(pretrain(kernel, &tasks(10, 15, 2, seed), 0.01, s).unwrap())
    }

    fn objective(xe: &DMatrix<f64>, y: &DVector<f64>, b: &DVector<f64>, lambda: f64) -> f64 {
        (y - xe * b).norm_squared() / y.len() as f64 + lambda * b.norm_squared()
    }

    #[test]
    fn single_function_embedding() {
        let k = KernelSpec::gaussian(0.8).unwrap();
        let m = pretrain(&k, &tasks(1, 10, 2, 1), 0.05, 1).unwrap();
        let f = &m.second_halves()[0];
        let x = random(6, 2, 2);
        let want = f.predict(&x).unwrap() / f.rkhs_norm_sq().sqrt();
        let got = embed(&m, &x).unwrap();
        assert!((got.column(0) - want).amax() < 1e-12);
    }

    #[test]
    fn far_points_embed_to_zero() {
        let k = KernelSpec::gaussian(0.1).unwrap();
        let m = model(&k, 2, 3);
        let far = DMatrix::from_row_slice(2, 2, &[1e3, 1e3, -1e3, 5e2]);
        assert!(embed(&m, &far).unwrap().iter().all(|&v| v == 0.0));
        assert!(embed(&m, &random(2, 3, 1)).is_err());
    }

    #[test]
    fn embedding_contracts_feature_norm() {
        let k = KernelSpec::gaussian(0.6).unwrap();
        let m = model(&k, 3, 4);
        let x = random(1000, 2, 5) * 1.5;
        let e = embed(&m, &x).unwrap();
        for r in 0..1000 {
            assert!(e.row(r).norm_squared() <= 1.0 + 1e-8);
        }
    }

    #[test]
    fn polynomial_projector_oracle() {
        // Explicit features: the learned basis is W·beta with orthonormal
        // columns, so the embedding is φ(x)ᵀ W beta.
        let k = KernelSpec::polynomial(2, 1.0, 2.0).unwrap();
        let m = Arc::new(pretrain(&k, &tasks(10, 20, 2, 6), 1e-3, 3).unwrap());
        let weights: Vec<DVector<f64>> = m
            .second_halves()
            .iter()
            .map(|r| k.explicit_features(r.anchors()).unwrap().transpose() * r.dual_coeffs())
            .collect();
        let basis = DMatrix::from_columns(&weights) * m.beta();
        assert!((basis.transpose() * &basis - DMatrix::identity(3, 3)).amax() < 1e-8);
        let x = random(50, 2, 7);
        let phi = k.explicit_features(&x).unwrap();
        let oracle = &phi * &basis;
        let got = embed(&m, &x).unwrap();
        assert!((&got - &oracle).amax() < 1e-8);
        for r in 0..50 {
            assert!((got.row(r).norm_squared() - oracle.row(r).norm_squared()).abs() < 1e-8);
        }

        let xt = random(30, 2, 8);
        let yt = DVector::from_fn(30, |r, _| xt[(r, 0)] * xt[(r, 1)] + 0.3);
        let t = fit_target(m.clone(), &xt, &yt, 0.01).unwrap();
        let phit = k.explicit_features(&xt).unwrap() * &basis;
        let b = (phit.transpose() * &phit + DMatrix::identity(3, 3) * (30.0 * 0.01))
            .try_inverse()
            .unwrap()
            * phit.transpose()
            * &yt;
        let probe = random(5, 2, 9);
        let want = k.explicit_features(&probe).unwrap() * &basis * b;
        assert!((t.predict(&probe).unwrap() - want).amax() < 1e-8);
    }

    #[test]
    fn basis_functions_reembed_to_unit_vectors() {
        let k = KernelSpec::laplacian(0.9).unwrap();
        let m = model(&k, 3, 10);
        for j in 0..3 {
            let c = project_function(&m, &m.basis_function(j).unwrap()).unwrap();
            let mut e = DVector::zeros(3);
            e[j] = 1.0;
            assert!((c - e).amax() < 1e-7);
        }
    }

    #[test]
    fn scalar_ridge() {
        let k = KernelSpec::gaussian(0.8).unwrap();
        let m = model(&k, 1, 11);
        let x = random(12, 2, 12);
        let y = DVector::from_fn(12, |r, _| x[(r, 0)] - 0.5);
        let t = fit_target(m.clone(), &x, &y, 0.2).unwrap();
        let xe = embed(&m, &x).unwrap();
        let want = xe.column(0).dot(&y) / (xe.column(0).norm_squared() + 12.0 * 0.2);
        assert!((t.beta_target()[0] - want).abs() < 1e-12 * want.abs().max(1.0));
        let probe = random(5, 2, 13);
        let pe = embed(&m, &probe).unwrap();
        assert!((t.predict(&probe).unwrap() - pe.column(0) * want).amax() < 1e-12);
    }

    #[test]
    fn zero_labels_give_zero_model() {
        let k = KernelSpec::gaussian(0.8).unwrap();
        let m = model(&k, 2, 14);
        let t = fit_target(m, &random(8, 2, 15), &DVector::zeros(8), 0.1).unwrap();
        assert!(t.beta_target().iter().all(|&b| b == 0.0));
        assert!(t.predict(&random(4, 2, 16)).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn primal_dual_and_dense_oracle() {
        let xe = random(25, 3, 17);
        let y = DVector::from_fn(25, |r, _| (r as f64 * 0.3).sin());
        let lambda = 0.05;
        let p = ridge_primal(&xe, &y, lambda).unwrap();
        let d = ridge_dual(&xe, &y, lambda).unwrap();
        assert!((&p - &d).amax() <= 1e-9 * p.amax());
        let best = objective(&xe, &y, &p, lambda);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(18);
        for _ in 0..500 {
            let pert = DVector::from_fn(3, |_, _| 1e-3 * rng.random_range(-1.0..1.0));
            assert!(objective(&xe, &y, &(&p + pert), lambda) >= best);
        }
        assert!(ridge_primal(&xe, &y, 0.0).is_err());
        assert!(ridge_dual(&xe, &DVector::zeros(3), 0.1).is_err());
    }

    #[test]
    fn few_samples_use_dual_form() {
        let k = KernelSpec::gaussian(0.8).unwrap();
        let m = model(&k, 3, 19);
        let x = random(2, 2, 20);
        let y = DVector::from_vec(vec![1.0, -1.0]);
        let t = fit_target(m.clone(), &x, &y, 0.1).unwrap();
        let xe = embed(&m, &x).unwrap();
        let p = ridge_primal(&xe, &y, 0.1).unwrap();
        assert!((t.beta_target() - p).amax() <= 1e-8 * t.beta_target().amax());
        assert_eq!(t.n_t(), 2);
    }

    #[test]
    fn default_regularization() {
        let l = default_lambda_star(1, 100, 1.0f64, 2.6).unwrap();
        assert!((l.value - 0.312).abs() < 1e-15);
        assert!(l.sample_size_ok);
        let l2 = default_lambda_star(2, 100, 1.0, 2.6).unwrap();
        assert_eq!(l2.value, l.value);
        let l = default_lambda_star(1, 10, 1.0, 2.6).unwrap();
        assert_eq!(l.value, 1.0);
        assert!(!l.sample_size_ok);
        assert!(default_lambda_star(1, 10, 1.0, 2.5).is_err());
        // ln s only dominates once s > e^τ.
        let l = default_lambda_star(100, 1000, 1.0, 2.6).unwrap();
        assert!((l.value - 12.0 * 100f64.ln() / 1000.0).abs() < 1e-15);
    }

    #[test]
    fn serde_round_trip() {
        let k = KernelSpec::gaussian(0.8).unwrap();
        let m = model(&k, 2, 21);
        let x = random(10, 2, 22);
        let t = fit_target(m, &x, &DVector::from_fn(10, |r, _| x[(r, 1)]), 0.1).unwrap();
        let back: TargetModel<f64> = serde_json::from_str(&serde_json::to_string(&t).unwrap()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn f32_pipeline() {
        let k = KernelSpec::<f32>::gaussian(0.8).unwrap();
        let data: Vec<TaskData<f32>> = tasks(6, 10, 2, 23)
            .into_iter()
            .map(|t| TaskData::new(t.x.map(|v| v as f32), t.y.map(|v| v as f32)).unwrap())
            .collect();
        let m = pretrain(&k, &data, 0.05, 2).unwrap();
        let gap = m.beta().transpose() * m.j() * m.beta() - DMatrix::identity(2, 2);
        assert!(gap.amax() < 1e-3);
        let x = random(8, 2, 24).map(|v| v as f32);
        let t = fit_target(m, &x, &DVector::from_element(8, 1.0f32), 0.1).unwrap();
        assert!(t.predict(&x).unwrap().iter().all(|v| v.is_finite()));
        assert!(svd(&DMatrix::<f32>::identity(2, 2)).is_ok());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn shrinkage_and_agreement(seed in 0u64..5000, l1 in 1e-4f64..1.0, factor in 1.0f64..50.0) {
            let xe = random(15, 3, seed);
            let y = DVector::from_fn(15, |r, _| xe[(r, 0)] + (r as f64).cos());
            let b1 = ridge_primal(&xe, &y, l1).unwrap();
            let b2 = ridge_primal(&xe, &y, l1 * factor).unwrap();
            prop_assert!(b2.norm() <= b1.norm() + 1e-10);
            let d1 = ridge_dual(&xe, &y, l1).unwrap();
            prop_assert!((&b1 - &d1).amax() <= 1e-8 * b1.amax().max(1e-300));
        }
    }
}
