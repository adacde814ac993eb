//! Positive-definite kernel families and Gram-matrix assembly.
//!
//! Every family here is bounded, `sup K(x, x') = κ² < ∞`. Stationary kernels
//! are normalized so `K(x, x) = 1`; the polynomial kernel carries a declared
//! domain radius `ρ` and reports `κ² = (ρ² + c)^m`.
//!
//! Points are passed as slices. Matrices of points are `n × d` with one
//! point per row.

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Half-integer Matérn smoothness with a closed form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MaternNu {
    Half,
    ThreeHalves,
    FiveHalves,
}

impl MaternNu {
    pub fn value(self) -> f64 {
        match self {
            MaternNu::Half => 0.5,
            MaternNu::ThreeHalves => 1.5,
            MaternNu::FiveHalves => 2.5,
        }
    }
}

impl TryFrom<f64> for MaternNu {
    type Error = String;

    fn try_from(v: f64) -> std::result::Result<Self, String> {
        match v {
            x if x == 0.5 => Ok(MaternNu::Half),
            x if x == 1.5 => Ok(MaternNu::ThreeHalves),
            x if x == 2.5 => Ok(MaternNu::FiveHalves),
            other => Err(format!("unsupported Matérn smoothness {other}; use 0.5, 1.5 or 2.5")),
        }
    }
}

impl From<MaternNu> for f64 {
    fn from(nu: MaternNu) -> f64 {
        nu.value()
    }
}

impl Serialize for MaternNu {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_f64(self.value())
    }
}

impl<'de> Deserialize<'de> for MaternNu {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        MaternNu::try_from(v).map_err(serde::de::Error::custom)
    }
}

/// Kernel family and its shape parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", content = "params", rename_all = "lowercase")]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
pub enum KernelFamily<T> {
    /// `exp(-‖x − y‖² / (2σ²))`
    Gaussian { bandwidth: T },
    /// `exp(-‖x − y‖ / ℓ)`
    Laplacian { scale: T },
    /// `(⟨x, y⟩ + c)^m` on the ball `‖x‖ ≤ ρ`.
    Polynomial { degree: u32, offset: T, radius: T },
    Matern { nu: MaternNu, lengthscale: T },
}

/// Regularity metadata `(p, α)`: eigenvalue decay order and embedding index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Regularity {
    pub p: f64,
    pub alpha: f64,
}

/// Regularity implied by a Matérn kernel whose RKHS is the Sobolev space of
/// smoothness `m = ν + d/2`: `p = d / (2m)`, with `α = p` taken as the
/// admissible endpoint.
pub fn matern_regularity(nu: MaternNu, dim: usize) -> Regularity {
    let m = nu.value() + dim as f64 / 2.0;
    let p = dim as f64 / (2.0 * m);
    Regularity { p, alpha: p }
}

/// A validated kernel together with its bound `κ²`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec<T: Scalar = f64> {
    family: KernelFamily<T>,
    kappa_sq: T,
    regularity: Option<Regularity>,
}

fn positive<T: Scalar>(name: &str, v: T) -> Result<()> {
    if v > T::zero() && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("{name} must be positive and finite, got {v:e}")))
    }
}

impl<T: Scalar> KernelSpec<T> {
    /// Validates `family` and computes its bound.
    pub fn new(family: KernelFamily<T>) -> Result<Self> {
        let kappa_sq = match &family {
            KernelFamily::Gaussian { bandwidth } => {
                positive("bandwidth", *bandwidth)?;
                T::one()
            }
            KernelFamily::Laplacian { scale } => {
                positive("scale", *scale)?;
                T::one()
            }
            KernelFamily::Matern { lengthscale, .. } => {
                positive("lengthscale", *lengthscale)?;
                T::one()
            }
            KernelFamily::Polynomial { degree, offset, radius } => {
                if *degree < 1 {
                    return Err(Error::InvalidParameter("polynomial degree must be >= 1".into()));
                }
                if !(*offset >= T::zero()) || !offset.is_finite() {
                    return Err(Error::InvalidParameter(format!(
                        "polynomial offset must be >= 0, got {offset:e}"
                    )));
                }
                positive("radius", *radius)?;
                (*radius * *radius + *offset).powi(*degree as i32)
            }
        };
        let regularity = match family {
            // Finite-dimensional feature space.
            KernelFamily::Polynomial { .. } => Some(Regularity { p: 0.0, alpha: 0.0 }),
            _ => None,
        };
        Ok(Self { family, kappa_sq, regularity })
    }

    pub fn gaussian(bandwidth: T) -> Result<Self> {
        Self::new(KernelFamily::Gaussian { bandwidth })
    }

    pub fn laplacian(scale: T) -> Result<Self> {
        Self::new(KernelFamily::Laplacian { scale })
    }

    pub fn polynomial(degree: u32, offset: T, radius: T) -> Result<Self> {
        Self::new(KernelFamily::Polynomial { degree, offset, radius })
    }

    pub fn matern(nu: MaternNu, lengthscale: T) -> Result<Self> {
        Self::new(KernelFamily::Matern { nu, lengthscale })
    }

    /// Attaches `(p, α)` metadata. Requires `0 ≤ p ≤ α ≤ 1`.
    pub fn with_regularity(mut self, regularity: Regularity) -> Result<Self> {
        let Regularity { p, alpha } = regularity;
        if !(0.0..=1.0).contains(&p) || !(p..=1.0).contains(&alpha) {
            return Err(Error::InvalidParameter(format!(
                "regularity needs 0 <= p <= alpha <= 1, got p={p}, alpha={alpha}"
            )));
        }
        self.regularity = Some(regularity);
        Ok(self)
    }

    pub fn family(&self) -> &KernelFamily<T> {
        &self.family
    }

    /// `sup K(x, x')`.
    pub fn kappa_sq(&self) -> T {
        self.kappa_sq
    }

    pub fn regularity(&self) -> Option<Regularity> {
        self.regularity
    }

    /// Dimension of the feature space when it is finite: `C(d + m, m)` for
    /// the polynomial kernel with a positive offset.
    pub fn feature_dim(&self, input_dim: usize) -> Option<usize> {
        match &self.family {
            KernelFamily::Polynomial { degree, offset, .. } => {
                let m = *degree as usize;
                if *offset > T::zero() {
                    Some(binomial(input_dim + m, m))
                } else {
                    Some(binomial(input_dim + m - 1, m))
                }
            }
            _ => None,
        }
    }

    /// `K(x, y)`.
    pub fn eval(&self, x: &[T], y: &[T]) -> Result<T> {
        if x.len() != y.len() {
            return Err(Error::DimensionMismatch { expected: x.len(), found: y.len() });
        }
        if x.is_empty() {
            return Err(Error::InvalidParameter("points must have dimension >= 1".into()));
        }
        Ok(self.eval_unchecked(x, y))
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, x: &[T], y: &[T]) -> T {
        match &self.family {
            KernelFamily::Gaussian { bandwidth } => {
                let two_sigma_sq = T::lit(2.0) * *bandwidth * *bandwidth;
                (-sq_dist(x, y) / two_sigma_sq).exp()
            }
            KernelFamily::Laplacian { scale } => (-sq_dist(x, y).sqrt() / *scale).exp(),
            KernelFamily::Matern { nu, lengthscale } => {
                let r = sq_dist(x, y).sqrt() / *lengthscale;
                match nu {
                    MaternNu::Half => (-r).exp(),
                    MaternNu::ThreeHalves => {
                        let a = T::lit(3.0).sqrt() * r;
                        (T::one() + a) * (-a).exp()
                    }
                    MaternNu::FiveHalves => {
                        let a = T::lit(5.0).sqrt() * r;
                        (T::one() + a + a * a / T::lit(3.0)) * (-a).exp()
                    }
                }
            }
            KernelFamily::Polynomial { degree, offset, .. } => {
                (dot(x, y) + *offset).powi(*degree as i32)
            }
        }
    }

    /// Gram matrix of the rows of `x`. Symmetric by construction.
    pub fn gram(&self, x: &DMatrix<T>) -> Result<DMatrix<T>> {
        check_dim(x.ncols())?;
        let pts = rows(x);
        let n = pts.len();
        let mut g = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = self.eval_unchecked(&pts[i], &pts[j]);
                g[(i, j)] = v;
                g[(j, i)] = v;
            }
        }
        Ok(g)
    }

    /// `G[i][j] = K(x_i, z_j)`.
    pub fn cross_gram(&self, x: &DMatrix<T>, z: &DMatrix<T>) -> Result<DMatrix<T>> {
        if x.ncols() != z.ncols() {
            return Err(Error::DimensionMismatch { expected: x.ncols(), found: z.ncols() });
        }
        check_dim(x.ncols())?;
        let xs = rows(x);
        let zs = rows(z);
        Ok(DMatrix::from_fn(xs.len(), zs.len(), |i, j| self.eval_unchecked(&xs[i], &zs[j])))
    }

    /// Explicit feature map `Φ` with `Φ Φᵀ = K`, one row per input row, for
    /// kernels with a finite feature space. Columns enumerate the monomials
    /// of `(x, √c)` of total degree `m`, weighted by multinomial roots.
    pub fn explicit_features(&self, x: &DMatrix<T>) -> Option<DMatrix<T>> {
        let KernelFamily::Polynomial { degree, offset, .. } = &self.family else {
            return None;
        };
        let m = *degree as usize;
        let d = x.ncols();
        let mut powers = Vec::new();
        multi_indices(d + 1, m, &mut vec![0; d + 1], 0, &mut powers);
        let fact = |k: usize| (1..=k).fold(1.0f64, |a, i| a * i as f64);
        let root_c = offset.sqrt();
        let mut out = DMatrix::zeros(x.nrows(), powers.len());
        for (col, k) in powers.iter().enumerate() {
            let weight = T::lit((fact(m) / k.iter().map(|&ki| fact(ki)).product::<f64>()).sqrt());
            for i in 0..x.nrows() {
                let mut v = weight * root_c.powi(k[0] as i32);
                for t in 0..d {
                    v *= x[(i, t)].powi(k[t + 1] as i32);
                }
                out[(i, col)] = v;
            }
        }
        Some(out)
    }
}

fn multi_indices(slots: usize, left: usize, cur: &mut Vec<usize>, at: usize, out: &mut Vec<Vec<usize>>) {
    if at + 1 == slots {
        cur[at] = left;
        out.push(cur.clone());
        return;
    }
    for k in 0..=left {
        cur[at] = k;
        multi_indices(slots, left - k, cur, at + 1, out);
    }
}

impl<T: Scalar> fmt::Display for KernelSpec<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.family {
            KernelFamily::Gaussian { bandwidth } => write!(f, "gaussian(σ={bandwidth})"),
            KernelFamily::Laplacian { scale } => write!(f, "laplacian(ℓ={scale})"),
            KernelFamily::Polynomial { degree, offset, radius } => {
                write!(f, "polynomial(m={degree}, c={offset}, ρ={radius})")
            }
            KernelFamily::Matern { nu, lengthscale } => {
                write!(f, "matern(ν={}, ℓ={lengthscale})", nu.value())
            }
        }
    }
}

fn check_dim(d: usize) -> Result<()> {
    if d == 0 {
        Err(Error::InvalidParameter("points must have dimension >= 1".into()))
    } else {
        Ok(())
    }
}

fn binomial(n: usize, k: usize) -> usize {
    (1..=k).fold(1usize, |acc, i| acc * (n + 1 - i) / i)
}

/// Rows of `x` copied out as contiguous vectors.
pub(crate) fn rows<T: Scalar>(x: &DMatrix<T>) -> Vec<Vec<T>> {
    (0..x.nrows()).map(|i| x.row(i).iter().copied().collect()).collect()
}

/// `Σ (x_k − y_k)²`; exactly symmetric in its arguments and never negative.
#[inline]
fn sq_dist<T: Scalar>(x: &[T], y: &[T]) -> T {
    x.iter().zip(y).fold(T::zero(), |acc, (&a, &b)| {
        let d = a - b;
        acc + d * d
    })
}

#[inline]
fn dot<T: Scalar>(x: &[T], y: &[T]) -> T {
    x.iter().zip(y).fold(T::zero(), |acc, (&a, &b)| acc + a * b)
}

#[derive(Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
struct KernelRecord<T> {
    #[serde(flatten)]
    family: KernelFamily<T>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kappa_sq: Option<T>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
}

impl<T: Scalar> Serialize for KernelSpec<T> {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        KernelRecord {
            family: self.family.clone(),
            kappa_sq: Some(self.kappa_sq),
            p: self.regularity.map(|r| r.p),
            alpha: self.regularity.map(|r| r.alpha),
        }
        .serialize(s)
    }
}

impl<'de, T: Scalar> Deserialize<'de> for KernelSpec<T> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let rec = KernelRecord::<T>::deserialize(d)?;
        let mut spec = KernelSpec::new(rec.family).map_err(D::Error::custom)?;
        if let Some(k) = rec.kappa_sq {
            let tol = T::lit(1e-9) * spec.kappa_sq;
            if (k - spec.kappa_sq).abs() > tol {
                return Err(D::Error::custom(format!(
                    "kappa_sq {k:e} disagrees with the kernel parameters ({:e})",
                    spec.kappa_sq
                )));
            }
        }
        match (rec.p, rec.alpha) {
            (Some(p), Some(alpha)) => {
                spec = spec.with_regularity(Regularity { p, alpha }).map_err(D::Error::custom)?;
            }
            (Some(p), None) => {
                spec = spec.with_regularity(Regularity { p, alpha: p }).map_err(D::Error::custom)?;
            }
            (None, Some(_)) => return Err(D::Error::custom("alpha given without p")),
            (None, None) => {}
        }
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_points(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.5..1.5))
    }

    fn min_max_eig(g: &DMatrix<f64>) -> (f64, f64) {
        let e = nalgebra::SymmetricEigen::new(g.clone()).eigenvalues;
        (e.min(), e.max())
    }

    #[test]
    fn gaussian_closed_forms() {
        let k = KernelSpec::gaussian(1.0).unwrap();
        assert_eq!(k.eval(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 1.0);
        let v = k.eval(&[0.0], &[1.0]).unwrap();
        assert!((v - (-0.5f64).exp()).abs() < 1e-15);
        assert!((v - 0.60653066).abs() < 1e-8);
        assert_eq!(k.kappa_sq(), 1.0);
    }

    #[test]
    fn matern_half_is_laplacian() {
        let m = KernelSpec::matern(MaternNu::Half, 1.0).unwrap();
        let l = KernelSpec::laplacian(1.0).unwrap();
        let x = random_points(10, 3, 7);
        let diff = (m.gram(&x).unwrap() - l.gram(&x).unwrap()).abs().max();
        assert!(diff < 1e-12);
    }

    #[test]
    fn matern_closed_forms_at_origin() {
        for nu in [MaternNu::Half, MaternNu::ThreeHalves, MaternNu::FiveHalves] {
            let k = KernelSpec::matern(nu, 0.7).unwrap();
            assert_eq!(k.eval(&[0.3, -0.2], &[0.3, -0.2]).unwrap(), 1.0);
        }
        // ν = 3/2 and 5/2 are once and twice differentiable at r = 0: the
        // one-sided slope vanishes, while ν = 1/2 has slope −1/ℓ.
        let h = 1e-6;
        let slope = |nu| {
            let k: KernelSpec = KernelSpec::matern(nu, 1.0).unwrap();
            (k.eval(&[h], &[0.0]).unwrap() - 1.0) / h
        };
        assert!((slope(MaternNu::Half) + 1.0).abs() < 1e-5);
        assert!(slope(MaternNu::ThreeHalves).abs() < 1e-5);
        assert!(slope(MaternNu::FiveHalves).abs() < 1e-5);
        // Published values at r = 1: (1+√3)e^{−√3}, (1+√5+5/3)e^{−√5}.
        let k = KernelSpec::matern(MaternNu::ThreeHalves, 1.0).unwrap();
        let s3 = 3f64.sqrt();
        assert!((k.eval(&[1.0], &[0.0]).unwrap() - (1.0 + s3) * (-s3).exp()).abs() < 1e-15);
        let k = KernelSpec::matern(MaternNu::FiveHalves, 1.0).unwrap();
        let s5 = 5f64.sqrt();
        let want = (1.0 + s5 + 5.0 / 3.0) * (-s5).exp();
        assert!((k.eval(&[1.0], &[0.0]).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn polynomial_bound() {
        let k = KernelSpec::polynomial(3, 0.5, 2.0).unwrap();
        assert_eq!(k.kappa_sq(), (4.0f64 + 0.5).powi(3));
        assert_eq!(k.regularity(), Some(Regularity { p: 0.0, alpha: 0.0 }));
        assert_eq!(k.feature_dim(5), Some(56));
        assert_eq!(KernelSpec::polynomial(1, 1.0, 1.0).unwrap().feature_dim(5), Some(6));
    }

    #[test]
    fn explicit_features_reproduce_gram() {
        let k = KernelSpec::polynomial(3, 0.7, 3.0).unwrap();
        let x = random_points(9, 3, 5);
        let phi = k.explicit_features(&x).unwrap();
        assert_eq!(phi.ncols(), k.feature_dim(3).unwrap());
        let g = k.gram(&x).unwrap();
        assert!((&phi * phi.transpose() - &g).amax() < 1e-10 * g.amax());
        assert!(KernelSpec::gaussian(1.0).unwrap().explicit_features(&x).is_none());
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(KernelSpec::gaussian(0.0).is_err());
        assert!(KernelSpec::laplacian(-1.0).is_err());
        assert!(KernelSpec::polynomial(0, 1.0, 1.0).is_err());
        assert!(KernelSpec::polynomial(2, -1.0, 1.0).is_err());
        assert!(KernelSpec::matern(MaternNu::Half, f64::NAN).is_err());
        assert!(MaternNu::try_from(1.0).is_err());
        let k = KernelSpec::gaussian(1.0).unwrap();
        assert!(matches!(k.eval(&[0.0], &[0.0, 1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn gram_edge_cases() {
        let k = KernelSpec::gaussian(1.0).unwrap();
        let one = DMatrix::from_row_slice(1, 2, &[0.4, 0.1]);
        assert_eq!(k.gram(&one).unwrap(), DMatrix::from_element(1, 1, 1.0));
        let twin = DMatrix::from_row_slice(2, 2, &[0.4, 0.1, 0.4, 0.1]);
        let g = k.gram(&twin).unwrap();
        assert!(g.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn gram_is_psd() {
        let x = random_points(8, 3, 11);
        for k in [
            KernelSpec::gaussian(0.8).unwrap(),
            KernelSpec::laplacian(0.5).unwrap(),
            KernelSpec::matern(MaternNu::FiveHalves, 1.2).unwrap(),
            KernelSpec::polynomial(2, 1.0, 3.0).unwrap(),
        ] {
            let g = k.gram(&x).unwrap();
            assert_eq!(g, g.transpose());
            let (lo, hi) = min_max_eig(&g);
            assert!(lo >= -1e-10 * hi, "{k}: {lo} vs {hi}");
        }
    }

    #[test]
    fn cross_gram_matches_entrywise() {
        let k = KernelSpec::matern(MaternNu::ThreeHalves, 0.9).unwrap();
        let x = random_points(5, 2, 3);
        let z = random_points(3, 2, 4);
        let c = k.cross_gram(&x, &z).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let xi: Vec<f64> = x.row(i).iter().copied().collect();
                let zj: Vec<f64> = z.row(j).iter().copied().collect();
                assert_eq!(c[(i, j)], k.eval(&xi, &zj).unwrap());
            }
        }
        assert_eq!(k.cross_gram(&x, &x).unwrap(), k.gram(&x).unwrap());
        let single = k.cross_gram(&x.rows(0, 1).into_owned(), &z.rows(0, 1).into_owned()).unwrap();
        assert_eq!(single[(0, 0)], c[(0, 0)]);
        assert!(k.cross_gram(&x, &random_points(2, 3, 1)).is_err());
    }

    #[test]
    fn serde_record_round_trip() {
        let k = KernelSpec::matern(MaternNu::FiveHalves, 0.25)
            .unwrap()
            .with_regularity(matern_regularity(MaternNu::FiveHalves, 2))
            .unwrap();
        let text = serde_json::to_string(&k).unwrap();
        assert!(text.contains("\"family\":\"matern\""));
        let back: KernelSpec<f64> = serde_json::from_str(&text).unwrap();
        assert_eq!(back, k);
        let bad = r#"{"family":"gaussian","params":{"bandwidth":1.0},"kappa_sq":2.0}"#;
        assert!(serde_json::from_str::<KernelSpec<f64>>(bad).is_err());
    }

    #[test]
    fn matern_sobolev_metadata() {
        // m = ν + d/2 = 2.5 + 1 = 3.5 for d = 2, so p = 2/7.
        let r = matern_regularity(MaternNu::FiveHalves, 2);
        assert!((r.p - 2.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn single_precision_kernel() {
        let k = KernelSpec::<f32>::gaussian(1.0).unwrap();
        let v = k.eval(&[0.0], &[1.0]).unwrap();
        assert!((v - 0.606_530_66).abs() < 1e-6);
    }

    fn kernels() -> Vec<KernelSpec<f64>> {
        vec![
            KernelSpec::gaussian(0.6).unwrap(),
            KernelSpec::laplacian(1.3).unwrap(),
            KernelSpec::matern(MaternNu::ThreeHalves, 0.4).unwrap(),
            KernelSpec::polynomial(3, 0.7, 2.0).unwrap(),
        ]
    }

    proptest! {
        #[test]
        fn symmetric_and_bounded(
            x in proptest::collection::vec(-1.0f64..1.0, 3),
            y in proptest::collection::vec(-1.0f64..1.0, 3),
        ) {
            // ‖x‖ ≤ √3 < ρ = 2 keeps the polynomial kernel inside its domain.
            for k in kernels() {
                let a = k.eval(&x, &y).unwrap();
                let b = k.eval(&y, &x).unwrap();
                prop_assert_eq!(a.to_bits(), b.to_bits());
                prop_assert!(a.abs() <= k.kappa_sq() + 1e-12);
                prop_assert!(k.eval(&x, &x).unwrap() > 0.0);
            }
        }
    }
}
