//! Dense vectors and matrices, seeded randomness, and the stable elementary
//! numerics every other module builds on.

use std::ops::{Deref, DerefMut};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A nonempty vector of finite reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DenseVector<T>(Vec<T>);

impl<T: Scalar> DenseVector<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyVector);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("vector"));
        }
        Ok(Self(values))
    }

    pub fn zeros(len: usize) -> Self {
        assert!(len > 0, "DenseVector must be nonempty");
        Self(vec![T::zero(); len])
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<T> {
        self.0
    }

    pub fn norm(&self) -> T {
        norm(&self.0)
    }
}

impl<T> Deref for DenseVector<T> {
    type Target = [T];

    fn deref(&self) -> &[T] {
        &self.0
    }
}

impl<T> DerefMut for DenseVector<T> {
    fn deref_mut(&mut self) -> &mut [T] {
        &mut self.0
    }
}

impl<T> From<DenseVector<T>> for Vec<T> {
    fn from(v: DenseVector<T>) -> Self {
        v.0
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix<T> {
    rows: usize,
    cols: usize,
    values: Vec<T>,
}

impl<T: Scalar> DenseMatrix<T> {
    pub fn new(rows: usize, cols: usize, values: Vec<T>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::EmptyVector);
        }
        if values.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                found: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix"));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "DenseMatrix must be nonempty");
        Self {
            rows,
            cols,
            values: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    found: row.len(),
                });
            }
            values.extend_from_slice(row);
        }
        Self::new(rows.len(), cols, values)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.values[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.values[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[T]> {
        self.values.chunks_exact(self.cols)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.values
    }

    /// `self · x` for a vector of length `cols`.
    pub fn matvec(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.cols {
            return Err(Error::DimensionMismatch {
                expected: self.cols,
                found: x.len(),
            });
        }
        Ok(self.iter_rows().map(|row| dot(row, x)).collect())
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// ChaCha-backed generator; equal seeds give bit-identical streams.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn standard_normal<T: Scalar>(&mut self) -> T {
        let x: f64 = self.inner.sample(StandardNormal);
        T::of(x)
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform<T: Scalar>(&mut self, lo: f64, hi: f64) -> T {
        T::of(self.inner.random_range(lo..hi))
    }

    pub fn index(&mut self, upper: usize) -> usize {
        self.inner.random_range(0..upper)
    }

    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        items.shuffle(&mut self.inner);
    }
}

/// `n` i.i.d. standard normal draws.
pub fn draw_standard_normal<T: Scalar>(rng: &mut SeededRng, n: usize) -> Result<DenseVector<T>> {
    if n == 0 {
        return Err(Error::EmptyVector);
    }
    Ok(DenseVector((0..n).map(|_| rng.standard_normal()).collect()))
}

/// Left-to-right sum; fixed order keeps results reproducible.
#[inline]
pub fn total<T: Scalar>(values: impl IntoIterator<Item = T>) -> T {
    values.into_iter().fold(T::zero(), |acc, v| acc + v)
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[inline]
pub fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Cosine similarity clamped to `[-1, 1]`.
pub fn cosine_similarity<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == T::zero() || nb == T::zero() {
        return Err(Error::DegenerateVector);
    }
    let cos = dot(a, b) / (na * nb);
    Ok(cos.max(-T::one()).min(T::one()))
}

pub fn l2_normalize<T: Scalar>(a: &[T]) -> Result<DenseVector<T>> {
    if a.is_empty() {
        return Err(Error::EmptyVector);
    }
    let n = norm(a);
    if n == T::zero() {
        return Err(Error::DegenerateVector);
    }
    if !n.is_finite() {
        return Err(Error::NonFinite("vector"));
    }
    Ok(DenseVector(a.iter().map(|&x| x / n).collect()))
}

/// `log Σ exp(vᵢ)` with the max shifted out. Returns `-inf` for an empty
/// slice or when every entry is `-inf`.
pub fn log_sum_exp<T: Scalar>(values: &[T]) -> T {
    let max = values.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    let sum = total(values.iter().map(|&v| (v - max).exp()));
    max + sum.ln()
}

/// Two-term log-sum-exp, the inner loop of the two-column transport problem.
#[inline]
pub fn log_add_exp<T: Scalar>(a: T, b: T) -> T {
    let m = a.max(b);
    if m == T::neg_infinity() {
        return m;
    }
    m + (-(a - b).abs()).exp().ln_1p()
}

#[inline]
pub fn sign<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Index of the maximum; ties resolve to the lowest index.
pub fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        // 32 / (sqrt(14) * sqrt(77))
        let expected = 32.0 / (14.0f64.sqrt() * 77.0f64.sqrt());
        let got = cosine_similarity(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert!(close(got, expected, 1e-15));
        assert!(close(got, 0.974_631_846_197_076_2, 1e-12));
    }

    #[test]
    fn cosine_rejects_degenerate_and_mismatch() {
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::DegenerateVector)
        ));
        assert!(matches!(
            cosine_similarity(&[1.0], &[1.0, 0.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn normalize_examples() {
        let v = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!(close(v[0], 0.6, 1e-15) && close(v[1], 0.8, 1e-15));
        assert_eq!(
            l2_normalize(&[1.0, 0.0, 0.0]).unwrap().as_slice(),
            &[1.0, 0.0, 0.0]
        );
        let v = l2_normalize(&[2.0, 2.0]).unwrap();
        assert!(close(v[0], std::f64::consts::FRAC_1_SQRT_2, 1e-15));
        assert!(matches!(
            l2_normalize(&[0.0, 0.0]),
            Err(Error::DegenerateVector)
        ));
    }

    #[test]
    fn log_sum_exp_examples() {
        assert!(close(
            log_sum_exp(&[0.0, 0.0]),
            std::f64::consts::LN_2,
            1e-15
        ));
        assert!(close(
            log_sum_exp(&[-2000.0, -2000.0]),
            -2000.0 + std::f64::consts::LN_2,
            1e-12
        ));
        assert_eq!(log_sum_exp(&[1.0]), 1.0);
        assert!(close(
            log_add_exp(-2000.0, -2000.0),
            -2000.0 + std::f64::consts::LN_2,
            1e-12
        ));
    }

    #[test]
    fn normal_draw_moments() {
        let mut rng = SeededRng::new(7);
        let n = 1_000_000;
        let x: DenseVector<f64> = draw_standard_normal(&mut rng, n).unwrap();
        let mean = x.iter().sum::<f64>() / n as f64;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn seeded_streams_repeat() {
        let a: DenseVector<f64> = draw_standard_normal(&mut SeededRng::new(42), 1000).unwrap();
        let b: DenseVector<f64> = draw_standard_normal(&mut SeededRng::new(42), 1000).unwrap();
        assert!(a
            .iter()
            .zip(b.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        let c: DenseVector<f64> = draw_standard_normal(&mut SeededRng::new(43), 1000).unwrap();
        assert_ne!(a, c);
        assert!(draw_standard_normal::<f64>(&mut SeededRng::new(0), 0).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn dense_vector_validates() {
        assert!(DenseVector::<f64>::new(vec![]).is_err());
        assert!(DenseVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(DenseMatrix::new(2, 2, vec![1.0; 3]).is_err());
        let m = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(m.matvec(&[1.0, 1.0]).unwrap(), vec![3.0, 7.0]);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn nonzero_vec() -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(-100.0f64..100.0, 1..16)
                .prop_filter("nonzero", |v| norm(v) > 1e-3)
        }

        proptest! {
            #[test]
            fn self_cosine_is_one(a in nonzero_vec()) {
                prop_assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-12);
            }

            #[test]
            fn lse_shift_invariant(v in prop::collection::vec(-50.0f64..50.0, 1..20), k in -1000.0f64..1000.0) {
                let shifted: Vec<f64> = v.iter().map(|x| x + k).collect();
                prop_assert!((log_sum_exp(&shifted) - (log_sum_exp(&v) + k)).abs() < 1e-10);
            }

            #[test]
            fn normalize_idempotent(a in nonzero_vec()) {
                let once = l2_normalize(&a).unwrap();
                let twice = l2_normalize(&once).unwrap();
                prop_assert!((once.norm() - 1.0).abs() < 1e-12);
                for (x, y) in once.iter().zip(twice.iter()) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }
}
