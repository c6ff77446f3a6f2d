//! Differentiable soft top-κ selection over cosine distances.
//!
//! Each distance `cₙ` is transported onto two targets, "selected" (mass κ/N)
//! and "rejected" (mass (N−κ)/N), under the cost `[cₙ², (cₙ−1)²]` and a
//! Gaussian kernel of width σ. A fixed number of alternating row/column
//! scalings approximates the entropic plan; `N` times its selected column is
//! the soft indicator γ.
//!
//! All scalings run in the log domain. With σ = 5e-4 the kernel exponents
//! reach −8000, far below what `exp` can represent.
//!
//! The backward pass replays the retained log-iterates in reverse, so the
//! gradient is that of the truncated iteration actually run, not of the
//! converged plan.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cosine_similarity, log_add_exp, log_sum_exp, total, DenseMatrix};
use crate::scalar::Scalar;

/// Default κ for the common ensemble sizes.
pub const KAPPA_TABLE: [(usize, usize); 4] = [(16, 4), (64, 8), (128, 16), (1024, 32)];

/// κ for an ensemble of `n` classifiers.
///
/// Exact table sizes use the table; other sizes take the entry of the largest
/// table size not exceeding `n`, and sizes below 16 use `max(1, n / 4)`.
pub fn kappa_for(n: usize) -> usize {
    KAPPA_TABLE
        .iter()
        .rev()
        .find(|(size, _)| *size <= n)
        .map(|&(_, k)| k)
        .unwrap_or_else(|| (n / 4).max(1))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SoftKnnConfig<T> {
    pub kappa: usize,
    /// Kernel width σ.
    pub sigma: T,
    /// Number of scaling iterations L.
    pub iterations: usize,
    /// Scores below this are zeroed in `gamma`.
    pub gamma_threshold: T,
}

impl<T: Scalar> Default for SoftKnnConfig<T> {
    fn default() -> Self {
        Self {
            kappa: 4,
            sigma: T::of(0.0005),
            iterations: 400,
            gamma_threshold: T::of(0.3),
        }
    }
}

impl<T: Scalar> SoftKnnConfig<T> {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.kappa == 0 || self.kappa > n {
            return Err(Error::KappaOutOfRange {
                kappa: self.kappa,
                n,
            });
        }
        if !(self.sigma > T::zero()) || !self.sigma.is_finite() {
            return Err(Error::InvalidConfig("sigma must be positive".into()));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("iterations must be at least 1".into()));
        }
        if !(self.gamma_threshold >= T::zero() && self.gamma_threshold < T::one()) {
            return Err(Error::InvalidConfig(
                "gamma_threshold must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Log-domain iterates retained for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornTape<T> {
    n: usize,
    iterations: usize,
    sigma: T,
    log_mu: T,
    log_nu: [T; 2],
    /// `-E / σ`, row-major `N × 2`.
    log_kernel: Vec<[T; 2]>,
    /// `log p⁽ˡ⁾` for `l = 1..=L`, each of length `N`.
    log_p: Vec<T>,
    /// `log q⁽ˡ⁾` for `l = 0..=L`.
    log_q: Vec<[T; 2]>,
}

impl<T: Scalar> SinkhornTape<T> {
    #[inline]
    fn log_p(&self, l: usize) -> &[T] {
        debug_assert!(l >= 1);
        &self.log_p[(l - 1) * self.n..l * self.n]
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// Row marginals of the final plan, `Σⱼ Γₙⱼ`.
    pub fn row_marginals(&self) -> Vec<T> {
        let p = self.log_p(self.iterations);
        let q = self.log_q[self.iterations];
        (0..self.n)
            .map(|i| {
                let k = self.log_kernel[i];
                (p[i] + k[0] + q[0]).exp() + (p[i] + k[1] + q[1]).exp()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftKnnResult<T> {
    /// Cosine distances.
    pub c: Vec<T>,
    /// Soft scores after thresholding.
    pub gamma: Vec<T>,
    /// Soft scores before thresholding; sums to κ.
    pub gamma_raw: Vec<T>,
    pub tape: Option<SinkhornTape<T>>,
}

impl<T: Scalar> SoftKnnResult<T> {
    /// Exact 0/1 selection, as produced by hard routing.
    pub fn hard(c: Vec<T>, kappa: usize) -> Result<Self> {
        let selected = hard_topk(&c, kappa)?;
        let mut gamma = vec![T::zero(); c.len()];
        for i in selected {
            gamma[i] = T::one();
        }
        Ok(Self {
            c,
            gamma_raw: gamma.clone(),
            gamma,
            tape: None,
        })
    }

    pub fn len(&self) -> usize {
        self.c.len()
    }

    pub fn is_empty(&self) -> bool {
        self.c.is_empty()
    }
}

/// `cₙ = 1 − cos(z, kₙ)` for every key row.
pub fn cosine_distances<T: Scalar>(z: &[T], keys: &DenseMatrix<T>) -> Result<Vec<T>> {
    if z.len() != keys.cols() {
        return Err(Error::DimensionMismatch {
            expected: keys.cols(),
            found: z.len(),
        });
    }
    keys.iter_rows()
        .map(|k| cosine_similarity(z, k).map(|cos| T::one() - cos))
        .collect()
}

/// Two-column cost: `[cₙ², (cₙ − 1)²]` per row.
pub fn build_cost_matrix<T: Scalar>(c: &[T]) -> Result<DenseMatrix<T>> {
    let values = c
        .iter()
        .flat_map(|&x| [x * x, (x - T::one()) * (x - T::one())])
        .collect();
    DenseMatrix::new(c.len(), 2, values)
}

/// Runs `cfg.iterations` alternating scalings and extracts γ.
pub fn sinkhorn_forward<T: Scalar>(c: &[T], cfg: &SoftKnnConfig<T>) -> Result<SoftKnnResult<T>> {
    let n = c.len();
    if n == 0 {
        return Err(Error::EmptyVector);
    }
    cfg.validate(n)?;
    if c.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("distances"));
    }
    if cfg.kappa == n {
        let ones = vec![T::one(); n];
        return Ok(SoftKnnResult {
            c: c.to_vec(),
            gamma: ones.clone(),
            gamma_raw: ones,
            tape: None,
        });
    }

    let nf = T::of_usize(n);
    let kf = T::of_usize(cfg.kappa);
    let log_mu = -nf.ln();
    let log_nu = [kf.ln() - nf.ln(), (nf - kf).ln() - nf.ln()];
    let log_kernel: Vec<[T; 2]> = c
        .iter()
        .map(|&x| {
            let d = x - T::one();
            [-(x * x) / cfg.sigma, -(d * d) / cfg.sigma]
        })
        .collect();

    let iterations = cfg.iterations;
    let mut log_p = Vec::with_capacity(iterations * n);
    let mut log_q = Vec::with_capacity(iterations + 1);
    let half = T::of(0.5).ln();
    let mut q = [half, half];
    log_q.push(q);

    let mut col = [Vec::with_capacity(n), Vec::with_capacity(n)];
    for _ in 0..iterations {
        let start = log_p.len();
        for k in &log_kernel {
            log_p.push(log_mu - log_add_exp(k[0] + q[0], k[1] + q[1]));
        }
        let p = &log_p[start..];
        for (j, buf) in col.iter_mut().enumerate() {
            buf.clear();
            buf.extend(log_kernel.iter().zip(p).map(|(k, &pi)| k[j] + pi));
            q[j] = log_nu[j] - log_sum_exp(buf);
        }
        log_q.push(q);
    }

    let p_final = &log_p[(iterations - 1) * n..];
    let gamma_raw: Vec<T> = log_kernel
        .iter()
        .zip(p_final)
        .map(|(k, &pi)| nf * (pi + k[0] + q[0]).exp())
        .collect();
    let gamma = gamma_raw
        .iter()
        .map(|&g| {
            if g >= cfg.gamma_threshold {
                g
            } else {
                T::zero()
            }
        })
        .collect();

    Ok(SoftKnnResult {
        c: c.to_vec(),
        gamma,
        gamma_raw,
        tape: Some(SinkhornTape {
            n,
            iterations,
            sigma: cfg.sigma,
            log_mu,
            log_nu,
            log_kernel,
            log_p,
            log_q,
        }),
    })
}

/// Gradient of `Σₙ upstreamₙ · γₙ` with respect to the distances `c`.
///
/// Thresholding acts as a 0/1 mask: entries zeroed in `gamma` pass no
/// gradient, surviving entries pass the gradient of `gamma_raw`.
pub fn sinkhorn_backward<T: Scalar>(result: &SoftKnnResult<T>, upstream: &[T]) -> Result<Vec<T>> {
    let tape = result.tape.as_ref().ok_or(Error::MissingTape)?;
    let n = tape.n;
    if upstream.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: upstream.len(),
        });
    }

    // γₙ = N·exp(log pₙ + log Gₙ₀ + log q₀), so ∂γₙ/∂(each log term) = γₙ.
    let mut bar_p: Vec<T> = (0..n)
        .map(|i| {
            if result.gamma[i] == T::zero() {
                T::zero()
            } else {
                upstream[i] * result.gamma_raw[i]
            }
        })
        .collect();
    let mut bar_kernel: Vec<[T; 2]> = bar_p.iter().map(|&g| [g, T::zero()]).collect();
    let mut bar_q = [total(bar_p.iter().copied()), T::zero()];

    for l in (1..=tape.iterations).rev() {
        let p = tape.log_p(l);
        let q = tape.log_q[l];
        let q_prev = tape.log_q[l - 1];

        // log q⁽ˡ⁾ⱼ = log νⱼ − LSEₙ(log Gₙⱼ + log p⁽ˡ⁾ₙ)
        for i in 0..n {
            let k = tape.log_kernel[i];
            for j in 0..2 {
                let w = (k[j] + p[i] + q[j] - tape.log_nu[j]).exp();
                let g = bar_q[j] * w;
                bar_p[i] -= g;
                bar_kernel[i][j] -= g;
            }
        }

        // log p⁽ˡ⁾ₙ = log μ − LSEⱼ(log Gₙⱼ + log q⁽ˡ⁻¹⁾ⱼ)
        let mut next_bar_q = [T::zero(); 2];
        for i in 0..n {
            let k = tape.log_kernel[i];
            for j in 0..2 {
                let w = (k[j] + q_prev[j] + p[i] - tape.log_mu).exp();
                let g = bar_p[i] * w;
                next_bar_q[j] -= g;
                bar_kernel[i][j] -= g;
            }
            bar_p[i] = T::zero();
        }
        bar_q = next_bar_q;
    }

    // log Gₙ₀ = −cₙ²/σ,  log Gₙ₁ = −(cₙ−1)²/σ
    let two = T::of(2.0);
    Ok(result
        .c
        .iter()
        .zip(&bar_kernel)
        .map(|(&x, b)| -two * (b[0] * x + b[1] * (x - T::one())) / tape.sigma)
        .collect())
}

/// Indices of the κ smallest distances, ascending; ties go to the lower index.
pub fn hard_topk<T: Scalar>(c: &[T], kappa: usize) -> Result<Vec<usize>> {
    if kappa > c.len() {
        return Err(Error::KappaOutOfRange { kappa, n: c.len() });
    }
    let mut order: Vec<usize> = (0..c.len()).collect();
    order.sort_by(|&a, &b| {
        c[a].partial_cmp(&c[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut picked = order[..kappa].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;

    fn cfg(kappa: usize, sigma: f64, threshold: f64) -> SoftKnnConfig<f64> {
        SoftKnnConfig {
            kappa,
            sigma,
            iterations: 400,
            gamma_threshold: threshold,
        }
    }

    #[test]
    fn distances_examples() {
        let keys = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(
            cosine_distances(&[1.0, 0.0], &keys).unwrap(),
            vec![0.0, 1.0]
        );
        let anti = DenseMatrix::from_rows(&[vec![-1.0, 0.0]]).unwrap();
        assert_eq!(cosine_distances(&[1.0, 0.0], &anti).unwrap(), vec![2.0]);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let d = cosine_distances(&[h, h], &keys).unwrap();
        for x in d {
            assert!((x - (1.0 - h)).abs() < 1e-12);
        }
        assert!(cosine_distances(&[1.0, 0.0, 0.0], &keys).is_err());
        assert!(matches!(
            cosine_distances(&[0.0, 0.0], &keys),
            Err(Error::DegenerateVector)
        ));
    }

    #[test]
    fn cost_matrix_examples() {
        let m = build_cost_matrix(&[0.0]).unwrap();
        assert_eq!(m.row(0), &[0.0, 1.0]);
        let m = build_cost_matrix(&[1.0]).unwrap();
        assert_eq!(m.row(0), &[1.0, 0.0]);
        let m = build_cost_matrix(&[0.5, 2.0]).unwrap();
        assert_eq!(m.as_slice(), &[0.25, 0.25, 4.0, 1.0]);
    }

    #[test]
    fn symmetric_input_gives_uniform_scores() {
        let r = sinkhorn_forward(&[0.5; 4], &cfg(2, 0.0005, 0.3)).unwrap();
        for g in &r.gamma_raw {
            assert!((g - 0.5).abs() < 1e-12, "{g}");
        }
    }

    #[test]
    fn kappa_equal_n_short_circuits() {
        let r = sinkhorn_forward(&[0.1, 1.7], &cfg(2, 0.0005, 0.3)).unwrap();
        assert_eq!(r.gamma, vec![1.0, 1.0]);
        assert!(r.tape.is_none());
        assert!(matches!(
            sinkhorn_backward(&r, &[1.0, 1.0]),
            Err(Error::MissingTape)
        ));
    }

    #[test]
    fn kappa_above_n_is_rejected() {
        assert!(matches!(
            sinkhorn_forward(&[0.1, 0.2], &cfg(3, 0.0005, 0.3)),
            Err(Error::KappaOutOfRange { .. })
        ));
        assert!(hard_topk(&[0.1, 0.2], 3).is_err());
    }

    #[test]
    fn well_separated_eight_picks_two_nearest() {
        let c = [0.95, 0.40, 1.30, 0.75, 0.20, 1.10, 0.60, 1.50];
        let r = sinkhorn_forward(&c, &cfg(2, 0.0005, 0.3)).unwrap();
        let top = hard_topk(&c, 2).unwrap();
        assert_eq!(top, vec![1, 4]);
        for (i, g) in r.gamma_raw.iter().enumerate() {
            if top.contains(&i) {
                assert!(*g > 0.9, "gamma[{i}] = {g}");
            } else {
                assert!(*g < 0.1, "gamma[{i}] = {g}");
            }
        }
        assert!((r.gamma_raw.iter().sum::<f64>() - 2.0).abs() < 1e-6);
    }

    #[test]
    fn threshold_zeroes_small_scores() {
        let c = [0.5, 0.5, 0.5, 0.5];
        let r = sinkhorn_forward(&c, &cfg(1, 0.0005, 0.3)).unwrap();
        // uniform plan gives 0.25 everywhere, below the threshold
        assert!(r.gamma.iter().all(|&g| g == 0.0));
        assert!((r.gamma_raw.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn hard_topk_examples() {
        assert_eq!(hard_topk(&[3.0, 1.0, 2.0], 1).unwrap(), vec![1]);
        assert_eq!(hard_topk(&[1.0, 1.0, 2.0], 1).unwrap(), vec![0]);
        assert_eq!(hard_topk(&[0.9, 0.1, 0.5, 0.3], 2).unwrap(), vec![1, 3]);
    }

    #[test]
    fn backward_of_zero_upstream_is_zero() {
        let r = sinkhorn_forward(&[0.3, 0.9, 1.2, 0.5], &cfg(2, 0.01, 0.0)).unwrap();
        let g = sinkhorn_backward(&r, &[0.0; 4]).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn backward_is_symmetric_on_symmetric_input() {
        let r = sinkhorn_forward(&[0.5; 4], &cfg(2, 0.0005, 0.3)).unwrap();
        let g = sinkhorn_backward(&r, &[1.0; 4]).unwrap();
        for x in &g {
            assert!((x - g[0]).abs() <= 1e-9 * g[0].abs().max(1.0));
        }
    }

    #[test]
    fn kappa_table() {
        assert_eq!(kappa_for(16), 4);
        assert_eq!(kappa_for(64), 8);
        assert_eq!(kappa_for(128), 16);
        assert_eq!(kappa_for(1024), 32);
        assert_eq!(kappa_for(100), 8);
        assert_eq!(kappa_for(8), 2);
        assert_eq!(kappa_for(3), 1);
    }

    #[test]
    fn works_in_single_precision() {
        let c: Vec<f32> = vec![0.9, 0.2, 1.4, 0.6, 1.1, 0.4];
        let cfg = SoftKnnConfig::<f32> {
            kappa: 2,
            sigma: 0.01,
            iterations: 400,
            gamma_threshold: 0.3,
        };
        let r = sinkhorn_forward(&c, &cfg).unwrap();
        assert!((r.gamma_raw.iter().sum::<f32>() - 2.0).abs() < 1e-4);
        assert!(r.gamma[1] > 0.9 && r.gamma[5] > 0.9);
    }

    #[test]
    fn permuting_input_permutes_scores() {
        let mut rng = SeededRng::new(3);
        for _ in 0..20 {
            let n = 10;
            let c: Vec<f64> = (0..n).map(|_| rng.uniform(0.0, 2.0)).collect();
            let mut perm: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut perm);
            let pc: Vec<f64> = perm.iter().map(|&i| c[i]).collect();
            let a = sinkhorn_forward(&c, &cfg(3, 0.01, 0.3)).unwrap();
            let b = sinkhorn_forward(&pc, &cfg(3, 0.01, 0.3)).unwrap();
            for (slot, &i) in perm.iter().enumerate() {
                assert!((b.gamma_raw[slot] - a.gamma_raw[i]).abs() < 1e-9);
            }
        }
    }
}
