//! Loss, analytic gradients, the sign-step optimizer and the Adam key path.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{
    forward, EnsembleConfig, EnsembleState, ForwardTrace, RoutingMode, VoteWeighting,
};
use crate::error::{Error, Result};
use crate::numerics::{dot, l2_normalize, norm, sign, DenseMatrix};
use crate::scalar::Scalar;
use crate::soft_knn::sinkhorn_backward;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig<T> {
    /// Fixed step of the sign optimizer.
    pub learning_rate: T,
    pub weight_decay: T,
    pub train_keys: bool,
    pub key_lr: T,
    pub adam_beta1: T,
    pub adam_beta2: T,
    pub adam_eps: T,
    pub batch_size: usize,
}

impl<T: Scalar> Default for TrainConfig<T> {
    fn default() -> Self {
        Self {
            learning_rate: T::of(1e-4),
            weight_decay: T::of(1e-4),
            train_keys: false,
            key_lr: T::of(5e-4),
            adam_beta1: T::of(0.9),
            adam_beta2: T::of(0.999),
            adam_eps: T::of(1e-8),
            batch_size: 60,
        }
    }
}

impl<T: Scalar> TrainConfig<T> {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.into()));
        if !(self.learning_rate > T::zero()) {
            return bad("learning_rate must be positive");
        }
        if !(self.weight_decay >= T::zero() && self.weight_decay < T::one()) {
            return bad("weight_decay must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.train_keys {
            if !(self.key_lr > T::zero()) {
                return bad("key_lr must be positive");
            }
            let unit = |b: T| b >= T::zero() && b < T::one();
            if !unit(self.adam_beta1) || !unit(self.adam_beta2) || !(self.adam_eps > T::zero()) {
                return bad("adam betas must lie in [0, 1) and adam_eps must be positive");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierGrad<T> {
    pub weights: DenseMatrix<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> ClassifierGrad<T> {
    fn zeros(k: usize, m: usize) -> Self {
        Self {
            weights: DenseMatrix::zeros(k, m),
            bias: vec![T::zero(); k],
        }
    }

    fn add_assign(&mut self, other: &Self) {
        for (a, &b) in self
            .weights
            .as_mut_slice()
            .iter_mut()
            .zip(other.weights.as_slice())
        {
            *a += b;
        }
        for (a, &b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }

    fn scale(&mut self, s: T) {
        self.weights.as_mut_slice().iter_mut().for_each(|x| *x *= s);
        self.bias.iter_mut().for_each(|x| *x *= s);
    }
}

/// Gradients for the classifiers that were routed to (γ > 0), plus key
/// gradients when keys are trained.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradientSet<T> {
    pub classifiers: BTreeMap<usize, ClassifierGrad<T>>,
    pub keys: Option<DenseMatrix<T>>,
}

impl<T: Scalar> GradientSet<T> {
    fn accumulate(&mut self, other: GradientSet<T>) {
        for (n, g) in other.classifiers {
            match self.classifiers.get_mut(&n) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    self.classifiers.insert(n, g);
                }
            }
        }
        if let Some(k) = other.keys {
            match &mut self.keys {
                Some(acc) => {
                    for (a, &b) in acc.as_mut_slice().iter_mut().zip(k.as_slice()) {
                        *a += b;
                    }
                }
                None => self.keys = Some(k),
            }
        }
    }

    fn scale(&mut self, s: T) {
        self.classifiers.values_mut().for_each(|g| g.scale(s));
        if let Some(k) = &mut self.keys {
            k.as_mut_slice().iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.classifiers
            .values()
            .all(|g| g.weights.all_finite() && g.bias.iter().all(|b| b.is_finite()))
            && self.keys.as_ref().is_none_or(DenseMatrix::all_finite)
    }
}

/// Adam moments for the key matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub first: DenseMatrix<T>,
    pub second: DenseMatrix<T>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            first: DenseMatrix::zeros(rows, cols),
            second: DenseMatrix::zeros(rows, cols),
            step: 0,
        }
    }

    pub fn for_state(state: &EnsembleState<T>) -> Self {
        Self::new(state.keys.rows(), state.keys.cols())
    }
}

pub fn one_hot<T: Scalar>(label: usize, n_classes: usize) -> Result<Vec<T>> {
    if label >= n_classes {
        return Err(Error::LabelOutOfRange { label, n_classes });
    }
    let mut y = vec![T::zero(); n_classes];
    y[label] = T::one();
    Ok(y)
}

fn hot_index<T: Scalar>(y: &[T]) -> Result<usize> {
    let mut hot = None;
    for (i, &v) in y.iter().enumerate() {
        if v == T::one() && hot.is_none() {
            hot = Some(i);
        } else if v != T::zero() {
            return Err(Error::NotOneHot);
        }
    }
    hot.ok_or(Error::NotOneHot)
}

/// `−yᵀŷ` for a one-hot `y`.
pub fn loss<T: Scalar>(y: &[T], y_hat: &[T]) -> Result<T> {
    if y.len() != y_hat.len() {
        return Err(Error::DimensionMismatch {
            expected: y.len(),
            found: y_hat.len(),
        });
    }
    hot_index(y)?;
    Ok(-dot(y, y_hat))
}

/// Backpropagates the loss of one forward pass.
///
/// Classifier gradients are produced only for classifiers with γₙ > 0.
/// With `train_keys`, the gradient also flows through γ (soft routing only)
/// and the vote weights into the key rows.
pub fn backward<T: Scalar>(
    trace: &ForwardTrace<T>,
    state: &EnsembleState<T>,
    cfg: &EnsembleConfig<T>,
    y: &[T],
    train_keys: bool,
) -> Result<GradientSet<T>> {
    let n = state.n_classifiers();
    if trace.activations.len() != n
        || trace.knn.len() != n
        || trace.input.len() != state.keys.cols()
    {
        return Err(Error::InvalidConfig(
            "trace does not belong to this ensemble".into(),
        ));
    }
    if y.len() != cfg.n_classes {
        return Err(Error::DimensionMismatch {
            expected: cfg.n_classes,
            found: y.len(),
        });
    }
    let label = hot_index(y)?;
    let m = trace.input.len();
    let k = cfg.n_classes;
    let denom = trace.vote_denominator;
    let gamma = &trace.knn.gamma;
    let w = &trace.vote_weights;

    let mut grads = GradientSet::default();
    for i in (0..n).filter(|&i| gamma[i] > T::zero()) {
        // ∂L/∂ŷₙ,label = −γₙwₙ/D; through tanh(l/s): × (1 − a²)/s
        let a = trace.activations[i][label];
        let d_logit = -gamma[i] * w[i] / denom * (T::one() - a * a) / cfg.tanh_scale;
        let mut g = ClassifierGrad::zeros(k, m);
        for (dst, &x) in g.weights.row_mut(label).iter_mut().zip(&trace.input) {
            *dst = d_logit * x;
        }
        g.bias[label] = d_logit;
        grads.classifiers.insert(i, g);
    }

    if train_keys {
        if trace.mode == RoutingMode::Hard {
            return Err(Error::InvalidConfig(
                "keys are only trainable with soft routing".into(),
            ));
        }
        grads.keys = Some(key_gradients(trace, state, cfg, label)?);
    }
    Ok(grads)
}

fn key_gradients<T: Scalar>(
    trace: &ForwardTrace<T>,
    state: &EnsembleState<T>,
    cfg: &EnsembleConfig<T>,
    label: usize,
) -> Result<DenseMatrix<T>> {
    let n = state.n_classifiers();
    let denom = trace.vote_denominator;
    let y_hat = trace.prediction[label];
    let act: Vec<T> = trace.activations.iter().map(|a| a[label]).collect();
    let gamma = &trace.knn.gamma;
    let c = &trace.knn.c;

    // L = −ŷ_label, ŷ_label = Σ γₙ wₙ aₙ / D
    let d_gamma: Vec<T> = (0..n)
        .map(|i| -trace.vote_weights[i] * act[i] / denom)
        .collect();
    let mut d_c = match &trace.knn.tape {
        Some(_) => sinkhorn_backward(&trace.knn, &d_gamma)?,
        None => vec![T::zero(); n],
    };
    for i in 0..n {
        let d_w = -(gamma[i] * act[i] - y_hat) / denom;
        let dw_dc = match cfg.vote_weighting {
            VoteWeighting::Distance => T::one(),
            VoteWeighting::Similarity if T::one() - c[i] > T::zero() => -T::one(),
            VoteWeighting::Similarity => T::zero(),
        };
        d_c[i] += d_w * dw_dc;
    }

    // cₙ = 1 − ẑ·kₙ/‖kₙ‖
    let unit = &trace.unit_input;
    let mut out = DenseMatrix::zeros(n, unit.len());
    for i in 0..n {
        let key = state.keys.row(i);
        let kn = norm(key);
        let cos = dot(unit, key) / kn;
        for ((dst, &u), &kv) in out.row_mut(i).iter_mut().zip(unit).zip(key) {
            *dst = -d_c[i] * (u / kn - cos * kv / (kn * kn));
        }
    }
    Ok(out)
}

/// `θ ← θ − lr·sign(g) − wd·θ` on every classifier present in `grads`.
pub fn sign_step<T: Scalar>(
    state: &mut EnsembleState<T>,
    grads: &GradientSet<T>,
    cfg: &TrainConfig<T>,
) {
    let step = |theta: &mut T, g: T| {
        *theta = *theta - cfg.learning_rate * sign(g) - cfg.weight_decay * *theta;
    };
    for (&i, g) in &grads.classifiers {
        let clf = &mut state.classifiers[i];
        for (theta, &gv) in clf
            .weights
            .as_mut_slice()
            .iter_mut()
            .zip(g.weights.as_slice())
        {
            step(theta, gv);
        }
        for (theta, &gv) in clf.bias.iter_mut().zip(&g.bias) {
            step(theta, gv);
        }
    }
}

/// Adam on the key rows, then each row projected back to the unit sphere.
pub fn adam_key_step<T: Scalar>(
    state: &mut EnsembleState<T>,
    grads: &GradientSet<T>,
    adam: &mut AdamState<T>,
    cfg: &TrainConfig<T>,
) -> Result<()> {
    let g = grads
        .keys
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("no key gradients to apply".into()))?;
    adam.step += 1;
    let t = adam.step as i32;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let bias1 = T::one() - b1.powi(t);
    let bias2 = T::one() - b2.powi(t);
    let keys = state.keys.as_mut_slice();
    let m = adam.first.as_mut_slice();
    let v = adam.second.as_mut_slice();
    for (i, &gi) in g.as_slice().iter().enumerate() {
        m[i] = b1 * m[i] + (T::one() - b1) * gi;
        v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
        let m_hat = m[i] / bias1;
        let v_hat = v[i] / bias2;
        keys[i] -= cfg.key_lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
    }
    for r in 0..state.keys.rows() {
        let unit = l2_normalize(state.keys.row(r))?;
        state.keys.row_mut(r).copy_from_slice(&unit);
    }
    Ok(())
}

/// Forward and backward for one example, returning `(loss, gradients)`.
pub fn example_gradients<T: Scalar>(
    state: &EnsembleState<T>,
    cfg: &EnsembleConfig<T>,
    z: &[T],
    label: usize,
    train_keys: bool,
) -> Result<(T, GradientSet<T>)> {
    let y = one_hot(label, cfg.n_classes)?;
    let trace = forward(state, cfg, z)?;
    let l = loss(&y, &trace.prediction)?;
    Ok((l, backward(&trace, state, cfg, &y, train_keys)?))
}

/// One optimizer step on a batch. Returns the mean loss before the update.
///
/// Per-example gradients are computed in parallel and reduced in batch order,
/// so results do not depend on the thread count.
pub fn train_batch<T: Scalar>(
    state: &mut EnsembleState<T>,
    adam: &mut AdamState<T>,
    batch: &[(&[T], usize)],
    ens_cfg: &EnsembleConfig<T>,
    cfg: &TrainConfig<T>,
) -> Result<T> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let per_example: Vec<(T, GradientSet<T>)> = {
        let frozen = &*state;
        batch
            .par_iter()
            .map(|&(z, label)| example_gradients(frozen, ens_cfg, z, label, cfg.train_keys))
            .collect::<Result<_>>()?
    };

    let mut total = T::zero();
    let mut grads = GradientSet::default();
    for (l, g) in per_example {
        total += l;
        grads.accumulate(g);
    }
    let inv = T::one() / T::of_usize(batch.len());
    grads.scale(inv);

    sign_step(state, &grads, cfg);
    if cfg.train_keys {
        adam_key_step(state, &grads, adam, cfg)?;
    }
    Ok(total * inv)
}
