//! Key-routed bank of single-layer classifiers and the voting layer.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{argmax, l2_normalize, total, DenseMatrix, SeededRng};
use crate::scalar::Scalar;
use crate::soft_knn::{cosine_distances, sinkhorn_forward, SoftKnnConfig, SoftKnnResult};

/// Guards the vote denominator when every weight is zero.
pub const VOTE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoutingMode {
    /// Differentiable soft top-κ.
    Soft,
    /// Exact top-κ with similarity weighting over the selected set.
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VoteWeighting {
    /// `wₙ = cₙ`.
    Distance,
    /// `wₙ = max(0, 1 − cₙ)`.
    Similarity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig<T> {
    pub n_classifiers: usize,
    pub embed_dim: usize,
    pub n_classes: usize,
    pub soft_knn: SoftKnnConfig<T>,
    pub mode: RoutingMode,
    pub vote_weighting: VoteWeighting,
    /// Pre-activations are divided by this before `tanh`.
    pub tanh_scale: T,
    pub seed: u64,
}

impl<T: Scalar> EnsembleConfig<T> {
    /// Reference hyperparameters for an ensemble of `n_classifiers`.
    pub fn new(n_classifiers: usize, embed_dim: usize, n_classes: usize) -> Self {
        Self {
            n_classifiers,
            embed_dim,
            n_classes,
            soft_knn: SoftKnnConfig {
                kappa: crate::soft_knn::kappa_for(n_classifiers),
                ..SoftKnnConfig::default()
            },
            mode: RoutingMode::Soft,
            vote_weighting: VoteWeighting::Distance,
            tanh_scale: T::of(250.0),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classifiers == 0 || self.embed_dim == 0 || self.n_classes == 0 {
            return Err(Error::InvalidConfig(
                "n_classifiers, embed_dim and n_classes must be positive".into(),
            ));
        }
        self.soft_knn.validate(self.n_classifiers)?;
        if !(self.tanh_scale > T::zero()) || !self.tanh_scale.is_finite() {
            return Err(Error::InvalidConfig("tanh_scale must be positive".into()));
        }
        Ok(())
    }
}

/// One single-layer classifier `x ↦ W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier<T> {
    /// `K × M`.
    pub weights: DenseMatrix<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleState<T> {
    /// `N × M`, unit-norm rows.
    pub keys: DenseMatrix<T>,
    pub classifiers: Vec<Classifier<T>>,
}

impl<T: Scalar> EnsembleState<T> {
    pub fn n_classifiers(&self) -> usize {
        self.classifiers.len()
    }

    pub fn all_finite(&self) -> bool {
        self.keys.all_finite()
            && self
                .classifiers
                .iter()
                .all(|c| c.weights.all_finite() && c.bias.iter().all(|b| b.is_finite()))
    }

    fn check(&self, cfg: &EnsembleConfig<T>) -> Result<()> {
        let mismatch = |expected, found| Error::DimensionMismatch { expected, found };
        if self.keys.rows() != cfg.n_classifiers || self.classifiers.len() != cfg.n_classifiers {
            return Err(mismatch(cfg.n_classifiers, self.classifiers.len()));
        }
        if self.keys.cols() != cfg.embed_dim {
            return Err(mismatch(cfg.embed_dim, self.keys.cols()));
        }
        Ok(())
    }
}

/// Keys ~ N(0, I) projected to the unit sphere; weights ~ N(0, 1/M); zero biases.
pub fn init_ensemble<T: Scalar>(cfg: &EnsembleConfig<T>) -> Result<EnsembleState<T>> {
    cfg.validate()?;
    let (n, m, k) = (cfg.n_classifiers, cfg.embed_dim, cfg.n_classes);
    let mut rng = SeededRng::new(cfg.seed);

    let mut keys = DenseMatrix::zeros(n, m);
    for r in 0..n {
        let raw: Vec<T> = (0..m).map(|_| rng.standard_normal()).collect();
        keys.row_mut(r).copy_from_slice(&l2_normalize(&raw)?);
    }

    let std = T::one() / T::of_usize(m).sqrt();
    let classifiers = (0..n)
        .map(|_| {
            let values = (0..k * m)
                .map(|_| rng.standard_normal::<T>() * std)
                .collect();
            Ok(Classifier {
                weights: DenseMatrix::new(k, m, values)?,
                bias: vec![T::zero(); k],
            })
        })
        .collect::<Result<_>>()?;
    Ok(EnsembleState { keys, classifiers })
}

/// Returns `(W z + b, tanh((W z + b) / tanh_scale))` for classifier `n`.
pub fn classifier_forward<T: Scalar>(
    state: &EnsembleState<T>,
    n: usize,
    z: &[T],
    tanh_scale: T,
) -> Result<(Vec<T>, Vec<T>)> {
    let clf = state.classifiers.get(n).ok_or(Error::ClassifierIndex {
        index: n,
        n: state.classifiers.len(),
    })?;
    let mut logit = clf.weights.matvec(z)?;
    for (l, &b) in logit.iter_mut().zip(&clf.bias) {
        *l += b;
    }
    let activation = logit.iter().map(|&l| (l / tanh_scale).tanh()).collect();
    Ok((logit, activation))
}

/// Per-classifier vote weights `wₙ`.
///
/// With `selected_only`, classifiers outside the selection (γ = 0) get
/// weight 0, so the denominator sums over the selected set only.
pub fn vote_weights<T: Scalar>(
    c: &[T],
    gamma: &[T],
    weighting: VoteWeighting,
    selected_only: bool,
) -> Vec<T> {
    c.iter()
        .zip(gamma)
        .map(|(&cn, &g)| {
            if selected_only && g == T::zero() {
                return T::zero();
            }
            match weighting {
                VoteWeighting::Distance => cn,
                VoteWeighting::Similarity => (T::one() - cn).max(T::zero()),
            }
        })
        .collect()
}

fn combine<T: Scalar>(gamma: &[T], weights: &[T], activations: &[Vec<T>], k: usize) -> (Vec<T>, T) {
    let denom = total(weights.iter().copied()) + T::of(VOTE_EPS);
    let mut out = vec![T::zero(); k];
    for ((&g, &w), act) in gamma.iter().zip(weights).zip(activations) {
        let coef = g * w;
        if coef == T::zero() {
            continue;
        }
        for (o, &a) in out.iter_mut().zip(act) {
            *o += coef * a;
        }
    }
    for o in &mut out {
        *o /= denom;
    }
    (out, denom)
}

/// `ŷ = Σₙ γₙ wₙ ŷₙ / (Σₙ wₙ + ε)` with the denominator over all N classifiers.
pub fn vote<T: Scalar>(
    knn: &SoftKnnResult<T>,
    activations: &[Vec<T>],
    weighting: VoteWeighting,
) -> Result<Vec<T>> {
    if activations.len() != knn.len() {
        return Err(Error::DimensionMismatch {
            expected: knn.len(),
            found: activations.len(),
        });
    }
    let k = activations.first().map_or(0, Vec::len);
    let weights = vote_weights(&knn.c, &knn.gamma, weighting, false);
    Ok(combine(&knn.gamma, &weights, activations, k).0)
}

#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    /// The raw input embedding (classifiers see it unnormalized).
    pub input: Vec<T>,
    /// The L2-normalized embedding used for the key lookup.
    pub unit_input: Vec<T>,
    pub knn: SoftKnnResult<T>,
    pub logits: Vec<Vec<T>>,
    pub activations: Vec<Vec<T>>,
    /// Vote weights `wₙ` actually used.
    pub vote_weights: Vec<T>,
    pub prediction: Vec<T>,
    pub vote_denominator: T,
    pub mode: RoutingMode,
}

impl<T: Scalar> ForwardTrace<T> {
    /// Predicted class; ties go to the lowest index.
    pub fn predicted_class(&self) -> usize {
        argmax(&self.prediction)
    }
}

pub fn forward<T: Scalar>(
    state: &EnsembleState<T>,
    cfg: &EnsembleConfig<T>,
    z: &[T],
) -> Result<ForwardTrace<T>> {
    state.check(cfg)?;
    if z.len() != cfg.embed_dim {
        return Err(Error::DimensionMismatch {
            expected: cfg.embed_dim,
            found: z.len(),
        });
    }
    let unit = l2_normalize(z)?.into_inner();
    let c = cosine_distances(&unit, &state.keys)?;
    let (knn, weighting, selected_only) = match cfg.mode {
        RoutingMode::Soft => (
            sinkhorn_forward(&c, &cfg.soft_knn)?,
            cfg.vote_weighting,
            false,
        ),
        RoutingMode::Hard => (
            SoftKnnResult::hard(c, cfg.soft_knn.kappa)?,
            VoteWeighting::Similarity,
            true,
        ),
    };

    let outputs = (0..cfg.n_classifiers)
        .map(|n| classifier_forward(state, n, z, cfg.tanh_scale))
        .collect::<Result<Vec<_>>>()?;
    let (logits, activations): (Vec<_>, Vec<_>) = outputs.into_iter().unzip();

    let weights = vote_weights(&knn.c, &knn.gamma, weighting, selected_only);
    let (prediction, vote_denominator) = combine(&knn.gamma, &weights, &activations, cfg.n_classes);

    Ok(ForwardTrace {
        input: z.to_vec(),
        unit_input: unit,
        knn,
        logits,
        activations,
        vote_weights: weights,
        prediction,
        vote_denominator,
        mode: cfg.mode,
    })
}

/// Something that maps an embedding to a class.
pub trait Classify<T>: Sync {
    fn classify(&self, z: &[T]) -> Result<usize>;
}

/// A state paired with its config, ready for inference.
#[derive(Debug, Clone, Copy)]
pub struct Ensemble<'a, T> {
    pub state: &'a EnsembleState<T>,
    pub cfg: &'a EnsembleConfig<T>,
}

impl<T: Scalar> Classify<T> for Ensemble<'_, T> {
    fn classify(&self, z: &[T]) -> Result<usize> {
        Ok(forward(self.state, self.cfg, z)?.predicted_class())
    }
}

/// Classifies many embeddings in parallel; output order matches input order.
pub fn classify_all<T: Scalar, C: Classify<T>>(model: &C, inputs: &[&[T]]) -> Result<Vec<usize>> {
    inputs.par_iter().map(|z| model.classify(z)).collect()
}
