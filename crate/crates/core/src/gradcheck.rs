//! Central finite-difference checks of the analytic gradients.
//!
//! Each check draws random small instances, perturbs one input at a time by
//! `±h`, and compares the symmetric difference quotient of the forward pass
//! against the analytic backward pass. Instances where a `±h` perturbation
//! flips the γ threshold mask sit on a kink of the piecewise function and are
//! redrawn.

use serde::Serialize;

use crate::ensemble::{
    forward, init_ensemble, EnsembleConfig, EnsembleState, RoutingMode, VoteWeighting,
};
use crate::error::Result;
use crate::numerics::SeededRng;
use crate::soft_knn::{sinkhorn_backward, sinkhorn_forward, SoftKnnConfig};
use crate::training::{backward, loss, one_hot};

/// Denominator floor of the relative error, so components that are zero up
/// to rounding compare absolutely.
pub const REL_FLOOR: f64 = 1e-6;

pub const CLASSIFIER_TOLERANCE: f64 = 1e-4;
pub const KEY_TOLERANCE: f64 = 1e-3;
pub const SOFT_KNN_TOLERANCE: f64 = 1e-4;

/// Denominator floor for the transport-only check. The forward pass cancels
/// log-domain terms of size `c²/σ`, which leaves the difference quotient with
/// roughly `1e-9` of absolute rounding noise at `h = 1e-5`.
pub const SOFT_KNN_FLOOR: f64 = 1e-4;

/// `|a − b| / max(|a|, |b|, REL_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    relative_error_floored(a, b, REL_FLOOR)
}

pub fn relative_error_floored(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub instances: usize,
    pub seed: u64,
    pub step: f64,
    pub sigmas: Vec<f64>,
    pub iterations: usize,
    /// Scales every analytic gradient by 1.01; the checks must then fail.
    pub corrupt_backward: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            instances: 20,
            seed: 0,
            step: 1e-5,
            sigmas: vec![0.0005, 0.01],
            iterations: 400,
            corrupt_backward: false,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub sigma: f64,
    pub instances: usize,
    /// Instances redrawn because `±h` crossed the threshold.
    pub redrawn: usize,
    /// Instances skipped because κ = N leaves nothing to differentiate.
    pub skipped_full_kappa: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl std::fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "[{}] {:<20} sigma={:<7} instances={:<3} max_rel_err={:.3e} (tol {:.0e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.sigma,
            self.instances,
            self.max_rel_error,
            self.tolerance
        )?;
        if self.redrawn > 0 {
            write!(f, " redrawn={}", self.redrawn)?;
        }
        if self.skipped_full_kappa > 0 {
            write!(f, " skipped(kappa=N)={}", self.skipped_full_kappa)?;
        }
        Ok(())
    }
}

struct Tally {
    max_err: f64,
    redrawn: usize,
    skipped: usize,
}

fn outcome(
    name: &str,
    sigma: f64,
    opts: &GradcheckOptions,
    t: Tally,
    tolerance: f64,
) -> CheckOutcome {
    CheckOutcome {
        name: name.into(),
        sigma,
        instances: opts.instances,
        redrawn: t.redrawn,
        skipped_full_kappa: t.skipped,
        max_rel_error: t.max_err,
        tolerance,
        passed: t.max_err < tolerance,
    }
}

fn corrupt(opts: &GradcheckOptions) -> f64 {
    if opts.corrupt_backward {
        1.01
    } else {
        1.0
    }
}

fn mask(gamma: &[f64]) -> Vec<bool> {
    gamma.iter().map(|&g| g > 0.0).collect()
}

/// Gradient of `Σ upstream·γ` with respect to the distances.
///
/// The steep kernel at small σ makes the `O(h²)` truncation of a plain central
/// difference visible, so the quotients at `h` and `2h` are Richardson
/// extrapolated.
pub fn check_soft_knn(opts: &GradcheckOptions, sigma: f64) -> Result<CheckOutcome> {
    let mut rng = SeededRng::new(opts.seed);
    let h = opts.step;
    let mut t = Tally {
        max_err: 0.0,
        redrawn: 0,
        skipped: 0,
    };
    let mut done = 0;
    while done < opts.instances {
        let n = 3 + rng.index(6);
        let kappa = 1 + rng.index(n);
        let cfg = SoftKnnConfig {
            kappa,
            sigma,
            iterations: opts.iterations,
            gamma_threshold: 0.3,
        };
        if kappa == n {
            t.skipped += 1;
            continue;
        }
        let c: Vec<f64> = (0..n).map(|_| rng.uniform(0.2, 1.8)).collect();
        let up: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
        let base = sinkhorn_forward(&c, &cfg)?;
        let analytic = sinkhorn_backward(&base, &up)?;
        let objective = |c: &[f64]| -> Result<(f64, Vec<bool>)> {
            let r = sinkhorn_forward(c, &cfg)?;
            Ok((
                r.gamma.iter().zip(&up).map(|(g, u)| g * u).sum(),
                mask(&r.gamma),
            ))
        };
        let mut errs = Vec::with_capacity(n);
        let mut kink = false;
        let base_mask = mask(&base.gamma);
        'coords: for i in 0..n {
            let mut quotients = [0.0; 2];
            for (q, step) in quotients.iter_mut().zip([h, 2.0 * h]) {
                let mut plus = c.clone();
                plus[i] += step;
                let mut minus = c.clone();
                minus[i] -= step;
                let (fp, mp) = objective(&plus)?;
                let (fm, mm) = objective(&minus)?;
                if mp != base_mask || mm != base_mask {
                    kink = true;
                    break 'coords;
                }
                *q = (fp - fm) / (2.0 * step);
            }
            let fd = (4.0 * quotients[0] - quotients[1]) / 3.0;
            errs.push(relative_error_floored(
                analytic[i] * corrupt(opts),
                fd,
                SOFT_KNN_FLOOR,
            ));
        }
        if kink {
            t.redrawn += 1;
            continue;
        }
        t.max_err = errs.into_iter().fold(t.max_err, f64::max);
        done += 1;
    }
    Ok(outcome("soft_knn", sigma, opts, t, SOFT_KNN_TOLERANCE))
}

fn random_instance(
    rng: &mut SeededRng,
    sigma: f64,
    iterations: usize,
) -> Result<(EnsembleConfig<f64>, EnsembleState<f64>, Vec<f64>, usize)> {
    let n = 4 + rng.index(5);
    let m = 4 + rng.index(13);
    let k = 2 + rng.index(3);
    let mut cfg = EnsembleConfig::new(n, m, k);
    cfg.soft_knn.kappa = 1 + rng.index(n - 1);
    cfg.soft_knn.sigma = sigma;
    cfg.soft_knn.iterations = iterations;
    cfg.mode = RoutingMode::Soft;
    cfg.vote_weighting = if rng.index(2) == 0 {
        VoteWeighting::Distance
    } else {
        VoteWeighting::Similarity
    };
    cfg.seed = rng.index(u32::MAX as usize) as u64;
    let mut state = init_ensemble(&cfg)?;
    for clf in &mut state.classifiers {
        for b in &mut clf.bias {
            *b = 0.3 * rng.standard_normal::<f64>();
        }
    }
    let z: Vec<f64> = (0..m).map(|_| rng.standard_normal()).collect();
    let label = rng.index(k);
    Ok((cfg, state, z, label))
}

fn pipeline_loss(
    state: &EnsembleState<f64>,
    cfg: &EnsembleConfig<f64>,
    z: &[f64],
    label: usize,
) -> Result<(f64, Vec<bool>)> {
    let trace = forward(state, cfg, z)?;
    let y = one_hot(label, cfg.n_classes)?;
    Ok((loss(&y, &trace.prediction)?, mask(&trace.knn.gamma)))
}

/// Full pipeline, classifier weights and biases.
pub fn check_classifiers(opts: &GradcheckOptions, sigma: f64) -> Result<CheckOutcome> {
    let mut rng = SeededRng::new(opts.seed ^ 0xC1A5);
    let h = opts.step;
    let mut t = Tally {
        max_err: 0.0,
        redrawn: 0,
        skipped: 0,
    };
    for _ in 0..opts.instances {
        let (cfg, state, z, label) = random_instance(&mut rng, sigma, opts.iterations)?;
        let trace = forward(&state, &cfg, &z)?;
        let y = one_hot(label, cfg.n_classes)?;
        let grads = backward(&trace, &state, &cfg, &y, false)?;
        for n in 0..cfg.n_classifiers {
            let g = grads.classifiers.get(&n);
            let k = cfg.n_classes;
            let m = cfg.embed_dim;
            for p in 0..k * m + k {
                let analytic = g.map_or(0.0, |g| {
                    if p < k * m {
                        g.weights.as_slice()[p]
                    } else {
                        g.bias[p - k * m]
                    }
                }) * corrupt(opts);
                let eval = |delta: f64| {
                    let mut s = state.clone();
                    if p < k * m {
                        s.classifiers[n].weights.as_mut_slice()[p] += delta;
                    } else {
                        s.classifiers[n].bias[p - k * m] += delta;
                    }
                    pipeline_loss(&s, &cfg, &z, label).map(|r| r.0)
                };
                let fd = (eval(h)? - eval(-h)?) / (2.0 * h);
                t.max_err = t.max_err.max(relative_error(analytic, fd));
            }
        }
    }
    Ok(outcome(
        "classifier_params",
        sigma,
        opts,
        t,
        CLASSIFIER_TOLERANCE,
    ))
}

/// Full pipeline, key rows (through the scaling iterations and the vote weights).
pub fn check_keys(opts: &GradcheckOptions, sigma: f64) -> Result<CheckOutcome> {
    let mut rng = SeededRng::new(opts.seed ^ 0x4E75);
    let h = opts.step;
    let mut t = Tally {
        max_err: 0.0,
        redrawn: 0,
        skipped: 0,
    };
    let mut done = 0;
    while done < opts.instances {
        let (cfg, state, z, label) = random_instance(&mut rng, sigma, opts.iterations)?;
        let trace = forward(&state, &cfg, &z)?;
        let base_mask = mask(&trace.knn.gamma);
        let y = one_hot(label, cfg.n_classes)?;
        let keys = backward(&trace, &state, &cfg, &y, true)?
            .keys
            .expect("key gradients requested");
        let mut errs = Vec::new();
        let mut kink = false;
        'outer: for r in 0..cfg.n_classifiers {
            for col in 0..cfg.embed_dim {
                let eval = |delta: f64| {
                    let mut s = state.clone();
                    let v = s.keys.get(r, col);
                    s.keys.set(r, col, v + delta);
                    pipeline_loss(&s, &cfg, &z, label)
                };
                let (fp, mp) = eval(h)?;
                let (fm, mm) = eval(-h)?;
                if mp != base_mask || mm != base_mask {
                    kink = true;
                    break 'outer;
                }
                errs.push(relative_error(
                    keys.get(r, col) * corrupt(opts),
                    (fp - fm) / (2.0 * h),
                ));
            }
        }
        if kink {
            t.redrawn += 1;
            continue;
        }
        t.max_err = errs.into_iter().fold(t.max_err, f64::max);
        done += 1;
    }
    Ok(outcome("keys", sigma, opts, t, KEY_TOLERANCE))
}

/// Every check at every configured σ.
pub fn run_all(opts: &GradcheckOptions) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    for &sigma in &opts.sigmas {
        out.push(check_soft_knn(opts, sigma)?);
        out.push(check_classifiers(opts, sigma)?);
        out.push(check_keys(opts, sigma)?);
    }
    Ok(out)
}
