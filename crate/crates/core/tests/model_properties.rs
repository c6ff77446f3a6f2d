use dee::ensemble::{
    forward, init_ensemble, EnsembleConfig, EnsembleState, RoutingMode, VoteWeighting,
};
use dee::gradcheck::{check_classifiers, check_keys, GradcheckOptions};
use dee::numerics::SeededRng;
use dee::training::{
    backward, example_gradients, one_hot, sign_step, train_batch, AdamState, TrainConfig,
};
use proptest::prelude::*;

fn setup(
    seed: u64,
    weighting: VoteWeighting,
) -> (EnsembleConfig<f64>, EnsembleState<f64>, Vec<Vec<f64>>) {
    let mut cfg = EnsembleConfig::new(16, 12, 5);
    cfg.seed = seed;
    cfg.vote_weighting = weighting;
    cfg.soft_knn.iterations = 100;
    let state = init_ensemble(&cfg).unwrap();
    let mut rng = SeededRng::new(seed ^ 0x5eed);
    let inputs = (0..8)
        .map(|_| (0..12).map(|_| rng.standard_normal()).collect())
        .collect();
    (cfg, state, inputs)
}

fn weighting(flag: bool) -> VoteWeighting {
    if flag {
        VoteWeighting::Similarity
    } else {
        VoteWeighting::Distance
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn unrouted_classifiers_get_no_gradient(seed in any::<u64>(), label in 0usize..5, sim in any::<bool>()) {
        let (cfg, state, inputs) = setup(seed, weighting(sim));
        let trace = forward(&state, &cfg, &inputs[0]).unwrap();
        let grads = backward(&trace, &state, &cfg, &one_hot(label, 5).unwrap(), false).unwrap();
        for (n, &g) in trace.knn.gamma.iter().enumerate() {
            if g == 0.0 {
                prop_assert!(!grads.classifiers.contains_key(&n));
            } else {
                prop_assert!(grads.classifiers.contains_key(&n));
            }
        }
    }

    #[test]
    fn doubling_the_input_keeps_the_routing(seed in any::<u64>()) {
        let (cfg, state, inputs) = setup(seed, VoteWeighting::Distance);
        let z = &inputs[0];
        let z2: Vec<f64> = z.iter().map(|v| 2.0 * v).collect();
        let a = forward(&state, &cfg, z).unwrap();
        let b = forward(&state, &cfg, &z2).unwrap();
        for (x, y) in a.knn.c.iter().zip(&b.knn.c) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in a.knn.gamma.iter().zip(&b.knn.gamma) {
            prop_assert!((x - y).abs() < 1e-9, "{x} vs {y}");
            prop_assert_eq!(*x > 0.0, *y > 0.0);
        }
    }

    #[test]
    fn predictions_are_bounded(seed in any::<u64>(), sim in any::<bool>(), hard in any::<bool>()) {
        let (mut cfg, state, inputs) = setup(seed, weighting(sim));
        if hard {
            cfg.mode = RoutingMode::Hard;
        }
        let n = cfg.n_classifiers as f64;
        for z in &inputs {
            let t = forward(&state, &cfg, z).unwrap();
            let max_gamma = t.knn.gamma.iter().copied().fold(0.0, f64::max);
            for &p in &t.prediction {
                prop_assert!(p.abs() < n);
                if sim || hard {
                    prop_assert!(p.abs() <= max_gamma * (1.0 + 1e-12));
                }
            }
        }
    }

    #[test]
    fn untouched_classifiers_stay_bit_identical(seed in any::<u64>()) {
        let (cfg, state, inputs) = setup(seed, VoteWeighting::Distance);
        let tc = TrainConfig::default();
        let batch: Vec<(&[f64], usize)> = inputs.iter().take(3).enumerate().map(|(i, z)| (z.as_slice(), i % 5)).collect();
        let routed: Vec<bool> = (0..cfg.n_classifiers)
            .map(|n| batch.iter().any(|(z, _)| forward(&state, &cfg, z).unwrap().knn.gamma[n] > 0.0))
            .collect();
        let mut after = state.clone();
        train_batch(&mut after, &mut AdamState::for_state(&state), &batch, &cfg, &tc).unwrap();
        for (n, &r) in routed.iter().enumerate() {
            if !r {
                prop_assert_eq!(&after.classifiers[n], &state.classifiers[n]);
            }
        }
        prop_assert_eq!(&after.keys, &state.keys);
    }

    #[test]
    fn updated_parameters_move_by_exactly_the_step(seed in any::<u64>(), label in 0usize..5) {
        let (cfg, state, inputs) = setup(seed, VoteWeighting::Distance);
        let tc = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
        let (_, grads) = example_gradients(&state, &cfg, &inputs[1], label, false).unwrap();
        let mut after = state.clone();
        sign_step(&mut after, &grads, &tc);
        for (&n, g) in &grads.classifiers {
            let before = state.classifiers[n].weights.as_slice().iter().chain(&state.classifiers[n].bias);
            let now = after.classifiers[n].weights.as_slice().iter().chain(&after.classifiers[n].bias);
            let grad = g.weights.as_slice().iter().chain(&g.bias);
            for ((&b, &a), &gv) in before.zip(now).zip(grad) {
                let moved = (a - b).abs();
                if gv == 0.0 {
                    prop_assert_eq!(a, b);
                } else {
                    prop_assert!((moved - tc.learning_rate).abs() <= 4.0 * f64::EPSILON * b.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn duplicating_the_batch_changes_nothing(seed in any::<u64>(), keys in any::<bool>()) {
        let (cfg, state, inputs) = setup(seed, VoteWeighting::Distance);
        let tc = TrainConfig { train_keys: keys, ..TrainConfig::default() };
        let batch: Vec<(&[f64], usize)> = inputs.iter().take(3).enumerate().map(|(i, z)| (z.as_slice(), i)).collect();
        let doubled: Vec<(&[f64], usize)> = batch.iter().flat_map(|&b| [b, b]).collect();
        let mut a = state.clone();
        let mut b = state.clone();
        let la = train_batch(&mut a, &mut AdamState::for_state(&state), &batch, &cfg, &tc).unwrap();
        let lb = train_batch(&mut b, &mut AdamState::for_state(&state), &doubled, &cfg, &tc).unwrap();
        prop_assert!((la - lb).abs() < 1e-15);
        prop_assert_eq!(&a.classifiers, &b.classifiers);
        for (x, y) in a.keys.as_slice().iter().zip(b.keys.as_slice()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn batch_of_one_is_a_plain_step() {
    let (cfg, state, inputs) = setup(3, VoteWeighting::Distance);
    let tc = TrainConfig::default();
    let mut via_batch = state.clone();
    let loss = train_batch(
        &mut via_batch,
        &mut AdamState::for_state(&state),
        &[(&inputs[2], 4)],
        &cfg,
        &tc,
    )
    .unwrap();
    let (l, grads) = example_gradients(&state, &cfg, &inputs[2], 4, false).unwrap();
    let mut direct = state.clone();
    sign_step(&mut direct, &grads, &tc);
    assert_eq!(loss, l);
    assert_eq!(via_batch, direct);
}

#[test]
fn training_is_deterministic() {
    let run = || {
        let (cfg, mut state, inputs) = setup(11, VoteWeighting::Distance);
        let tc = TrainConfig {
            train_keys: true,
            ..TrainConfig::default()
        };
        let mut adam = AdamState::for_state(&state);
        for chunk in inputs.chunks(3) {
            let batch: Vec<(&[f64], usize)> = chunk.iter().map(|z| (z.as_slice(), 2)).collect();
            train_batch(&mut state, &mut adam, &batch, &cfg, &tc).unwrap();
        }
        state
    };
    assert_eq!(run(), run());
}

#[test]
fn full_pipeline_gradients_match_finite_differences() {
    let opts = GradcheckOptions::default();
    for &sigma in &opts.sigmas {
        let clf = check_classifiers(&opts, sigma).unwrap();
        assert!(clf.passed, "{clf}");
        let keys = check_keys(&opts, sigma).unwrap();
        assert!(keys.passed, "{keys}");
    }
}

#[test]
fn single_precision_tracks_double_precision() {
    let mut cfg64 = EnsembleConfig::<f64>::new(16, 12, 5);
    cfg64.soft_knn.sigma = 0.01;
    cfg64.seed = 4;
    let mut cfg32 = EnsembleConfig::<f32>::new(16, 12, 5);
    cfg32.soft_knn.sigma = 0.01;
    cfg32.seed = 4;
    let s64 = init_ensemble(&cfg64).unwrap();
    let mut s32 = init_ensemble(&cfg32).unwrap();
    let z64: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin()).collect();
    let z32: Vec<f32> = z64.iter().map(|&v| v as f32).collect();
    let p64 = forward(&s64, &cfg64, &z64).unwrap().prediction;
    let p32 = forward(&s32, &cfg32, &z32).unwrap().prediction;
    for (a, b) in p64.iter().zip(&p32) {
        assert!((a - *b as f64).abs() < 1e-4, "{a} vs {b}");
    }
    let tc = TrainConfig::<f32>::default();
    let before = s32.clone();
    train_batch(
        &mut s32,
        &mut AdamState::for_state(&before),
        &[(&z32, 1)],
        &cfg32,
        &tc,
    )
    .unwrap();
    assert_ne!(s32, before);
    assert!(s32.all_finite());
}
