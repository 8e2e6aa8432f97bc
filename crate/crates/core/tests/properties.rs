//! Invariants checked over random inputs.

mod common;

use proptest::prelude::*;
use socialvec::corpus::{context_window, sample_negative, IdTable, NegativeSampler};
use socialvec::inference::{softmax, AttributeClassifier, SavedHead};
use socialvec::objectives::{graph_probabilities, label_probabilities, relation_probabilities};
use socialvec::params::{read_model, write_model, ModelParams, ModelSizes, ModelTables};
use socialvec::rng;
use socialvec::tensor::Matrix;

fn tables(sizes: ModelSizes) -> ModelTables {
    let ids = |p: &str, n: usize| IdTable::from_ids((0..n).map(|i| format!("{p}{i}")));
    ModelTables {
        users: ids("u", sizes.users),
        words: ids("w", sizes.words),
        entities: ids("e", sizes.entities),
        relations: ids("r", sizes.relations),
    }
}

fn random_model(seed: u64, dim: usize, sizes: ModelSizes) -> ModelParams {
    common::random_params(&mut rng::seeded(seed), sizes, dim)
}

proptest! {
    #[test]
    fn softmax_sums_to_one(logits in prop::collection::vec(-500.0f64..500.0, 1..12)) {
        let p = softmax(&logits);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert!(p.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn softmax_strictly_inside_unit_interval(logits in prop::collection::vec(-15.0f64..15.0, 2..12)) {
        // beyond a spread of about 36 the largest probability rounds to 1.0
        let p = softmax(&logits);
        prop_assert!(p.iter().all(|x| *x > 0.0 && *x < 1.0));
    }

    #[test]
    fn softmax_shift_invariant(logits in prop::collection::vec(-50.0f64..50.0, 1..8), c in -100.0f64..100.0) {
        let shifted: Vec<f64> = logits.iter().map(|z| z + c).collect();
        for (a, b) in softmax(&logits).iter().zip(softmax(&shifted)) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn sigmoid_pairs_sum_to_one(s in -500.0f64..500.0) {
        let (p, q) = label_probabilities(s);
        prop_assert!((p + q - 1.0).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&p) && (0.0..=1.0).contains(&q));
    }

    #[test]
    fn model_sigmoid_pairs_sum_to_one(seed in any::<u64>(), scale in 1.0f64..40.0) {
        let sizes = ModelSizes { users: 4, words: 0, entities: 3, relations: 2 };
        let mut p = random_model(seed, 8, sizes);
        // stretch vectors so scores reach into the hundreds
        for t in [socialvec::params::TensorId::User, socialvec::params::TensorId::Entity] {
            p.tensor_mut(t).as_mut_slice().iter_mut().for_each(|v| *v *= scale);
        }
        let (a, b) = graph_probabilities(&p, 0, 1);
        prop_assert!((a + b - 1.0).abs() <= 1e-12);
        let (a, b) = relation_probabilities(&p, 1, 2, 0);
        prop_assert!((a + b - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn attribute_head_outputs_normalized(seed in any::<u64>(), scale in 0.1f64..200.0) {
        let mut r = rng::seeded(seed);
        let mut clf = AttributeClassifier::zeros("a", vec!["x".into(), "y".into(), "z".into()], 5, 4);
        clf.w = Matrix::from_fn(4, 5, |_, _| rng::uniform(&mut r, -1.0, 1.0));
        clf.u = Matrix::from_fn(3, 4, |_, _| scale * rng::uniform(&mut r, -1.0, 1.0));
        let e: Vec<f64> = (0..5).map(|_| rng::uniform(&mut r, -3.0, 3.0)).collect();
        let p = clf.forward(&e).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn context_window_matches_brute_force(
        tokens in prop::collection::vec(0usize..50, 1..40),
        pos_frac in 0.0f64..1.0,
        window in 0usize..8,
    ) {
        let pos = ((tokens.len() as f64 * pos_frac) as usize).min(tokens.len() - 1);
        let expected: Vec<usize> = (0..tokens.len())
            .filter(|&i| i != pos && i.abs_diff(pos) <= window)
            .map(|i| tokens[i])
            .collect();
        prop_assert_eq!(context_window(&tokens, pos, window), expected);
    }

    #[test]
    fn model_file_roundtrip_is_exact(seed in any::<u64>(), dim in 1usize..6, users in 0usize..5, words in 0usize..5) {
        let sizes = ModelSizes { users, words, entities: 2, relations: 1 };
        let p = random_model(seed, dim, sizes);
        let t = tables(sizes);
        let mut buf = Vec::new();
        write_model(&p, &t, &mut buf).unwrap();
        let (q, u) = read_model(buf.as_slice()).unwrap();
        prop_assert_eq!(&q, &p);
        prop_assert_eq!(&u, &t);
        prop_assert_eq!(q.content_hash(), p.content_hash());
    }

    #[test]
    fn classifier_file_roundtrip_is_exact(seed in any::<u64>()) {
        let mut r = rng::seeded(seed);
        let mut clf = AttributeClassifier::zeros("gender", vec!["f".into(), "m".into()], 3, 2);
        clf.w = Matrix::from_fn(2, 3, |_, _| rng::uniform(&mut r, -1e3, 1e3));
        clf.u = Matrix::from_fn(2, 2, |_, _| rng::uniform(&mut r, -1e-3, 1e-3));
        clf.acc_w = Matrix::from_fn(2, 3, |_, _| rng::unit(&mut r));
        let saved = SavedHead::Attribute(clf);
        prop_assert_eq!(SavedHead::parse(&saved.to_text().unwrap()).unwrap(), saved);
    }
}

fn total_variation(sampler: &NegativeSampler, draws: usize, seed: u64, exclude: &[usize]) -> f64 {
    let mut r = rng::seeded(seed);
    let mut counts = vec![0usize; sampler.len()];
    for _ in 0..draws {
        counts[sample_negative(sampler, &mut r, exclude).unwrap()] += 1;
    }
    // target: sampler law conditioned on not hitting `exclude`
    let kept: f64 = (0..sampler.len())
        .filter(|i| !exclude.contains(i))
        .map(|i| sampler.probability(i))
        .sum();
    (0..sampler.len())
        .map(|i| {
            let want = if exclude.contains(&i) {
                0.0
            } else {
                sampler.probability(i) / kept
            };
            (counts[i] as f64 / draws as f64 - want).abs()
        })
        .sum::<f64>()
        / 2.0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn unigram_sampler_matches_distorted_law(
        freq in prop::collection::vec(0u64..1000, 2..30),
        seed in any::<u64>(),
    ) {
        prop_assume!(freq.iter().filter(|f| **f > 0).count() >= 2);
        let s = NegativeSampler::unigram(&freq, 0.75).unwrap();
        // law check against an independent computation of f^0.75 / Z
        let z: f64 = freq.iter().map(|f| (*f as f64).powf(0.75)).sum();
        for (i, f) in freq.iter().enumerate() {
            prop_assert!((s.probability(i) - (*f as f64).powf(0.75) / z).abs() < 1e-12);
        }
        prop_assert!(total_variation(&s, 1_000_000, seed, &[]) <= 0.01);
        let positive = freq.iter().position(|f| *f > 0).unwrap();
        prop_assert!(total_variation(&s, 1_000_000, seed ^ 1, &[positive]) <= 0.01);
    }

    #[test]
    fn uniform_sampler_is_uniform(n in 2usize..40, seed in any::<u64>()) {
        let s = NegativeSampler::uniform(n).unwrap();
        prop_assert!(total_variation(&s, 1_000_000, seed, &[0]) <= 0.01);
    }
}
