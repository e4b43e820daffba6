mod common;

use pi2i_core::model::gradcheck::{check, pick_coords};
use pi2i_core::model::{grad, AttentionScaling, ModelParams};
use pi2i_core::{AttentionMode, TrainConfig, TriggerMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn run(seed: u64, attention_mode: AttentionMode, trigger_mode: TriggerMode, scaling: AttentionScaling) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = TrainConfig {
        embedding_dim: rng.gen_range(2..=8),
        heads: rng.gen_range(1..=2),
        key_dim: rng.gen_range(2..=4),
        query_hidden: rng.gen_range(3..=8),
        out_hidden: vec![rng.gen_range(3..=8), rng.gen_range(2..=5)],
        attention_mode,
        trigger_mode,
        attention_scaling: scaling,
        ..TrainConfig::default()
    };
    let (items, users, sellers, brands) = (14, 3, 3, 2);
    let store = common::random_store(&mut rng, items, sellers, brands);
    let batch: Vec<_> = (0..3)
        .map(|_| {
            let (len, negatives) = (rng.gen_range(1..=5), rng.gen_range(1..=4));
            common::random_sample(&mut rng, items, users, len, negatives)
        })
        .collect();
    let mut params = ModelParams::init(common::vocab(items, users, sellers, brands), &cfg, seed);
    // non-zero biases so every tensor is exercised
    for (_, b) in params.layout.out.clone() {
        for x in &mut params.data[b.range()] {
            *x = rng.gen_range(-0.1..0.1);
        }
    }
    let (_, analytic) = grad(&params, &store, &batch, &cfg);
    let coords = pick_coords(&params, &analytic, 6, seed);
    let report = check(&params, &store, &batch, &cfg, &coords, 1e-5);
    assert!(report.checked > coords.len() / 2, "{report:?}");
    report.max_rel_error
}

#[test]
fn analytic_gradient_matches_finite_differences() {
    let mut worst: f64 = 0.0;
    let mut n = 0;
    for scaling in [AttentionScaling::Logits, AttentionScaling::Output] {
        for trigger in [TriggerMode::Multi, TriggerMode::SingleRandom, TriggerMode::None] {
            for seed in 0..2 {
                let err = run(seed * 31 + n, AttentionMode::Target, trigger, scaling);
                assert!(err < 1e-4, "{scaling:?} {trigger:?} seed {seed}: {err:e}");
                worst = worst.max(err);
                n += 1;
            }
        }
    }
    assert!(worst < 1e-4);
}

#[test]
fn self_attention_gradient_matches_finite_differences() {
    for seed in 0..3 {
        let err = run(100 + seed, AttentionMode::SelfPooled, TriggerMode::Multi, AttentionScaling::Logits);
        assert!(err < 1e-4, "seed {seed}: {err:e}");
    }
}
