mod common;

use std::collections::{BTreeSet, HashSet};

use pi2i_core::corpus::build_histories;
use pi2i_core::indexer::build_index;
use pi2i_core::model::{loss, trace_query, AttentionScaling, ModelParams};
use pi2i_core::retrieval::{candidates_for, evaluate, hit_rate, pool_hit_rate, EvalQuery, Scorer};
use pi2i_core::sampler::make_sample;
use pi2i_core::{AttentionMode, I2ITable, IndexParams, Interaction, SamplerConfig, TrainConfig, UserHistory};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn clicks() -> impl Strategy<Value = Vec<UserHistory>> {
    prop::collection::vec(prop::collection::vec(1u32..25, 1..10), 1..20).prop_map(|users| {
        let mut events = vec![];
        let mut t = 0;
        for (u, items) in users.iter().enumerate() {
            for &i in items {
                events.push(Interaction::new(u as u32 + 1, i, t));
                t += 1;
            }
        }
        build_histories(&events)
    })
}

fn table_for(h: &[UserHistory], truncation: usize) -> I2ITable {
    build_index(
        h,
        &IndexParams {
            truncation,
            ..IndexParams::default()
        },
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn index_lists_are_ranked_and_symmetric(h in clicks()) {
        let table = table_for(&h, 1000);
        table.validate().unwrap();
        for (i, list) in table.iter() {
            for e in list {
                prop_assert_ne!(e.target, i);
                let back = table.find(e.target, i).expect("untruncated index is symmetric");
                prop_assert_eq!(back.score.to_bits(), e.score.to_bits());
            }
        }
    }

    #[test]
    fn smaller_truncation_is_a_prefix(h in clicks(), small in 1usize..6, extra in 0usize..6) {
        let big = table_for(&h, small + extra);
        let direct = table_for(&h, small);
        let cut = big.truncated(small);
        prop_assert_eq!(cut.iter().collect::<Vec<_>>(), direct.iter().collect::<Vec<_>>());
        for (i, list) in direct.iter() {
            prop_assert_eq!(list, &big.targets(i)[..list.len()]);
        }
    }

    #[test]
    fn samples_respect_trigger_structure(h in clicks(), seed in 0u64..1000, n_hard in 0usize..5, n_easy in 1usize..5) {
        let table = table_for(&h, 6);
        let cfg = SamplerConfig { n_hard, n_easy, ..SamplerConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for history in &h {
            let items = history.items();
            for t in 1..items.len() {
                let (prefix, next) = (&items[..t], items[t]);
                let reachable = prefix.iter().any(|&p| table.contains(p, next));
                let Some(s) = make_sample(history.user, prefix, next, &table, &cfg, &mut rng) else {
                    prop_assert!(!reachable);
                    continue;
                };
                prop_assert!(reachable);
                let positive_lists: HashSet<u32> = s.positive_triggers.iter().flat_map(|&p| table.targets(p).iter().map(|e| e.target)).collect();
                let clicked: HashSet<u32> = prefix.iter().copied().collect();
                for &p in &s.positive_triggers {
                    prop_assert!(table.contains(p, next));
                }
                for &n in &s.hard_negatives {
                    prop_assert!(positive_lists.contains(&n));
                }
                for &n in &s.easy_negatives {
                    prop_assert!(!positive_lists.contains(&n));
                    prop_assert!(prefix.iter().any(|&p| !s.positive_triggers.contains(&p) && table.contains(p, n)));
                }
                let all: Vec<u32> = s.negatives().collect();
                let distinct: HashSet<u32> = all.iter().copied().collect();
                prop_assert_eq!(distinct.len(), all.len());
                prop_assert!(!distinct.contains(&next));
                prop_assert!(distinct.is_disjoint(&clicked));
                prop_assert!(s.hard_negatives.len() <= n_hard && s.easy_negatives.len() <= n_easy);

                // the sampler only proposes what retrieval would score
                let pool: BTreeSet<u32> = candidates_for(prefix, &table, cfg.max_seq_len).iter().map(|c| c.item).collect();
                for n in s.negatives() {
                    prop_assert!(pool.contains(&n));
                }
                if !clicked.contains(&next) {
                    prop_assert!(pool.contains(&next));
                }
            }
        }
    }

    #[test]
    fn hit_rate_is_monotone_and_bounded(h in clicks()) {
        let table = table_for(&h, 8);
        let queries: Vec<EvalQuery> = h
            .iter()
            .filter(|x| x.len() >= 2)
            .map(|x| {
                let items = x.items();
                EvalQuery { user: x.user, history: items[..items.len() - 1].to_vec(), truth: BTreeSet::from([items[items.len() - 1]]) }
            })
            .collect();
        prop_assume!(!queries.is_empty());
        let ks = [1, 2, 5, 10, 1000];
        let (runs, report) = evaluate(&queries, &table, &Scorer::SwingSum { max_seq_len: 50 }, &ks);
        let truths: Vec<_> = queries.iter().map(|q| q.truth.clone()).collect();
        for w in report.hr.windows(2) {
            prop_assert!(w[0] <= w[1]);
        }
        let pool = pool_hit_rate(&runs, &truths).value;
        for &hr in &report.hr {
            prop_assert!((0.0..=1.0).contains(&hr) && hr <= pool);
        }
        prop_assert_eq!(hit_rate(&runs, &truths, 1000).value, pool);
    }

    #[test]
    fn loss_is_shift_invariant_and_attention_stochastic(seed in 0u64..500, shift in -50.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = common::random_store(&mut rng, 12, 2, 2);
        let sample = common::random_sample(&mut rng, 12, 3, 4, 3);
        let cfg = TrainConfig {
            embedding_dim: 4,
            key_dim: 3,
            out_hidden: vec![5],
            attention_scaling: if seed % 2 == 0 { AttentionScaling::Logits } else { AttentionScaling::Output },
            ..TrainConfig::default()
        };
        let mut params = ModelParams::init(common::vocab(12, 3, 2, 2), &cfg, seed);
        let base = loss(&params, &store, &sample, &cfg);
        // the final bias shifts every logit equally
        let bias = params.layout.out.last().unwrap().1;
        params.data[bias.offset] += shift;
        let shifted = loss(&params, &store, &sample, &cfg);
        prop_assert!((base - shifted).abs() < 1e-9);

        let trace = trace_query(&params, &store, &sample.to_query(), &cfg);
        let len = sample.history.len();
        for row in &trace.attention {
            for head in row.chunks(len) {
                prop_assert!((head.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(head.iter().all(|&a| a >= 0.0));
            }
        }
        let self_cfg = TrainConfig { attention_mode: AttentionMode::SelfPooled, ..cfg };
        let trace = trace_query(&params, &store, &sample.to_query(), &self_cfg);
        for row in trace.self_attention.chunks(len) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
