#![allow(dead_code)]

use std::collections::BTreeMap;

use pi2i_core::features::{ItemAttrs, Provenance};
use pi2i_core::model::Vocabulary;
use pi2i_core::{FeatureStore, TrainingSample};
use rand::Rng;

/// Random sample over items `1..=items` with random provenance for every candidate.
pub fn random_sample(rng: &mut impl Rng, items: u32, users: u32, seq_len: usize, negatives: usize) -> TrainingSample {
    let mut pool: Vec<u32> = (1..=items).collect();
    for i in (1..pool.len()).rev() {
        pool.swap(i, rng.gen_range(0..=i));
    }
    let history: Vec<u32> = (0..seq_len).map(|_| rng.gen_range(1..=items)).collect();
    let candidates: Vec<u32> = pool.into_iter().filter(|i| !history.contains(i)).take(negatives + 1).collect();
    let mut trigger_of = BTreeMap::new();
    for &c in &candidates {
        let n = if history.is_empty() { 0 } else { rng.gen_range(0..=history.len().min(3)) };
        let prov: Vec<Provenance> = (0..n)
            .map(|_| Provenance {
                trigger: history[rng.gen_range(0..history.len())],
                rank: rng.gen_range(1..40),
                score: rng.gen_range(1e-4..2.0),
            })
            .collect();
        trigger_of.insert(c, prov);
    }
    let split = rng.gen_range(0..=negatives);
    TrainingSample {
        user: rng.gen_range(0..=users + 1),
        positive: candidates[0],
        positive_triggers: history.iter().take(1).copied().collect(),
        hard_negatives: candidates[1..1 + split].to_vec(),
        easy_negatives: candidates[1 + split..].to_vec(),
        history,
        trigger_of,
    }
}

pub fn random_store(rng: &mut impl Rng, items: u32, sellers: u32, brands: u32) -> FeatureStore {
    let mut store = FeatureStore::new();
    for i in 1..=items {
        store.set_attrs(
            i,
            ItemAttrs {
                seller: rng.gen_range(0..=sellers),
                brand: rng.gen_range(0..=brands),
                price: rng.gen_bool(0.8).then(|| rng.gen_range(1.0..200.0)),
            },
        );
        for j in 1..i {
            if rng.gen_bool(0.3) {
                store.set_coclicks(i, j, rng.gen_range(1..50));
            }
        }
    }
    store
}

pub fn vocab(items: u32, users: u32, sellers: u32, brands: u32) -> Vocabulary {
    Vocabulary {
        items: items as usize,
        users: users as usize,
        sellers: sellers as usize,
        brands: brands as usize,
    }
}
