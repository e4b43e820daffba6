//! Shared fixtures for the benchmarks in `benches/`.

use pi2i_core::corpus::{build_histories, split_leave_last};
use pi2i_core::indexer::{accumulate_coclicks, build_index_from_stats};
use pi2i_core::model::Vocabulary;
use pi2i_core::sampler::sample_dataset;
use pi2i_core::synth::{planted_preference, PlantedConfig};
use pi2i_core::{CoClickStats, DatasetSplit, FeatureStore, I2ITable, IndexParams, SamplerConfig, TrainConfig, TrainingSample};

pub struct Fixture {
    pub split: DatasetSplit,
    pub stats: CoClickStats,
    pub index: IndexParams,
    pub table: I2ITable,
    pub store: FeatureStore,
    pub vocab: Vocabulary,
    pub sampler: SamplerConfig,
    pub samples: Vec<TrainingSample>,
}

/// Planted-preference log with `users` users, indexed and sampled.
pub fn fixture(users: usize) -> Fixture {
    let data = planted_preference(&PlantedConfig {
        users,
        visits: 6,
        ..PlantedConfig::default()
    });
    let split = split_leave_last(&build_histories(&data.interactions), 3).expect("planted histories are long enough");
    let index = IndexParams {
        window: Some(1),
        ..IndexParams::default()
    };
    let stats = accumulate_coclicks(&split.train, index.window, index.user_item_cap);
    let table = build_index_from_stats(&stats, &index);
    let store = FeatureStore::build(&split.train, &stats, &table);
    let sampler = SamplerConfig {
        n_hard: 20,
        n_easy: 30,
        pairs_per_user: Some(4),
        ..SamplerConfig::default()
    };
    let (samples, _) = sample_dataset(&split, &table, &sampler).expect("valid sampler config");
    Fixture {
        split,
        stats,
        index,
        table,
        store,
        vocab: Vocabulary::from(&data.vocabs),
        sampler,
        samples,
    }
}

pub fn small_model() -> TrainConfig {
    TrainConfig {
        embedding_dim: 8,
        key_dim: 4,
        query_hidden: 16,
        out_hidden: vec![32, 16],
        batch_size: 128,
        ..TrainConfig::default()
    }
}
