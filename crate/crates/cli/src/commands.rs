use std::fs;
use std::path::Path;

use pi2i_core::corpus::{build_histories, load_interactions, split_leave_last};
use pi2i_core::indexer::{accumulate_coclicks, build_index_from_stats};
use pi2i_core::model::checkpoint::{load_params, save_params};
use pi2i_core::model::{train, Vocabulary};
use pi2i_core::retrieval::{self, evaluate, runs_to_tsv, sweep_to_tsv, sweep_truncation, trigger_index_stats, write_text, Scorer};
use pi2i_core::sampler::{sample_dataset, save_samples};
use pi2i_core::{DatasetSplit, EvalQuery, FeatureStore, I2ITable, ModelParams, TrainConfig, TrainingSample, Vocabularies};
use serde_json::{json, Value};

use crate::config::{PipelineConfig, ScorerKind, Split};
use crate::error::CliError;

type Result<T> = std::result::Result<T, CliError>;

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} not found: {}", path.display())))
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| pi2i_core::Error::Io { path: dir.to_owned(), source: e }.into())
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => ensure_dir(p),
        _ => Ok(()),
    }
}

/// One JSON object per line, under `reports/<name>.jsonl`.
fn write_report(cfg: &PipelineConfig, name: &str, events: &[Value]) -> Result<()> {
    ensure_dir(&cfg.reports)?;
    let text: String = events.iter().map(|e| format!("{e}\n")).collect();
    Ok(write_text(&cfg.reports.join(format!("{name}.jsonl")), &text)?)
}

fn write_output(cfg: &PipelineConfig, file: &str, text: &str) -> Result<()> {
    ensure_dir(&cfg.reports)?;
    Ok(write_text(&cfg.reports.join(file), text)?)
}

struct Corpus {
    vocabs: Vocabularies,
    split: DatasetSplit,
    interactions: usize,
    malformed: usize,
}

impl Corpus {
    fn load(cfg: &PipelineConfig) -> Result<Self> {
        let data = cfg
            .data
            .as_deref()
            .ok_or_else(|| CliError::Usage("no input data; set data = <path> or --set data=<path>".into()))?;
        require(data, "interaction file")?;
        let mut vocabs = Vocabularies::default();
        let loaded = load_interactions(data, cfg.format, &mut vocabs)?;
        let histories = build_histories(&loaded.interactions);
        let split = split_leave_last(&histories, cfg.min_history)?;
        Ok(Corpus {
            vocabs,
            split,
            interactions: loaded.interactions.len(),
            malformed: loaded.malformed,
        })
    }

    /// Loads the corpus and checks it against the vocabularies saved with the index.
    fn load_checked(cfg: &PipelineConfig) -> Result<Self> {
        let corpus = Self::load(cfg)?;
        require(&cfg.vocab_dir, "vocabulary directory (run build-index first)")?;
        let saved = Vocabularies::load(&cfg.vocab_dir)?;
        if saved.hash() != corpus.vocabs.hash() {
            return Err(pi2i_core::Error::VocabMismatch {
                checkpoint: format!("index vocabularies {}", saved.hash()),
                data: corpus.vocabs.hash(),
            }
            .into());
        }
        Ok(corpus)
    }

    fn queries(&self, split: Split) -> Vec<EvalQuery> {
        match split {
            Split::Validation => EvalQuery::validation(&self.split),
            Split::Test => EvalQuery::test(&self.split),
        }
    }

    fn features(&self, cfg: &PipelineConfig, table: &I2ITable) -> FeatureStore {
        let p = &cfg.index_params;
        let stats = accumulate_coclicks(&self.split.train, p.window, p.user_item_cap);
        FeatureStore::build(&self.split.train, &stats, table)
    }

    fn samples(&self, cfg: &PipelineConfig, table: &I2ITable) -> Result<(Vec<TrainingSample>, pi2i_core::SampleStats)> {
        let (samples, stats) = sample_dataset(&self.split, table, &cfg.sampler_config())?;
        eprintln!(
            "sampled {} of {} pairs, discard rate {:.4}, mean hard {:.2}, mean easy {:.2}",
            stats.kept,
            stats.attempts,
            stats.discard_rate(),
            stats.mean_hard,
            stats.mean_easy
        );
        Ok((samples, stats))
    }
}

fn load_index(cfg: &PipelineConfig) -> Result<I2ITable> {
    require(&cfg.index, "index file (run build-index first)")?;
    Ok(I2ITable::load(&cfg.index)?)
}

/// Checkpoint and its training config, or `None` for the swing baseline.
fn load_model(cfg: &PipelineConfig, corpus: &Corpus) -> Result<Option<(ModelParams, TrainConfig)>> {
    match cfg.scorer {
        ScorerKind::Swing => Ok(None),
        ScorerKind::Model => {
            require(&cfg.checkpoint, "checkpoint (run train first)")?;
            Ok(Some(load_params(&cfg.checkpoint, Some(&corpus.vocabs.hash()))?))
        }
    }
}

fn scorer<'a>(cfg: &PipelineConfig, model: &'a Option<(ModelParams, TrainConfig)>, store: &'a FeatureStore) -> Scorer<'a> {
    match model {
        Some((params, train_cfg)) => Scorer::Model {
            params,
            store,
            cfg: train_cfg,
        },
        None => Scorer::SwingSum {
            max_seq_len: cfg.train.max_seq_len,
        },
    }
}

pub fn build_index(cfg: &PipelineConfig) -> Result<()> {
    let corpus = Corpus::load(cfg)?;
    ensure_dir(&cfg.vocab_dir)?;
    corpus.vocabs.save(&cfg.vocab_dir)?;
    let p = &cfg.index_params;
    let stats = accumulate_coclicks(&corpus.split.train, p.window, p.user_item_cap);
    let table = build_index_from_stats(&stats, p);
    ensure_parent(&cfg.index)?;
    table.save(&cfg.index)?;
    eprintln!(
        "indexed {} triggers, {} entries, mean list length {:.3} (T = {})",
        table.len(),
        table.entry_count(),
        table.mean_list_len(),
        p.truncation
    );
    write_report(
        cfg,
        "build-index",
        &[
            json!({
                "event": "corpus",
                "interactions": corpus.interactions,
                "malformed": corpus.malformed,
                "users": corpus.vocabs.users.len(),
                "items": corpus.vocabs.items.len(),
                "train_users": corpus.split.train.len(),
                "test_queries": corpus.split.test.len(),
                "vocab_hash": corpus.vocabs.hash(),
            }),
            json!({
                "event": "index",
                "items_indexed": table.len(),
                "entries": table.entry_count(),
                "mean_list_len": table.mean_list_len(),
                "truncation": p.truncation,
            }),
        ],
    )
}

fn sample_event(stats: &pi2i_core::SampleStats) -> Value {
    json!({
        "event": "sample",
        "attempts": stats.attempts,
        "kept": stats.kept,
        "discard_rate": stats.discard_rate(),
        "mean_positive_triggers": stats.mean_positive_triggers,
        "mean_hard": stats.mean_hard,
        "mean_easy": stats.mean_easy,
    })
}

pub fn sample(cfg: &PipelineConfig) -> Result<()> {
    let corpus = Corpus::load_checked(cfg)?;
    let table = load_index(cfg)?;
    let (samples, stats) = corpus.samples(cfg, &table)?;
    ensure_parent(&cfg.samples)?;
    save_samples(&cfg.samples, &samples)?;
    write_report(cfg, "sample", &[sample_event(&stats)])
}

pub fn train_model(cfg: &PipelineConfig) -> Result<()> {
    let corpus = Corpus::load_checked(cfg)?;
    let table = load_index(cfg)?;
    let (samples, stats) = corpus.samples(cfg, &table)?;
    let store = corpus.features(cfg, &table);
    let train_cfg = cfg.train_config();
    let (params, log) = train(&samples, &store, Vocabulary::from(&corpus.vocabs), &train_cfg)?;
    let params = params.with_vocab_hash(corpus.vocabs.hash());
    ensure_parent(&cfg.checkpoint)?;
    save_params(&cfg.checkpoint, &params, &train_cfg)?;
    ensure_parent(&cfg.train_log)?;
    log.save(&cfg.train_log)?;
    if let Some(last) = log.epochs.last() {
        eprintln!("final epoch {} mean loss {:.6}", last.epoch, last.mean_loss);
    }
    let mut events = vec![sample_event(&stats)];
    events.extend(log.epochs.iter().map(|e| json!({"event": "epoch", "epoch": e.epoch, "mean_loss": e.mean_loss})));
    events.push(json!({"event": "checkpoint", "parameters": params.len(), "vocab_hash": params.vocab_hash}));
    write_report(cfg, "train", &events)
}

pub fn evaluate_model(cfg: &PipelineConfig) -> Result<()> {
    let corpus = Corpus::load_checked(cfg)?;
    let table = load_index(cfg)?;
    let model = load_model(cfg, &corpus)?;
    let store = corpus.features(cfg, &table);
    let queries = corpus.queries(cfg.eval_split);
    let (_, report) = evaluate(&queries, &table, &scorer(cfg, &model, &store), &cfg.ks);
    for (k, hr) in report.ks.iter().zip(&report.hr) {
        eprintln!("HR@{k} = {hr:.6}");
    }
    eprintln!("pool HR = {:.6} over {} queries", report.pool_hr, report.queries);
    write_output(cfg, "eval.tsv", &report.to_tsv())
}

pub fn retrieve(cfg: &PipelineConfig) -> Result<()> {
    let corpus = Corpus::load_checked(cfg)?;
    let table = load_index(cfg)?;
    let model = load_model(cfg, &corpus)?;
    let store = corpus.features(cfg, &table);
    let queries = corpus.queries(cfg.eval_split);
    let runs = retrieval::retrieve_all(&queries, &table, &scorer(cfg, &model, &store), cfg.max_k());
    eprintln!("retrieved top-{} for {} users", cfg.max_k(), runs.len());
    write_output(cfg, "retrieve.tsv", &runs_to_tsv(&runs))
}

pub fn sweep(cfg: &PipelineConfig) -> Result<()> {
    let corpus = Corpus::load_checked(cfg)?;
    let table = load_index(cfg)?;
    let model = load_model(cfg, &corpus)?;
    let store = corpus.features(cfg, &table);
    // prefixes of one deep index are the indices at every smaller T
    let top = cfg.sweep_grid.iter().copied().max().unwrap_or(1).max(cfg.index_params.truncation);
    let p = pi2i_core::IndexParams {
        truncation: top,
        ..cfg.index_params.clone()
    };
    let stats = accumulate_coclicks(&corpus.split.train, p.window, p.user_item_cap);
    let deep = build_index_from_stats(&stats, &p);
    let queries = corpus.queries(cfg.eval_split);
    let rows = sweep_truncation(&queries, &deep, &cfg.sweep_grid, &scorer(cfg, &model, &store), &cfg.ks)?;
    for r in &rows {
        eprintln!("T = {}: pool HR {:.6}, {} candidates", r.truncation, r.pool_hr, r.total_candidates);
    }
    write_output(cfg, "sweep.tsv", &sweep_to_tsv(&rows, &cfg.ks))
}

pub fn stats(cfg: &PipelineConfig) -> Result<()> {
    let corpus = Corpus::load_checked(cfg)?;
    let table = load_index(cfg)?;
    let model = load_model(cfg, &corpus)?;
    let store = corpus.features(cfg, &table);
    let queries = corpus.queries(cfg.eval_split);
    let k = cfg.stats_k.unwrap_or(1);
    let runs = retrieval::retrieve_all(&queries, &table, &scorer(cfg, &model, &store), k);
    let stats = trigger_index_stats(&runs, &queries, cfg.stats_k, cfg.stats_top_users);
    match stats.mode() {
        Some(m) => eprintln!("most hits come from trigger index {m}"),
        None => eprintln!("no hits"),
    }
    write_output(cfg, "trigger_stats.tsv", &stats.to_tsv())?;
    write_output(cfg, "trigger_stats_users.tsv", &stats.per_user_tsv())
}
