//! Trigger-target negative sampling.
//!
//! A history item is a *positive trigger* when the next-clicked item sits in its
//! target list. Hard negatives come from the positive triggers' lists, biased
//! toward the top ranks; easy negatives come from the lists of the remaining
//! triggers, biased toward the tail. If no history item reaches the next click
//! the sample is discarded, so training only ever sees candidates the retrieval
//! stage could have produced.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::corpus::DatasetSplit;
use crate::error::{Error, Result};
use crate::features::{provenance_of, recent, trigger_list, Candidate, Provenance, ScoringQuery};
use crate::indexer::I2ITable;
use crate::{ItemId, UserId};

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub n_hard: usize,
    pub n_easy: usize,
    /// Exponent on `(L - rank + 1)` for hard negatives.
    pub hard_bias: f64,
    /// Exponent on `rank` for easy negatives.
    pub easy_bias: f64,
    pub seed: u64,
    /// Triggers are the last `max_seq_len` history items.
    pub max_seq_len: usize,
    /// Only the most recent `n` (prefix, next) pairs of each user are sampled.
    pub pairs_per_user: Option<usize>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n_hard: 20,
            n_easy: 80,
            hard_bias: 1.0,
            easy_bias: 1.0,
            seed: 0,
            max_seq_len: 50,
            pairs_per_user: None,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_hard + self.n_easy == 0 {
            return Err(Error::Config("n_hard + n_easy must be at least 1".into()));
        }
        if !(self.hard_bias >= 0.0 && self.easy_bias >= 0.0) {
            return Err(Error::Config("sampling biases must be non-negative".into()));
        }
        if self.max_seq_len == 0 {
            return Err(Error::Config("max_seq_len must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub user: UserId,
    /// Trigger sequence, most recent last.
    pub history: Vec<ItemId>,
    pub positive: ItemId,
    pub positive_triggers: Vec<ItemId>,
    pub hard_negatives: Vec<ItemId>,
    pub easy_negatives: Vec<ItemId>,
    /// Provenance of the positive and every negative.
    pub trigger_of: BTreeMap<ItemId, Vec<Provenance>>,
}

impl TrainingSample {
    pub fn negatives(&self) -> impl Iterator<Item = ItemId> + '_ {
        self.hard_negatives.iter().chain(&self.easy_negatives).copied()
    }

    pub fn negative_count(&self) -> usize {
        self.hard_negatives.len() + self.easy_negatives.len()
    }

    /// Positive first, then hard, then easy negatives.
    pub fn to_query(&self) -> ScoringQuery {
        let candidates = std::iter::once(self.positive)
            .chain(self.negatives())
            .map(|item| self.candidate(item))
            .collect();
        ScoringQuery {
            user: self.user,
            sequence: self.history.clone(),
            candidates,
        }
    }

    pub fn candidate(&self, item: ItemId) -> Candidate {
        Candidate {
            item,
            provenance: self.trigger_of.get(&item).cloned().unwrap_or_default(),
        }
    }
}

/// Weighted draw without replacement; the whole pool when it fits the quota.
fn draw<R: Rng>(pool: &IndexMap<ItemId, f64>, quota: usize, rng: &mut R) -> Vec<ItemId> {
    if pool.len() <= quota {
        return pool.keys().copied().collect();
    }
    let entries: Vec<(ItemId, f64)> = pool.iter().map(|(&k, &w)| (k, w)).collect();
    match entries.choose_multiple_weighted(rng, quota, |e| e.1) {
        Ok(chosen) => chosen.map(|e| e.0).collect(),
        // weights are finite and positive by construction; fall back to uniform
        Err(_) => entries.choose_multiple(rng, quota).map(|e| e.0).collect(),
    }
}

/// One sample for `next` given the preceding `history`, or `None` when no
/// trigger reaches `next`.
///
/// Items already in `history` are never drawn as negatives: retrieval never
/// offers them either. Triggers missing from the table contribute nothing.
pub fn make_sample<R: Rng>(
    user: UserId,
    history: &[ItemId],
    next: ItemId,
    table: &I2ITable,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Option<TrainingSample> {
    let sequence = recent(history, cfg.max_seq_len);
    let triggers = trigger_list(sequence);
    let (positive_triggers, other_triggers): (Vec<ItemId>, Vec<ItemId>) =
        triggers.iter().partition(|&&t| table.contains(t, next));
    if positive_triggers.is_empty() {
        return None;
    }

    let clicked: HashSet<ItemId> = history.iter().copied().collect();
    let mut hard_reach: HashSet<ItemId> = HashSet::new();
    let mut hard_pool: IndexMap<ItemId, f64> = IndexMap::new();
    for &t in &positive_triggers {
        let list = table.targets(t);
        let len = list.len() as f64;
        for e in list {
            hard_reach.insert(e.target);
            if e.target != next && !clicked.contains(&e.target) {
                *hard_pool.entry(e.target).or_insert(0.0) += (len - f64::from(e.rank) + 1.0).powf(cfg.hard_bias);
            }
        }
    }
    let mut easy_pool: IndexMap<ItemId, f64> = IndexMap::new();
    for &t in &other_triggers {
        for e in table.targets(t) {
            if e.target != next && !clicked.contains(&e.target) && !hard_reach.contains(&e.target) {
                *easy_pool.entry(e.target).or_insert(0.0) += f64::from(e.rank).powf(cfg.easy_bias);
            }
        }
    }

    let hard_negatives = draw(&hard_pool, cfg.n_hard, rng);
    let easy_negatives = draw(&easy_pool, cfg.n_easy, rng);
    let trigger_of = std::iter::once(next)
        .chain(hard_negatives.iter().copied())
        .chain(easy_negatives.iter().copied())
        .map(|item| (item, provenance_of(item, &triggers, table)))
        .collect();

    Some(TrainingSample {
        user,
        history: sequence.to_vec(),
        positive: next,
        positive_triggers,
        hard_negatives,
        easy_negatives,
        trigger_of,
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleStats {
    pub attempts: usize,
    pub kept: usize,
    pub discarded: usize,
    pub mean_positive_triggers: f64,
    pub mean_hard: f64,
    pub mean_easy: f64,
}

impl SampleStats {
    pub fn discard_rate(&self) -> f64 {
        if self.attempts == 0 {
            0.0
        } else {
            self.discarded as f64 / self.attempts as f64
        }
    }

    fn from_samples(samples: &[TrainingSample], attempts: usize) -> Self {
        let kept = samples.len();
        let mean = |f: &dyn Fn(&TrainingSample) -> usize| {
            if kept == 0 {
                0.0
            } else {
                samples.iter().map(f).sum::<usize>() as f64 / kept as f64
            }
        };
        SampleStats {
            attempts,
            kept,
            discarded: attempts - kept,
            mean_positive_triggers: mean(&|s| s.positive_triggers.len()),
            mean_hard: mean(&|s| s.hard_negatives.len()),
            mean_easy: mean(&|s| s.easy_negatives.len()),
        }
    }
}

/// Samples every (history prefix, next item) pair of the training histories.
///
/// Each user draws from its own RNG stream keyed by `(seed, user)`, so the output
/// does not depend on the thread count.
pub fn sample_dataset(split: &DatasetSplit, table: &I2ITable, cfg: &SamplerConfig) -> Result<(Vec<TrainingSample>, SampleStats)> {
    cfg.validate()?;
    let per_user: Vec<(usize, Vec<TrainingSample>)> = split
        .train
        .par_iter()
        .map(|history| {
            let items = history.items();
            let mut rng = crate::seed::keyed_rng(cfg.seed, u64::from(history.user));
            let first = match cfg.pairs_per_user {
                Some(n) => items.len().saturating_sub(n).max(1),
                None => 1,
            };
            let mut kept = Vec::new();
            let mut attempts = 0;
            for t in first..items.len() {
                attempts += 1;
                if let Some(s) = make_sample(history.user, &items[..t], items[t], table, cfg, &mut rng) {
                    kept.push(s);
                }
            }
            (attempts, kept)
        })
        .collect();
    let attempts = per_user.iter().map(|p| p.0).sum();
    let samples: Vec<TrainingSample> = per_user.into_iter().flat_map(|p| p.1).collect();
    let stats = SampleStats::from_samples(&samples, attempts);
    Ok((samples, stats))
}

fn join(items: &[ItemId]) -> String {
    items.iter().map(ItemId::to_string).collect::<Vec<_>>().join(",")
}

/// `user \t positive \t triggers \t hards \t easies`, comma-separated lists.
pub fn save_samples(path: &Path, samples: &[TrainingSample]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for s in samples {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            s.user,
            s.positive,
            join(&s.positive_triggers),
            join(&s.hard_negatives),
            join(&s.easy_negatives)
        )
        .map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_histories, split_leave_last, Interaction};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn table(rows: Vec<(ItemId, Vec<ItemId>)>) -> I2ITable {
        // descending scores in list order
        I2ITable::from_scored(
            1000,
            1.0,
            true,
            0.0,
            rows.into_iter().map(|(t, l)| {
                let n = l.len() as f64;
                (t, l.into_iter().enumerate().map(|(r, x)| (x, n - r as f64)).collect())
            }),
        )
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(1)
    }

    #[test]
    fn unreachable_next_item_is_discarded() {
        let t = table(vec![(1, vec![2, 3])]);
        assert!(make_sample(0, &[1], 9, &t, &SamplerConfig::default(), &mut rng()).is_none());
    }

    #[test]
    fn small_pool_is_taken_whole() {
        let others: Vec<ItemId> = (100..120).collect();
        let mut list = vec![50];
        list.extend(&others);
        let t = table(vec![(1, list)]);
        let s = make_sample(0, &[1], 50, &t, &SamplerConfig::default(), &mut rng()).unwrap();
        let mut hard = s.hard_negatives.clone();
        hard.sort();
        assert_eq!(hard, others);
        assert!(s.easy_negatives.is_empty());
        assert_eq!(s.positive_triggers, vec![1]);
    }

    #[test]
    fn hard_and_easy_are_separated() {
        // 1 reaches the positive 10; 2 does not. 11 is reachable from both.
        let t = table(vec![(1, vec![10, 11, 12]), (2, vec![11, 13, 14])]);
        let s = make_sample(0, &[2, 1], 10, &t, &SamplerConfig::default(), &mut rng()).unwrap();
        let mut hard = s.hard_negatives.clone();
        hard.sort();
        let mut easy = s.easy_negatives.clone();
        easy.sort();
        assert_eq!(hard, vec![11, 12]);
        assert_eq!(easy, vec![13, 14]);
        assert_eq!(s.trigger_of[&11].len(), 2);
    }

    #[test]
    fn clicked_items_are_not_negatives() {
        let t = table(vec![(1, vec![10, 2, 12]), (2, vec![1, 13])]);
        let s = make_sample(0, &[2, 1], 10, &t, &SamplerConfig::default(), &mut rng()).unwrap();
        assert!(!s.negatives().any(|n| n == 1 || n == 2));
    }

    #[test]
    fn quotas_are_respected() {
        let t = table(vec![(1, (10..200).collect()), (2, (300..500).collect())]);
        let cfg = SamplerConfig {
            n_hard: 5,
            n_easy: 7,
            ..SamplerConfig::default()
        };
        let s = make_sample(0, &[2, 1], 50, &t, &cfg, &mut rng()).unwrap();
        assert_eq!(s.hard_negatives.len(), 5);
        assert_eq!(s.easy_negatives.len(), 7);
        let distinct: HashSet<_> = s.negatives().collect();
        assert_eq!(distinct.len(), 12);
    }

    #[test]
    fn hard_bias_prefers_top_ranks() {
        let t = table(vec![(1, (10..110).collect()), (2, (300..400).collect())]);
        let cfg = SamplerConfig {
            n_hard: 10,
            n_easy: 10,
            hard_bias: 2.0,
            easy_bias: 2.0,
            ..SamplerConfig::default()
        };
        let mut r = rng();
        let (mut hard_rank, mut easy_rank, mut n) = (0.0, 0.0, 0.0);
        for _ in 0..200 {
            let s = make_sample(0, &[2, 1], 10, &t, &cfg, &mut r).unwrap();
            hard_rank += s.hard_negatives.iter().map(|&h| f64::from(t.find(1, h).unwrap().rank)).sum::<f64>();
            easy_rank += s.easy_negatives.iter().map(|&e| f64::from(t.find(2, e).unwrap().rank)).sum::<f64>();
            n += 10.0;
        }
        // uniform would average ~50
        assert!(hard_rank / n < 40.0, "{}", hard_rank / n);
        assert!(easy_rank / n > 60.0, "{}", easy_rank / n);
    }

    fn toy_split() -> DatasetSplit {
        let mut events = vec![];
        for u in 1..=6u32 {
            for (t, item) in [1, 2, 3, 4, 5, 6].iter().enumerate() {
                events.push(Interaction::new(u, (*item + u) % 7 + 1, t as i64));
            }
        }
        split_leave_last(&build_histories(&events), 3).unwrap()
    }

    #[test]
    fn empty_split_gives_zero_stats() {
        let (samples, stats) = sample_dataset(&DatasetSplit::default(), &I2ITable::empty(5, 1.0, true), &SamplerConfig::default()).unwrap();
        assert!(samples.is_empty());
        assert_eq!(stats, SampleStats::default());
    }

    #[test]
    fn same_seed_same_samples() {
        let split = toy_split();
        let t = crate::indexer::build_index(&split.train, &Default::default()).unwrap();
        let cfg = SamplerConfig {
            n_hard: 2,
            n_easy: 2,
            seed: 42,
            ..SamplerConfig::default()
        };
        let a = sample_dataset(&split, &t, &cfg).unwrap();
        let b = sample_dataset(&split, &t, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.1.kept > 0);
    }

    #[test]
    fn chain_fixture_never_discards() {
        // every next item is in its predecessor's list
        let mut events = vec![];
        let mut rows = vec![];
        for u in 1..=5u32 {
            let seq: Vec<ItemId> = (0..6).map(|k| 10 * u + k).collect();
            for (t, &i) in seq.iter().enumerate() {
                events.push(Interaction::new(u, i, t as i64));
            }
            for w in seq.windows(2) {
                rows.push((w[0], vec![w[1]]));
            }
        }
        let split = split_leave_last(&build_histories(&events), 3).unwrap();
        let (samples, stats) = sample_dataset(&split, &table(rows), &SamplerConfig::default()).unwrap();
        assert_eq!(stats.discarded, 0);
        assert_eq!(stats.kept, samples.len());
        assert_eq!(stats.attempts, 5 * 3);
    }

    #[test]
    fn dump_format() {
        let t = table(vec![(1, vec![10, 11]), (2, vec![12])]);
        let s = make_sample(7, &[2, 1], 10, &t, &SamplerConfig::default(), &mut rng()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.tsv");
        save_samples(&path, &[s]).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "7\t10\t1\t11\t12\n");
    }
}
