//! Candidate fan-out, Top-K selection and hit-rate evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::corpus::{DatasetSplit, HeldOut};
use crate::error::{Error, Result};
use crate::features::{recent, trigger_list, Candidate, FeatureStore, Provenance, ScoringQuery};
use crate::indexer::I2ITable;
use crate::model::{score_query, ModelParams, TrainConfig};
use crate::{ItemId, UserId};

/// One evaluation query: a history and the items clicked next.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalQuery {
    pub user: UserId,
    /// Chronological.
    pub history: Vec<ItemId>,
    pub truth: BTreeSet<ItemId>,
}

impl EvalQuery {
    pub fn from_held_out(h: &HeldOut) -> Self {
        EvalQuery {
            user: h.user,
            history: h.context_items(),
            truth: BTreeSet::from([h.target.item]),
        }
    }

    pub fn validation(split: &DatasetSplit) -> Vec<Self> {
        split.valid.iter().map(Self::from_held_out).collect()
    }

    pub fn test(split: &DatasetSplit) -> Vec<Self> {
        split.test.iter().map(Self::from_held_out).collect()
    }
}

/// How candidates are ranked.
#[derive(Debug, Clone, Copy)]
pub enum Scorer<'a> {
    Model {
        params: &'a ModelParams,
        store: &'a FeatureStore,
        cfg: &'a TrainConfig,
    },
    /// Unpersonalized: sum of the swing scores over every trigger reaching the candidate.
    SwingSum { max_seq_len: usize },
}

impl Scorer<'_> {
    pub fn max_seq_len(&self) -> usize {
        match self {
            Scorer::Model { cfg, .. } => cfg.max_seq_len,
            Scorer::SwingSum { max_seq_len } => *max_seq_len,
        }
    }

    fn score(&self, query: &ScoringQuery) -> Vec<f64> {
        match self {
            Scorer::Model { params, store, cfg } => score_query(params, store, query, cfg),
            Scorer::SwingSum { .. } => query
                .candidates
                .iter()
                .map(|c| c.provenance.iter().map(|p| p.score).sum())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalRun {
    pub user: UserId,
    pub query_history: Vec<ItemId>,
    /// Ascending item id.
    pub candidates: Vec<Candidate>,
    /// Aligned with `candidates`.
    pub scores: Vec<f64>,
    /// By score descending, item id ascending.
    pub topk: Vec<ItemId>,
}

impl RetrievalRun {
    pub fn topk_at(&self, k: usize) -> &[ItemId] {
        &self.topk[..k.min(self.topk.len())]
    }

    pub fn candidate(&self, item: ItemId) -> Option<&Candidate> {
        self.candidates
            .binary_search_by_key(&item, |c| c.item)
            .ok()
            .map(|i| &self.candidates[i])
    }
}

/// Union of the target lists of the last `max_seq_len` history items, minus
/// everything already in the history. Provenance lists the triggers most
/// recent first.
pub fn candidates_for(history: &[ItemId], table: &I2ITable, max_seq_len: usize) -> Vec<Candidate> {
    let triggers = trigger_list(recent(history, max_seq_len));
    let clicked: BTreeSet<ItemId> = history.iter().copied().collect();
    let mut pool: BTreeMap<ItemId, Vec<Provenance>> = BTreeMap::new();
    for &t in &triggers {
        for e in table.targets(t) {
            if !clicked.contains(&e.target) {
                pool.entry(e.target).or_default().push(Provenance {
                    trigger: t,
                    rank: e.rank,
                    score: e.score,
                });
            }
        }
    }
    pool.into_iter().map(|(item, provenance)| Candidate { item, provenance }).collect()
}

/// Indices of the `k` best scores, ties broken by ascending item id.
pub fn top_k(candidates: &[Candidate], scores: &[f64], k: usize) -> Vec<ItemId> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(candidates[a].item.cmp(&candidates[b].item)));
    order.truncate(k);
    order.into_iter().map(|i| candidates[i].item).collect()
}

pub fn retrieve(user: UserId, history: &[ItemId], table: &I2ITable, scorer: &Scorer<'_>, k: usize) -> RetrievalRun {
    let candidates = candidates_for(history, table, scorer.max_seq_len());
    if candidates.is_empty() {
        log::debug!("user {user}: no candidates");
    }
    let query = ScoringQuery {
        user,
        sequence: history.to_vec(),
        candidates,
    };
    let scores = if query.candidates.is_empty() { Vec::new() } else { scorer.score(&query) };
    let topk = top_k(&query.candidates, &scores, k);
    RetrievalRun {
        user,
        query_history: query.sequence,
        candidates: query.candidates,
        scores,
        topk,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HitRate {
    pub value: f64,
    pub queries: usize,
    /// Queries with an empty truth set.
    pub excluded: usize,
}

fn mean_ratio<'a>(pairs: impl Iterator<Item = (&'a BTreeSet<ItemId>, usize)>) -> HitRate {
    let (mut sum, mut queries, mut excluded) = (0.0, 0, 0);
    for (truth, hits) in pairs {
        if truth.is_empty() {
            excluded += 1;
        } else {
            sum += hits as f64 / truth.len() as f64;
            queries += 1;
        }
    }
    HitRate {
        value: if queries == 0 { 0.0 } else { sum / queries as f64 },
        queries,
        excluded,
    }
}

/// Mean over queries of `|topK ∩ truth| / |truth|`.
pub fn hit_rate(runs: &[RetrievalRun], truths: &[BTreeSet<ItemId>], k: usize) -> HitRate {
    assert_eq!(runs.len(), truths.len());
    mean_ratio(
        truths
            .iter()
            .zip(runs)
            .map(|(t, r)| (t, r.topk_at(k).iter().filter(|i| t.contains(i)).count())),
    )
}

/// Hit rate of the whole unscored candidate pool, the ceiling of any scorer.
pub fn pool_hit_rate(runs: &[RetrievalRun], truths: &[BTreeSet<ItemId>]) -> HitRate {
    assert_eq!(runs.len(), truths.len());
    mean_ratio(
        truths
            .iter()
            .zip(runs)
            .map(|(t, r)| (t, t.iter().filter(|&&i| r.candidate(i).is_some()).count())),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub ks: Vec<usize>,
    pub hr: Vec<f64>,
    pub pool_hr: f64,
    pub queries: usize,
    pub excluded: usize,
    pub mean_candidates: f64,
    /// Sampler discard rate, when known.
    pub discard_rate: Option<f64>,
}

impl EvalReport {
    pub fn hr_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.hr[i])
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("K\thr\tpool_hr\tmean_candidates\n");
        for (k, hr) in self.ks.iter().zip(&self.hr) {
            let _ = writeln!(out, "{k}\t{hr:.10}\t{:.10}\t{:.4}", self.pool_hr, self.mean_candidates);
        }
        out
    }
}

pub fn retrieve_all(queries: &[EvalQuery], table: &I2ITable, scorer: &Scorer<'_>, k: usize) -> Vec<RetrievalRun> {
    queries
        .par_iter()
        .map(|q| retrieve(q.user, &q.history, table, scorer, k))
        .collect()
}

pub fn report(runs: &[RetrievalRun], truths: &[BTreeSet<ItemId>], ks: &[usize]) -> EvalReport {
    let pool = pool_hit_rate(runs, truths);
    let total: usize = runs.iter().map(|r| r.candidates.len()).sum();
    EvalReport {
        ks: ks.to_vec(),
        hr: ks.iter().map(|&k| hit_rate(runs, truths, k).value).collect(),
        pool_hr: pool.value,
        queries: pool.queries,
        excluded: pool.excluded,
        mean_candidates: if runs.is_empty() { 0.0 } else { total as f64 / runs.len() as f64 },
        discard_rate: None,
    }
}

/// Retrieves for every query at the largest K and reports HR at each K.
pub fn evaluate(queries: &[EvalQuery], table: &I2ITable, scorer: &Scorer<'_>, ks: &[usize]) -> (Vec<RetrievalRun>, EvalReport) {
    let k_max = ks.iter().copied().max().unwrap_or(0);
    let runs = retrieve_all(queries, table, scorer, k_max);
    let truths: Vec<_> = queries.iter().map(|q| q.truth.clone()).collect();
    let report = report(&runs, &truths, ks);
    (runs, report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub truncation: usize,
    pub pool_hr: f64,
    pub hr: Vec<f64>,
    pub total_candidates: usize,
}

/// Evaluates prefix truncations of `table` at each `T` (ascending).
pub fn sweep_truncation(queries: &[EvalQuery], table: &I2ITable, ts: &[usize], scorer: &Scorer<'_>, ks: &[usize]) -> Result<Vec<SweepRow>> {
    if ts.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("truncation grid must be strictly ascending, got {ts:?}")));
    }
    if ts.iter().any(|&t| t > table.truncation) {
        log::warn!("sweep values above the index truncation {} reuse its full lists", table.truncation);
    }
    Ok(ts
        .iter()
        .map(|&t| {
            let cut = table.truncated(t);
            let (runs, report) = evaluate(queries, &cut, scorer, ks);
            SweepRow {
                truncation: t,
                pool_hr: report.pool_hr,
                hr: report.hr,
                total_candidates: runs.iter().map(|r| r.candidates.len()).sum(),
            }
        })
        .collect())
}

pub fn sweep_to_tsv(rows: &[SweepRow], ks: &[usize]) -> String {
    let mut out = String::from("T\tpool_hr");
    for k in ks {
        let _ = write!(out, "\thr@{k}");
    }
    out.push_str("\ttotal_candidates\n");
    for r in rows {
        let _ = write!(out, "{}\t{:.10}", r.truncation, r.pool_hr);
        for hr in &r.hr {
            let _ = write!(out, "\t{hr:.10}");
        }
        let _ = writeln!(out, "\t{}", r.total_candidates);
    }
    out
}

/// Which history position produced the hits.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriggerStats {
    /// Recency index (1 = most recent click) to hit count.
    pub histogram: BTreeMap<usize, usize>,
    /// The same histogram for the users with the most clicks.
    pub per_user: BTreeMap<UserId, BTreeMap<usize, usize>>,
}

impl TriggerStats {
    /// Most frequent index; the smaller index on ties.
    pub fn mode(&self) -> Option<usize> {
        self.histogram
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(&i, _)| i)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("trigger_index\thit_count\n");
        for (i, c) in &self.histogram {
            let _ = writeln!(out, "{i}\t{c}");
        }
        out
    }

    pub fn per_user_tsv(&self) -> String {
        let mut out = String::from("user\ttrigger_index\thit_count\n");
        for (u, h) in &self.per_user {
            for (i, c) in h {
                let _ = writeln!(out, "{u}\t{i}\t{c}");
            }
        }
        out
    }
}

/// Trigger responsible for a hit: best index rank, then most recent.
pub fn attribute(candidate: &Candidate) -> Option<&Provenance> {
    candidate.provenance.iter().min_by_key(|p| p.rank)
}

/// 1-based position of the latest occurrence of `item`, counted from the end.
pub fn recency_index(history: &[ItemId], item: ItemId) -> Option<usize> {
    history.iter().rev().position(|&i| i == item).map(|p| p + 1)
}

/// Histogram of the recency index of the trigger behind every hit, within the
/// top `k` (or the whole pool when `k` is `None`). Per-user histograms cover the
/// `top_users` users with the longest histories.
pub fn trigger_index_stats(runs: &[RetrievalRun], queries: &[EvalQuery], k: Option<usize>, top_users: usize) -> TriggerStats {
    assert_eq!(runs.len(), queries.len());
    let mut by_clicks: Vec<(usize, UserId)> = queries.iter().map(|q| (q.history.len(), q.user)).collect();
    by_clicks.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let tracked: BTreeSet<UserId> = by_clicks.iter().map(|x| x.1).take(top_users).collect();

    let mut stats = TriggerStats::default();
    for (run, q) in runs.iter().zip(queries) {
        let hits: Vec<ItemId> = match k {
            Some(k) => run.topk_at(k).iter().copied().filter(|i| q.truth.contains(i)).collect(),
            None => q.truth.iter().copied().filter(|&i| run.candidate(i).is_some()).collect(),
        };
        for item in hits {
            let Some(p) = run.candidate(item).and_then(attribute) else { continue };
            let Some(idx) = recency_index(&run.query_history, p.trigger) else { continue };
            *stats.histogram.entry(idx).or_default() += 1;
            if tracked.contains(&q.user) {
                *stats.per_user.entry(q.user).or_default().entry(idx).or_default() += 1;
            }
        }
    }
    stats
}

/// `user \t rank \t item \t score` for every top-K entry.
pub fn runs_to_tsv(runs: &[RetrievalRun]) -> String {
    let mut out = String::from("user\trank\titem\tscore\n");
    for r in runs {
        for (rank, item) in r.topk.iter().enumerate() {
            let i = r.candidates.binary_search_by_key(item, |c| c.item).expect("top-k item is a candidate");
            let _ = writeln!(out, "{}\t{}\t{}\t{:.16e}", r.user, rank + 1, item, r.scores[i]);
        }
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> I2ITable {
        I2ITable::from_scored(
            10,
            1.0,
            true,
            0.0,
            [
                (1, vec![(10, 0.9), (11, 0.5), (2, 0.4)]),
                (2, vec![(11, 0.8), (12, 0.3)]),
                (3, vec![(13, 0.2)]),
            ],
        )
    }

    const SWING: Scorer<'static> = Scorer::SwingSum { max_seq_len: 50 };

    #[test]
    fn candidates_exclude_history_and_merge_provenance() {
        let c = candidates_for(&[1, 2], &table(), 50);
        let items: Vec<_> = c.iter().map(|x| x.item).collect();
        assert_eq!(items, vec![10, 11, 12]);
        let via: Vec<_> = c[1].provenance.iter().map(|p| (p.trigger, p.rank)).collect();
        assert_eq!(via, vec![(2, 1), (1, 2)]);
    }

    #[test]
    fn sequence_cut_limits_triggers_but_not_exclusion() {
        let c = candidates_for(&[1, 3], &table(), 1);
        assert_eq!(c.iter().map(|x| x.item).collect::<Vec<_>>(), vec![13]);
    }

    #[test]
    fn unknown_history_gives_empty_run() {
        let r = retrieve(0, &[99], &table(), &SWING, 5);
        assert!(r.candidates.is_empty() && r.topk.is_empty());
    }

    #[test]
    fn swing_sum_ranking_and_ties() {
        let r = retrieve(0, &[1, 2], &table(), &SWING, 10);
        // 11: 0.5 + 0.8
        assert_eq!(r.topk, vec![11, 10, 12]);
        assert_eq!(top_k(&r.candidates, &[1.0, 1.0, 1.0], 2), vec![10, 11]);
    }

    #[test]
    fn hit_rate_hand_cases() {
        let run = |topk: Vec<ItemId>| RetrievalRun {
            user: 0,
            query_history: vec![],
            candidates: vec![],
            scores: vec![],
            topk,
        };
        let truth = BTreeSet::from([1, 2, 3, 4]);
        let half = hit_rate(&[run(vec![1, 9, 3])], std::slice::from_ref(&truth), 10);
        assert_eq!(half.value, 0.5);
        assert_eq!(hit_rate(&[run(vec![1, 2, 3, 4])], std::slice::from_ref(&truth), 4).value, 1.0);
        assert_eq!(hit_rate(&[run(vec![7, 8])], std::slice::from_ref(&truth), 2).value, 0.0);
        let with_empty = hit_rate(&[run(vec![1]), run(vec![1])], &[BTreeSet::from([1]), BTreeSet::new()], 1);
        assert_eq!((with_empty.value, with_empty.queries, with_empty.excluded), (1.0, 1, 1));
    }

    #[test]
    fn recency_and_attribution() {
        assert_eq!(recency_index(&[5, 6, 5, 7], 5), Some(2));
        assert_eq!(recency_index(&[5], 8), None);
        let c = Candidate {
            item: 9,
            provenance: vec![
                Provenance { trigger: 1, rank: 3, score: 0.1 },
                Provenance { trigger: 2, rank: 2, score: 0.1 },
                Provenance { trigger: 3, rank: 2, score: 0.1 },
            ],
        };
        assert_eq!(attribute(&c).unwrap().trigger, 2);
    }

    #[test]
    fn sweep_rejects_unsorted_grid() {
        assert!(sweep_truncation(&[], &table(), &[5, 2], &SWING, &[1]).is_err());
    }

    #[test]
    fn report_tsv_shape() {
        let q = vec![EvalQuery {
            user: 1,
            history: vec![1, 2],
            truth: BTreeSet::from([12]),
        }];
        let (_, rep) = evaluate(&q, &table(), &SWING, &[1, 3]);
        assert_eq!(rep.hr, vec![0.0, 1.0]);
        assert_eq!(rep.pool_hr, 1.0);
        let tsv = rep.to_tsv();
        assert!(tsv.starts_with("K\thr\tpool_hr\tmean_candidates\n1\t0.0000000000\t"));
    }
}
