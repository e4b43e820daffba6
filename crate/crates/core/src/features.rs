//! Inputs shared by the sampler, the scoring network and retrieval: trigger
//! provenance of candidates, item attributes and the bucketing of numeric cross
//! features.

use std::collections::HashMap;

use crate::corpus::UserHistory;
use crate::indexer::{CoClickStats, I2ITable};
use crate::ItemId;

/// Number of buckets per numeric cross feature. Bucket 0 means "missing".
pub const CROSS_BUCKETS: usize = 16;

/// How a candidate was reached: through `trigger`, at `rank` with `score`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Provenance {
    pub trigger: ItemId,
    pub rank: u32,
    pub score: f64,
}

/// A candidate with every trigger that fans out to it, most recent trigger first.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub item: ItemId,
    pub provenance: Vec<Provenance>,
}

/// Everything the network needs to score a set of candidates for one user.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoringQuery {
    pub user: u32,
    /// Behaviour sequence, chronological, already cut to the model's length.
    pub sequence: Vec<ItemId>,
    pub candidates: Vec<Candidate>,
}

/// Last `max_len` items of a history, chronological.
pub fn recent(history: &[ItemId], max_len: usize) -> &[ItemId] {
    &history[history.len().saturating_sub(max_len)..]
}

/// Distinct triggers of a (cut) sequence, most recent first.
pub fn trigger_list(sequence: &[ItemId]) -> Vec<ItemId> {
    let mut seen = std::collections::HashSet::new();
    sequence.iter().rev().copied().filter(|i| seen.insert(*i)).collect()
}

/// Provenance of `item` through the given triggers.
pub fn provenance_of(item: ItemId, triggers: &[ItemId], table: &I2ITable) -> Vec<Provenance> {
    triggers
        .iter()
        .filter_map(|&t| {
            table.find(t, item).map(|e| Provenance {
                trigger: t,
                rank: e.rank,
                score: e.score,
            })
        })
        .collect()
}

/// Dense side-info ids and price of an item.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ItemAttrs {
    pub seller: u32,
    pub brand: u32,
    pub price: Option<f64>,
}

/// Item attributes plus co-click counts for trigger-target pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureStore {
    attrs: HashMap<ItemId, ItemAttrs>,
    coclicks: HashMap<(ItemId, ItemId), u32>,
}

impl FeatureStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Collects the latest attributes seen for every item, and co-click counts
    /// for every pair present in `table`.
    pub fn build(histories: &[UserHistory], stats: &CoClickStats, table: &I2ITable) -> Self {
        let mut store = FeatureStore::new();
        for event in histories.iter().flat_map(|h| &h.events) {
            let attrs = store.attrs.entry(event.item).or_default();
            if let Some(s) = event.side.seller {
                attrs.seller = s;
            }
            if let Some(b) = event.side.brand {
                attrs.brand = b;
            }
            if event.side.price.is_some() {
                attrs.price = event.side.price;
            }
        }
        for (trigger, list) in table.iter() {
            for e in list {
                let c = stats.coclicks(trigger, e.target);
                if c > 0 {
                    store.coclicks.insert(key(trigger, e.target), c);
                }
            }
        }
        store
    }

    pub fn attrs(&self, item: ItemId) -> ItemAttrs {
        self.attrs.get(&item).copied().unwrap_or_default()
    }

    pub fn set_attrs(&mut self, item: ItemId, attrs: ItemAttrs) {
        self.attrs.insert(item, attrs);
    }

    pub fn coclicks(&self, a: ItemId, b: ItemId) -> u32 {
        self.coclicks.get(&key(a, b)).copied().unwrap_or(0)
    }

    pub fn set_coclicks(&mut self, a: ItemId, b: ItemId, count: u32) {
        self.coclicks.insert(key(a, b), count);
    }

    /// Bucket ids of the four per-trigger cross features, in the order
    /// price difference, co-click count, index rank, swing score.
    pub fn cross_buckets(&self, target: ItemId, via: &Provenance) -> [usize; 4] {
        let price = match (self.attrs(via.trigger).price, self.attrs(target).price) {
            (Some(a), Some(b)) => magnitude_bucket((a - b).abs()),
            _ => 0,
        };
        [
            price,
            magnitude_bucket(f64::from(self.coclicks(via.trigger, target))),
            magnitude_bucket(f64::from(via.rank)),
            score_bucket(via.score),
        ]
    }
}

fn key(a: ItemId, b: ItemId) -> (ItemId, ItemId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// `0` for non-positive/missing, `1` for (0, 1), then one bucket per power of two.
pub fn magnitude_bucket(x: f64) -> usize {
    if !(x > 0.0) {
        return 0;
    }
    if x < 1.0 {
        return 1;
    }
    (2 + x.log2().floor() as usize).min(CROSS_BUCKETS - 1)
}

/// Swing scores live mostly below 1; buckets cover roughly 2^-13 .. 2^1.
pub fn score_bucket(s: f64) -> usize {
    if !(s > 0.0) {
        return 0;
    }
    (s.log2().floor() + 14.0).clamp(1.0, (CROSS_BUCKETS - 1) as f64) as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn buckets_are_monotone_and_bounded() {
        let xs = [0.0, 0.5, 1.0, 1.5, 2.0, 3.9, 4.0, 100.0, 1e9];
        let b: Vec<_> = xs.iter().map(|&x| magnitude_bucket(x)).collect();
        assert_eq!(b, vec![0, 1, 2, 2, 3, 3, 4, 8, 15]);
        assert_eq!(magnitude_bucket(f64::NAN), 0);
        let mut last = 0;
        for e in -20..5 {
            let s = score_bucket(2f64.powi(e));
            assert!(s >= last && (1..CROSS_BUCKETS).contains(&s));
            last = s;
        }
    }

    #[test]
    fn triggers_dedup_most_recent_first() {
        assert_eq!(trigger_list(&[1, 2, 1, 3]), vec![3, 1, 2]);
        assert_eq!(recent(&[1, 2, 3, 4], 2), &[3, 4]);
        assert_eq!(recent(&[1], 5), &[1]);
    }

    #[test]
    fn provenance_follows_trigger_order() {
        let table = I2ITable::from_scored(5, 1.0, true, 0.0, [(1, vec![(9, 0.5)]), (2, vec![(9, 0.7), (8, 0.1)])]);
        let p = provenance_of(9, &[2, 1, 3], &table);
        assert_eq!(p.iter().map(|x| (x.trigger, x.rank)).collect::<Vec<_>>(), vec![(2, 1), (1, 1)]);
    }
}
