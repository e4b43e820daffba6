//! Item-to-item index built from user-weighted Swing similarity.
//!
//! For items `i`, `j` with co-clicking users `U_ij`, the score is
//!
//! ```text
//! s(i, j) = sum_{u in U_ij} sum_{v in U_ij} w_u * w_v / (alpha + |I_u ∩ I_v|)
//! ```
//!
//! over ordered user pairs, with `w_u = 1 / sqrt(|I_u|)` when weighting is on and
//! `1` otherwise. The `u = v` terms are included unless `exclude_self_pairs` is set.
//! Every trigger keeps its top `T` neighbours by `(score desc, item asc)`.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::corpus::UserHistory;
use crate::error::{Error, Result};
use crate::{ItemId, UserId};

pub const DEFAULT_TRUNCATION: usize = 1250;

#[derive(Debug, Clone, PartialEq)]
pub struct IndexParams {
    /// Smoothing term in the Swing denominator.
    pub alpha: f64,
    /// Truncation size `T`.
    pub truncation: usize,
    pub weighted: bool,
    pub exclude_self_pairs: bool,
    /// Only items at most this many positions apart in a history co-occur.
    pub window: Option<usize>,
    /// Keep only each user's most recent distinct items.
    pub user_item_cap: Option<usize>,
    pub min_score: f64,
}

impl Default for IndexParams {
    fn default() -> Self {
        IndexParams {
            alpha: 1.0,
            truncation: DEFAULT_TRUNCATION,
            weighted: true,
            exclude_self_pairs: false,
            window: None,
            user_item_cap: Some(500),
            min_score: 0.0,
        }
    }
}

impl IndexParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.truncation == 0 {
            return Err(Error::Config("truncation size must be at least 1".into()));
        }
        if !(self.min_score >= 0.0) {
            return Err(Error::Config(format!("min_score must be non-negative, got {}", self.min_score)));
        }
        if self.window == Some(0) || self.user_item_cap == Some(0) {
            return Err(Error::Config("window and user_item_cap must be positive when set".into()));
        }
        Ok(())
    }
}

/// Who clicked what, plus pairwise co-click counts.
#[derive(Debug, Clone, Default)]
pub struct CoClickStats {
    users_by_item: BTreeMap<ItemId, Vec<UserId>>,
    items_by_user: BTreeMap<UserId, Vec<ItemId>>,
    /// Per user, the items co-occurring with each item inside the window. Only
    /// populated when a window is set; otherwise every other item of `I_u` counts.
    windowed: Option<BTreeMap<UserId, HashMap<ItemId, Vec<ItemId>>>>,
    coclick: HashMap<(ItemId, ItemId), u32>,
}

impl CoClickStats {
    /// `U_i`, sorted ascending.
    pub fn users_of(&self, item: ItemId) -> &[UserId] {
        self.users_by_item.get(&item).map_or(&[], Vec::as_slice)
    }

    /// `I_u`, sorted ascending.
    pub fn items_of(&self, user: UserId) -> &[ItemId] {
        self.items_by_user.get(&user).map_or(&[], Vec::as_slice)
    }

    pub fn items(&self) -> impl Iterator<Item = ItemId> + '_ {
        self.users_by_item.keys().copied()
    }

    pub fn users(&self) -> impl Iterator<Item = UserId> + '_ {
        self.items_by_user.keys().copied()
    }

    /// Number of users who clicked both items (within the window, if one is set).
    pub fn coclicks(&self, i: ItemId, j: ItemId) -> u32 {
        self.coclick.get(&ordered(i, j)).copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.items_by_user.is_empty()
    }

    /// Whether `j` co-occurs with `i` in `user`'s history.
    fn co_occur(&self, user: UserId, i: ItemId, j: ItemId) -> bool {
        if i == j {
            return false;
        }
        match &self.windowed {
            Some(w) => w
                .get(&user)
                .and_then(|m| m.get(&i))
                .is_some_and(|nbrs| nbrs.binary_search(&j).is_ok()),
            None => {
                let items = self.items_of(user);
                items.binary_search(&i).is_ok() && items.binary_search(&j).is_ok()
            }
        }
    }

    fn weight(&self, user: UserId, weighted: bool) -> f64 {
        if weighted {
            1.0 / (self.items_of(user).len() as f64).sqrt()
        } else {
            1.0
        }
    }
}

fn ordered(i: ItemId, j: ItemId) -> (ItemId, ItemId) {
    if i <= j {
        (i, j)
    } else {
        (j, i)
    }
}

/// Most recent suffix of `items` holding at most `cap` distinct items.
fn capped_suffix(items: &[ItemId], cap: Option<usize>) -> &[ItemId] {
    let Some(cap) = cap else { return items };
    let mut seen = std::collections::HashSet::new();
    let mut start = items.len();
    while start > 0 {
        let item = items[start - 1];
        if !seen.contains(&item) {
            if seen.len() == cap {
                break;
            }
            seen.insert(item);
        }
        start -= 1;
    }
    &items[start..]
}

/// Builds the user/item incidence and pairwise co-click counts.
///
/// Repeated clicks collapse in the sets. With a `window`, two items co-occur for
/// a user only if some pair of their occurrences is at most `window` positions
/// apart; `I_u` itself is still the user's whole (capped) item set.
pub fn accumulate_coclicks(histories: &[UserHistory], window: Option<usize>, user_item_cap: Option<usize>) -> CoClickStats {
    let mut stats = CoClickStats::default();
    let mut windowed = window.map(|_| BTreeMap::new());

    for history in histories {
        let all = history.items();
        let seq = capped_suffix(&all, user_item_cap);
        if seq.is_empty() {
            continue;
        }
        let mut set = seq.to_vec();
        set.sort_unstable();
        set.dedup();
        for &item in &set {
            stats.users_by_item.entry(item).or_default().push(history.user);
        }

        match (window, windowed.as_mut()) {
            (Some(w), Some(per_user)) => {
                let mut nbrs: HashMap<ItemId, Vec<ItemId>> = HashMap::new();
                for (p, &a) in seq.iter().enumerate() {
                    for &b in &seq[p + 1..(p + 1 + w).min(seq.len())] {
                        if a != b {
                            nbrs.entry(a).or_default().push(b);
                            nbrs.entry(b).or_default().push(a);
                        }
                    }
                }
                for list in nbrs.values_mut() {
                    list.sort_unstable();
                    list.dedup();
                }
                for (&a, list) in &nbrs {
                    for &b in list.iter().filter(|&&b| a < b) {
                        *stats.coclick.entry((a, b)).or_default() += 1;
                    }
                }
                per_user.insert(history.user, nbrs);
            }
            _ => {
                for (x, &a) in set.iter().enumerate() {
                    for &b in &set[x + 1..] {
                        *stats.coclick.entry((a, b)).or_default() += 1;
                    }
                }
            }
        }
        stats.items_by_user.entry(history.user).or_default().extend(set);
    }

    // A user id can in principle appear in several histories; keep the sets clean.
    for items in stats.items_by_user.values_mut() {
        items.sort_unstable();
        items.dedup();
    }
    for users in stats.users_by_item.values_mut() {
        users.sort_unstable();
        users.dedup();
    }
    stats.windowed = windowed;
    stats
}

/// Swing similarity of one item pair, straight from the definition.
pub fn swing_score(i: ItemId, j: ItemId, stats: &CoClickStats, params: &IndexParams) -> Result<f64> {
    if i == j {
        return Err(Error::SelfPair(i));
    }
    if !(params.alpha > 0.0) {
        return Err(Error::Config(format!("alpha must be positive, got {}", params.alpha)));
    }
    let shared: Vec<UserId> = stats
        .users_of(i)
        .iter()
        .copied()
        .filter(|&u| stats.co_occur(u, i, j))
        .collect();
    let mut score = 0.0;
    for &u in &shared {
        for &v in &shared {
            if u == v && params.exclude_self_pairs {
                continue;
            }
            let common = intersection_len(stats.items_of(u), stats.items_of(v));
            score += stats.weight(u, params.weighted) * stats.weight(v, params.weighted) / (params.alpha + common as f64);
        }
    }
    Ok(score)
}

fn intersection_len(a: &[ItemId], b: &[ItemId]) -> usize {
    let (mut x, mut y, mut n) = (0, 0, 0);
    while x < a.len() && y < b.len() {
        match a[x].cmp(&b[y]) {
            std::cmp::Ordering::Less => x += 1,
            std::cmp::Ordering::Greater => y += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                x += 1;
                y += 1;
            }
        }
    }
    n
}

/// Scores every neighbour of `trigger` in one pass over its user pairs.
///
/// Each unordered pair `{u, v}` of `U_trigger` contributes to every item the two
/// users share. Contributions for a given `j` are added in the same order as in
/// the row of `j`, so `s(i, j)` and `s(j, i)` agree bit for bit.
fn score_row(trigger: ItemId, stats: &CoClickStats, params: &IndexParams) -> HashMap<ItemId, f64> {
    let users = stats.users_of(trigger);
    let weights: Vec<f64> = users.iter().map(|&u| stats.weight(u, params.weighted)).collect();
    let mut row: HashMap<ItemId, f64> = HashMap::new();
    let mut shared = Vec::new();

    for (a, &u) in users.iter().enumerate() {
        let start = if params.exclude_self_pairs { a + 1 } else { a };
        let iu = stats.items_of(u);
        for (b, &v) in users.iter().enumerate().skip(start) {
            let iv = stats.items_of(v);
            shared.clear();
            let (mut x, mut y) = (0, 0);
            while x < iu.len() && y < iv.len() {
                match iu[x].cmp(&iv[y]) {
                    std::cmp::Ordering::Less => x += 1,
                    std::cmp::Ordering::Greater => y += 1,
                    std::cmp::Ordering::Equal => {
                        shared.push(iu[x]);
                        x += 1;
                        y += 1;
                    }
                }
            }
            let pair_mult = if u == v { 1.0 } else { 2.0 };
            let contribution = pair_mult * weights[a] * weights[b] / (params.alpha + shared.len() as f64);
            for &j in &shared {
                if j == trigger {
                    continue;
                }
                if stats.windowed.is_some() && !(stats.co_occur(u, trigger, j) && stats.co_occur(v, trigger, j)) {
                    continue;
                }
                *row.entry(j).or_insert(0.0) += contribution;
            }
        }
    }
    row
}

/// Relative gap below which two scores count as tied. Far above summation
/// rounding, far below any real difference between swing scores.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// Sorts by score descending; runs of scores within [`TIE_TOLERANCE`] of the
/// run's first score are ordered by ascending item id.
pub fn rank_scored(scored: &mut [(ItemId, f64)]) {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut start = 0;
    while start < scored.len() {
        let lead = scored[start].1;
        let mut end = start + 1;
        while end < scored.len() && (lead - scored[end].1).abs() <= TIE_TOLERANCE * lead.abs() {
            end += 1;
        }
        scored[start..end].sort_by_key(|e| e.0);
        start = end;
    }
}

/// One neighbour of a trigger in the index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndexEntry {
    pub target: ItemId,
    pub score: f64,
    /// 1-based position in the trigger's list.
    pub rank: u32,
}

/// Trigger → truncated, ranked target list.
#[derive(Debug, Clone, PartialEq)]
pub struct I2ITable {
    entries: BTreeMap<ItemId, Vec<IndexEntry>>,
    pub truncation: usize,
    pub alpha: f64,
    pub weighted: bool,
}

impl I2ITable {
    pub fn empty(truncation: usize, alpha: f64, weighted: bool) -> Self {
        I2ITable {
            entries: BTreeMap::new(),
            truncation,
            alpha,
            weighted,
        }
    }

    /// Ranks raw scored neighbour lists: drops the trigger itself and scores that
    /// are not positive or fall below `min_score`, sorts with [`rank_scored`] and
    /// keeps the first `truncation`.
    pub fn from_scored<I>(truncation: usize, alpha: f64, weighted: bool, min_score: f64, rows: I) -> Self
    where
        I: IntoIterator<Item = (ItemId, Vec<(ItemId, f64)>)>,
    {
        let mut table = I2ITable::empty(truncation, alpha, weighted);
        for (trigger, mut scored) in rows {
            scored.retain(|&(t, s)| t != trigger && s > 0.0 && s >= min_score);
            scored.sort_by_key(|e| e.0);
            scored.dedup_by_key(|e| e.0);
            rank_scored(&mut scored);
            scored.truncate(truncation);
            if scored.is_empty() {
                continue;
            }
            let list = scored
                .into_iter()
                .enumerate()
                .map(|(r, (target, score))| IndexEntry {
                    target,
                    score,
                    rank: r as u32 + 1,
                })
                .collect();
            table.entries.insert(trigger, list);
        }
        table
    }

    pub fn targets(&self, trigger: ItemId) -> &[IndexEntry] {
        self.entries.get(&trigger).map_or(&[], Vec::as_slice)
    }

    pub fn find(&self, trigger: ItemId, target: ItemId) -> Option<&IndexEntry> {
        self.targets(trigger).iter().find(|e| e.target == target)
    }

    pub fn contains(&self, trigger: ItemId, target: ItemId) -> bool {
        self.find(trigger, target).is_some()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ItemId, &[IndexEntry])> {
        self.entries.iter().map(|(&t, l)| (t, l.as_slice()))
    }

    /// Number of triggers with a non-empty list.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry_count(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn mean_list_len(&self) -> f64 {
        if self.entries.is_empty() {
            0.0
        } else {
            self.entry_count() as f64 / self.entries.len() as f64
        }
    }

    /// Prefix-truncates every list to `truncation` entries.
    pub fn truncated(&self, truncation: usize) -> I2ITable {
        let entries = self
            .entries
            .iter()
            .map(|(&t, l)| (t, l[..l.len().min(truncation)].to_vec()))
            .collect();
        I2ITable {
            entries,
            truncation,
            alpha: self.alpha,
            weighted: self.weighted,
        }
    }

    /// Checks the table invariants.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Shape(msg));
        for (&trigger, list) in &self.entries {
            if list.is_empty() || list.len() > self.truncation {
                return bad(format!("trigger {trigger}: list length {} outside 1..={}", list.len(), self.truncation));
            }
            for (pos, e) in list.iter().enumerate() {
                if e.target == trigger {
                    return bad(format!("trigger {trigger} lists itself"));
                }
                if !(e.score > 0.0) {
                    return bad(format!("trigger {trigger}: non-positive score {}", e.score));
                }
                if e.rank as usize != pos + 1 {
                    return bad(format!("trigger {trigger}: rank {} at position {}", e.rank, pos + 1));
                }
                if pos > 0 && list[pos - 1].score < e.score * (1.0 - 2.0 * TIE_TOLERANCE) {
                    return bad(format!("trigger {trigger}: scores increase at rank {}", e.rank));
                }
            }
        }
        Ok(())
    }

    fn header(&self) -> String {
        format!(
            "#pi2i-index v1 alpha={} T={} weighted={}",
            self.alpha,
            self.truncation,
            u8::from(self.weighted)
        )
    }

    /// Writes the text index: header, `trigger\ttarget\tscore\trank` rows sorted by
    /// `(trigger, rank)`, then a SHA-256 trailer over everything before it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = String::new();
        body.push_str(&self.header());
        body.push('\n');
        for (&trigger, list) in &self.entries {
            for e in list {
                body.push_str(&format!("{trigger}\t{}\t{:.16e}\t{}\n", e.target, e.score, e.rank));
            }
        }
        let checksum = crate::seed::hex(&Sha256::digest(body.as_bytes()));
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        out.write_all(body.as_bytes())
            .and_then(|_| writeln!(out, "#checksum sha256={checksum}"))
            .and_then(|_| out.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut text = String::new();
        File::open(path)
            .and_then(|mut f| f.read_to_string(&mut text))
            .map_err(|e| Error::io(path, e))?;

        let trailer_at = text
            .trim_end_matches('\n')
            .rfind('\n')
            .map(|p| p + 1)
            .ok_or_else(|| Error::format(path, 1, "missing checksum trailer"))?;
        let (body, trailer) = text.split_at(trailer_at);
        let expected = trailer
            .trim_end()
            .strip_prefix("#checksum sha256=")
            .ok_or_else(|| Error::format(path, body.lines().count() + 1, "missing checksum trailer"))?;
        let found = crate::seed::hex(&Sha256::digest(body.as_bytes()));
        if found != expected {
            return Err(Error::Checksum {
                path: path.to_owned(),
                expected: expected.to_owned(),
                found,
            });
        }

        let mut lines = body.lines();
        let header = lines.next().unwrap_or_default();
        let mut fields = header.split(' ');
        if fields.next() != Some("#pi2i-index") {
            return Err(Error::format(path, 1, "not a pi2i index file"));
        }
        match fields.next() {
            Some("v1") => {}
            other => return Err(Error::Version(format!("index version {}", other.unwrap_or("<none>")))),
        }
        let (mut alpha, mut truncation, mut weighted) = (None, None, None);
        for kv in fields {
            match kv.split_once('=') {
                Some(("alpha", v)) => alpha = v.parse::<f64>().ok(),
                Some(("T", v)) => truncation = v.parse::<usize>().ok(),
                Some(("weighted", "0")) => weighted = Some(false),
                Some(("weighted", "1")) => weighted = Some(true),
                _ => return Err(Error::format(path, 1, format!("bad header field '{kv}'"))),
            }
        }
        let (Some(alpha), Some(truncation), Some(weighted)) = (alpha, truncation, weighted) else {
            return Err(Error::format(path, 1, "header needs alpha, T and weighted"));
        };

        let mut table = I2ITable::empty(truncation, alpha, weighted);
        let mut last_trigger = None;
        for (n, line) in lines.enumerate() {
            let lineno = n + 2;
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(Error::format(path, lineno, "expected 4 columns"));
            }
            let parse_err = |what: &str| Error::format(path, lineno, format!("bad {what}"));
            let trigger: ItemId = cols[0].parse().map_err(|_| parse_err("trigger"))?;
            let target: ItemId = cols[1].parse().map_err(|_| parse_err("target"))?;
            let score: f64 = cols[2].parse().map_err(|_| parse_err("score"))?;
            let rank: u32 = cols[3].parse().map_err(|_| parse_err("rank"))?;
            if last_trigger.is_some_and(|t| t > trigger) {
                return Err(Error::format(path, lineno, "rows not sorted by trigger"));
            }
            last_trigger = Some(trigger);
            table.entries.entry(trigger).or_default().push(IndexEntry { target, score, rank });
        }
        table.validate().map_err(|e| Error::format(path, 0, e.to_string()))?;
        Ok(table)
    }
}

/// Builds the truncated index from training histories.
pub fn build_index(histories: &[UserHistory], params: &IndexParams) -> Result<I2ITable> {
    params.validate()?;
    let stats = accumulate_coclicks(histories, params.window, params.user_item_cap);
    Ok(build_index_from_stats(&stats, params))
}

pub fn build_index_from_stats(stats: &CoClickStats, params: &IndexParams) -> I2ITable {
    let items: Vec<ItemId> = stats.items().collect();
    let rows: Vec<(ItemId, Vec<(ItemId, f64)>)> = items
        .par_iter()
        .map(|&i| (i, score_row(i, stats, params).into_iter().collect()))
        .collect();
    I2ITable::from_scored(params.truncation, params.alpha, params.weighted, params.min_score, rows)
}
