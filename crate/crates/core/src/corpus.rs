//! Interaction logs: loading, per-user histories and leave-last-out splits.
//!
//! Raw user, item and side-info ids are arbitrary strings in the input files and
//! are mapped to dense integer ids in first-seen order. Dense ids start at 1;
//! 0 is reserved for unknown ids so it can double as the OOV embedding row.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::{ItemId, UserId};

/// Categorical and numeric item attributes carried on a click row.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SideInfo {
    pub seller: Option<u32>,
    pub brand: Option<u32>,
    pub category: Option<u32>,
    pub price: Option<f64>,
}

impl SideInfo {
    pub fn is_empty(&self) -> bool {
        self.seller.is_none() && self.brand.is_none() && self.category.is_none() && self.price.is_none()
    }
}

/// One click event.
#[derive(Debug, Clone, PartialEq)]
pub struct Interaction {
    pub user: UserId,
    pub item: ItemId,
    pub timestamp: i64,
    pub side: SideInfo,
}

impl Interaction {
    pub fn new(user: UserId, item: ItemId, timestamp: i64) -> Self {
        Interaction {
            user,
            item,
            timestamp,
            side: SideInfo::default(),
        }
    }
}

/// All events of one user, sorted by `(timestamp, item)`.
#[derive(Debug, Clone, PartialEq)]
pub struct UserHistory {
    pub user: UserId,
    pub events: Vec<Interaction>,
}

impl UserHistory {
    pub fn items(&self) -> Vec<ItemId> {
        self.events.iter().map(|e| e.item).collect()
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// A held-out next-item target together with the events that precede it.
#[derive(Debug, Clone, PartialEq)]
pub struct HeldOut {
    pub user: UserId,
    pub context: Vec<Interaction>,
    pub target: Interaction,
}

impl HeldOut {
    pub fn context_items(&self) -> Vec<ItemId> {
        self.context.iter().map(|e| e.item).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetSplit {
    /// Training prefixes; short histories appear here whole.
    pub train: Vec<UserHistory>,
    pub valid: Vec<HeldOut>,
    pub test: Vec<HeldOut>,
    pub item_vocab: BTreeSet<ItemId>,
    pub user_vocab: BTreeSet<UserId>,
}

impl DatasetSplit {
    /// Number of events across train prefixes and held-out targets.
    pub fn event_count(&self) -> usize {
        self.train.iter().map(UserHistory::len).sum::<usize>() + self.valid.len() + self.test.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Tsv,
    Csv,
}

impl Format {
    fn delimiter(self) -> u8 {
        match self {
            Format::Tsv => b'\t',
            Format::Csv => b',',
        }
    }
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsv" => Ok(Format::Tsv),
            "csv" => Ok(Format::Csv),
            other => Err(Error::Config(format!("unknown input format '{other}'"))),
        }
    }
}

/// First-seen mapping from raw string ids to dense ids `1..=len`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocab {
    raw: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_insert(&mut self, raw: &str) -> u32 {
        if let Some(&id) = self.index.get(raw) {
            return id;
        }
        self.raw.push(raw.to_owned());
        let id = self.raw.len() as u32;
        self.index.insert(raw.to_owned(), id);
        id
    }

    pub fn get(&self, raw: &str) -> Option<u32> {
        self.index.get(raw).copied()
    }

    pub fn raw(&self, id: u32) -> Option<&str> {
        (id as usize).checked_sub(1).and_then(|i| self.raw.get(i)).map(String::as_str)
    }

    /// Number of known ids. Embedding tables need `len() + 1` rows.
    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        for (i, raw) in self.raw.iter().enumerate() {
            writeln!(out, "{raw}\t{}", i + 1).map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut vocab = Vocab::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.is_empty() {
                continue;
            }
            let (raw, dense) = line
                .split_once('\t')
                .ok_or_else(|| Error::format(path, n + 1, "expected 'raw_id<TAB>dense_id'"))?;
            let dense: u32 = dense
                .parse()
                .map_err(|_| Error::format(path, n + 1, format!("bad dense id '{dense}'")))?;
            if dense as usize != vocab.len() + 1 || vocab.get(raw).is_some() {
                return Err(Error::format(path, n + 1, "dense ids must be 1,2,3,... and raw ids unique"));
            }
            vocab.get_or_insert(raw);
        }
        Ok(vocab)
    }

    fn digest_into(&self, hasher: &mut Sha256) {
        hasher.update((self.raw.len() as u64).to_le_bytes());
        for raw in &self.raw {
            hasher.update(raw.as_bytes());
            hasher.update([0u8]);
        }
    }
}

/// Every id space used by the pipeline.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocabularies {
    pub users: Vocab,
    pub items: Vocab,
    pub sellers: Vocab,
    pub brands: Vocab,
    pub categories: Vocab,
}

impl Vocabularies {
    const KINDS: [&'static str; 5] = ["users", "items", "sellers", "brands", "categories"];

    fn parts(&self) -> [&Vocab; 5] {
        [&self.users, &self.items, &self.sellers, &self.brands, &self.categories]
    }

    /// Content hash stamped into checkpoints so a model is never paired with foreign ids.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for v in self.parts() {
            v.digest_into(&mut hasher);
        }
        crate::seed::hex(&hasher.finalize()[..16])
    }

    /// Writes `<dir>/<kind>.vocab.tsv` for every id space.
    pub fn save(&self, dir: &Path) -> Result<()> {
        for (kind, vocab) in Self::KINDS.iter().zip(self.parts()) {
            vocab.save(&dir.join(format!("{kind}.vocab.tsv")))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let load = |kind: &str| Vocab::load(&dir.join(format!("{kind}.vocab.tsv")));
        Ok(Vocabularies {
            users: load("users")?,
            items: load("items")?,
            sellers: load("sellers")?,
            brands: load("brands")?,
            categories: load("categories")?,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Loaded {
    pub interactions: Vec<Interaction>,
    pub malformed: usize,
}

/// Reads a headerless interaction log: `user, item, timestamp [, key=value ...]`.
///
/// Malformed rows are skipped and counted; the load fails only when more than
/// half of the rows are malformed. Known side-info keys are `seller_id`,
/// `brand_id`, `category_id` and `price`; other keys are ignored.
pub fn load_interactions(path: &Path, format: Format, vocabs: &mut Vocabularies) -> Result<Loaded> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .delimiter(format.delimiter())
        .quoting(format == Format::Csv)
        .from_reader(BufReader::new(file));

    let mut loaded = Loaded::default();
    let mut total = 0usize;
    for (row, record) in reader.records().enumerate() {
        total += 1;
        let parsed = match record {
            Ok(rec) => parse_row(&rec, vocabs),
            Err(e) if e.is_io_error() => {
                return Err(Error::io(path, std::io::Error::other(e.to_string())));
            }
            Err(e) => Err(e.to_string()),
        };
        match parsed {
            Ok(interaction) => loaded.interactions.push(interaction),
            Err(reason) => {
                log::warn!("{}: row {}: {reason}", path.display(), row + 1);
                loaded.malformed += 1;
            }
        }
    }
    if loaded.malformed * 2 > total {
        return Err(Error::TooManyMalformed {
            path: path.to_owned(),
            malformed: loaded.malformed,
            total,
        });
    }
    Ok(loaded)
}

fn parse_row(rec: &csv::StringRecord, vocabs: &mut Vocabularies) -> std::result::Result<Interaction, String> {
    if rec.len() < 3 {
        return Err(format!("expected at least 3 columns, found {}", rec.len()));
    }
    let (user, item, ts) = (rec[0].trim(), rec[1].trim(), rec[2].trim());
    if user.is_empty() || item.is_empty() {
        return Err("empty user or item id".into());
    }
    let timestamp: i64 = ts.parse().map_err(|_| format!("bad timestamp '{ts}'"))?;

    // Validate the side columns before touching any vocabulary so a rejected
    // row leaves no trace.
    let mut fields = Vec::new();
    for field in rec.iter().skip(3) {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| format!("side column '{field}' is not key=value"))?;
        match key {
            "price" => {
                let p: f64 = value.parse().map_err(|_| format!("bad price '{value}'"))?;
                if !p.is_finite() {
                    return Err(format!("non-finite price '{value}'"));
                }
                fields.push((key, value, Some(p)));
            }
            "seller_id" | "brand_id" | "category_id" if value.is_empty() => {
                return Err(format!("empty {key}"));
            }
            _ => fields.push((key, value, None)),
        }
    }

    let mut side = SideInfo::default();
    for (key, value, price) in fields {
        match key {
            "price" => side.price = price,
            "seller_id" => side.seller = Some(vocabs.sellers.get_or_insert(value)),
            "brand_id" => side.brand = Some(vocabs.brands.get_or_insert(value)),
            "category_id" => side.category = Some(vocabs.categories.get_or_insert(value)),
            _ => {}
        }
    }
    Ok(Interaction {
        user: vocabs.users.get_or_insert(user),
        item: vocabs.items.get_or_insert(item),
        timestamp,
        side,
    })
}

/// Writes interactions with their raw ids, in the order given.
pub fn write_interactions<'a>(
    path: &Path,
    events: impl IntoIterator<Item = &'a Interaction>,
    vocabs: &Vocabularies,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let raw = |v: &Vocab, id: u32| -> Result<String> {
        v.raw(id)
            .map(str::to_owned)
            .ok_or_else(|| Error::Config(format!("dense id {id} has no raw id")))
    };
    for e in events {
        let mut line = format!(
            "{}\t{}\t{}",
            raw(&vocabs.users, e.user)?,
            raw(&vocabs.items, e.item)?,
            e.timestamp
        );
        if let Some(s) = e.side.seller {
            line += &format!("\tseller_id={}", raw(&vocabs.sellers, s)?);
        }
        if let Some(b) = e.side.brand {
            line += &format!("\tbrand_id={}", raw(&vocabs.brands, b)?);
        }
        if let Some(c) = e.side.category {
            line += &format!("\tcategory_id={}", raw(&vocabs.categories, c)?);
        }
        if let Some(p) = e.side.price {
            line += &format!("\tprice={p}");
        }
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Groups interactions by user (ascending user id) and sorts each history by
/// `(timestamp, item)`.
pub fn build_histories(interactions: &[Interaction]) -> Vec<UserHistory> {
    let mut by_user: BTreeMap<UserId, Vec<Interaction>> = BTreeMap::new();
    for event in interactions {
        by_user.entry(event.user).or_default().push(event.clone());
    }
    by_user
        .into_iter()
        .map(|(user, mut events)| {
            events.sort_by_key(|e| (e.timestamp, e.item));
            UserHistory { user, events }
        })
        .collect()
}

/// Leave-last-out split: last event is the test target, second-to-last the
/// validation target, the rest trains. Histories shorter than `min_len` go to
/// training whole.
pub fn split_leave_last(histories: &[UserHistory], min_len: usize) -> Result<DatasetSplit> {
    if min_len < 3 {
        return Err(Error::Config(format!("min_len must be at least 3, got {min_len}")));
    }
    let mut split = DatasetSplit::default();
    for history in histories {
        split.user_vocab.insert(history.user);
        split.item_vocab.extend(history.events.iter().map(|e| e.item));
        let n = history.len();
        if n < min_len {
            split.train.push(history.clone());
            continue;
        }
        let events = &history.events;
        split.test.push(HeldOut {
            user: history.user,
            context: events[..n - 1].to_vec(),
            target: events[n - 1].clone(),
        });
        split.valid.push(HeldOut {
            user: history.user,
            context: events[..n - 2].to_vec(),
            target: events[n - 2].clone(),
        });
        split.train.push(UserHistory {
            user: history.user,
            events: events[..n - 2].to_vec(),
        });
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn empty_file_loads_nothing() {
        let f = write("");
        let loaded = load_interactions(f.path(), Format::Tsv, &mut Vocabularies::default()).unwrap();
        assert!(loaded.interactions.is_empty());
        assert_eq!(loaded.malformed, 0);
    }

    #[test]
    fn rows_keep_file_order() {
        let f = write("u1\ti9\t30\nu2\ti8\t10\nu1\ti7\t20\n");
        let mut vocabs = Vocabularies::default();
        let loaded = load_interactions(f.path(), Format::Tsv, &mut vocabs).unwrap();
        let got: Vec<_> = loaded.interactions.iter().map(|e| (e.user, e.item, e.timestamp)).collect();
        assert_eq!(got, vec![(1, 1, 30), (2, 2, 10), (1, 3, 20)]);
        assert_eq!(vocabs.items.raw(3), Some("i7"));
    }

    #[test]
    fn malformed_rows_are_counted() {
        // rows 4 (two columns) and 9 (non-numeric timestamp) are broken
        let rows = [
            "a\tx\t1",
            "a\ty\t2",
            "b\tx\t3",
            "b\ty",
            "c\tz\t5",
            "c\tx\t6",
            "d\ty\t7",
            "d\tz\t8",
            "e\tx\tnine",
            "e\ty\t10",
        ];
        let f = write(&(rows.join("\n") + "\n"));
        let loaded = load_interactions(f.path(), Format::Tsv, &mut Vocabularies::default()).unwrap();
        assert_eq!(loaded.interactions.len(), 8);
        assert_eq!(loaded.malformed, 2);
    }

    #[test]
    fn mostly_malformed_file_fails() {
        let f = write("a\tb\nc\td\ne\tf\t1\n");
        let err = load_interactions(f.path(), Format::Tsv, &mut Vocabularies::default()).unwrap_err();
        assert!(matches!(err, Error::TooManyMalformed { malformed: 2, total: 3, .. }));
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_interactions(Path::new("/nonexistent/x.tsv"), Format::Tsv, &mut Vocabularies::default())
            .unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn side_info_and_csv() {
        let f = write("u,i,5,seller_id=s1,price=9.5,brand_id=b\nu,j,6,colour=red\n");
        let mut vocabs = Vocabularies::default();
        let loaded = load_interactions(f.path(), Format::Csv, &mut vocabs).unwrap();
        assert_eq!(loaded.malformed, 0);
        let side = &loaded.interactions[0].side;
        assert_eq!(side.seller, Some(1));
        assert_eq!(side.brand, Some(1));
        assert_eq!(side.price, Some(9.5));
        assert!(loaded.interactions[1].side.is_empty());
    }

    #[test]
    fn rejected_row_does_not_grow_vocab() {
        let f = write("u\ti\t1\nv\tj\t2\tprice=abc\n");
        let mut vocabs = Vocabularies::default();
        load_interactions(f.path(), Format::Tsv, &mut vocabs).unwrap();
        assert_eq!(vocabs.users.len(), 1);
        assert_eq!(vocabs.items.len(), 1);
    }

    #[test]
    fn histories_sorted_in_time() {
        let events = vec![
            Interaction::new(1, 5, 30),
            Interaction::new(1, 4, 20),
            Interaction::new(1, 3, 10),
        ];
        let h = build_histories(&events);
        assert_eq!(h.len(), 1);
        assert_eq!(h[0].items(), vec![3, 4, 5]);
    }

    #[test]
    fn equal_timestamps_break_ties_by_item() {
        let events = vec![Interaction::new(1, 9, 10), Interaction::new(1, 2, 10)];
        assert_eq!(build_histories(&events)[0].items(), vec![2, 9]);
    }

    #[test]
    fn interleaved_users_regroup() {
        let events: Vec<_> = (0..6).map(|t| Interaction::new(1 + (t % 2) as u32, 10 + t as u32, t)).collect();
        let h = build_histories(&events);
        // brute-force regroup
        for hist in &h {
            let mut expected: Vec<_> = events.iter().filter(|e| e.user == hist.user).cloned().collect();
            expected.sort_by_key(|e| (e.timestamp, e.item));
            assert_eq!(hist.events, expected);
        }
        assert_eq!(h.iter().map(UserHistory::len).collect::<Vec<_>>(), vec![3, 3]);
    }

    #[test]
    fn short_history_trains_whole() {
        let h = build_histories(&[Interaction::new(1, 1, 1), Interaction::new(1, 2, 2)]);
        let split = split_leave_last(&h, 3).unwrap();
        assert!(split.test.is_empty() && split.valid.is_empty());
        assert_eq!(split.train[0].len(), 2);
    }

    #[test]
    fn leave_last_on_four_events() {
        let (a, b, c, d) = (1, 2, 3, 4);
        let h = build_histories(&[
            Interaction::new(1, a, 1),
            Interaction::new(1, b, 2),
            Interaction::new(1, c, 3),
            Interaction::new(1, d, 4),
        ]);
        let split = split_leave_last(&h, 3).unwrap();
        assert_eq!(split.test[0].target.item, d);
        assert_eq!(split.test[0].context_items(), vec![a, b, c]);
        assert_eq!(split.valid[0].target.item, c);
        assert_eq!(split.valid[0].context_items(), vec![a, b]);
        assert_eq!(split.train[0].items(), vec![a, b]);
        assert_eq!(split.event_count(), 4);
    }

    #[test]
    fn min_len_below_three_rejected() {
        assert!(split_leave_last(&[], 2).is_err());
    }

    #[test]
    fn vocab_file_round_trip() {
        let mut v = Vocab::new();
        for raw in ["x", "y", "z"] {
            v.get_or_insert(raw);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.tsv");
        v.save(&path).unwrap();
        assert_eq!(Vocab::load(&path).unwrap(), v);
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "x\t1\ny\t2\nz\t3\n");
    }
}
