//! Implicit-feedback interaction logs.
//!
//! Raw rows are parsed from delimited text, mapped onto dense user/item ids
//! and partitioned into train / validation / test with a popularity-balanced
//! ("intervened") sampler: every item contributes the same number of held-out
//! interactions wherever it can, so the held-out sets carry no global
//! popularity skew.

pub mod synthetic;

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub type UserId = u32;
pub type ItemId = u32;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("dataset is empty")]
    Empty,
    #[error("invalid split fractions (test={test}, valid={valid}): need 0 < each and test + valid < 1")]
    InvalidFractions { test: f64, valid: f64 },
    #[error("user {user} has interacted with every item in train; no negative can be sampled")]
    NoNegative { user: UserId },
    #[error("user {user} out of range (num_users={num_users})")]
    UserOutOfRange { user: UserId, num_users: usize },
    #[error("unknown format {0:?}; expected tsv, csv or movielens-dat")]
    UnknownFormat(String),
}

/// Input file layout. All formats carry `user, item[, rating[, timestamp]]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    Tsv,
    Csv,
    /// MovieLens `.dat` files, fields separated by `::`.
    MovielensDat,
}

impl Format {
    pub fn delimiter(self) -> &'static str {
        match self {
            Format::Tsv => "\t",
            Format::Csv => ",",
            Format::MovielensDat => "::",
        }
    }
}

impl FromStr for Format {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tsv" => Ok(Format::Tsv),
            "csv" => Ok(Format::Csv),
            "movielens-dat" | "dat" => Ok(Format::MovielensDat),
            other => Err(DataError::UnknownFormat(other.to_string())),
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::Tsv => "tsv",
            Format::Csv => "csv",
            Format::MovielensDat => "movielens-dat",
        })
    }
}

/// One parsed row with its original identifiers.
#[derive(Clone, Debug, PartialEq)]
pub struct RawInteraction {
    pub user: String,
    pub item: String,
    pub rating: Option<f32>,
    pub timestamp: Option<i64>,
}

impl RawInteraction {
    pub fn new(user: impl Into<String>, item: impl Into<String>) -> Self {
        Self {
            user: user.into(),
            item: item.into(),
            rating: None,
            timestamp: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Interaction {
    pub user: UserId,
    pub item: ItemId,
    pub rating: Option<f32>,
    /// Parsed and carried along; nothing downstream reads it.
    pub timestamp: Option<i64>,
}

pub fn load_dataset(path: &Path, format: Format) -> Result<Vec<RawInteraction>, DataError> {
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_interactions(BufReader::new(file), format).map_err(|e| match e {
        DataError::Io { source, .. } => DataError::Io {
            path: path.display().to_string(),
            source,
        },
        other => other,
    })
}

/// Parses delimited interaction rows. Blank lines and `#` comments are skipped.
pub fn parse_interactions<R: BufRead>(
    reader: R,
    format: Format,
) -> Result<Vec<RawInteraction>, DataError> {
    let delim = format.delimiter();
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|source| DataError::Io {
            path: String::new(),
            source,
        })?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(delim).map(str::trim).collect();
        if fields.len() < 2 || fields.len() > 4 {
            return Err(DataError::Parse {
                line: lineno,
                reason: format!("expected 2 to 4 fields, found {}", fields.len()),
            });
        }
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(DataError::Parse {
                line: lineno,
                reason: "empty user or item field".into(),
            });
        }
        let rating = match fields.get(2) {
            Some(s) if !s.is_empty() => Some(s.parse::<f32>().map_err(|_| DataError::Parse {
                line: lineno,
                reason: format!("rating {s:?} is not a number"),
            })?),
            _ => None,
        };
        let timestamp = match fields.get(3) {
            Some(s) if !s.is_empty() => Some(s.parse::<i64>().map_err(|_| DataError::Parse {
                line: lineno,
                reason: format!("timestamp {s:?} is not an integer"),
            })?),
            _ => None,
        };
        out.push(RawInteraction {
            user: fields[0].to_string(),
            item: fields[1].to_string(),
            rating,
            timestamp,
        });
    }
    if out.is_empty() {
        return Err(DataError::Empty);
    }
    Ok(out)
}

/// Interactions of one split plus a per-user sorted item-set view.
#[derive(Clone, Debug, Default)]
pub struct SplitView {
    interactions: Vec<Interaction>,
    by_user: Vec<Vec<ItemId>>,
}

impl SplitView {
    pub fn new(interactions: Vec<Interaction>, num_users: usize) -> Self {
        let mut by_user = vec![Vec::new(); num_users];
        for it in &interactions {
            by_user[it.user as usize].push(it.item);
        }
        for items in &mut by_user {
            items.sort_unstable();
            items.dedup();
        }
        Self {
            interactions,
            by_user,
        }
    }

    pub fn interactions(&self) -> &[Interaction] {
        &self.interactions
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    /// Sorted items of `user` in this split; empty for unknown users.
    pub fn items(&self, user: UserId) -> &[ItemId] {
        self.by_user
            .get(user as usize)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn contains(&self, user: UserId, item: ItemId) -> bool {
        self.items(user).binary_search(&item).is_ok()
    }

    pub fn num_users(&self) -> usize {
        self.by_user.len()
    }
}

/// Bookkeeping for one intervened split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMeta {
    pub seed: u64,
    pub test_frac: f64,
    pub valid_frac: f64,
    pub total: usize,
    pub test_target: usize,
    pub test_quota: usize,
    pub test_size: usize,
    pub valid_target: usize,
    pub valid_quota: usize,
    pub valid_size: usize,
    pub train_size: usize,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct InteractionDataset {
    pub num_users: usize,
    pub num_items: usize,
    /// Raw identifiers indexed by dense id.
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
    pub train: SplitView,
    pub valid: SplitView,
    pub test: SplitView,
    train_item_counts: Vec<u32>,
    pub split_meta: Option<SplitMeta>,
}

impl InteractionDataset {
    /// Assembles a dataset from already-mapped splits.
    #[allow(clippy::too_many_arguments)]
    pub fn from_splits(
        num_users: usize,
        num_items: usize,
        user_ids: Vec<String>,
        item_ids: Vec<String>,
        train: Vec<Interaction>,
        valid: Vec<Interaction>,
        test: Vec<Interaction>,
        split_meta: Option<SplitMeta>,
    ) -> Self {
        let mut train_item_counts = vec![0u32; num_items];
        for it in &train {
            train_item_counts[it.item as usize] += 1;
        }
        Self {
            num_users,
            num_items,
            user_ids,
            item_ids,
            train: SplitView::new(train, num_users),
            valid: SplitView::new(valid, num_users),
            test: SplitView::new(test, num_users),
            train_item_counts,
            split_meta,
        }
    }

    /// Number of train interactions per item.
    pub fn train_item_counts(&self) -> &[u32] {
        &self.train_item_counts
    }

    pub fn total_interactions(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }

    /// SHA-256 of the split manifest, hex encoded. Two datasets hash equal
    /// iff they hold the same (user, item, split, rating) rows in the same order.
    pub fn content_hash(&self) -> String {
        hex_string(&self.content_digest())
    }

    /// Raw bytes behind [`InteractionDataset::content_hash`].
    pub fn content_digest(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        let mut buf = Vec::new();
        write_manifest(self, &mut buf).expect("writing to a Vec cannot fail");
        hasher.update(&buf);
        hasher.finalize().into()
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Maps raw ids to dense ids in first-appearance order and collapses
/// duplicate (user, item) rows, keeping the maximum rating.
pub fn build_dataset(raw: &[RawInteraction]) -> Result<InteractionDataset, DataError> {
    if raw.is_empty() {
        return Err(DataError::Empty);
    }
    let mut user_map: HashMap<&str, UserId> = HashMap::new();
    let mut item_map: HashMap<&str, ItemId> = HashMap::new();
    let mut user_ids = Vec::new();
    let mut item_ids = Vec::new();
    let mut pair_slot: HashMap<(UserId, ItemId), usize> = HashMap::with_capacity(raw.len());
    let mut interactions: Vec<Interaction> = Vec::with_capacity(raw.len());

    for r in raw {
        let user = *user_map.entry(r.user.as_str()).or_insert_with(|| {
            user_ids.push(r.user.clone());
            (user_ids.len() - 1) as UserId
        });
        let item = *item_map.entry(r.item.as_str()).or_insert_with(|| {
            item_ids.push(r.item.clone());
            (item_ids.len() - 1) as ItemId
        });
        match pair_slot.get(&(user, item)) {
            Some(&slot) => {
                let kept = &mut interactions[slot];
                kept.rating = match (kept.rating, r.rating) {
                    (Some(a), Some(b)) => Some(a.max(b)),
                    (a, b) => a.or(b),
                };
            }
            None => {
                pair_slot.insert((user, item), interactions.len());
                interactions.push(Interaction {
                    user,
                    item,
                    rating: r.rating,
                    timestamp: r.timestamp,
                });
            }
        }
    }

    Ok(InteractionDataset::from_splits(
        user_ids.len(),
        item_ids.len(),
        user_ids,
        item_ids,
        interactions,
        Vec::new(),
        Vec::new(),
        None,
    ))
}

/// Outcome of one balanced draw.
struct BalancedDraw {
    selected: Vec<usize>,
    quota: usize,
    warning: Option<String>,
}

/// Draws `target` interactions so that every item contributes `target / num_items`
/// where it can; shortfall goes round-robin to items that still have surplus.
fn draw_balanced<R: Rng>(
    by_item: &[Vec<usize>],
    consumed: &mut [usize],
    target: usize,
    label: &str,
    rng: &mut R,
) -> BalancedDraw {
    let num_items = by_item.len();
    let quota = target / num_items.max(1);
    let remaining: Vec<usize> = by_item
        .iter()
        .zip(consumed.iter())
        .map(|(all, &c)| all.len() - c)
        .collect();
    let mut counts: Vec<usize> = remaining.iter().map(|&r| r.min(quota)).collect();
    let mut taken: usize = counts.iter().sum();

    let mut order: Vec<usize> = (0..num_items).collect();
    order.shuffle(rng);
    let mut active: Vec<usize> = order
        .into_iter()
        .filter(|&i| remaining[i] > counts[i])
        .collect();
    while taken < target && !active.is_empty() {
        for &i in &active {
            if taken == target {
                break;
            }
            counts[i] += 1;
            taken += 1;
        }
        active.retain(|&i| remaining[i] > counts[i]);
    }

    let warning = (taken < target).then(|| {
        format!("{label} split reached {taken} of {target} target interactions; no surplus left")
    });

    let mut selected = Vec::with_capacity(taken);
    for (i, all) in by_item.iter().enumerate() {
        let start = consumed[i];
        selected.extend_from_slice(&all[start..start + counts[i]]);
        consumed[i] += counts[i];
    }
    BalancedDraw {
        selected,
        quota,
        warning,
    }
}

/// Re-partitions every interaction of `ds` into popularity-balanced test and
/// validation sets; the rest becomes train. Deterministic in `seed`.
pub fn intervened_split(
    ds: &InteractionDataset,
    test_frac: f64,
    valid_frac: f64,
    seed: u64,
) -> Result<InteractionDataset, DataError> {
    let valid_fracs = test_frac.is_finite()
        && valid_frac.is_finite()
        && test_frac > 0.0
        && valid_frac > 0.0
        && test_frac + valid_frac < 1.0;
    if !valid_fracs {
        return Err(DataError::InvalidFractions {
            test: test_frac,
            valid: valid_frac,
        });
    }

    let pooled: Vec<Interaction> = ds
        .train
        .interactions()
        .iter()
        .chain(ds.valid.interactions())
        .chain(ds.test.interactions())
        .copied()
        .collect();
    if pooled.is_empty() {
        return Err(DataError::Empty);
    }
    let total = pooled.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut by_item: Vec<Vec<usize>> = vec![Vec::new(); ds.num_items];
    for (idx, it) in pooled.iter().enumerate() {
        by_item[it.item as usize].push(idx);
    }
    for list in &mut by_item {
        list.shuffle(&mut rng);
    }
    let mut consumed = vec![0usize; ds.num_items];

    let test_target = (test_frac * total as f64).round() as usize;
    let valid_target = (valid_frac * total as f64).round() as usize;
    let test = draw_balanced(&by_item, &mut consumed, test_target, "test", &mut rng);
    let valid = draw_balanced(&by_item, &mut consumed, valid_target, "validation", &mut rng);

    // 0 = train, 1 = validation, 2 = test
    let mut assignment = vec![0u8; total];
    for &i in &test.selected {
        assignment[i] = 2;
    }
    for &i in &valid.selected {
        assignment[i] = 1;
    }
    let (mut train, mut valid_rows, mut test_rows) = (Vec::new(), Vec::new(), Vec::new());
    for (it, &a) in pooled.iter().zip(&assignment) {
        match a {
            0 => train.push(*it),
            1 => valid_rows.push(*it),
            _ => test_rows.push(*it),
        }
    }

    let meta = SplitMeta {
        seed,
        test_frac,
        valid_frac,
        total,
        test_target,
        test_quota: test.quota,
        test_size: test_rows.len(),
        valid_target,
        valid_quota: valid.quota,
        valid_size: valid_rows.len(),
        train_size: train.len(),
        warnings: test.warning.into_iter().chain(valid.warning).collect(),
    };
    Ok(InteractionDataset::from_splits(
        ds.num_users,
        ds.num_items,
        ds.user_ids.clone(),
        ds.item_ids.clone(),
        train,
        valid_rows,
        test_rows,
        Some(meta),
    ))
}

/// A BPR training sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrainingTriple {
    pub user: UserId,
    pub pos_item: ItemId,
    pub neg_item: ItemId,
}

/// Draws one negative per positive, uniformly over the items the user has
/// not interacted with in train.
pub fn sample_negatives<R: Rng>(
    ds: &InteractionDataset,
    positives: &[(UserId, ItemId)],
    rng: &mut R,
) -> Result<Vec<TrainingTriple>, DataError> {
    let n = ds.num_items as ItemId;
    let mut complements: HashMap<UserId, Vec<ItemId>> = HashMap::new();
    let mut out = Vec::with_capacity(positives.len());
    for &(user, pos_item) in positives {
        if user as usize >= ds.num_users {
            return Err(DataError::UserOutOfRange {
                user,
                num_users: ds.num_users,
            });
        }
        let seen = ds.train.items(user);
        if seen.len() >= ds.num_items {
            return Err(DataError::NoNegative { user });
        }
        // Rejection sampling degrades once a user has seen most of the
        // catalogue; switch to drawing from the explicit complement.
        let neg_item = if seen.len() * 2 > ds.num_items {
            let pool = complements.entry(user).or_insert_with(|| {
                (0..n).filter(|i| seen.binary_search(i).is_err()).collect()
            });
            pool[rng.random_range(0..pool.len())]
        } else {
            loop {
                let cand = rng.random_range(0..n);
                if seen.binary_search(&cand).is_err() {
                    break cand;
                }
            }
        };
        out.push(TrainingTriple {
            user,
            pos_item,
            neg_item,
        });
    }
    Ok(out)
}

const MANIFEST_MAGIC: &str = "#ppac-manifest v1";

/// Writes one `user<TAB>item<TAB>split[<TAB>rating]` row per interaction,
/// train rows first, then validation, then test.
pub fn write_manifest<W: Write>(ds: &InteractionDataset, mut w: W) -> std::io::Result<()> {
    writeln!(
        w,
        "{MANIFEST_MAGIC} users={} items={}",
        ds.num_users, ds.num_items
    )?;
    for (split, view) in [("train", &ds.train), ("valid", &ds.valid), ("test", &ds.test)] {
        for it in view.interactions() {
            match it.rating {
                Some(r) => writeln!(w, "{}\t{}\t{split}\t{r}", it.user, it.item)?,
                None => writeln!(w, "{}\t{}\t{split}", it.user, it.item)?,
            }
        }
    }
    Ok(())
}

/// Reads a manifest written by [`write_manifest`]. Raw ids are not part of
/// the manifest; the caller supplies them (or gets stringified dense ids).
pub fn read_manifest<R: BufRead>(
    reader: R,
    user_ids: Option<Vec<String>>,
    item_ids: Option<Vec<String>>,
    split_meta: Option<SplitMeta>,
) -> Result<InteractionDataset, DataError> {
    let mut lines = reader.lines().enumerate();
    let header = match lines.next() {
        Some((_, line)) => line.map_err(|source| DataError::Io {
            path: String::new(),
            source,
        })?,
        None => return Err(DataError::Empty),
    };
    let bad_header = || DataError::Parse {
        line: 1,
        reason: "missing or malformed manifest header".into(),
    };
    let rest = header.strip_prefix(MANIFEST_MAGIC).ok_or_else(bad_header)?;
    let mut num_users = None;
    let mut num_items = None;
    for tok in rest.split_whitespace() {
        if let Some(v) = tok.strip_prefix("users=") {
            num_users = v.parse::<usize>().ok();
        } else if let Some(v) = tok.strip_prefix("items=") {
            num_items = v.parse::<usize>().ok();
        }
    }
    let (num_users, num_items) = num_users.zip(num_items).ok_or_else(bad_header)?;

    let (mut train, mut valid, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line.map_err(|source| DataError::Io {
            path: String::new(),
            source,
        })?;
        if line.is_empty() {
            continue;
        }
        let parse_err = |reason: String| DataError::Parse {
            line: lineno,
            reason,
        };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() < 3 {
            return Err(parse_err(format!("expected at least 3 fields, found {}", f.len())));
        }
        let user: UserId = f[0].parse().map_err(|_| parse_err("bad user id".into()))?;
        let item: ItemId = f[1].parse().map_err(|_| parse_err("bad item id".into()))?;
        if user as usize >= num_users || item as usize >= num_items {
            return Err(parse_err("id outside the header's range".into()));
        }
        let rating = match f.get(3) {
            Some(s) => Some(s.parse::<f32>().map_err(|_| parse_err("bad rating".into()))?),
            None => None,
        };
        let it = Interaction {
            user,
            item,
            rating,
            timestamp: None,
        };
        match f[2] {
            "train" => train.push(it),
            "valid" => valid.push(it),
            "test" => test.push(it),
            other => return Err(parse_err(format!("unknown split {other:?}"))),
        }
    }
    let user_ids = user_ids.unwrap_or_else(|| (0..num_users).map(|u| u.to_string()).collect());
    let item_ids = item_ids.unwrap_or_else(|| (0..num_items).map(|i| i.to_string()).collect());
    Ok(InteractionDataset::from_splits(
        num_users, num_items, user_ids, item_ids, train, valid, test, split_meta,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn raw(pairs: &[(&str, &str)]) -> Vec<RawInteraction> {
        pairs.iter().map(|(u, i)| RawInteraction::new(*u, *i)).collect()
    }

    #[test]
    fn parses_three_line_tsv() {
        let text = "u1\ti1\nu1\ti2\nu2\ti1\n";
        let rows = parse_interactions(text.as_bytes(), Format::Tsv).unwrap();
        assert_eq!(rows.len(), 3);
        let users: HashSet<_> = rows.iter().map(|r| r.user.as_str()).collect();
        let items: HashSet<_> = rows.iter().map(|r| r.item.as_str()).collect();
        assert_eq!((users.len(), items.len()), (2, 2));
        assert_eq!(rows[1].item, "i2");
    }

    #[test]
    fn malformed_row_reports_line() {
        let err = parse_interactions("u1\t\n".as_bytes(), Format::Tsv).unwrap_err();
        assert!(matches!(err, DataError::Parse { line: 1, .. }), "{err}");
        let err = parse_interactions("a\tb\nc\n".as_bytes(), Format::Tsv).unwrap_err();
        assert!(matches!(err, DataError::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(
            parse_interactions("".as_bytes(), Format::Csv),
            Err(DataError::Empty)
        ));
        assert!(matches!(build_dataset(&[]), Err(DataError::Empty)));
    }

    #[test]
    fn movielens_dat_fields() {
        let rows =
            parse_interactions("1::1193::5::978300760\n".as_bytes(), Format::MovielensDat).unwrap();
        assert_eq!(rows[0].user, "1");
        assert_eq!(rows[0].item, "1193");
        assert_eq!(rows[0].rating, Some(5.0));
        assert_eq!(rows[0].timestamp, Some(978300760));
    }

    #[test]
    fn build_dedups_and_counts() {
        let mut rows = raw(&[("u1", "i1"), ("u1", "i1"), ("u2", "i2")]);
        rows[0].rating = Some(2.0);
        rows[1].rating = Some(4.0);
        let ds = build_dataset(&rows).unwrap();
        assert_eq!((ds.num_users, ds.num_items), (2, 2));
        assert_eq!(ds.train.len(), 2);
        assert_eq!(ds.train.interactions()[0].rating, Some(4.0));

        let ds = build_dataset(&raw(&[("a", "x"), ("b", "x"), ("c", "y")])).unwrap();
        assert_eq!(ds.train_item_counts(), &[2, 1]);
        assert_eq!(ds.item_ids, vec!["x", "y"]);
    }

    #[test]
    fn intervened_split_toy_quota() {
        // i1 has 8 interactions, i2 has 2; target 2 => quota 1 each.
        let mut rows = Vec::new();
        for u in 0..8 {
            rows.push(RawInteraction::new(format!("u{u}"), "i1"));
        }
        for u in 0..2 {
            rows.push(RawInteraction::new(format!("u{u}"), "i2"));
        }
        let ds = build_dataset(&rows).unwrap();
        let split = intervened_split(&ds, 0.2, 0.2, 7).unwrap();
        let mut per_item = [0usize; 2];
        for it in split.test.interactions() {
            per_item[it.item as usize] += 1;
        }
        assert_eq!(per_item, [1, 1]);
        let meta = split.split_meta.as_ref().unwrap();
        assert_eq!((meta.test_target, meta.test_quota), (2, 1));
        assert_eq!(split.total_interactions(), 10);
    }

    #[test]
    fn split_rejects_bad_fractions() {
        let ds = build_dataset(&raw(&[("a", "x"), ("b", "y")])).unwrap();
        for (t, v) in [(0.0, 0.1), (0.1, 0.0), (0.5, 0.5), (f64::NAN, 0.1)] {
            assert!(matches!(
                intervened_split(&ds, t, v, 1),
                Err(DataError::InvalidFractions { .. })
            ));
        }
    }

    #[test]
    fn unreachable_target_warns() {
        // Items hold 1 and 3 interactions; asking for 6 exhausts both.
        let by_item = vec![vec![0], vec![1, 2, 3]];
        let mut consumed = vec![0, 0];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draw = draw_balanced(&by_item, &mut consumed, 6, "test", &mut rng);
        assert_eq!(draw.selected.len(), 4);
        assert_eq!(draw.quota, 3);
        assert!(draw.warning.unwrap().contains("4 of 6"));
        assert_eq!(consumed, vec![1, 3]);
    }

    #[test]
    fn shortfall_goes_round_robin() {
        // quota = 7 / 3 = 2; item 0 can only give 1, the shortfall of 2 is
        // spread one each over items 1 and 2.
        let by_item = vec![vec![0], (1..10).collect(), (10..20).collect()];
        let mut consumed = vec![0; 3];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let draw = draw_balanced(&by_item, &mut consumed, 7, "test", &mut rng);
        assert!(draw.warning.is_none());
        assert_eq!(consumed, vec![1, 3, 3]);
    }

    #[test]
    fn forced_negative() {
        let rows = raw(&[("u", "a"), ("u", "b"), ("u", "c"), ("v", "d")]);
        let ds = build_dataset(&rows).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let triples = sample_negatives(&ds, &[(0, 0); 50], &mut rng).unwrap();
        assert!(triples.iter().all(|t| t.neg_item == 3));
    }

    #[test]
    fn full_coverage_user_has_no_negative() {
        let rows = raw(&[("u", "a"), ("u", "b")]);
        let ds = build_dataset(&rows).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = sample_negatives(&ds, &[(0, 0)], &mut rng).unwrap_err();
        assert!(matches!(err, DataError::NoNegative { user: 0 }));
        assert!(err.to_string().contains("user 0"));
    }

    #[test]
    fn manifest_round_trip() {
        let mut rows = raw(&[("a", "x"), ("b", "x"), ("c", "y"), ("a", "y"), ("d", "z")]);
        rows[2].rating = Some(3.0);
        let ds = intervened_split(&build_dataset(&rows).unwrap(), 0.2, 0.2, 9).unwrap();
        let mut buf = Vec::new();
        write_manifest(&ds, &mut buf).unwrap();
        let back = read_manifest(
            buf.as_slice(),
            Some(ds.user_ids.clone()),
            Some(ds.item_ids.clone()),
            ds.split_meta.clone(),
        )
        .unwrap();
        assert_eq!(back.content_hash(), ds.content_hash());
        assert_eq!(back.train.interactions(), ds.train.interactions());
    }
}
