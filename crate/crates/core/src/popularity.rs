//! Global popularity, Jaccard similar-user sets and personal popularity.
//!
//! Everything here reads the train split only. Personal popularity of item
//! `i` for user `u` is the fraction of `u`'s similar users whose train set
//! contains `i`; it is computed on demand from the neighbour lists.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{InteractionDataset, ItemId, UserId};

#[derive(Debug, Error)]
pub enum PopularityError {
    #[error("train split is empty")]
    EmptyTrain,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("similar-user cache: {0}")]
    Cache(String),
    #[error("similar-user cache io: {0}")]
    Io(#[from] std::io::Error),
}

/// Per-item `g_i = |U_i| / |U|` over the train split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalPopularity {
    values: Vec<f64>,
}

impl GlobalPopularity {
    pub fn get(&self, item: ItemId) -> f64 {
        self.values[item as usize]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Items by descending GP, ties by ascending id.
    pub fn ranked_items(&self) -> Vec<ItemId> {
        let mut items: Vec<ItemId> = (0..self.values.len() as ItemId).collect();
        items.sort_by(|&a, &b| {
            self.values[b as usize]
                .total_cmp(&self.values[a as usize])
                .then(a.cmp(&b))
        });
        items
    }
}

pub fn compute_gp(ds: &InteractionDataset) -> Result<GlobalPopularity, PopularityError> {
    if ds.train.is_empty() {
        return Err(PopularityError::EmptyTrain);
    }
    let mut users_per_item = vec![0usize; ds.num_items];
    for u in 0..ds.num_users as UserId {
        for &i in ds.train.items(u) {
            users_per_item[i as usize] += 1;
        }
    }
    let n = ds.num_users as f64;
    Ok(GlobalPopularity {
        values: users_per_item.into_iter().map(|c| c as f64 / n).collect(),
    })
}

/// Jaccard similarity of two sorted, deduplicated item lists. Two empty sets
/// have similarity 0.
pub fn jaccard(a: &[ItemId], b: &[ItemId]) -> f64 {
    let inter = intersection_size(a, b);
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn intersection_size(a: &[ItemId], b: &[ItemId]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub user: UserId,
    pub similarity: f32,
}

/// Top-k most similar other users per user, by descending similarity then
/// ascending user id. Zero-similarity users are never stored.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarUserIndex {
    k: usize,
    neighbors: Vec<Vec<Neighbor>>,
    warnings: Vec<String>,
}

impl SimilarUserIndex {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn neighbors(&self, user: UserId) -> &[Neighbor] {
        self.neighbors
            .get(user as usize)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn num_users(&self) -> usize {
        self.neighbors.len()
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }
}

fn effective_k(num_users: usize, k: usize, warnings: &mut Vec<String>) -> Result<usize, PopularityError> {
    if k == 0 {
        return Err(PopularityError::ZeroK);
    }
    let cap = num_users.saturating_sub(1);
    if k > cap {
        warnings.push(format!("k={k} exceeds num_users-1={cap}; lists capped at {cap}"));
        Ok(cap)
    } else {
        Ok(k)
    }
}

fn select_top(mut cands: Vec<(f64, UserId)>, k: usize) -> Vec<Neighbor> {
    let order = |a: &(f64, UserId), b: &(f64, UserId)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    if cands.len() > k {
        cands.select_nth_unstable_by(k, order);
        cands.truncate(k);
    }
    cands.sort_by(order);
    cands
        .into_iter()
        .map(|(s, user)| Neighbor {
            user,
            similarity: s as f32,
        })
        .collect()
}

/// Builds the index through an inverted item → users map, so only users
/// sharing at least one train item with `u` are ever scored.
pub fn build_similar_user_index(
    ds: &InteractionDataset,
    k: usize,
) -> Result<SimilarUserIndex, PopularityError> {
    let mut warnings = Vec::new();
    let k = effective_k(ds.num_users, k, &mut warnings)?;
    let mut inverted: Vec<Vec<UserId>> = vec![Vec::new(); ds.num_items];
    for u in 0..ds.num_users as UserId {
        for &i in ds.train.items(u) {
            inverted[i as usize].push(u);
        }
    }

    let neighbors: Vec<Vec<Neighbor>> = (0..ds.num_users as UserId)
        .into_par_iter()
        .map_init(
            || (vec![0u32; ds.num_users], Vec::<UserId>::new()),
            |(overlap, touched), u| {
                let mine = ds.train.items(u);
                if mine.is_empty() || k == 0 {
                    return Vec::new();
                }
                for &i in mine {
                    for &v in &inverted[i as usize] {
                        if v != u {
                            if overlap[v as usize] == 0 {
                                touched.push(v);
                            }
                            overlap[v as usize] += 1;
                        }
                    }
                }
                let cands: Vec<(f64, UserId)> = touched
                    .iter()
                    .map(|&v| {
                        let inter = overlap[v as usize] as usize;
                        let union = mine.len() + ds.train.items(v).len() - inter;
                        (inter as f64 / union as f64, v)
                    })
                    .collect();
                for &v in touched.iter() {
                    overlap[v as usize] = 0;
                }
                touched.clear();
                select_top(cands, k)
            },
        )
        .collect();

    Ok(SimilarUserIndex {
        k,
        neighbors,
        warnings,
    })
}

/// O(|U|²) reference: scores every pair with [`jaccard`]. Used as the oracle
/// for [`build_similar_user_index`].
pub fn build_similar_user_index_brute_force(
    ds: &InteractionDataset,
    k: usize,
) -> Result<SimilarUserIndex, PopularityError> {
    let mut warnings = Vec::new();
    let k = effective_k(ds.num_users, k, &mut warnings)?;
    let neighbors = (0..ds.num_users as UserId)
        .map(|u| {
            let cands: Vec<(f64, UserId)> = (0..ds.num_users as UserId)
                .filter(|&v| v != u)
                .map(|v| (jaccard(ds.train.items(u), ds.train.items(v)), v))
                .filter(|&(s, _)| s > 0.0)
                .collect();
            select_top(cands, k)
        })
        .collect();
    Ok(SimilarUserIndex {
        k,
        neighbors,
        warnings,
    })
}

/// `p_{u,i} = |S_u^i| / |S_u|`; zero when `u` has no stored neighbours.
pub fn personal_popularity(
    index: &SimilarUserIndex,
    ds: &InteractionDataset,
    user: UserId,
    item: ItemId,
) -> f64 {
    let nbrs = index.neighbors(user);
    if nbrs.is_empty() {
        return 0.0;
    }
    let hits = nbrs
        .iter()
        .filter(|n| ds.train.contains(n.user, item))
        .count();
    hits as f64 / nbrs.len() as f64
}

/// Dense personal popularity of every item for `user`.
pub fn personal_popularity_row(
    index: &SimilarUserIndex,
    ds: &InteractionDataset,
    user: UserId,
) -> Vec<f64> {
    let mut row = vec![0.0; ds.num_items];
    let nbrs = index.neighbors(user);
    if nbrs.is_empty() {
        return row;
    }
    let mut counts = vec![0u32; ds.num_items];
    for n in nbrs {
        for &i in ds.train.items(n.user) {
            counts[i as usize] += 1;
        }
    }
    let denom = nbrs.len() as f64;
    for (p, c) in row.iter_mut().zip(counts) {
        *p = c as f64 / denom;
    }
    row
}

/// Items outside the user's train set by descending PP, ties by ascending id.
pub fn pp_top_items(
    index: &SimilarUserIndex,
    ds: &InteractionDataset,
    user: UserId,
    n: usize,
) -> Vec<ItemId> {
    if n == 0 {
        return Vec::new();
    }
    let row = personal_popularity_row(index, ds, user);
    let seen = ds.train.items(user);
    let mut items: Vec<ItemId> = (0..ds.num_items as ItemId)
        .filter(|i| seen.binary_search(i).is_err())
        .collect();
    items.sort_by(|&a, &b| row[b as usize].total_cmp(&row[a as usize]).then(a.cmp(&b)));
    items.truncate(n);
    items
}

/// GP and similar-user index over one dataset's train split.
#[derive(Clone, Debug)]
pub struct PopularityIndex {
    pub gp: GlobalPopularity,
    pub similar: SimilarUserIndex,
}

impl PopularityIndex {
    pub fn build(ds: &InteractionDataset, k: usize) -> Result<Self, PopularityError> {
        Ok(Self {
            gp: compute_gp(ds)?,
            similar: build_similar_user_index(ds, k)?,
        })
    }

    pub fn pp(&self, ds: &InteractionDataset, user: UserId, item: ItemId) -> f64 {
        personal_popularity(&self.similar, ds, user, item)
    }

    pub fn pp_row(&self, ds: &InteractionDataset, user: UserId) -> Vec<f64> {
        personal_popularity_row(&self.similar, ds, user)
    }
}

const CACHE_MAGIC: &[u8; 8] = b"PPACSIMU";
const CACHE_VERSION: u32 = 1;

/// Writes the index as: magic, version, num_users, k, 32-byte dataset hash,
/// then per user a u32 length followed by (u32 user, f32 similarity) pairs.
/// All integers and floats little-endian.
pub fn write_index_cache<W: Write>(
    index: &SimilarUserIndex,
    dataset_hash: &[u8; 32],
    mut w: W,
) -> Result<(), PopularityError> {
    w.write_all(CACHE_MAGIC)?;
    w.write_all(&CACHE_VERSION.to_le_bytes())?;
    w.write_all(&(index.neighbors.len() as u32).to_le_bytes())?;
    w.write_all(&(index.k as u32).to_le_bytes())?;
    w.write_all(dataset_hash)?;
    for list in &index.neighbors {
        w.write_all(&(list.len() as u32).to_le_bytes())?;
        for n in list {
            w.write_all(&n.user.to_le_bytes())?;
            w.write_all(&n.similarity.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, PopularityError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads a cache written by [`write_index_cache`]. Returns `Ok(None)` when the
/// stored dataset hash differs from `expected_hash` (stale cache).
pub fn read_index_cache<R: Read>(
    mut r: R,
    expected_hash: &[u8; 32],
) -> Result<Option<SimilarUserIndex>, PopularityError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CACHE_MAGIC {
        return Err(PopularityError::Cache("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CACHE_VERSION {
        return Err(PopularityError::Cache(format!("unsupported version {version}")));
    }
    let num_users = read_u32(&mut r)? as usize;
    let k = read_u32(&mut r)? as usize;
    let mut hash = [0u8; 32];
    r.read_exact(&mut hash)?;
    if &hash != expected_hash {
        return Ok(None);
    }
    let mut neighbors = Vec::with_capacity(num_users);
    for _ in 0..num_users {
        let len = read_u32(&mut r)? as usize;
        if len > k {
            return Err(PopularityError::Cache(format!("list of {len} exceeds k={k}")));
        }
        let mut list = Vec::with_capacity(len);
        for _ in 0..len {
            let user = read_u32(&mut r)?;
            let similarity = f32::from_bits(read_u32(&mut r)?);
            list.push(Neighbor { user, similarity });
        }
        neighbors.push(list);
    }
    Ok(Some(SimilarUserIndex {
        k,
        neighbors,
        warnings: Vec::new(),
    }))
}
