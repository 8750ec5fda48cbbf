//! Brute-force references for the similar-user index and ranking metrics.

use std::collections::HashSet;

use ppac::data::{Interaction, InteractionDataset};
use ppac::evaluate::{ndcg_at_k, recall_at_k, spearman};
use ppac::popularity::build_similar_user_index;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// All-train dataset from (user, item) pairs; duplicates must already be removed.
pub fn dataset_from_pairs(num_users: usize, num_items: usize, pairs: &[(u32, u32)]) -> InteractionDataset {
    let train = pairs
        .iter()
        .map(|&(user, item)| Interaction {
            user,
            item,
            rating: None,
            timestamp: None,
        })
        .collect();
    InteractionDataset::from_splits(
        num_users,
        num_items,
        (0..num_users).map(|u| format!("u{u}")).collect(),
        (0..num_items).map(|i| format!("i{i}")).collect(),
        train,
        Vec::new(),
        Vec::new(),
        None,
    )
}

/// Random sparse dataset with at most `max_users` users and `max_items` items.
/// A few users are left empty and a few are exact copies of each other so
/// ties and zero-overlap cases show up.
pub fn random_dataset(seed: u64, max_users: usize, max_items: usize) -> InteractionDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let num_users = rng.random_range(2..=max_users);
    let num_items = rng.random_range(2..=max_items);
    let density = rng.random_range(0.005..0.15);
    let mut rows: Vec<Vec<u32>> = Vec::with_capacity(num_users);
    for u in 0..num_users {
        let row = if u > 0 && rng.random_bool(0.1) {
            rows[rng.random_range(0..u)].clone()
        } else if u > 0 && rng.random_bool(0.05) {
            Vec::new()
        } else {
            let n = ((num_items as f64 * density).round() as usize).clamp(1, num_items);
            let n = rng.random_range(1..=n);
            let mut items: Vec<u32> = sample(&mut rng, num_items, n).into_iter().map(|i| i as u32).collect();
            items.sort_unstable();
            items
        };
        rows.push(row);
    }
    let pairs: Vec<(u32, u32)> = rows
        .iter()
        .enumerate()
        .flat_map(|(u, items)| items.iter().map(move |&i| (u as u32, i)))
        .collect();
    dataset_from_pairs(num_users, num_items, &pairs)
}

/// Top-k neighbours of every user by scanning every other user.
pub fn brute_force_neighbors(ds: &InteractionDataset, k: usize) -> Vec<Vec<(u32, f64)>> {
    let sets: Vec<HashSet<u32>> = (0..ds.num_users as u32)
        .map(|u| ds.train.items(u).iter().copied().collect())
        .collect();
    (0..ds.num_users)
        .map(|u| {
            let mut scored: Vec<(u32, f64)> = (0..ds.num_users)
                .filter(|&v| v != u)
                .filter_map(|v| {
                    let inter = sets[u].intersection(&sets[v]).count();
                    let union = sets[u].union(&sets[v]).count();
                    (inter > 0).then(|| (v as u32, inter as f64 / union as f64))
                })
                .collect();
            scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            scored.truncate(k);
            scored
        })
        .collect()
}

/// Users whose indexed neighbour list differs from the brute-force one.
pub fn neighbor_mismatches(ds: &InteractionDataset, k: usize) -> usize {
    let index = build_similar_user_index(ds, k).expect("index builds");
    let reference = brute_force_neighbors(ds, k);
    (0..ds.num_users)
        .filter(|&u| {
            let got = index.neighbors(u as u32);
            let want = &reference[u];
            got.len() != want.len()
                || got
                    .iter()
                    .zip(want)
                    .any(|(g, w)| g.user != w.0 || (g.similarity as f64 - w.1).abs() > 1e-6)
        })
        .count()
}

pub fn recall_reference(list: &[u32], gt: &[u32], k: usize) -> Option<f64> {
    if gt.is_empty() {
        return None;
    }
    let top = &list[..k.min(list.len())];
    let hits = gt.iter().filter(|g| top.contains(g)).count();
    Some(hits as f64 / gt.len() as f64)
}

pub fn ndcg_reference(list: &[u32], gt: &[u32], k: usize) -> Option<f64> {
    if gt.is_empty() {
        return None;
    }
    let gain = |pos: usize| std::f64::consts::LN_2 / ((pos + 2) as f64).ln();
    let dcg: f64 = list
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| gt.contains(i))
        .map(|(pos, _)| gain(pos))
        .sum();
    let ideal: f64 = (0..gt.len().min(k)).map(gain).sum();
    Some(if ideal == 0.0 { 0.0 } else { dcg / ideal })
}

/// Rank of `x[i]` is one plus the number of smaller values plus half the
/// number of other equal values.
fn counting_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&a| {
            let less = x.iter().filter(|&&b| b < a).count() as f64;
            let equal = x.iter().filter(|&&b| b == a).count() as f64;
            1.0 + less + (equal - 1.0) / 2.0
        })
        .collect()
}

pub fn spearman_reference(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (counting_ranks(x), counting_ranks(y));
    let n = x.len() as f64;
    let sx: f64 = rx.iter().sum();
    let sy: f64 = ry.iter().sum();
    let sxx: f64 = rx.iter().map(|a| a * a).sum();
    let syy: f64 = ry.iter().map(|a| a * a).sum();
    let sxy: f64 = rx.iter().zip(&ry).map(|(a, b)| a * b).sum();
    let vx = n * sxx - sx * sx;
    let vy = n * syy - sy * sy;
    if vx <= 1e-9 || vy <= 1e-9 {
        return None;
    }
    Some((n * sxy - sx * sy) / (vx * vy).sqrt())
}

/// One random ranking instance: a list of distinct items, a sorted ground
/// truth, a cutoff, and two tie-heavy score vectors.
pub struct MetricInstance {
    pub list: Vec<u32>,
    pub gt: Vec<u32>,
    pub k: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

pub fn metric_instance(seed: u64) -> MetricInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let universe = rng.random_range(1..60usize);
    let len = rng.random_range(0..=universe.min(25));
    let list: Vec<u32> = sample(&mut rng, universe, len).into_iter().map(|i| i as u32).collect();
    let gt_len = rng.random_range(0..=universe.min(15));
    let mut gt: Vec<u32> = sample(&mut rng, universe, gt_len).into_iter().map(|i| i as u32).collect();
    gt.sort_unstable();
    let k = rng.random_range(1..=30);
    let n = rng.random_range(0..20);
    let levels = rng.random_range(1..6);
    let x = (0..n).map(|_| rng.random_range(0..levels) as f64 * 0.25).collect();
    let y = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    MetricInstance { list, gt, k, x, y }
}

/// Largest disagreement between the library metrics and the references;
/// an undefined result on only one side counts as infinite.
pub fn metric_error(m: &MetricInstance) -> f64 {
    let diff = |a: Option<f64>, b: Option<f64>| match (a, b) {
        (Some(a), Some(b)) => (a - b).abs(),
        (None, None) => 0.0,
        _ => f64::INFINITY,
    };
    [
        diff(recall_at_k(&m.list, &m.gt, m.k), recall_reference(&m.list, &m.gt, m.k)),
        diff(ndcg_at_k(&m.list, &m.gt, m.k), ndcg_reference(&m.list, &m.gt, m.k)),
        diff(spearman(&m.x, &m.y), spearman_reference(&m.x, &m.y)),
        diff(spearman(&m.x, &m.x), spearman_reference(&m.x, &m.x)),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}
