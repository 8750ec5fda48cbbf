//! Ranking metrics, popularity-rank correlations and the bias analyses
//! (item groups, PP/GP overlap, rating by PP rank).
//!
//! Everything here consumes finished top-K lists; producing them is the
//! engine's job.

mod report;

pub use report::{build_report, EvalReport, MetricsRow, RunInfo};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{InteractionDataset, ItemId, SplitView, UserId};
use crate::popularity::{pp_top_items, PopularityIndex};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dataset has no ratings; rating analysis is unavailable")]
    NoRatings,
    #[error("{0}")]
    InvalidArgument(String),
}

/// `|top-K ∩ GT| / |GT|`; `None` when the ground truth is empty.
/// `ground_truth` must be sorted.
pub fn recall_at_k(recommended: &[ItemId], ground_truth: &[ItemId], k: usize) -> Option<f64> {
    if ground_truth.is_empty() {
        return None;
    }
    let hits = hits_at_k(recommended, ground_truth, k);
    Some(hits as f64 / ground_truth.len() as f64)
}

fn hits_at_k(recommended: &[ItemId], ground_truth: &[ItemId], k: usize) -> usize {
    recommended
        .iter()
        .take(k)
        .filter(|i| ground_truth.binary_search(i).is_ok())
        .count()
}

fn discount(position: usize) -> f64 {
    // position is 1-based
    1.0 / ((position + 1) as f64).log2()
}

/// Binary-relevance NDCG with a `log2(j + 1)` discount and the ideal DCG
/// truncated at `min(K, |GT|)`. `ground_truth` must be sorted.
pub fn ndcg_at_k(recommended: &[ItemId], ground_truth: &[ItemId], k: usize) -> Option<f64> {
    if ground_truth.is_empty() || k == 0 {
        return if ground_truth.is_empty() { None } else { Some(0.0) };
    }
    let dcg: f64 = recommended
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| ground_truth.binary_search(i).is_ok())
        .map(|(j, _)| discount(j + 1))
        .sum();
    let idcg: f64 = (1..=k.min(ground_truth.len())).map(discount).sum();
    Some(dcg / idcg)
}

/// 1-based ranks in ascending value order; tied values share their mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start+1 ..= end share their mean
        let mean = (start + 1 + end) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = mean;
        }
        start = end;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman's rank correlation with average ranks for ties. `None` for
/// mismatched lengths, fewer than two values, or a constant input.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Negated mean Spearman correlation between a popularity measure and list
/// position, with the number of users whose correlation was undefined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankCorrelation {
    pub value: Option<f64>,
    pub users: usize,
    pub excluded_users: usize,
}

fn rank_correlation<F>(lists: &[(UserId, Vec<ItemId>)], mut popularity: F) -> RankCorrelation
where
    F: FnMut(UserId, &[ItemId]) -> Vec<f64>,
{
    let mut total = 0.0;
    let mut users = 0;
    let mut excluded = 0;
    for (u, list) in lists {
        let pop = popularity(*u, list);
        let positions: Vec<f64> = (1..=list.len()).map(|r| r as f64).collect();
        match spearman(&pop, &positions) {
            Some(s) => {
                total -= s;
                users += 1;
            }
            None => excluded += 1,
        }
    }
    RankCorrelation {
        value: (users > 0).then(|| total / users as f64),
        users,
        excluded_users: excluded,
    }
}

/// PRU@K (global popularity) and PPRU@K (personal popularity) over each
/// user's recommended list, rank 1 being the top item.
pub fn pru_ppru(
    lists: &[(UserId, Vec<ItemId>)],
    pop: &PopularityIndex,
    ds: &InteractionDataset,
) -> (RankCorrelation, RankCorrelation) {
    let pru = rank_correlation(lists, |_, items| items.iter().map(|&i| pop.gp.get(i)).collect());
    let ppru = rank_correlation(lists, |u, items| items.iter().map(|&i| pop.pp(ds, u, i)).collect());
    (pru, ppru)
}

/// A set of items analysed together.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemGroup {
    pub label: String,
    pub items: Vec<ItemId>,
}

/// Groups by train interaction count. `upper_bounds` are inclusive and
/// increasing; a final open-ended group takes the rest.
/// Bounds `[10, 50]` give groups `0-10`, `11-50`, `51+`.
pub fn groups_by_count(ds: &InteractionDataset, upper_bounds: &[u32]) -> Result<Vec<ItemGroup>, EvalError> {
    if upper_bounds.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EvalError::InvalidArgument("group bounds must be strictly increasing".into()));
    }
    let mut groups: Vec<ItemGroup> = Vec::with_capacity(upper_bounds.len() + 1);
    let mut lo = 0u32;
    for &hi in upper_bounds {
        groups.push(ItemGroup {
            label: format!("{lo}-{hi}"),
            items: Vec::new(),
        });
        lo = hi + 1;
    }
    groups.push(ItemGroup {
        label: format!("{lo}+"),
        items: Vec::new(),
    });
    for (i, &c) in ds.train_item_counts().iter().enumerate() {
        let g = upper_bounds.iter().position(|&hi| c <= hi).unwrap_or(upper_bounds.len());
        groups[g].items.push(i as ItemId);
    }
    Ok(groups)
}

/// Head = the top `ceil(head_frac · |I|)` items by train count (ties by
/// ascending id); tail = the rest.
pub fn head_tail_groups(ds: &InteractionDataset, head_frac: f64) -> Vec<ItemGroup> {
    let counts = ds.train_item_counts();
    let mut order: Vec<ItemId> = (0..ds.num_items as ItemId).collect();
    order.sort_by(|&a, &b| counts[b as usize].cmp(&counts[a as usize]).then(a.cmp(&b)));
    let n_head = ((head_frac * ds.num_items as f64).ceil() as usize).min(ds.num_items);
    let mut head = order[..n_head].to_vec();
    let mut tail = order[n_head..].to_vec();
    head.sort_unstable();
    tail.sort_unstable();
    vec![
        ItemGroup {
            label: "head".into(),
            items: head,
        },
        ItemGroup {
            label: "tail".into(),
            items: tail,
        },
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub group: String,
    pub num_items: usize,
    pub item_share: f64,
    /// Times an item of the group appears in any user's list.
    pub rec_frequency: u64,
    pub rec_share: f64,
    /// Mean over users with ground truth in the group; `None` if no user has any.
    pub recall: Option<f64>,
    pub recall_users: usize,
}

/// Recommendation frequency and group-restricted recall per item group.
pub fn group_frequency_recall(
    lists: &[(UserId, Vec<ItemId>)],
    ground_truth: &SplitView,
    groups: &[ItemGroup],
    num_items: usize,
) -> Vec<GroupRow> {
    let mut group_of = vec![usize::MAX; num_items];
    for (g, group) in groups.iter().enumerate() {
        for &i in &group.items {
            group_of[i as usize] = g;
        }
    }
    let mut freq = vec![0u64; groups.len()];
    let mut recall_sum = vec![0.0f64; groups.len()];
    let mut recall_users = vec![0usize; groups.len()];
    let mut gt_in = vec![0usize; groups.len()];
    let mut hit_in = vec![0usize; groups.len()];
    for (u, list) in lists {
        for &i in list {
            if let Some(f) = freq.get_mut(group_of[i as usize]) {
                *f += 1;
            }
        }
        let gt = ground_truth.items(*u);
        gt_in.iter_mut().for_each(|c| *c = 0);
        hit_in.iter_mut().for_each(|c| *c = 0);
        for &i in gt {
            if let Some(c) = gt_in.get_mut(group_of[i as usize]) {
                *c += 1;
            }
        }
        for &i in list {
            if gt.binary_search(&i).is_ok() {
                if let Some(c) = hit_in.get_mut(group_of[i as usize]) {
                    *c += 1;
                }
            }
        }
        for g in 0..groups.len() {
            if gt_in[g] > 0 {
                recall_sum[g] += hit_in[g] as f64 / gt_in[g] as f64;
                recall_users[g] += 1;
            }
        }
    }
    let total_freq: u64 = freq.iter().sum();
    groups
        .iter()
        .enumerate()
        .map(|(g, group)| GroupRow {
            group: group.label.clone(),
            num_items: group.items.len(),
            item_share: group.items.len() as f64 / num_items.max(1) as f64,
            rec_frequency: freq[g],
            rec_share: if total_freq > 0 {
                freq[g] as f64 / total_freq as f64
            } else {
                0.0
            },
            recall: (recall_users[g] > 0).then(|| recall_sum[g] / recall_users[g] as f64),
            recall_users: recall_users[g],
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBucket {
    /// Inclusive range of `d_u` values.
    pub lo: usize,
    pub hi: usize,
    pub users: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub n: usize,
    pub per_user: Vec<usize>,
    pub histogram: Vec<HistogramBucket>,
    pub mean: f64,
}

/// `d_u = |top-n PP items of u \ top-n GP items|` for every user, bucketed
/// into ranges of `bucket_width` values.
pub fn pp_gp_overlap(
    pop: &PopularityIndex,
    ds: &InteractionDataset,
    n: usize,
    bucket_width: usize,
) -> Result<OverlapReport, EvalError> {
    if bucket_width == 0 {
        return Err(EvalError::InvalidArgument("bucket width must be positive".into()));
    }
    let mut gp_top = pop.gp.ranked_items();
    gp_top.truncate(n);
    gp_top.sort_unstable();
    let per_user: Vec<usize> = (0..ds.num_users as UserId)
        .map(|u| {
            pp_top_items(&pop.similar, ds, u, n)
                .iter()
                .filter(|i| gp_top.binary_search(i).is_err())
                .count()
        })
        .collect();
    Ok(overlap_from_counts(n, per_user, bucket_width))
}

fn overlap_from_counts(n: usize, per_user: Vec<usize>, bucket_width: usize) -> OverlapReport {
    let num_buckets = n / bucket_width + 1;
    let mut histogram: Vec<HistogramBucket> = (0..num_buckets)
        .map(|b| HistogramBucket {
            lo: b * bucket_width,
            hi: ((b + 1) * bucket_width - 1).min(n),
            users: 0,
        })
        .collect();
    for &d in &per_user {
        histogram[d.min(n) / bucket_width].users += 1;
    }
    let mean = if per_user.is_empty() {
        0.0
    } else {
        per_user.iter().sum::<usize>() as f64 / per_user.len() as f64
    };
    OverlapReport {
        n,
        per_user,
        histogram,
        mean,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingGroup {
    /// 0 holds the items with the highest mean PP.
    pub group: usize,
    pub num_items: usize,
    pub mean_pp: f64,
    pub mean_rating: Option<f64>,
    pub ratings: usize,
}

/// Mean rating per group of items ranked by their PP averaged over all
/// users. Ratings from every split count.
pub fn rating_vs_pp_rank(
    pop: &PopularityIndex,
    ds: &InteractionDataset,
    num_groups: usize,
) -> Result<Vec<RatingGroup>, EvalError> {
    if num_groups == 0 || num_groups > ds.num_items {
        return Err(EvalError::InvalidArgument(format!(
            "cannot split {} items into {num_groups} groups",
            ds.num_items
        )));
    }
    let mut rating_sum = vec![0.0f64; ds.num_items];
    let mut rating_count = vec![0usize; ds.num_items];
    for view in [&ds.train, &ds.valid, &ds.test] {
        for it in view.interactions() {
            if let Some(r) = it.rating {
                rating_sum[it.item as usize] += r as f64;
                rating_count[it.item as usize] += 1;
            }
        }
    }
    if rating_count.iter().all(|&c| c == 0) {
        return Err(EvalError::NoRatings);
    }
    let mut mean_pp = vec![0.0f64; ds.num_items];
    for u in 0..ds.num_users as UserId {
        for (m, p) in mean_pp.iter_mut().zip(pop.pp_row(ds, u)) {
            *m += p;
        }
    }
    mean_pp.iter_mut().for_each(|m| *m /= ds.num_users.max(1) as f64);
    let mut order: Vec<usize> = (0..ds.num_items).collect();
    order.sort_by(|&a, &b| mean_pp[b].total_cmp(&mean_pp[a]).then(a.cmp(&b)));
    Ok(equal_chunks(&order, num_groups)
        .into_iter()
        .enumerate()
        .map(|(g, items)| {
            let sum: f64 = items.iter().map(|&i| rating_sum[i]).sum();
            let count: usize = items.iter().map(|&i| rating_count[i]).sum();
            RatingGroup {
                group: g,
                num_items: items.len(),
                mean_pp: items.iter().map(|&i| mean_pp[i]).sum::<f64>() / items.len() as f64,
                mean_rating: (count > 0).then(|| sum / count as f64),
                ratings: count,
            }
        })
        .collect())
}

/// Splits into `n` contiguous chunks whose sizes differ by at most one,
/// larger chunks first.
fn equal_chunks<T>(xs: &[T], n: usize) -> Vec<&[T]> {
    let base = xs.len() / n;
    let extra = xs.len() % n;
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    for g in 0..n {
        let len = base + usize::from(g < extra);
        out.push(&xs[start..start + len]);
        start += len;
    }
    out
}
