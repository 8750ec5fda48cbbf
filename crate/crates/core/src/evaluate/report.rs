use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{InteractionDataset, ItemId, SplitView, UserId};
use crate::popularity::PopularityIndex;

use super::{group_frequency_recall, ndcg_at_k, pru_ppru, recall_at_k, GroupRow, ItemGroup};

/// Provenance recorded in every report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub run_id: String,
    /// Model kind, or `mostpop` / `mostppop`.
    pub ranker: String,
    /// Inference variant; absent for non-learned rankers.
    pub variant: Option<String>,
    pub gamma: Option<f64>,
    pub beta: Option<f64>,
    pub list_length: usize,
    pub similar_users: usize,
    pub seed: u64,
    pub dataset_hash: String,
    pub split: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub recall: f64,
    pub ndcg: f64,
    pub pru: Option<f64>,
    pub ppru: Option<f64>,
    pub evaluated_users: usize,
    pub pru_excluded_users: usize,
    pub ppru_excluded_users: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub run: RunInfo,
    pub metrics: MetricsRow,
    pub item_groups: Vec<GroupRow>,
    pub head_tail: Vec<GroupRow>,
}

/// Scores finished lists against `ground_truth`. Users without ground truth
/// are skipped everywhere, including PRU/PPRU and the group tables.
pub fn build_report(
    run: RunInfo,
    lists: &[(UserId, Vec<ItemId>)],
    ds: &InteractionDataset,
    pop: &PopularityIndex,
    ground_truth: &SplitView,
    item_groups: &[ItemGroup],
    head_tail: &[ItemGroup],
) -> EvalReport {
    let k = run.list_length;
    let kept: Vec<(UserId, Vec<ItemId>)> = lists
        .iter()
        .filter(|(u, _)| !ground_truth.items(*u).is_empty())
        .map(|(u, l)| (*u, l.iter().take(k).copied().collect()))
        .collect();
    let (mut recall, mut ndcg) = (0.0, 0.0);
    for (u, list) in &kept {
        let gt = ground_truth.items(*u);
        recall += recall_at_k(list, gt, k).unwrap_or(0.0);
        ndcg += ndcg_at_k(list, gt, k).unwrap_or(0.0);
    }
    let n = kept.len();
    let (pru, ppru) = pru_ppru(&kept, pop, ds);
    EvalReport {
        run,
        metrics: MetricsRow {
            recall: if n > 0 { recall / n as f64 } else { 0.0 },
            ndcg: if n > 0 { ndcg / n as f64 } else { 0.0 },
            pru: pru.value,
            ppru: ppru.value,
            evaluated_users: n,
            pru_excluded_users: pru.excluded_users,
            ppru_excluded_users: ppru.excluded_users,
        },
        item_groups: group_frequency_recall(&kept, ground_truth, item_groups, ds.num_items),
        head_tail: group_frequency_recall(&kept, ground_truth, head_tail, ds.num_items),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One header line and one data row.
    pub fn metrics_csv(&self) -> String {
        let m = &self.metrics;
        let r = &self.run;
        format!(
            "run_id,ranker,variant,gamma,beta,k,recall,ndcg,pru,ppru,evaluated_users\n{},{},{},{},{},{},{},{},{},{},{}\n",
            r.run_id,
            r.ranker,
            r.variant.clone().unwrap_or_default(),
            opt(r.gamma),
            opt(r.beta),
            r.list_length,
            m.recall,
            m.ndcg,
            opt(m.pru),
            opt(m.ppru),
            m.evaluated_users
        )
    }

    /// One row per group of `rows`.
    pub fn groups_csv(rows: &[GroupRow]) -> String {
        let mut out = String::from("group,num_items,item_share,rec_frequency,rec_share,recall,recall_users\n");
        for g in rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                g.group,
                g.num_items,
                g.item_share,
                g.rec_frequency,
                g.rec_share,
                opt(g.recall),
                g.recall_users
            );
        }
        out
    }
}
