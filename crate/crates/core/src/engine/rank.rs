use std::cmp::Ordering;

use rayon::prelude::*;

use crate::data::{InteractionDataset, ItemId, UserId};
use crate::models::{InferenceSnapshot, ModelError};
use crate::popularity::{pp_top_items, PopularityIndex};

use super::{counterfactual_score, EngineError, InferenceConfig, ScoreTerms, Variant};

fn sigmoid(x: f32) -> f64 {
    let x = x as f64;
    1.0 / (1.0 + (-x).exp())
}

/// Descending score, then ascending id.
fn by_score(scores: &[f64]) -> impl Fn(&ItemId, &ItemId) -> Ordering + '_ {
    move |&a, &b| scores[b as usize].total_cmp(&scores[a as usize]).then(a.cmp(&b))
}

/// Top `k` items by score, skipping `exclude` (sorted), ties by ascending id.
pub fn recommend(scores: &[f64], exclude: &[ItemId], k: usize) -> Vec<ItemId> {
    let mut candidates: Vec<ItemId> = (0..scores.len() as ItemId)
        .filter(|i| exclude.binary_search(i).is_err())
        .collect();
    let cmp = by_score(scores);
    if k < candidates.len() {
        candidates.select_nth_unstable_by(k, &cmp);
        candidates.truncate(k);
    }
    candidates.sort_unstable_by(&cmp);
    candidates
}

/// Scores every item for one user under an inference configuration.
pub struct UserScorer<'a> {
    snapshot: &'a InferenceSnapshot,
    cfg: InferenceConfig,
    ds: &'a InteractionDataset,
    pop: &'a PopularityIndex,
    gp_pred: Option<Vec<f64>>,
}

impl<'a> UserScorer<'a> {
    pub fn new(
        snapshot: &'a InferenceSnapshot,
        cfg: &InferenceConfig,
        ds: &'a InteractionDataset,
        pop: &'a PopularityIndex,
    ) -> Result<Self, EngineError> {
        cfg.validate()?;
        let v = cfg.variant;
        if v.uses_pp_head() && !snapshot.has_pp_head() {
            return Err(ModelError::MissingHead("pp").into());
        }
        if v.uses_gp_head() && snapshot.gp_logits().is_none() {
            return Err(ModelError::MissingHead("gp").into());
        }
        let gp_pred = if v.uses_gp_head() {
            snapshot.gp_logits().map(|g| g.iter().map(|&x| sigmoid(x)).collect())
        } else {
            None
        };
        Ok(Self {
            snapshot,
            cfg: cfg.clone(),
            ds,
            pop,
            gp_pred,
        })
    }

    pub fn config(&self) -> &InferenceConfig {
        &self.cfg
    }

    /// Score of every item for `user`, indexed by item id.
    pub fn scores(&self, user: UserId) -> Vec<f64> {
        let n = self.snapshot.num_items();
        let v = self.cfg.variant;
        let mut r = vec![0.0f32; n];
        self.snapshot.base_row(user, &mut r);
        let pp_pred = v.uses_pp_head().then(|| {
            let mut p = vec![0.0f32; n];
            self.snapshot.pp_row(user, &mut p);
            p
        });
        let needs_pp_obs = matches!(v, Variant::Full | Variant::NoGp | Variant::ObsOnly);
        let pp_obs = needs_pp_obs.then(|| self.pop.pp_row(self.ds, user));
        let gp_obs = self.pop.gp.values();
        (0..n)
            .map(|i| {
                let t = ScoreTerms {
                    r_hat: r[i] as f64,
                    pp_pred: pp_pred.as_ref().map(|p| sigmoid(p[i])),
                    gp_pred: self.gp_pred.as_ref().map(|g| g[i]),
                    pp_obs: pp_obs.as_ref().map_or(0.0, |p| p[i]),
                    gp_obs: gp_obs[i],
                };
                counterfactual_score(&t, &self.cfg)
            })
            .collect()
    }

    pub fn recommend(&self, user: UserId) -> Vec<ItemId> {
        recommend(&self.scores(user), self.ds.train.items(user), self.cfg.k)
    }
}

/// GP order minus the user's train items.
pub fn mostpop_rank(pop: &PopularityIndex, ds: &InteractionDataset, user: UserId, k: usize) -> Vec<ItemId> {
    let seen = ds.train.items(user);
    pop.gp
        .ranked_items()
        .into_iter()
        .filter(|i| seen.binary_search(i).is_err())
        .take(k)
        .collect()
}

/// PP order for the user, train items excluded.
pub fn mostppop_rank(pop: &PopularityIndex, ds: &InteractionDataset, user: UserId, k: usize) -> Vec<ItemId> {
    pp_top_items(&pop.similar, ds, user, k)
}

/// Something that produces a top-K list per user.
pub enum Ranker<'a> {
    Model(UserScorer<'a>),
    MostPop,
    MostPPop,
}

/// Top-`k` lists for `users`, in the given order. Users are processed in
/// parallel on the current rayon pool; the output does not depend on the
/// number of threads.
pub fn rank_users(
    ranker: &Ranker<'_>,
    ds: &InteractionDataset,
    pop: &PopularityIndex,
    users: &[UserId],
    k: usize,
) -> Vec<(UserId, Vec<ItemId>)> {
    match ranker {
        Ranker::Model(scorer) => users
            .par_iter()
            .map(|&u| (u, recommend(&scorer.scores(u), ds.train.items(u), k)))
            .collect(),
        Ranker::MostPop => {
            let ranked = pop.gp.ranked_items();
            users
                .par_iter()
                .map(|&u| {
                    let seen = ds.train.items(u);
                    let list = ranked
                        .iter()
                        .copied()
                        .filter(|i| seen.binary_search(i).is_err())
                        .take(k)
                        .collect();
                    (u, list)
                })
                .collect()
        }
        Ranker::MostPPop => users
            .par_iter()
            .map(|&u| (u, mostppop_rank(pop, ds, u, k)))
            .collect(),
    }
}
