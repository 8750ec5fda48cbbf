use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sample_negatives, InteractionDataset, ItemId, UserId};
use crate::evaluate::{ndcg_at_k, recall_at_k};
use crate::models::{Forward, ModelError, ScorerBundle};
use crate::numerics::{optimizer_step, NumericsError, ParameterStore};
use crate::popularity::PopularityIndex;

use super::{
    bpr_loss, factual_on_tape, rank_users, regression_losses, total_loss, EngineError, InferenceConfig,
    ObservedPopularity, Ranker, TrainConfig, UserScorer, Variant,
};

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(rename = "L_R")]
    pub l_r: f64,
    #[serde(rename = "L_P")]
    pub l_p: f64,
    #[serde(rename = "L_G")]
    pub l_g: f64,
    pub total: f64,
    pub val_recall: Option<f64>,
    pub val_ndcg: Option<f64>,
    pub elapsed_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub log: Vec<EpochRecord>,
    /// Epoch whose parameters the bundle holds after training (1-based).
    pub best_epoch: usize,
    pub best_val_recall: Option<f64>,
    pub epochs_run: usize,
    pub stopped_early: bool,
}

fn non_finite(err: EngineError, epoch: usize, batch: usize) -> EngineError {
    let is_nan = matches!(
        &err,
        EngineError::Numerics(NumericsError::NonFinite { .. } | NumericsError::NonFiniteGrad { .. })
            | EngineError::Model(ModelError::Numerics(
                NumericsError::NonFinite { .. } | NumericsError::NonFiniteGrad { .. }
            ))
    );
    if is_nan {
        EngineError::NonFinite {
            epoch,
            batch,
            detail: err.to_string(),
        }
    } else {
        err
    }
}

/// Validation Recall@K and NDCG@K under `infer`, over users with validation items.
pub(crate) fn validate(
    bundle: &ScorerBundle,
    ds: &InteractionDataset,
    pop: &PopularityIndex,
    infer: &InferenceConfig,
) -> Result<Option<(f64, f64)>, EngineError> {
    let users: Vec<UserId> = (0..ds.num_users as UserId)
        .filter(|&u| !ds.valid.items(u).is_empty())
        .collect();
    if users.is_empty() {
        return Ok(None);
    }
    let snap = bundle.snapshot();
    let scorer = UserScorer::new(&snap, infer, ds, pop)?;
    let lists = rank_users(&Ranker::Model(scorer), ds, pop, &users, infer.k);
    let (mut recall, mut ndcg) = (0.0, 0.0);
    for (u, list) in &lists {
        let gt = ds.valid.items(*u);
        recall += recall_at_k(list, gt, infer.k).unwrap_or(0.0);
        ndcg += ndcg_at_k(list, gt, infer.k).unwrap_or(0.0);
    }
    let n = lists.len() as f64;
    Ok(Some((recall / n, ndcg / n)))
}

/// Minimises the variant's objective with mini-batch BPR, keeping the
/// parameters of the epoch with the best validation recall.
///
/// `on_epoch` sees every log record as soon as it is produced.
pub fn train(
    bundle: &mut ScorerBundle,
    ds: &InteractionDataset,
    pop: &PopularityIndex,
    cfg: &TrainConfig,
    infer: &InferenceConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome, EngineError> {
    cfg.validate()?;
    let variant = cfg.variant.training_variant();
    let spec = bundle.spec();
    if variant.uses_pp_head() && !spec.pp_head {
        return Err(ModelError::MissingHead("pp").into());
    }
    if variant.uses_gp_head() && !spec.gp_head {
        return Err(ModelError::MissingHead("gp").into());
    }
    let val_infer = InferenceConfig {
        k: cfg.eval_k,
        ..infer.clone()
    };
    val_infer.validate()?;

    // (user, item, observed PP) for every train interaction, grouped by user
    let mut positives: Vec<(UserId, ItemId, f32)> = Vec::with_capacity(ds.train.len());
    for u in 0..ds.num_users as UserId {
        let items = ds.train.items(u);
        if items.is_empty() {
            continue;
        }
        let row = pop.pp_row(ds, u);
        positives.extend(items.iter().map(|&i| (u, i, row[i as usize] as f32)));
    }
    if positives.is_empty() {
        return Err(EngineError::Config("train split is empty".into()));
    }
    let gp_obs: Vec<f32> = pop.gp.values().iter().map(|&g| g as f32).collect();

    let opt = cfg.optimizer_config();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let start = Instant::now();
    let steps = positives.len().div_ceil(cfg.batch_size);
    let gp_scale = steps as f32 / ds.num_items as f32;
    let mut item_order: Vec<ItemId> = (0..ds.num_items as ItemId).collect();

    let mut log = Vec::new();
    let mut best: Option<(usize, f64, ParameterStore)> = None;
    let mut stopped_early = false;
    let mut epochs_run = 0;

    for epoch in 1..=cfg.max_epochs {
        positives.shuffle(&mut rng);
        item_order.shuffle(&mut rng);
        let pairs: Vec<(UserId, ItemId)> = positives.iter().map(|&(u, i, _)| (u, i)).collect();
        let triples = sample_negatives(ds, &pairs, &mut rng)?;
        let (mut sum_r, mut sum_p, mut sum_g, mut sum_total) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);

        for step in 0..steps {
            let lo = step * cfg.batch_size;
            let hi = (lo + cfg.batch_size).min(positives.len());
            let batch = &triples[lo..hi];
            let users: Vec<UserId> = batch.iter().map(|t| t.user).collect();
            let pos: Vec<ItemId> = batch.iter().map(|t| t.pos_item).collect();
            let neg: Vec<ItemId> = batch.iter().map(|t| t.neg_item).collect();
            let pp_targets: Vec<f32> = positives[lo..hi].iter().map(|p| p.2).collect();
            let chunk = &item_order[step * ds.num_items / steps..(step + 1) * ds.num_items / steps];
            let gp_targets: Vec<f32> = chunk.iter().map(|&i| gp_obs[i as usize]).collect();

            let run = |bundle: &ScorerBundle| -> Result<_, EngineError> {
                let mut f = Forward::new(bundle);
                let (obs_pos, obs_neg) = if variant == Variant::ObsOnly {
                    let neg_pp: Vec<f32> = users
                        .iter()
                        .zip(&neg)
                        .map(|(&u, &i)| pop.pp(ds, u, i) as f32)
                        .collect();
                    let gp_of = |items: &[ItemId]| items.iter().map(|&i| gp_obs[i as usize]).collect::<Vec<_>>();
                    (Some((pp_targets.clone(), gp_of(&pos))), Some((neg_pp, gp_of(&neg))))
                } else {
                    (None, None)
                };
                fn as_obs(o: &Option<(Vec<f32>, Vec<f32>)>) -> Option<ObservedPopularity<'_>> {
                    o.as_ref().map(|(pp, gp)| ObservedPopularity { pp, gp })
                }
                let y_pos = factual_on_tape(&mut f, variant, &users, &pos, as_obs(&obs_pos))?;
                let y_neg = factual_on_tape(&mut f, variant, &users, &neg, as_obs(&obs_neg))?;
                let l_r = bpr_loss(f.tape(), y_pos, y_neg)?;
                let reg = regression_losses(&mut f, variant, &users, &pos, &pp_targets, chunk, &gp_targets, gp_scale)?;
                let mut touched: Vec<ItemId> = pos.iter().chain(&neg).copied().collect();
                if variant.uses_gp_head() {
                    touched.extend_from_slice(chunk);
                }
                let penalty = f.l2_penalty(cfg.lambda, &users, &touched)?;
                let total = total_loss(f.tape(), l_r, reg.pp, reg.gp, cfg.alpha, penalty)?;
                let value = |v: Option<_>| v.map_or(0.0, |v| f.value(v).item() as f64);
                let parts = (value(Some(l_r)), value(reg.pp), value(reg.gp), value(Some(total)));
                Ok((f.into_tape(), total, parts))
            };
            let (tape, total, parts) = run(bundle).map_err(|e| non_finite(e, epoch, step))?;
            if !parts.3.is_finite() {
                return Err(EngineError::NonFinite {
                    epoch,
                    batch: step,
                    detail: "loss".into(),
                });
            }
            tape.backward(total, bundle.store_mut())
                .map_err(|e| non_finite(e.into(), epoch, step))?;
            optimizer_step(bundle.store_mut(), &opt).map_err(|e| non_finite(e.into(), epoch, step))?;
            sum_r += parts.0;
            sum_p += parts.1;
            sum_g += parts.2;
            sum_total += parts.3;
        }
        epochs_run = epoch;

        let last = epoch == cfg.max_epochs;
        let val = if epoch % cfg.eval_every == 0 || last {
            validate(bundle, ds, pop, &val_infer)?
        } else {
            None
        };
        let n = steps as f64;
        let record = EpochRecord {
            epoch,
            l_r: sum_r / n,
            l_p: sum_p / n,
            l_g: sum_g / n,
            total: sum_total / n,
            val_recall: val.map(|v| v.0),
            val_ndcg: val.map(|v| v.1),
            elapsed_ms: start.elapsed().as_millis() as u64,
        };
        on_epoch(&record);
        log.push(record);

        if let Some((recall, _)) = val {
            if best.as_ref().is_none_or(|b| recall > b.1) {
                best = Some((epoch, recall, bundle.store().clone()));
            }
        }
        if let Some((best_epoch, _, _)) = &best {
            if epoch - best_epoch >= cfg.patience {
                stopped_early = !last;
                break;
            }
        }
    }

    let (best_epoch, best_val_recall) = match best {
        Some((epoch, recall, store)) => {
            bundle.store_mut().copy_values_from(&store);
            (epoch, Some(recall))
        }
        None => (epochs_run, None),
    };
    Ok(TrainOutcome {
        log,
        best_epoch,
        best_val_recall,
        epochs_run,
        stopped_early,
    })
}
