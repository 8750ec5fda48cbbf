//! Training objective, counterfactual scoring, ablation variants and the
//! non-learned popularity rankers.

mod rank;
mod train;

pub use rank::{mostpop_rank, mostppop_rank, rank_users, recommend, Ranker, UserScorer};
pub use train::{train, EpochRecord, TrainOutcome};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, ItemId, UserId};
use crate::models::{Forward, ModelError, ScorerBundle};
use crate::numerics::{NumericsError, OptimizerConfig, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite value at epoch {epoch}, batch {batch}: {detail}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Which terms a run trains and scores with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// The plain base model: BPR on `r̂`, ranked by `r̂`.
    Base,
    Full,
    NoCi,
    NoPp,
    NoGp,
    PredOnly,
    ObsOnly,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Base,
        Variant::Full,
        Variant::NoCi,
        Variant::NoPp,
        Variant::NoGp,
        Variant::PredOnly,
        Variant::ObsOnly,
    ];

    pub fn uses_pp_head(self) -> bool {
        matches!(self, Variant::Full | Variant::NoCi | Variant::NoGp | Variant::PredOnly)
    }

    pub fn uses_gp_head(self) -> bool {
        matches!(self, Variant::Full | Variant::NoCi | Variant::NoPp | Variant::PredOnly)
    }

    /// Variants that differ only at inference share the full training run.
    pub fn training_variant(self) -> Variant {
        match self {
            Variant::NoCi | Variant::PredOnly => Variant::Full,
            v => v,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::Full => "full",
            Variant::NoCi => "no_ci",
            Variant::NoPp => "no_pp",
            Variant::NoGp => "no_gp",
            Variant::PredOnly => "pred_only",
            Variant::ObsOnly => "obs_only",
        }
    }
}

impl FromStr for Variant {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| EngineError::Config(format!("unknown variant {s:?}")))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub alpha: f32,
    pub lambda: f32,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub variant: Variant,
    /// List length for the validation metric.
    pub eval_k: usize,
    /// Validate every this many epochs (the last epoch always validates).
    pub eval_every: usize,
    pub optimizer: OptimizerKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            lambda: 1e-4,
            max_epochs: 400,
            batch_size: 8192,
            lr: 0.01,
            seed: 2024,
            patience: 20,
            variant: Variant::Full,
            eval_k: 50,
            eval_every: 1,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: &str| Err(EngineError::Config(m.to_string()));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be a finite value >= 0");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be a finite value >= 0");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 || self.eval_k == 0 || self.eval_every == 0 {
            return bad("batch_size, eval_k and eval_every must be positive");
        }
        Ok(())
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        match self.optimizer {
            OptimizerKind::Adam => OptimizerConfig::adam(self.lr),
            OptimizerKind::Sgd => OptimizerConfig::Sgd { lr: self.lr },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub gamma: f64,
    pub beta: f64,
    pub k: usize,
    pub variant: Variant,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            gamma: 256.0,
            beta: -128.0,
            k: 50,
            variant: Variant::Full,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.k == 0 {
            return Err(EngineError::Config("K must be at least 1".into()));
        }
        if !(self.gamma.is_finite() && self.beta.is_finite()) {
            return Err(EngineError::Config("gamma and beta must be finite".into()));
        }
        Ok(())
    }
}

/// Observed popularity fed to the `obs_only` training objective.
pub struct ObservedPopularity<'a> {
    pub pp: &'a [f32],
    pub gp: &'a [f32],
}

/// Records `ŷ` for each pair on the forward's tape.
///
/// `observed` is required only by [`Variant::ObsOnly`].
pub fn factual_on_tape(
    f: &mut Forward<'_>,
    variant: Variant,
    users: &[UserId],
    items: &[ItemId],
    observed: Option<ObservedPopularity<'_>>,
) -> Result<Var, EngineError> {
    let r = f.base_scores(users, items)?;
    if variant == Variant::ObsOnly {
        let obs = observed.ok_or_else(|| EngineError::Config("obs_only needs observed popularity".into()))?;
        let factor: Vec<f32> = obs.pp.iter().zip(obs.gp).map(|(p, g)| p * g).collect();
        let x = f.tape().leaf(Tensor::vector(factor))?;
        return Ok(f.tape().mul(x, r)?);
    }
    let mut y = r;
    if variant.uses_pp_head() {
        let p = f.pp_logits(users, items)?;
        let sp = f.tape().sigmoid(p)?;
        y = f.tape().mul(sp, y)?;
    }
    if variant.uses_gp_head() {
        let g = f.gp_logits(items)?;
        let sg = f.tape().sigmoid(g)?;
        y = f.tape().mul(sg, y)?;
    }
    Ok(y)
}

/// `ŷ` values for explicit pairs (variant heads only; not for `obs_only`).
pub fn factual_predict(
    bundle: &ScorerBundle,
    variant: Variant,
    users: &[UserId],
    items: &[ItemId],
) -> Result<Vec<f32>, EngineError> {
    let mut f = Forward::new(bundle);
    let y = factual_on_tape(&mut f, variant, users, items, None)?;
    Ok(f.value(y).data().to_vec())
}

/// Mean of `-ln σ(ŷ⁺ − ŷ⁻)`, computed as `softplus(ŷ⁻ − ŷ⁺)`.
pub fn bpr_loss(tape: &mut Tape, pos: Var, neg: Var) -> Result<Var, EngineError> {
    let diff = tape.sub(neg, pos)?;
    let sp = tape.softplus(diff)?;
    Ok(tape.mean(sp)?)
}

/// `scale · Σ (σ(logit) − target)²`.
pub fn sigmoid_squared_error(tape: &mut Tape, logits: Var, targets: &[f32], scale: f32) -> Result<Var, EngineError> {
    let s = tape.sigmoid(logits)?;
    let t = tape.leaf(Tensor::vector(targets.to_vec()))?;
    let d = tape.sub(s, t)?;
    let sq = tape.square(d)?;
    let total = tape.sum(sq)?;
    Ok(tape.scale(total, scale)?)
}

/// The two regression terms; a term is `None` when its head is not trained.
pub struct RegressionLosses {
    pub pp: Option<Var>,
    pub gp: Option<Var>,
}

/// `L_P` over observed pairs and the GP term over an item chunk.
///
/// `gp_scale` weights the chunk's squared errors. With `steps / |I|` and
/// `steps` chunks that partition the catalogue once per epoch, each step's
/// value estimates the full-catalogue mean without bias and the per-step
/// values average to it exactly.
#[allow(clippy::too_many_arguments)]
pub fn regression_losses(
    f: &mut Forward<'_>,
    variant: Variant,
    users: &[UserId],
    items: &[ItemId],
    pp_targets: &[f32],
    gp_items: &[ItemId],
    gp_targets: &[f32],
    gp_scale: f32,
) -> Result<RegressionLosses, EngineError> {
    let pp = if variant.uses_pp_head() && !users.is_empty() {
        let logits = f.pp_logits(users, items)?;
        Some(sigmoid_squared_error(f.tape(), logits, pp_targets, 1.0 / users.len() as f32)?)
    } else {
        None
    };
    let gp = if variant.uses_gp_head() && !gp_items.is_empty() {
        let logits = f.gp_logits(gp_items)?;
        Some(sigmoid_squared_error(f.tape(), logits, gp_targets, gp_scale)?)
    } else {
        None
    };
    Ok(RegressionLosses { pp, gp })
}

/// `L_R + α (L_P + L_G) + penalty`, absent terms counting as zero.
pub fn total_loss(
    tape: &mut Tape,
    l_r: Var,
    l_p: Option<Var>,
    l_g: Option<Var>,
    alpha: f32,
    penalty: Var,
) -> Result<Var, EngineError> {
    let reg = match (l_p, l_g) {
        (Some(p), Some(g)) => Some(tape.add(p, g)?),
        (Some(x), None) | (None, Some(x)) => Some(x),
        (None, None) => None,
    };
    let mut total = l_r;
    if let Some(reg) = reg {
        let weighted = tape.scale(reg, alpha)?;
        total = tape.add(total, weighted)?;
    }
    Ok(tape.add(total, penalty)?)
}

/// Inputs to the final ranking score of one (user, item) pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoreTerms {
    pub r_hat: f64,
    /// `σ(p̂)`, when the PP head exists.
    pub pp_pred: Option<f64>,
    /// `σ(ĝ)`, when the GP head exists.
    pub gp_pred: Option<f64>,
    pub pp_obs: f64,
    pub gp_obs: f64,
}

/// The ranking score for one pair under `cfg.variant`.
///
/// Full: `σ(p̂)σ(ĝ)r̂ + γp + βg`. The ablations drop or swap terms as
/// documented on [`Variant`].
pub fn counterfactual_score(t: &ScoreTerms, cfg: &InferenceConfig) -> f64 {
    let sp = t.pp_pred.unwrap_or(1.0);
    let sg = t.gp_pred.unwrap_or(1.0);
    let (gamma, beta) = (cfg.gamma, cfg.beta);
    match cfg.variant {
        Variant::Base => t.r_hat,
        Variant::NoCi => sp * sg * t.r_hat,
        Variant::Full => sp * sg * t.r_hat + gamma * t.pp_obs + beta * t.gp_obs,
        Variant::NoPp => sg * t.r_hat + beta * t.gp_obs,
        Variant::NoGp => sp * t.r_hat + gamma * t.pp_obs,
        Variant::PredOnly => sp * sg * t.r_hat + gamma * sp + beta * sg,
        Variant::ObsOnly => t.pp_obs * t.gp_obs * t.r_hat + gamma * t.pp_obs + beta * t.gp_obs,
    }
}

/// Causal effects of the popularity proxy on one score, from the three
/// evaluations of the scoring function the decomposition needs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectDecomposition {
    pub total: f64,
    pub natural_direct: f64,
    pub total_indirect: f64,
}

impl EffectDecomposition {
    /// `factual = S(x, u, i)`, `direct_only = S(x, u*, i*)`, `reference = S(x*, u*, i*)`.
    pub fn new(factual: f64, direct_only: f64, reference: f64) -> Self {
        let total = factual - reference;
        let natural_direct = direct_only - reference;
        Self {
            total,
            natural_direct,
            total_indirect: total - natural_direct,
        }
    }

    /// `TIE + ε·NDE`, the re-weighted score used for ranking.
    pub fn reweighted(&self, epsilon: f64) -> f64 {
        self.total_indirect + epsilon * self.natural_direct
    }
}
