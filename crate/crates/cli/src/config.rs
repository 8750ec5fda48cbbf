//! Flat `key = value` run configuration.
//!
//! Precedence, lowest first: built-in defaults, the config file, `--set`
//! overrides. Unknown and repeated keys are rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ppac::data::synthetic::SyntheticConfig;
use ppac::data::Format;
use ppac::engine::{InferenceConfig, OptimizerKind, TrainConfig, Variant};
use ppac::models::{ModelKind, ModelSpec};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetFormat {
    File(Format),
    /// Generated in memory from the `synth_*` keys.
    Synthetic,
}

impl FromStr for DatasetFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "synthetic" {
            return Ok(DatasetFormat::Synthetic);
        }
        s.parse::<Format>().map(DatasetFormat::File).map_err(|e| e.to_string())
    }
}

impl std::fmt::Display for DatasetFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DatasetFormat::File(fmt) => fmt.fmt(f),
            DatasetFormat::Synthetic => f.write_str("synthetic"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RankerKind {
    Model,
    MostPop,
    MostPPop,
}

impl FromStr for RankerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "model" => Ok(RankerKind::Model),
            "mostpop" => Ok(RankerKind::MostPop),
            "mostppop" => Ok(RankerKind::MostPPop),
            _ => Err(format!("unknown ranker {s:?}; expected model, mostpop or mostppop")),
        }
    }
}

impl std::fmt::Display for RankerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RankerKind::Model => "model",
            RankerKind::MostPop => "mostpop",
            RankerKind::MostPPop => "mostppop",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub format: DatasetFormat,
    pub synth: SyntheticConfig,
    pub test_frac: f64,
    pub valid_frac: f64,
    pub split_seed: u64,
    /// Similar users per user.
    pub k: usize,
    pub model: ModelKind,
    pub dim: usize,
    pub layers: usize,
    pub shared_embeddings: bool,
    pub train: TrainConfig,
    pub gamma: f64,
    pub beta: f64,
    /// Recommendation list length.
    pub top_k: usize,
    pub ranker: RankerKind,
    pub checkpoint: Option<PathBuf>,
    /// Inclusive upper bounds of the interaction-count item groups.
    pub group_bounds: Vec<u32>,
    pub head_frac: f64,
    pub overlap_n: usize,
    pub overlap_bucket: usize,
    pub rating_groups: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let infer = InferenceConfig::default();
        Self {
            dataset: None,
            format: DatasetFormat::File(Format::Tsv),
            synth: SyntheticConfig::default(),
            test_frac: 0.1,
            valid_frac: 0.1,
            split_seed: 2024,
            k: 30,
            model: ModelKind::Bprmf,
            dim: 64,
            layers: 3,
            shared_embeddings: true,
            train,
            gamma: infer.gamma,
            beta: infer.beta,
            top_k: infer.k,
            ranker: RankerKind::Model,
            checkpoint: None,
            group_bounds: vec![10, 50, 100, 200],
            head_frac: 0.1,
            overlap_n: 50,
            overlap_bucket: 5,
            rating_groups: 5,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| CliError::Config(format!("{key} = {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(CliError::Config(format!("{key} = {value:?}: expected true or false"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<u32>, CliError> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

/// Every accepted key, in the order the effective config is written.
pub const KEYS: &[&str] = &[
    "dataset",
    "format",
    "synth_users",
    "synth_items",
    "synth_clusters",
    "synth_mean_interactions",
    "synth_popularity_exponent",
    "synth_cluster_affinity",
    "synth_seed",
    "test_frac",
    "valid_frac",
    "split_seed",
    "k",
    "model",
    "d",
    "layers",
    "shared_embeddings",
    "alpha",
    "lambda",
    "lr",
    "batch_size",
    "max_epochs",
    "patience",
    "eval_every",
    "optimizer",
    "seed",
    "variant",
    "gamma",
    "beta",
    "top_k",
    "ranker",
    "checkpoint",
    "group_bounds",
    "head_frac",
    "overlap_n",
    "overlap_bucket",
    "rating_groups",
];

impl RunConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let v = value.trim();
        match key {
            "dataset" => self.dataset = optional_path(v),
            "format" => self.format = parse(key, v)?,
            "synth_users" => self.synth.num_users = parse(key, v)?,
            "synth_items" => self.synth.num_items = parse(key, v)?,
            "synth_clusters" => self.synth.num_clusters = parse(key, v)?,
            "synth_mean_interactions" => self.synth.mean_interactions = parse(key, v)?,
            "synth_popularity_exponent" => self.synth.popularity_exponent = parse(key, v)?,
            "synth_cluster_affinity" => self.synth.cluster_affinity = parse(key, v)?,
            "synth_seed" => self.synth.seed = parse(key, v)?,
            "test_frac" => self.test_frac = parse(key, v)?,
            "valid_frac" => self.valid_frac = parse(key, v)?,
            "split_seed" => self.split_seed = parse(key, v)?,
            "k" => self.k = parse(key, v)?,
            "model" => self.model = parse(key, v)?,
            "d" => self.dim = parse(key, v)?,
            "layers" => self.layers = parse(key, v)?,
            "shared_embeddings" => self.shared_embeddings = parse_bool(key, v)?,
            "alpha" => self.train.alpha = parse(key, v)?,
            "lambda" => self.train.lambda = parse(key, v)?,
            "lr" => self.train.lr = parse(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "max_epochs" => self.train.max_epochs = parse(key, v)?,
            "patience" => self.train.patience = parse(key, v)?,
            "eval_every" => self.train.eval_every = parse(key, v)?,
            "optimizer" => {
                self.train.optimizer = match v {
                    "adam" => OptimizerKind::Adam,
                    "sgd" => OptimizerKind::Sgd,
                    _ => return Err(CliError::Config(format!("optimizer = {v:?}: expected adam or sgd"))),
                }
            }
            "seed" => self.train.seed = parse(key, v)?,
            "variant" => self.train.variant = parse(key, v)?,
            "gamma" => self.gamma = parse(key, v)?,
            "beta" => self.beta = parse(key, v)?,
            "top_k" => self.top_k = parse(key, v)?,
            "ranker" => self.ranker = parse(key, v)?,
            "checkpoint" => self.checkpoint = optional_path(v),
            "group_bounds" => self.group_bounds = parse_list(key, v)?,
            "head_frac" => self.head_frac = parse(key, v)?,
            "overlap_n" => self.overlap_n = parse(key, v)?,
            "overlap_bucket" => self.overlap_bucket = parse(key, v)?,
            "rating_groups" => self.rating_groups = parse(key, v)?,
            _ => return Err(CliError::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Current value of `key` in the form [`RunConfig::set`] accepts.
    pub fn get(&self, key: &str) -> Option<String> {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        Some(match key {
            "dataset" => path(&self.dataset),
            "format" => self.format.to_string(),
            "synth_users" => self.synth.num_users.to_string(),
            "synth_items" => self.synth.num_items.to_string(),
            "synth_clusters" => self.synth.num_clusters.to_string(),
            "synth_mean_interactions" => self.synth.mean_interactions.to_string(),
            "synth_popularity_exponent" => self.synth.popularity_exponent.to_string(),
            "synth_cluster_affinity" => self.synth.cluster_affinity.to_string(),
            "synth_seed" => self.synth.seed.to_string(),
            "test_frac" => self.test_frac.to_string(),
            "valid_frac" => self.valid_frac.to_string(),
            "split_seed" => self.split_seed.to_string(),
            "k" => self.k.to_string(),
            "model" => self.model.to_string(),
            "d" => self.dim.to_string(),
            "layers" => self.layers.to_string(),
            "shared_embeddings" => self.shared_embeddings.to_string(),
            "alpha" => self.train.alpha.to_string(),
            "lambda" => self.train.lambda.to_string(),
            "lr" => self.train.lr.to_string(),
            "batch_size" => self.train.batch_size.to_string(),
            "max_epochs" => self.train.max_epochs.to_string(),
            "patience" => self.train.patience.to_string(),
            "eval_every" => self.train.eval_every.to_string(),
            "optimizer" => match self.train.optimizer {
                OptimizerKind::Adam => "adam".into(),
                OptimizerKind::Sgd => "sgd".into(),
            },
            "seed" => self.train.seed.to_string(),
            "variant" => self.train.variant.to_string(),
            "gamma" => self.gamma.to_string(),
            "beta" => self.beta.to_string(),
            "top_k" => self.top_k.to_string(),
            "ranker" => self.ranker.to_string(),
            "checkpoint" => path(&self.checkpoint),
            "group_bounds" => self
                .group_bounds
                .iter()
                .map(u32::to_string)
                .collect::<Vec<_>>()
                .join(","),
            "head_frac" => self.head_frac.to_string(),
            "overlap_n" => self.overlap_n.to_string(),
            "overlap_bucket" => self.overlap_bucket.to_string(),
            "rating_groups" => self.rating_groups.to_string(),
            _ => return None,
        })
    }

    /// Applies every assignment in `text`. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        let mut seen = std::collections::HashSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key = value", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(CliError::Config(format!("line {}: key {key:?} set twice", n + 1)));
            }
            self.set(key, value)
                .map_err(|e| CliError::Config(format!("line {}: {}", n + 1, e.message())))?;
        }
        Ok(())
    }

    /// Defaults, then the file at `path` (if any), then `overrides`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
            cfg.apply_text(&text)?;
        }
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override {o:?}: expected key=value")))?;
            cfg.set(key.trim(), value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.format != DatasetFormat::Synthetic && self.dataset.is_none() {
            return bad("dataset path is required unless format = synthetic".into());
        }
        if self.k == 0 || self.dim == 0 || self.top_k == 0 {
            return bad("k, d and top_k must be positive".into());
        }
        if !(self.head_frac > 0.0 && self.head_frac < 1.0) {
            return bad(format!("head_frac = {} must lie in (0, 1)", self.head_frac));
        }
        if self.group_bounds.windows(2).any(|w| w[0] >= w[1]) {
            return bad("group_bounds must be strictly increasing".into());
        }
        if self.overlap_n == 0 || self.overlap_bucket == 0 || self.rating_groups == 0 {
            return bad("overlap_n, overlap_bucket and rating_groups must be positive".into());
        }
        if !(self.gamma.is_finite() && self.beta.is_finite()) {
            return bad("gamma and beta must be finite".into());
        }
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))
    }

    /// The effective config as a `key = value` file that [`RunConfig::load`] accepts.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("listed key"));
        }
        out
    }

    pub fn model_spec(&self, num_users: usize, num_items: usize) -> ModelSpec {
        let variant = self.train.variant.training_variant();
        let mut spec = ModelSpec::new(self.model, self.dim, num_users, num_items);
        spec.layers = self.layers;
        spec.shared_embeddings = self.shared_embeddings;
        spec.pp_head = variant.uses_pp_head();
        spec.gp_head = variant.uses_gp_head();
        spec
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            eval_k: self.top_k,
            ..self.train.clone()
        }
    }

    pub fn inference_config(&self) -> InferenceConfig {
        InferenceConfig {
            gamma: self.gamma,
            beta: self.beta,
            k: self.top_k,
            variant: self.train.variant,
        }
    }

    /// Identifies the trained weights: inference-only variants share the
    /// checkpoint of the variant they train as.
    pub fn run_id(&self) -> String {
        match self.ranker {
            RankerKind::Model => format!(
                "{}-{}-s{}",
                self.model,
                self.train.variant.training_variant(),
                self.train.seed
            ),
            other => other.to_string(),
        }
    }

    pub fn variant(&self) -> Variant {
        self.train.variant
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_settings() {
        let c = RunConfig::default();
        assert_eq!((c.dim, c.k, c.top_k, c.layers), (64, 30, 50, 3));
        assert_eq!((c.gamma, c.beta), (256.0, -128.0));
        assert_eq!((c.train.lr, c.train.alpha, c.train.lambda), (0.01, 0.1, 1e-4));
    }

    #[test]
    fn unknown_and_repeated_keys_are_rejected() {
        let mut c = RunConfig::default();
        assert!(c.apply_text("gama = 3").is_err());
        assert!(RunConfig::default().apply_text("gamma = 1\ngamma = 2").is_err());
        assert!(RunConfig::default().apply_text("gamma 1").is_err());
    }

    #[test]
    fn overrides_beat_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.cfg");
        std::fs::write(&p, "# comment\nformat = synthetic\ngamma = 1\n").unwrap();
        let c = RunConfig::load(Some(&p), &["gamma=7".into()]).unwrap();
        assert_eq!(c.gamma, 7.0);
    }

    #[test]
    fn effective_text_round_trips() {
        let mut c = RunConfig::default();
        for (k, v) in [
            ("format", "synthetic"),
            ("lambda", "0.000123"),
            ("variant", "no_gp"),
            ("group_bounds", "3,9"),
            ("optimizer", "sgd"),
            ("shared_embeddings", "false"),
            ("model", "lightgcn"),
        ] {
            c.set(k, v).unwrap();
        }
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn checkpoint_is_shared_by_inference_only_variants() {
        let mut a = RunConfig::default();
        a.set("variant", "no_ci").unwrap();
        let b = RunConfig::default();
        assert_eq!(a.run_id(), b.run_id());
        a.set("variant", "no_pp").unwrap();
        assert_ne!(a.run_id(), b.run_id());
    }

    #[test]
    fn file_datasets_need_a_path() {
        assert!(RunConfig::load(None, &[]).is_err());
        assert!(RunConfig::load(None, &["format=synthetic".into()]).is_ok());
    }
}
