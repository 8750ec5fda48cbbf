//! The pipeline stages behind each subcommand. Every stage reads and writes
//! files under one output directory and records them in `run_manifest.json`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ppac::data::synthetic::generate;
use ppac::data::{
    build_dataset, intervened_split, load_dataset, read_manifest, write_manifest, InteractionDataset,
    RawInteraction, SplitMeta,
};
use ppac::engine::{rank_users, train as train_model, EpochRecord, Ranker, TrainOutcome, UserScorer};
use ppac::evaluate::{
    build_report, groups_by_count, head_tail_groups, pp_gp_overlap, rating_vs_pp_rank, EvalError, EvalReport,
    OverlapReport, RatingGroup, RunInfo,
};
use ppac::models::{InferenceSnapshot, ScorerBundle};
use ppac::popularity::{read_index_cache, write_index_cache, PopularityIndex};
use serde::{Deserialize, Serialize};

use crate::config::{DatasetFormat, RankerKind, RunConfig};
use crate::error::CliError;

pub const MANIFEST_FILE: &str = "run_manifest.json";
const SPLIT_FILE: &str = "split_manifest.tsv";
const IDS_FILE: &str = "ids.json";
const INDEX_FILE: &str = "similar_users.bin";
const PREPARE_SUMMARY: &str = "prepare_summary.json";

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub kind: String,
    pub command: String,
    /// Effective config the file was produced with.
    pub config: String,
}

/// Index of every file written under one output directory.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RunManifest {
    pub files: BTreeMap<String, ManifestEntry>,
}

impl RunManifest {
    pub fn read(out: &Path) -> Result<Self, CliError> {
        let path = out.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io("manifest", &path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::data("manifest", format!("{}: {e}", path.display())))
    }
}

/// Collects the files one command writes, then registers them.
struct Outputs<'a> {
    out: &'a Path,
    command: &'static str,
    config_name: String,
    written: Vec<(String, &'static str)>,
}

impl<'a> Outputs<'a> {
    fn new(out: &'a Path, command: &'static str, stem: &str, cfg: &RunConfig) -> Result<Self, CliError> {
        std::fs::create_dir_all(out).map_err(|e| CliError::io(command, out, e))?;
        let mut o = Self {
            out,
            command,
            config_name: format!("{stem}.config"),
            written: Vec::new(),
        };
        let name = o.config_name.clone();
        o.write(&name, "config", cfg.to_text().as_bytes())?;
        Ok(o)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&mut self, name: &str, kind: &'static str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.path(name);
        std::fs::write(&path, bytes).map_err(|e| CliError::io(self.command, &path, e))?;
        self.written.push((name.to_string(), kind));
        Ok(())
    }

    fn write_with(
        &mut self,
        name: &str,
        kind: &'static str,
        f: impl FnOnce(&mut BufWriter<File>) -> Result<(), CliError>,
    ) -> Result<(), CliError> {
        let path = self.path(name);
        let file = File::create(&path).map_err(|e| CliError::io(self.command, &path, e))?;
        let mut w = BufWriter::new(file);
        f(&mut w)?;
        w.flush().map_err(|e| CliError::io(self.command, &path, e))?;
        self.written.push((name.to_string(), kind));
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, kind: &'static str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).expect("output serializes");
        text.push('\n');
        self.write(name, kind, text.as_bytes())
    }

    fn finish(self) -> Result<Vec<PathBuf>, CliError> {
        let mut manifest = RunManifest::read(self.out)?;
        for (name, kind) in &self.written {
            manifest.files.insert(
                name.clone(),
                ManifestEntry {
                    kind: kind.to_string(),
                    command: self.command.to_string(),
                    config: self.config_name.clone(),
                },
            );
        }
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        let path = self.out.join(MANIFEST_FILE);
        std::fs::write(&path, text).map_err(|e| CliError::io(self.command, &path, e))?;
        Ok(self.written.iter().map(|(n, _)| self.out.join(n)).collect())
    }
}

fn raw_interactions(cfg: &RunConfig) -> Result<Vec<RawInteraction>, CliError> {
    match cfg.format {
        DatasetFormat::Synthetic => Ok(generate(&cfg.synth)),
        DatasetFormat::File(format) => {
            let path = cfg.dataset.as_ref().expect("validated: file formats carry a path");
            load_dataset(path, format).map_err(|e| CliError::data_err("prepare: load", e))
        }
    }
}

/// Writes the configured synthetic dataset as `user<TAB>item<TAB>rating`.
pub fn synth(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let rows = generate(&cfg.synth);
    let mut o = Outputs::new(out, "synth", "synth", cfg)?;
    o.write_with("synthetic.tsv", "dataset", |w| {
        for r in &rows {
            let rating = r.rating.map(|x| x.to_string()).unwrap_or_default();
            writeln!(w, "{}\t{}\t{}", r.user, r.item, rating).map_err(|e| CliError::data("synth", e))?;
        }
        Ok(())
    })?;
    o.finish()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepareSummary {
    pub dataset_hash: String,
    pub raw_rows: usize,
    pub num_users: usize,
    pub num_items: usize,
    pub num_interactions: usize,
    pub density: f64,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub similar_users: usize,
    pub users_without_neighbors: usize,
    pub split: Option<SplitMeta>,
    pub warnings: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct IdTables {
    user_ids: Vec<String>,
    item_ids: Vec<String>,
    split: Option<SplitMeta>,
}

/// load → build → intervened split → GP and similar-user index.
pub fn prepare(cfg: &RunConfig, out: &Path) -> Result<PrepareSummary, CliError> {
    let raw = raw_interactions(cfg)?;
    let full = build_dataset(&raw).map_err(|e| CliError::data_err("prepare: build", e))?;
    let ds = intervened_split(&full, cfg.test_frac, cfg.valid_frac, cfg.split_seed)
        .map_err(|e| CliError::data_err("prepare: split", e))?;
    let pop = PopularityIndex::build(&ds, cfg.k).map_err(|e| CliError::popularity("prepare: index", e))?;
    let digest = ds.content_digest();

    let mut o = Outputs::new(out, "prepare", "prepare", cfg)?;
    o.write_with(SPLIT_FILE, "split-manifest", |w| {
        write_manifest(&ds, w).map_err(|e| CliError::data("prepare: write", e))
    })?;
    o.json(
        IDS_FILE,
        "id-tables",
        &IdTables {
            user_ids: ds.user_ids.clone(),
            item_ids: ds.item_ids.clone(),
            split: ds.split_meta.clone(),
        },
    )?;
    o.write_with(INDEX_FILE, "similar-user-index", |w| {
        write_index_cache(&pop.similar, &digest, w).map_err(|e| CliError::popularity("prepare: write", e))
    })?;

    let total = ds.total_interactions();
    let mut warnings: Vec<String> = ds.split_meta.iter().flat_map(|m| m.warnings.clone()).collect();
    warnings.extend(pop.similar.warnings().iter().cloned());
    let summary = PrepareSummary {
        dataset_hash: ds.content_hash(),
        raw_rows: raw.len(),
        num_users: ds.num_users,
        num_items: ds.num_items,
        num_interactions: total,
        density: total as f64 / (ds.num_users as f64 * ds.num_items as f64),
        train: ds.train.len(),
        valid: ds.valid.len(),
        test: ds.test.len(),
        similar_users: pop.similar.k(),
        users_without_neighbors: (0..ds.num_users as u32)
            .filter(|&u| pop.similar.neighbors(u).is_empty())
            .count(),
        split: ds.split_meta.clone(),
        warnings,
    };
    o.json(PREPARE_SUMMARY, "prepare-summary", &summary)?;
    o.finish()?;
    Ok(summary)
}

/// A prepared split with its popularity index.
pub struct Prepared {
    pub ds: InteractionDataset,
    pub pop: PopularityIndex,
}

fn read_prepared_dataset(cfg: &RunConfig, out: &Path, stage: &'static str) -> Result<InteractionDataset, CliError> {
    let ids_path = out.join(IDS_FILE);
    let split_path = out.join(SPLIT_FILE);
    if !ids_path.exists() || !split_path.exists() {
        return Err(CliError::data(
            stage,
            format!("no prepared split in {}; run `ppac prepare` first", out.display()),
        ));
    }
    let ids_text = std::fs::read_to_string(&ids_path).map_err(|e| CliError::io(stage, &ids_path, e))?;
    let ids: IdTables =
        serde_json::from_str(&ids_text).map_err(|e| CliError::data(stage, format!("{}: {e}", ids_path.display())))?;
    if let Some(meta) = &ids.split {
        if meta.seed != cfg.split_seed || meta.test_frac != cfg.test_frac || meta.valid_frac != cfg.valid_frac {
            return Err(CliError::Config(format!(
                "{stage}: the prepared split used seed={} test_frac={} valid_frac={}; re-run prepare for the current settings",
                meta.seed, meta.test_frac, meta.valid_frac
            )));
        }
    }
    let file = File::open(&split_path).map_err(|e| CliError::io(stage, &split_path, e))?;
    read_manifest(BufReader::new(file), Some(ids.user_ids), Some(ids.item_ids), ids.split)
        .map_err(|e| CliError::data_err(stage, e))
}

/// Popularity index for `k`, from the cache when it matches the dataset and `k`.
fn popularity_for(ds: &InteractionDataset, out: &Path, k: usize, stage: &'static str) -> Result<PopularityIndex, CliError> {
    let digest = ds.content_digest();
    let path = out.join(INDEX_FILE);
    let cached = match File::open(&path) {
        Ok(f) => read_index_cache(BufReader::new(f), &digest).map_err(|e| CliError::popularity(stage, e))?,
        Err(_) => None,
    };
    let wanted_k = k.min(ds.num_users.saturating_sub(1));
    match cached {
        Some(similar) if k > 0 && similar.k() == wanted_k => Ok(PopularityIndex {
            gp: ppac::popularity::compute_gp(ds).map_err(|e| CliError::popularity(stage, e))?,
            similar,
        }),
        _ => PopularityIndex::build(ds, k).map_err(|e| CliError::popularity(stage, e)),
    }
}

pub fn load_prepared(cfg: &RunConfig, out: &Path, stage: &'static str) -> Result<Prepared, CliError> {
    let ds = read_prepared_dataset(cfg, out, stage)?;
    let pop = popularity_for(&ds, out, cfg.k, stage)?;
    Ok(Prepared { ds, pop })
}

fn checkpoint_path(cfg: &RunConfig, out: &Path) -> PathBuf {
    cfg.checkpoint
        .clone()
        .unwrap_or_else(|| out.join(format!("checkpoint-{}.bin", cfg.run_id())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub run_id: String,
    pub model: String,
    pub variant: String,
    pub seed: u64,
    pub dataset_hash: String,
    pub best_epoch: usize,
    pub best_val_recall: Option<f64>,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub checkpoint: String,
    pub log: String,
}

/// Trains the configured model and writes the best checkpoint and the epoch log.
pub fn train(
    cfg: &RunConfig,
    out: &Path,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<(TrainSummary, TrainOutcome), CliError> {
    if cfg.ranker != RankerKind::Model {
        return Err(CliError::Config(format!("ranker = {} has nothing to train", cfg.ranker)));
    }
    let p = load_prepared(cfg, out, "train")?;
    let spec = cfg.model_spec(p.ds.num_users, p.ds.num_items);
    let mut bundle = ScorerBundle::init(spec, &p.ds, cfg.train.seed).map_err(|e| CliError::model("train", e))?;
    let run_id = cfg.run_id();
    let mut o = Outputs::new(out, "train", &format!("train-{run_id}"), cfg)?;

    let log_name = format!("train_log-{run_id}.jsonl");
    let log_path = o.path(&log_name);
    let log_file = File::create(&log_path).map_err(|e| CliError::io("train", &log_path, e))?;
    let mut log = BufWriter::new(log_file);
    let mut log_error = None;
    let result = train_model(
        &mut bundle,
        &p.ds,
        &p.pop,
        &cfg.train_config(),
        &cfg.inference_config(),
        &mut |rec| {
            let line = serde_json::to_string(rec).expect("record serializes");
            if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
                log_error.get_or_insert(e);
            }
            on_epoch(rec);
        },
    );
    drop(log);
    o.written.push((log_name.clone(), "train-log"));
    if let Some(e) = log_error {
        return Err(CliError::io("train", &log_path, e));
    }
    let outcome = match result {
        Ok(outcome) => outcome,
        Err(e) => {
            o.finish()?;
            return Err(CliError::engine("train", e));
        }
    };

    let ckpt_name = format!("checkpoint-{run_id}.bin");
    let digest = p.ds.content_digest();
    o.write_with(&ckpt_name, "checkpoint", |w| {
        bundle.save(w, digest).map_err(|e| CliError::model("train", e))
    })?;
    let summary = TrainSummary {
        run_id: run_id.clone(),
        model: cfg.model.to_string(),
        variant: cfg.variant().training_variant().to_string(),
        seed: cfg.train.seed,
        dataset_hash: p.ds.content_hash(),
        best_epoch: outcome.best_epoch,
        best_val_recall: outcome.best_val_recall,
        epochs_run: outcome.epochs_run,
        stopped_early: outcome.stopped_early,
        checkpoint: ckpt_name,
        log: log_name,
    };
    o.json(&format!("train_summary-{run_id}.json"), "train-summary", &summary)?;
    o.finish()?;
    Ok((summary, outcome))
}

fn load_bundle(cfg: &RunConfig, out: &Path, ds: &InteractionDataset, stage: &'static str) -> Result<ScorerBundle, CliError> {
    let path = checkpoint_path(cfg, out);
    let file = File::open(&path).map_err(|e| CliError::io(stage, &path, e))?;
    ScorerBundle::load(&mut BufReader::new(file), ds).map_err(|e| CliError::model(stage, e))
}

/// Name fragment shared by every file of one evaluation.
pub fn eval_tag(cfg: &RunConfig) -> String {
    match cfg.ranker {
        RankerKind::Model => format!("{}-{}", cfg.run_id(), cfg.variant()),
        other => other.to_string(),
    }
}

/// Ranks every user with test items and scores the lists on the test split.
fn evaluate_lists(
    cfg: &RunConfig,
    ds: &InteractionDataset,
    pop: &PopularityIndex,
    snapshot: Option<&InferenceSnapshot>,
    stage: &'static str,
) -> Result<EvalReport, CliError> {
    let users: Vec<u32> = (0..ds.num_users as u32).filter(|&u| !ds.test.items(u).is_empty()).collect();
    let ranker = match (cfg.ranker, snapshot) {
        (RankerKind::Model, Some(snap)) => Ranker::Model(
            UserScorer::new(snap, &cfg.inference_config(), ds, pop).map_err(|e| CliError::engine(stage, e))?,
        ),
        (RankerKind::Model, None) => unreachable!("model evaluation always has a snapshot"),
        (RankerKind::MostPop, _) => Ranker::MostPop,
        (RankerKind::MostPPop, _) => Ranker::MostPPop,
    };
    let lists = rank_users(&ranker, ds, pop, &users, cfg.top_k);
    let groups = groups_by_count(ds, &cfg.group_bounds).map_err(|e| CliError::eval(stage, e))?;
    let head_tail = head_tail_groups(ds, cfg.head_frac);
    let model = cfg.ranker == RankerKind::Model;
    let run = RunInfo {
        run_id: cfg.run_id(),
        ranker: if model { cfg.model.to_string() } else { cfg.ranker.to_string() },
        variant: model.then(|| cfg.variant().to_string()),
        gamma: model.then_some(cfg.gamma),
        beta: model.then_some(cfg.beta),
        list_length: cfg.top_k,
        similar_users: pop.similar.k(),
        seed: if model { cfg.train.seed } else { cfg.split_seed },
        dataset_hash: ds.content_hash(),
        split: "test".into(),
    };
    Ok(build_report(run, &lists, ds, pop, &ds.test, &groups, &head_tail))
}

fn write_report(o: &mut Outputs<'_>, tag: &str, report: &EvalReport) -> Result<(), CliError> {
    let mut json = report.to_json();
    json.push('\n');
    o.write(&format!("report-{tag}.json"), "eval-report", json.as_bytes())?;
    o.write(&format!("metrics-{tag}.csv"), "eval-metrics", report.metrics_csv().as_bytes())?;
    o.write(
        &format!("groups-{tag}.csv"),
        "eval-item-groups",
        EvalReport::groups_csv(&report.item_groups).as_bytes(),
    )?;
    o.write(
        &format!("headtail-{tag}.csv"),
        "eval-head-tail",
        EvalReport::groups_csv(&report.head_tail).as_bytes(),
    )
}

/// Evaluates the configured ranker on the test split and writes the report.
pub fn eval(cfg: &RunConfig, out: &Path) -> Result<EvalReport, CliError> {
    let p = load_prepared(cfg, out, "eval")?;
    let bundle = match cfg.ranker {
        RankerKind::Model => Some(load_bundle(cfg, out, &p.ds, "eval")?),
        _ => None,
    };
    let snapshot = bundle.as_ref().map(ScorerBundle::snapshot);
    let report = evaluate_lists(cfg, &p.ds, &p.pop, snapshot.as_ref(), "eval")?;
    let tag = eval_tag(cfg);
    let mut o = Outputs::new(out, "eval", &format!("eval-{tag}"), cfg)?;
    write_report(&mut o, &tag, &report)?;
    o.finish()?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    Gamma,
    Beta,
    K,
}

impl std::str::FromStr for SweepParam {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gamma" => Ok(SweepParam::Gamma),
            "beta" => Ok(SweepParam::Beta),
            "k" => Ok(SweepParam::K),
            _ => Err(format!("cannot sweep {s:?}; expected gamma, beta or k")),
        }
    }
}

impl std::fmt::Display for SweepParam {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SweepParam::Gamma => "gamma",
            SweepParam::Beta => "beta",
            SweepParam::K => "k",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub recall: f64,
    pub ndcg: f64,
    pub pru: Option<f64>,
    pub ppru: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Re-evaluates one checkpoint per value. γ and β only change inference;
/// each k rebuilds the similar-user index.
pub fn sweep(cfg: &RunConfig, out: &Path, param: SweepParam, values: &[f64]) -> Result<Vec<SweepRow>, CliError> {
    if values.is_empty() {
        return Err(CliError::Config("sweep needs at least one value".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(CliError::Config("sweep values must be finite".into()));
    }
    if param == SweepParam::K && values.iter().any(|&v| v < 1.0 || v.fract() != 0.0) {
        return Err(CliError::Config("k values must be positive integers".into()));
    }
    let ds = read_prepared_dataset(cfg, out, "sweep")?;
    let bundle = match cfg.ranker {
        RankerKind::Model => Some(load_bundle(cfg, out, &ds, "sweep")?),
        _ => None,
    };
    let snapshot = bundle.as_ref().map(ScorerBundle::snapshot);
    let base_pop = match param {
        SweepParam::K => None,
        _ => Some(popularity_for(&ds, out, cfg.k, "sweep")?),
    };

    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let mut c = cfg.clone();
        let rebuilt;
        let pop = match param {
            SweepParam::Gamma => {
                c.gamma = value;
                base_pop.as_ref().expect("built above")
            }
            SweepParam::Beta => {
                c.beta = value;
                base_pop.as_ref().expect("built above")
            }
            SweepParam::K => {
                c.k = value as usize;
                rebuilt = popularity_for(&ds, out, c.k, "sweep")?;
                &rebuilt
            }
        };
        let report = evaluate_lists(&c, &ds, pop, snapshot.as_ref(), "sweep")?;
        rows.push(SweepRow {
            value,
            recall: report.metrics.recall,
            ndcg: report.metrics.ndcg,
            pru: report.metrics.pru,
            ppru: report.metrics.ppru,
        });
    }

    let tag = format!("{param}-{}", eval_tag(cfg));
    let mut o = Outputs::new(out, "sweep", &format!("sweep-{tag}"), cfg)?;
    let mut csv = String::from("value,recall,ndcg,pru,ppru\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{},{},{}\n", r.value, r.recall, r.ndcg, opt(r.pru), opt(r.ppru)));
    }
    o.write(&format!("sweep-{tag}.csv"), "sweep-table", csv.as_bytes())?;
    o.json(&format!("sweep-{tag}.json"), "sweep-rows", &rows)?;
    o.finish()?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub dataset_hash: String,
    pub similar_users: usize,
    pub overlap: OverlapReport,
    pub rating_groups: Option<Vec<RatingGroup>>,
    /// Why the rating analysis was skipped.
    pub rating_unavailable: Option<String>,
}

/// PP-versus-GP overlap and mean rating by PP rank.
pub fn analyze(cfg: &RunConfig, out: &Path) -> Result<AnalysisReport, CliError> {
    let p = load_prepared(cfg, out, "analyze")?;
    let overlap =
        pp_gp_overlap(&p.pop, &p.ds, cfg.overlap_n, cfg.overlap_bucket).map_err(|e| CliError::eval("analyze", e))?;
    let (rating_groups, rating_unavailable) = match rating_vs_pp_rank(&p.pop, &p.ds, cfg.rating_groups) {
        Ok(g) => (Some(g), None),
        Err(e @ EvalError::NoRatings) => (None, Some(e.to_string())),
        Err(e) => return Err(CliError::eval("analyze", e)),
    };
    let report = AnalysisReport {
        dataset_hash: p.ds.content_hash(),
        similar_users: p.pop.similar.k(),
        overlap,
        rating_groups,
        rating_unavailable,
    };
    let mut o = Outputs::new(out, "analyze", "analyze", cfg)?;
    o.json("analysis.json", "analysis", &report)?;
    let mut hist = String::from("lo,hi,users\n");
    for b in &report.overlap.histogram {
        hist.push_str(&format!("{},{},{}\n", b.lo, b.hi, b.users));
    }
    o.write("overlap_histogram.csv", "overlap-histogram", hist.as_bytes())?;
    if let Some(groups) = &report.rating_groups {
        let mut csv = String::from("group,num_items,mean_pp,mean_rating,ratings\n");
        for g in groups {
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                g.group,
                g.num_items,
                g.mean_pp,
                opt(g.mean_rating),
                g.ratings
            ));
        }
        o.write("rating_groups.csv", "rating-groups", csv.as_bytes())?;
    }
    o.finish()?;
    Ok(report)
}
