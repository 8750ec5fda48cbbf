use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ppac_cli::commands::{self, SweepParam};
use ppac_cli::{CliError, RunConfig};

#[derive(Parser)]
#[command(name = "ppac", version, about = "Personal-popularity aware recommendation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// key = value config file; unset keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for every artifact of the run.
    #[arg(long, default_value = "runs/default")]
    out: PathBuf,
    /// Worker threads for index building and evaluation.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Override a config key; repeatable, e.g. `--set gamma=64`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Load, split and index a dataset.
    Prepare(Common),
    /// Train a model on a prepared split.
    Train(Common),
    /// Evaluate a checkpoint or a popularity baseline on the test split.
    Eval(Common),
    /// Evaluate one checkpoint across values of gamma, beta or k.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        values: Vec<f64>,
    },
    /// PP/GP overlap and rating-versus-PP analyses.
    Analyze(Common),
    /// Write the configured synthetic dataset as TSV.
    Synth(Common),
}

fn run(cli: Cli) -> Result<(), CliError> {
    let common = match &cli.command {
        Command::Prepare(c) | Command::Train(c) | Command::Eval(c) | Command::Analyze(c) | Command::Synth(c) => c,
        Command::Sweep { common, .. } => common,
    }
    .clone();
    if common.threads == 0 {
        return Err(CliError::Config("--threads must be at least 1".into()));
    }
    let mut overrides = common.overrides.clone();
    if matches!(cli.command, Command::Synth(_)) {
        overrides.insert(0, "format=synthetic".into());
    }
    let cfg = RunConfig::load(common.config.as_deref(), &overrides)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(common.threads)
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    let out = common.out.as_path();
    pool.install(|| match cli.command {
        Command::Prepare(_) => {
            let s = commands::prepare(&cfg, out)?;
            println!(
                "prepared {} users, {} items, {} interactions (train {}, valid {}, test {}); dataset {}",
                s.num_users, s.num_items, s.num_interactions, s.train, s.valid, s.test, s.dataset_hash
            );
            for w in &s.warnings {
                eprintln!("warning: {w}");
            }
            Ok(())
        }
        Command::Train(_) => {
            let quiet = common.quiet;
            let (s, _) = commands::train(&cfg, out, &mut |r| {
                if !quiet {
                    eprintln!(
                        "epoch {:>4}  L_R {:.5}  L_P {:.5}  L_G {:.5}  total {:.5}  val_recall {}",
                        r.epoch,
                        r.l_r,
                        r.l_p,
                        r.l_g,
                        r.total,
                        r.val_recall.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
                    );
                }
            })?;
            println!(
                "trained {} for {} epochs; best epoch {} (val recall {}); checkpoint {}",
                s.run_id,
                s.epochs_run,
                s.best_epoch,
                s.best_val_recall.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
                out.join(&s.checkpoint).display()
            );
            Ok(())
        }
        Command::Eval(_) => {
            let r = commands::eval(&cfg, out)?;
            let m = &r.metrics;
            let show = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
            println!(
                "{} users  Recall@{k} {:.4}  NDCG@{k} {:.4}  PRU@{k} {}  PPRU@{k} {}",
                m.evaluated_users,
                m.recall,
                m.ndcg,
                show(m.pru),
                show(m.ppru),
                k = r.run.list_length
            );
            Ok(())
        }
        Command::Sweep { param, values, .. } => {
            let param: SweepParam = param.parse().map_err(CliError::Config)?;
            let rows = commands::sweep(&cfg, out, param, &values)?;
            println!("{param},recall,ndcg,pru,ppru");
            for r in rows {
                let show = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
                println!("{},{:.4},{:.4},{},{}", r.value, r.recall, r.ndcg, show(r.pru), show(r.ppru));
            }
            Ok(())
        }
        Command::Analyze(_) => {
            let a = commands::analyze(&cfg, out)?;
            println!("mean d_u over {} users: {:.2} (n = {})", a.overlap.per_user.len(), a.overlap.mean, a.overlap.n);
            if let Some(reason) = &a.rating_unavailable {
                eprintln!("rating analysis skipped: {reason}");
            }
            Ok(())
        }
        Command::Synth(_) => {
            for p in commands::synth(&cfg, out)? {
                println!("{}", p.display());
            }
            Ok(())
        }
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
