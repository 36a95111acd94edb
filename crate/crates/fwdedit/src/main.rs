use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fwdedit::commands::{self, Log};
use fwdedit::{FwdError, Result, RunConfig};
use fwdedit_core::targets::Method;

/// Locate-then-edit experiments on a toy transformer.
#[derive(Parser)]
#[command(name = "fwdedit", version)]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replace every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic fact corpus.
    GenData {
        /// Output directory; defaults to a subdirectory of out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the toy model on a corpus.
    Train {
        /// Directory written by gen-data.
        #[arg(long)]
        corpus: PathBuf,
        /// Output directory; defaults to a subdirectory of out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Edit a trained model with one method.
    Edit {
        /// Model checkpoint (model.ckpt).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory written by gen-data.
        #[arg(long)]
        corpus: PathBuf,
        /// onelayer, memit-div (or memit), memit-nodiv, blue, fe.
        #[arg(long)]
        method: Option<Method>,
        /// Output directory; defaults to a subdirectory of out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cosine tables, residual ratios and Jacobian definiteness.
    Diagnose {
        /// The model the edit started from.
        #[arg(long)]
        checkpoint: PathBuf,
        /// record.json from the edit run.
        #[arg(long)]
        record: PathBuf,
        /// batch.json from the edit run.
        #[arg(long)]
        batch: PathBuf,
        /// Output directory; defaults to a subdirectory of out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score an edited model against the original.
    Eval {
        /// Checkpoint before editing.
        #[arg(long)]
        pre: PathBuf,
        /// Checkpoint after editing (post.ckpt).
        #[arg(long)]
        post: PathBuf,
        /// batch.json from the edit run.
        #[arg(long)]
        batch: PathBuf,
        /// Tag stored in the report.
        #[arg(long)]
        method: Option<Method>,
        /// Output directory; defaults to a subdirectory of out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Combine eval manifests into one comparison table.
    Report {
        /// manifest.json files of eval runs.
        manifests: Vec<PathBuf>,
        /// Output directory; defaults to a subdirectory of out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn out_dir(cfg: &RunConfig, flag: Option<PathBuf>, sub: &str) -> Result<PathBuf> {
    match flag {
        Some(p) => Ok(p),
        None => cfg
            .out_dir
            .as_ref()
            .map(|d| d.join(sub))
            .ok_or_else(|| FwdError::Config("no --out given and no out_dir in the config".into())),
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.override_seed(s);
    }
    let log = Log { quiet: cli.quiet };
    let manifest = match cli.cmd {
        Cmd::GenData { out } => commands::gen_data(&cfg, &out_dir(&cfg, out, "data")?, log)?,
        Cmd::Train { corpus, out } => commands::train(&cfg, &corpus, &out_dir(&cfg, out, "model")?, log)?,
        Cmd::Edit {
            checkpoint,
            corpus,
            method,
            out,
        } => {
            let m = method.unwrap_or(cfg.edit.method);
            let dir = out_dir(&cfg, out, &format!("edit-{m}"))?;
            commands::edit(&cfg, &checkpoint, &corpus, m, &dir, log)?
        }
        Cmd::Diagnose {
            checkpoint,
            record,
            batch,
            out,
        } => commands::diagnose(&cfg, &checkpoint, &record, &batch, &out_dir(&cfg, out, "diagnose")?, log)?,
        Cmd::Eval {
            pre,
            post,
            batch,
            method,
            out,
        } => {
            let m = method.unwrap_or(cfg.edit.method);
            let dir = out_dir(&cfg, out, &format!("eval-{m}"))?;
            commands::eval(&cfg, &pre, &post, &batch, m.name(), &dir, log)?
        }
        Cmd::Report { manifests, out } => commands::report(&manifests, &out_dir(&cfg, out, "report")?, log)?,
    };
    log.say(format!("{}: wrote {} files and a manifest", manifest.command, manifest.artifacts.len()));
    Ok(())
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("FWDEDIT_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| FwdError::Config(format!("FWDEDIT_THREADS must be a positive integer, got '{v}'")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| FwdError::Config(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match init_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
