use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use slimipl::data::Split;
use slimipl::trainer::{Variant, FINAL_MODEL_FILE};
use slimipl_cli::commands::{self, corpus_path, TrainRequest};
use slimipl_cli::config::ExperimentConfig;
use slimipl_cli::sweep::{run_sweep, GridSpec, SUMMARY_FILE};

#[derive(Parser)]
#[command(
    name = "slimipl",
    version,
    about = "Semi-supervised CTC training with a pseudo-label cache",
    after_help = "Relative run directories are placed under $SLIMIPL_OUTPUT_ROOT when it is set."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (TOML).
    config: PathBuf,
    /// Run directory; overrides `output_dir` from the config.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Corpus file; defaults to `<run dir>/corpus.bin`.
    #[arg(long)]
    corpus: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Labeled,
    Dev,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Labeled => Split::Labeled,
            SplitArg::Dev => Split::Dev,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the default desk-scale experiment config.
    Init {
        out: PathBuf,
        #[arg(long, default_value = "slimipl")]
        variant: Variant,
    },
    /// Generate the synthetic corpus.
    GenerateData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model; metrics, checkpoints and the final model go to the run
    /// directory.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the run directory's latest checkpoint.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        max_updates: Option<u64>,
        /// Keep one checkpoint per evaluation point.
        #[arg(long)]
        keep_checkpoints: bool,
        /// Stop (resumably) after the first evaluation at or past this update.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Decode a split greedily and with beam search and report both TERs.
    Decode {
        #[command(flatten)]
        common: Common,
        /// Model file; defaults to `<run dir>/final_model.bin`.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "dev")]
        split: SplitArg,
        #[arg(long)]
        beam_size: Option<usize>,
        #[arg(long)]
        lm_weight: Option<f64>,
        #[arg(long)]
        length_bonus: Option<f64>,
    },
    /// Summarize a finished run and score its final model on dev and test.
    Evaluate {
        #[command(flatten)]
        common: Common,
    },
    /// Train one run per grid cell and write a summary CSV.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Grid spec (TOML) with lists for variant, dropout, cache_size,
        /// replace_prob, pretrain_updates, lambda and seed.
        #[arg(long)]
        grid: PathBuf,
    },
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Init { out, variant } => {
            fs::write(&out, ExperimentConfig::desk(variant).to_toml())
                .with_context(|| format!("writing {}", out.display()))?;
        }
        Command::GenerateData { common } => {
            let cfg = ExperimentConfig::load(&common.config)?;
            let dir = cfg.run_dir(common.output_dir.as_deref());
            let out = corpus_path(&dir, common.corpus.as_deref());
            let corpus = commands::generate_data(&cfg, &out)?;
            println!(
                "wrote {} (labeled {}, unlabeled {}, dev {}, test {})",
                out.display(),
                corpus.labeled.len(),
                corpus.unlabeled.len(),
                corpus.dev.len(),
                corpus.test.len()
            );
        }
        Command::Train {
            common,
            resume,
            seed,
            variant,
            max_updates,
            keep_checkpoints,
            stop_after,
        } => {
            let mut cfg = ExperimentConfig::load(&common.config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(v) = variant {
                cfg.train.variant = v;
            }
            if let Some(m) = max_updates {
                cfg.train.max_updates = m;
            }
            cfg.validate()?;
            let dir = cfg.run_dir(common.output_dir.as_deref());
            let summary = commands::train(
                &cfg,
                &corpus_path(&dir, common.corpus.as_deref()),
                &TrainRequest {
                    dir: &dir,
                    resume,
                    keep_all_checkpoints: keep_checkpoints,
                    stop_after,
                },
            )?;
            println!(
                "{} after {} updates ({:?}); final dev TER {}",
                cfg.train.variant,
                summary.update_index,
                summary.halt,
                summary.final_dev_ter.map_or("n/a".into(), |t| format!("{t:.4}"))
            );
        }
        Command::Decode {
            common,
            model,
            split,
            beam_size,
            lm_weight,
            length_bonus,
        } => {
            let mut cfg = ExperimentConfig::load(&common.config)?;
            if let Some(b) = beam_size {
                cfg.decode.beam_size = b;
            }
            if let Some(a) = lm_weight {
                cfg.decode.lm_weight = a;
            }
            if let Some(b) = length_bonus {
                cfg.decode.length_bonus = b;
            }
            let dir = cfg.run_dir(common.output_dir.as_deref());
            let corpus = commands::load_corpus(&cfg, &corpus_path(&dir, common.corpus.as_deref()))?;
            let model = commands::load_model(&model.unwrap_or_else(|| dir.join(FINAL_MODEL_FILE)))?;
            print_json(&commands::decode(&cfg, &model, &corpus, split.into(), &dir)?)?;
        }
        Command::Evaluate { common } => {
            let cfg = ExperimentConfig::load(&common.config)?;
            let dir = cfg.run_dir(common.output_dir.as_deref());
            let corpus = commands::load_corpus(&cfg, &corpus_path(&dir, common.corpus.as_deref()))?;
            print_json(&commands::evaluate(&cfg, &corpus, &dir)?)?;
        }
        Command::Sweep { common, grid } => {
            let cfg = ExperimentConfig::load(&common.config)?;
            let grid = GridSpec::load(&grid)?;
            let dir = cfg.run_dir(common.output_dir.as_deref());
            let corpus = commands::load_corpus(&cfg, &corpus_path(&dir, common.corpus.as_deref()))?;
            let results = run_sweep(&cfg, &corpus, &grid, &dir)?;
            let failed = results.iter().filter(|r| r.outcome.is_err()).count();
            println!(
                "{} cells, {failed} failed; summary in {}",
                results.len(),
                dir.join(SUMMARY_FILE).display()
            );
            return Ok(failed == 0);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
