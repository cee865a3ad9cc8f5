//! Grid sweeps over the pseudo-labeling hyperparameters. Each cell is an
//! independent training run in its own directory; a failing cell is recorded
//! in the summary and the sweep moves on.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use slimipl::data::CorpusSplit;
use slimipl::trainer::{DropoutSchedule, TrainConfig, Variant};

use crate::commands::{train_on, TrainRequest};
use crate::config::ExperimentConfig;

pub const SUMMARY_FILE: &str = "summary.csv";
const SUMMARY_HEADER: &str = "cell,variant,seed,dropout,C,p,M,lambda,TER,status,error";

/// Values to sweep. An absent axis keeps the base config's value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default)]
    pub variant: Vec<Variant>,
    /// `"0.5->0.1"` lowers dropout after pretraining, `"0.5"` keeps it.
    #[serde(default)]
    pub dropout: Vec<String>,
    #[serde(default)]
    pub cache_size: Vec<usize>,
    #[serde(default)]
    pub replace_prob: Vec<f64>,
    #[serde(default)]
    pub pretrain_updates: Vec<u64>,
    /// Realized as N_U:N_L, so each value must be an integer or the
    /// reciprocal of one.
    #[serde(default)]
    pub lambda: Vec<f64>,
    #[serde(default)]
    pub seed: Vec<u64>,
}

impl GridSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// The cartesian product, varying the last axis fastest.
    pub fn cells(&self, base: &TrainConfig) -> Vec<Cell> {
        fn axis<T: Clone>(values: &[T], fallback: T) -> Vec<T> {
            if values.is_empty() {
                vec![fallback]
            } else {
                values.to_vec()
            }
        }
        let mut cells = Vec::new();
        for variant in axis(&self.variant, base.variant) {
            for dropout in axis(&self.dropout, format_dropout(&base.dropout)) {
                for &cache_size in &axis(&self.cache_size, base.cache_size) {
                    for &replace_prob in &axis(&self.replace_prob, base.replace_prob) {
                        for &pretrain_updates in &axis(&self.pretrain_updates, base.pretrain_updates) {
                            for &lambda in &axis(&self.lambda, base.lambda()) {
                                for &seed in &axis(&self.seed, base.seed) {
                                    cells.push(Cell {
                                        variant,
                                        dropout: dropout.clone(),
                                        cache_size,
                                        replace_prob,
                                        pretrain_updates,
                                        lambda,
                                        seed,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        cells
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub variant: Variant,
    pub dropout: String,
    pub cache_size: usize,
    pub replace_prob: f64,
    pub pretrain_updates: u64,
    pub lambda: f64,
    pub seed: u64,
}

pub fn format_dropout(d: &DropoutSchedule) -> String {
    if d.initial == d.after_pretrain {
        format!("{}", d.initial)
    } else {
        format!("{}->{}", d.initial, d.after_pretrain)
    }
}

pub fn parse_dropout(s: &str) -> Result<DropoutSchedule> {
    let rate = |t: &str| f64::from_str(t.trim()).map_err(|e| anyhow!("bad dropout {s:?}: {e}"));
    Ok(match s.split_once("->") {
        Some((a, b)) => DropoutSchedule {
            initial: rate(a)?,
            after_pretrain: rate(b)?,
        },
        None => {
            let r = rate(s)?;
            DropoutSchedule {
                initial: r,
                after_pretrain: r,
            }
        }
    })
}

/// `(N_L, N_U)` for a ratio `N_U / N_L`.
pub fn lambda_ratio(lambda: f64) -> Result<(u64, u64)> {
    let whole = |x: f64| (x - x.round()).abs() < 1e-9 && x.round() >= 1.0;
    if lambda >= 1.0 && whole(lambda) {
        Ok((1, lambda.round() as u64))
    } else if lambda > 0.0 && lambda < 1.0 && whole(1.0 / lambda) {
        Ok(((1.0 / lambda).round() as u64, 1))
    } else if lambda == 0.0 {
        Ok((1, 0))
    } else {
        bail!("lambda {lambda} is not an integer or the reciprocal of one")
    }
}

impl Cell {
    pub fn apply(&self, base: &TrainConfig) -> Result<TrainConfig> {
        let (labeled_updates, unlabeled_updates) = lambda_ratio(self.lambda)?;
        let cfg = TrainConfig {
            variant: self.variant,
            dropout: parse_dropout(&self.dropout)?,
            cache_size: self.cache_size,
            replace_prob: self.replace_prob,
            pretrain_updates: self.pretrain_updates,
            labeled_updates,
            unlabeled_updates,
            seed: self.seed,
            ..base.clone()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub cell: Cell,
    pub dir: PathBuf,
    pub outcome: Result<f64, String>,
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn summary_csv(results: &[CellResult]) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for (i, r) in results.iter().enumerate() {
        let c = &r.cell;
        let (ter, status, err) = match &r.outcome {
            Ok(t) => (format!("{t}"), "ok", String::new()),
            Err(e) => (String::new(), "error", e.clone()),
        };
        writeln!(
            out,
            "{i},{},{},{},{},{},{},{},{ter},{status},{}",
            c.variant,
            c.seed,
            csv_field(&c.dropout),
            c.cache_size,
            c.replace_prob,
            c.pretrain_updates,
            c.lambda,
            csv_field(&err)
        )
        .expect("writing to a String cannot fail");
    }
    out
}

/// Runs every cell under `dir/cell_NNN` and writes `dir/summary.csv`.
pub fn run_sweep(base: &ExperimentConfig, corpus: &CorpusSplit, grid: &GridSpec, dir: &Path) -> Result<Vec<CellResult>> {
    fs::create_dir_all(dir)?;
    let mut results = Vec::new();
    for (i, cell) in grid.cells(&base.train).into_iter().enumerate() {
        let cell_dir = dir.join(format!("cell_{i:03}"));
        let outcome = cell
            .apply(&base.train)
            .and_then(|train| {
                let cfg = ExperimentConfig {
                    output_dir: cell_dir.clone(),
                    train,
                    ..base.clone()
                };
                train_on(
                    &cfg,
                    corpus,
                    &TrainRequest {
                        dir: &cell_dir,
                        resume: false,
                        keep_all_checkpoints: false,
                        stop_after: None,
                    },
                )
            })
            .and_then(|s| s.final_dev_ter.context("run ended without an evaluation"))
            .map_err(|e| format!("{e:#}"));
        match &outcome {
            Ok(ter) => eprintln!("cell {i}: {cell:?} -> TER {ter:.4}"),
            Err(e) => eprintln!("cell {i}: {cell:?} failed: {e}"),
        }
        results.push(CellResult {
            cell,
            dir: cell_dir,
            outcome,
        });
        fs::write(dir.join(SUMMARY_FILE), summary_csv(&results))?;
    }
    fs::write(dir.join(SUMMARY_FILE), summary_csv(&results))?;
    Ok(results)
}
