use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::Serialize;

use slimipl::ctc::{beam_search_decode, greedy_decode, TokenSeq};
use slimipl::data::{generate_corpus, CorpusSplit, Split};
use slimipl::eval::{error_rate, read_metrics, MetricsSink, Phase, METRICS_FILE};
use slimipl::model::{ModelConfig, ModelState};
use slimipl::trainer::{RunOptions, RunSummary, Trainer, CHECKPOINT_FILE, FINAL_MODEL_FILE};

use crate::config::ExperimentConfig;

pub const CORPUS_FILE: &str = "corpus.bin";
pub const CONFIG_FILE: &str = "config.toml";
pub const EVALUATION_FILE: &str = "evaluation.json";

pub fn generate_data(cfg: &ExperimentConfig, out: &Path) -> Result<CorpusSplit> {
    let corpus = generate_corpus(&cfg.task, cfg.sizes, cfg.corpus_seed)?;
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(out, corpus.to_bytes(&cfg.task, cfg.corpus_seed)).with_context(|| format!("writing {}", out.display()))?;
    Ok(corpus)
}

/// Loads a corpus file and checks it was generated from `cfg`.
pub fn load_corpus(cfg: &ExperimentConfig, path: &Path) -> Result<CorpusSplit> {
    let bytes = fs::read(path).with_context(|| format!("reading corpus {} (run generate-data first)", path.display()))?;
    let (corpus, header) = CorpusSplit::from_bytes(&bytes)?;
    ensure!(
        header.config == cfg.task && header.sizes == cfg.sizes && header.seed == cfg.corpus_seed,
        "corpus {} was generated from a different task, split sizes or seed",
        path.display()
    );
    Ok(corpus)
}

pub struct TrainRequest<'a> {
    pub dir: &'a Path,
    pub resume: bool,
    pub keep_all_checkpoints: bool,
    pub stop_after: Option<u64>,
}

pub fn train(cfg: &ExperimentConfig, corpus: &Path, req: &TrainRequest) -> Result<RunSummary> {
    let corpus = load_corpus(cfg, corpus)?;
    train_on(cfg, &corpus, req)
}

pub fn train_on(cfg: &ExperimentConfig, corpus: &CorpusSplit, req: &TrainRequest) -> Result<RunSummary> {
    let (data, oracle) = corpus.training_view()?;
    fs::create_dir_all(req.dir)?;
    let opts = RunOptions {
        checkpoint_dir: Some(req.dir.to_path_buf()),
        keep_all_checkpoints: req.keep_all_checkpoints,
        stop_after: req.stop_after,
        trace: false,
    };
    let (mut trainer, mut sink) = if req.resume {
        let path = req.dir.join(CHECKPOINT_FILE);
        let trainer = Trainer::resume_from_path(&path, &data, Some(&oracle), Some(&cfg.train))
            .with_context(|| format!("resuming from {}", path.display()))?;
        // the trainer owns the dropout rate
        let stored = ModelConfig {
            dropout: cfg.model.dropout,
            ..trainer.model().config().clone()
        };
        ensure!(stored == cfg.model, "checkpoint model does not match the [model] section");
        let at = trainer.state().update_index;
        (trainer, MetricsSink::create(req.dir, Some(at))?)
    } else {
        fs::write(req.dir.join(CONFIG_FILE), cfg.to_toml())?;
        (
            Trainer::new(cfg.train.clone(), &cfg.model, &data, Some(&oracle))?,
            MetricsSink::create(req.dir, None)?,
        )
    };
    Ok(trainer.run(&mut sink, &opts)?)
}

pub fn load_model(path: &Path) -> Result<ModelState> {
    let bytes = fs::read(path).with_context(|| format!("reading model {}", path.display()))?;
    Ok(ModelState::from_bytes(&bytes)?)
}

#[derive(Debug, Serialize)]
pub struct DecodeReport {
    pub split: Split,
    pub utterances: usize,
    pub greedy_ter: f64,
    pub beam_ter: f64,
    pub beam_size: usize,
    pub lm_weight: f64,
    pub length_bonus: f64,
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Labeled => "labeled",
        Split::Unlabeled => "unlabeled",
        Split::Dev => "dev",
        Split::Test => "test",
    }
}

fn tokens_text(seq: &TokenSeq) -> String {
    seq.tokens().iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
}

fn check_model(model: &ModelState, cfg: &ExperimentConfig) -> Result<()> {
    let m = model.config();
    ensure!(
        m.feature_dim == cfg.task.feature_dim && m.vocab_size == cfg.task.vocab_size,
        "model has {} features and {} tokens but the corpus has {} and {}",
        m.feature_dim,
        m.vocab_size,
        cfg.task.feature_dim,
        cfg.task.vocab_size
    );
    Ok(())
}

/// Decodes one split greedily and with the configured beam search, writing
/// `decode_<split>.tsv` (id, greedy, beam, reference) and
/// `decode_<split>.json`.
pub fn decode(cfg: &ExperimentConfig, model: &ModelState, corpus: &CorpusSplit, split: Split, dir: &Path) -> Result<DecodeReport> {
    check_model(model, cfg)?;
    let utts = corpus.split(split);
    ensure!(!utts.is_empty(), "split {} is empty", split_name(split));
    let lm_corpus: Vec<TokenSeq> = corpus.labeled.iter().filter_map(|u| u.reference.clone()).collect();
    let decoder = cfg.decode.decoder(&lm_corpus, cfg.task.vocab_size)?;

    let (mut greedy, mut beam, mut refs) = (Vec::new(), Vec::new(), Vec::new());
    let mut tsv = String::from("id\tgreedy\tbeam\treference\n");
    for u in utts {
        let Some(reference) = &u.reference else {
            bail!("utterance {} has no reference", u.id);
        };
        let lp = model.forward_eval(u.features.view())?;
        let g = greedy_decode(&lp);
        let b = beam_search_decode(&lp, &decoder)?;
        tsv += &format!("{}\t{}\t{}\t{}\n", u.id, tokens_text(&g), tokens_text(&b), tokens_text(reference));
        greedy.push(g);
        beam.push(b);
        refs.push(reference.clone());
    }
    let report = DecodeReport {
        split,
        utterances: utts.len(),
        greedy_ter: error_rate(&greedy, &refs)?,
        beam_ter: error_rate(&beam, &refs)?,
        beam_size: decoder.beam_size,
        lm_weight: decoder.lm_weight,
        length_bonus: decoder.length_bonus,
    };
    fs::create_dir_all(dir)?;
    let name = split_name(split);
    fs::write(dir.join(format!("decode_{name}.tsv")), tsv)?;
    fs::write(
        dir.join(format!("decode_{name}.json")),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    Ok(report)
}

#[derive(Debug, Serialize)]
pub struct Evaluation {
    pub updates: u64,
    pub phases: Vec<Phase>,
    pub final_dev_ter: Option<f64>,
    pub best_dev_ter: Option<f64>,
    pub divergence_flags: usize,
    pub dev_ter: f64,
    pub test_ter: f64,
}

fn greedy_ter(model: &ModelState, corpus: &CorpusSplit, split: Split) -> Result<f64> {
    let mut hyps = Vec::new();
    let mut refs = Vec::new();
    for u in corpus.split(split) {
        hyps.push(greedy_decode(&model.forward_eval(u.features.view())?));
        refs.push(u.reference.clone().context("evaluation split without references")?);
    }
    ensure!(!hyps.is_empty(), "split {} is empty", split_name(split));
    Ok(error_rate(&hyps, &refs)?)
}

/// Summarizes a finished run directory and scores its final model on the
/// dev and test splits.
pub fn evaluate(cfg: &ExperimentConfig, corpus: &CorpusSplit, dir: &Path) -> Result<Evaluation> {
    let records = read_metrics(&dir.join(METRICS_FILE))?;
    let model = load_model(&dir.join(FINAL_MODEL_FILE))?;
    check_model(&model, cfg)?;
    let mut phases: Vec<Phase> = Vec::new();
    for r in &records {
        if phases.last() != Some(&r.phase) {
            phases.push(r.phase);
        }
    }
    let devs: Vec<f64> = records.iter().filter_map(|r| r.dev_ter).collect();
    let eval = Evaluation {
        updates: records.last().map_or(0, |r| r.update_index),
        phases,
        final_dev_ter: devs.last().copied(),
        best_dev_ter: devs.iter().copied().reduce(f64::min),
        divergence_flags: records.iter().filter(|r| r.divergence).count(),
        dev_ter: greedy_ter(&model, corpus, Split::Dev)?,
        test_ter: greedy_ter(&model, corpus, Split::Test)?,
    };
    let mut f = fs::File::create(dir.join(EVALUATION_FILE))?;
    writeln!(f, "{}", serde_json::to_string_pretty(&eval)?)?;
    Ok(eval)
}

pub fn corpus_path(dir: &Path, flag: Option<&Path>) -> PathBuf {
    flag.map_or_else(|| dir.join(CORPUS_FILE), Path::to_path_buf)
}
