//! The pseudo-labeling control loop and its ablation variants.
//!
//! A run moves through three phases: supervised pretraining for M updates,
//! filling the cache (one labeled update per inserted batch), then rounds of
//! N_L labeled and N_U pseudo-labeled updates. Cache-free variants skip the
//! fill phase and label a fresh unlabeled batch for every unlabeled update;
//! EMA variants label with the shadow parameters instead of the live model.

mod checkpoint;
mod config;

pub use checkpoint::{BUILD_VERSION, CHECKPOINT_FILE, FINAL_MODEL_FILE};
pub use config::{DivergenceConfig, DropoutSchedule, OptimizerConfig, TrainConfig, Variant};

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::augment::spec_augment;
use crate::binio::FormatError;
use crate::cache::{CacheError, PLCache, PendingEntry};
use crate::ctc::{ctc_loss, greedy_decode, required_frames, TokenSeq};
use crate::data::{make_batches, ReferenceOracle, TrainingData, UnlabeledUtterance};
use crate::eval::{error_rate, pl_oracle_ter, EvalError, MetricsRecord, MetricsSink, Phase};
use crate::model::{init_model, Gradients, Mode, ModelConfig, ModelError, ModelState};
use crate::optim::{AdagradState, EmaState, OptimError, PlateauScheduler, StepOutcome};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint was written by build {found}; this build is {expected}")]
    BuildVersion { expected: String, found: String },
    #[error("checkpoint config differs from the requested config")]
    ConfigMismatch,
    #[error("checkpoint does not match the corpus: {0}")]
    CorpusMismatch(String),
}

/// Pseudo-labels for one unlabeled batch.
#[derive(Debug, Clone, PartialEq)]
pub struct PlBatch {
    /// One label per input utterance.
    pub labels: Vec<TokenSeq>,
    /// Utterances that survive filtering, with their labels.
    pub kept: Vec<Arc<UnlabeledUtterance>>,
    pub kept_labels: Vec<TokenSeq>,
    pub empty: usize,
}

/// Greedy eval-mode labels on un-augmented features. Inputs too short for
/// the model get an empty label. With `filter_empty`, empty labels are
/// dropped from `kept`.
pub fn generate_pl(
    model: &ModelState,
    batch: &[Arc<UnlabeledUtterance>],
    filter_empty: bool,
) -> Result<PlBatch, ModelError> {
    let mut out = PlBatch {
        labels: Vec::with_capacity(batch.len()),
        kept: Vec::with_capacity(batch.len()),
        kept_labels: Vec::with_capacity(batch.len()),
        empty: 0,
    };
    for utt in batch {
        let label = match model.forward_eval(utt.features.view()) {
            Ok(lp) => greedy_decode(&lp),
            Err(ModelError::InputTooShort { .. }) => TokenSeq::empty(),
            Err(e) => return Err(e),
        };
        if label.is_empty() {
            out.empty += 1;
        }
        if !(filter_empty && label.is_empty()) {
            out.kept.push(Arc::clone(utt));
            out.kept_labels.push(label.clone());
        }
        out.labels.push(label);
    }
    Ok(out)
}

/// Whether the newest record in `history` signals divergence: either the
/// pseudo-labels it saw were mostly empty, or dev TER has stayed more than
/// `ter_regression` above the earlier best for the last `window`
/// evaluations.
pub fn detect_divergence(history: &[MetricsRecord], cfg: &DivergenceConfig) -> bool {
    let Some(last) = history.last() else {
        return false;
    };
    if last.empty_pl_fraction.is_some_and(|f| f > cfg.empty_fraction) {
        return true;
    }
    let n = history.len();
    if n < 2 || n <= cfg.window {
        return false;
    }
    let best_before = history[..n - cfg.window]
        .iter()
        .filter_map(|r| r.dev_ter)
        .fold(f64::INFINITY, f64::min);
    best_before.is_finite()
        && history[n - cfg.window..]
            .iter()
            .all(|r| r.dev_ter.is_some_and(|d| d > best_before + cfg.ter_regression))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchSource {
    Labeled,
    Cached { entry_id: u64, evicted: bool },
    Fresh,
}

/// Instrumentation of what the loop did, recorded when
/// [`RunOptions::trace`] is set.
#[derive(Debug, Clone, PartialEq)]
pub enum TraceEvent {
    Update {
        /// Update index before the step.
        index: u64,
        phase: Phase,
        source: BatchSource,
        mode: Mode,
        augmented: bool,
        dropout: f64,
        ids: Vec<String>,
    },
    Pseudolabel {
        index: u64,
        phase: Phase,
        mode: Mode,
        augmented: bool,
        from_ema: bool,
        ids: Vec<String>,
    },
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Run directory for checkpoints and the final model.
    pub checkpoint_dir: Option<PathBuf>,
    /// Keep a checkpoint per evaluation point, not only the latest.
    pub keep_all_checkpoints: bool,
    /// Stop after the first evaluation at or beyond this update index.
    pub stop_after: Option<u64>,
    pub trace: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HaltReason {
    MaxUpdates,
    Converged,
    /// Requested by [`RunOptions::stop_after`]; the run can be resumed.
    Stopped,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub halt: HaltReason,
    pub update_index: u64,
    pub pretrain_end: Option<u64>,
    pub final_dev_ter: Option<f64>,
    pub divergence_flags: usize,
    pub skipped_utterances: u64,
    pub empty_updates: u64,
    pub rejected_steps: u64,
    pub records: Vec<MetricsRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct BatchCursor {
    seed: u64,
    count: usize,
    batch_size: usize,
    epoch: u64,
    pos: usize,
    batches: Vec<Vec<usize>>,
}

impl BatchCursor {
    fn new(seed: u64, count: usize, batch_size: usize) -> Self {
        Self::restore(seed, count, batch_size, 0, 0)
    }

    fn restore(seed: u64, count: usize, batch_size: usize, epoch: u64, pos: usize) -> Self {
        Self {
            seed,
            count,
            batch_size,
            epoch,
            pos,
            batches: make_batches(count, batch_size, seed, epoch),
        }
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.pos >= self.batches.len() {
            self.epoch += 1;
            self.pos = 0;
            self.batches = make_batches(self.count, self.batch_size, self.seed, self.epoch);
        }
        self.pos += 1;
        self.batches[self.pos - 1].clone()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct RngStreams {
    augment: ChaCha8Rng,
    dropout: ChaCha8Rng,
    cache: ChaCha8Rng,
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const LABELED_ORDER_SALT: u64 = 0x4c41_4245_4c45_4421;
const UNLABELED_ORDER_SALT: u64 = 0x554e_4c41_4245_4c21;

/// Everything a checkpoint restores.
#[derive(Debug, Clone)]
pub struct RunState {
    pub model: ModelState,
    pub optimizer: AdagradState,
    pub scheduler: PlateauScheduler,
    pub ema: Option<EmaState>,
    pub cache: Option<PLCache>,
    pub update_index: u64,
    pub phase: Phase,
    pub pretrain_end: Option<u64>,
    pub finished: Option<HaltReason>,
    pub history: Vec<MetricsRecord>,
    pub skipped_utterances: u64,
    pub empty_updates: u64,
    rngs: RngStreams,
    labeled: BatchCursor,
    unlabeled: BatchCursor,
}

/// Per-evaluation-interval accumulators; empty at every checkpoint.
#[derive(Debug, Default)]
struct Window {
    labeled_loss: f64,
    labeled_steps: u64,
    unlabeled_loss: f64,
    unlabeled_steps: u64,
    pl_generated: usize,
    pl_empty: usize,
    pl_pairs: Vec<(String, TokenSeq)>,
}

pub struct Trainer<'a> {
    cfg: TrainConfig,
    data: &'a TrainingData,
    oracle: Option<&'a ReferenceOracle>,
    state: RunState,
    window: Window,
    trace: Vec<TraceEvent>,
    tracing: bool,
    clock: Instant,
    wall_base: u64,
}

fn check_data(cfg: &TrainConfig, model: &ModelConfig, data: &TrainingData) -> Result<(), TrainError> {
    let bad = |m: String| Err(TrainError::Config(m));
    if data.labeled.len() < cfg.batch_size {
        return bad(format!(
            "{} labeled utterances cannot fill a batch of {}",
            data.labeled.len(),
            cfg.batch_size
        ));
    }
    if cfg.variant.uses_unlabeled() && data.unlabeled.len() < cfg.batch_size {
        return bad(format!(
            "{} unlabeled utterances cannot fill a batch of {}",
            data.unlabeled.len(),
            cfg.batch_size
        ));
    }
    if data.dev.is_empty() {
        return bad("the dev split is empty".into());
    }
    let dims = data
        .labeled
        .iter()
        .map(|u| u.features.ncols())
        .chain(data.unlabeled.iter().map(|u| u.features.ncols()))
        .chain(data.dev.iter().map(|u| u.features.ncols()));
    for d in dims {
        if d != model.feature_dim {
            return bad(format!("corpus has {d} features per frame, model expects {}", model.feature_dim));
        }
    }
    Ok(())
}

impl<'a> Trainer<'a> {
    /// Fresh run; the model is initialized from the config seed.
    pub fn new(
        cfg: TrainConfig,
        model_cfg: &ModelConfig,
        data: &'a TrainingData,
        oracle: Option<&'a ReferenceOracle>,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        let model_cfg = ModelConfig {
            dropout: cfg.dropout.initial,
            ..model_cfg.clone()
        };
        model_cfg.validate()?;
        check_data(&cfg, &model_cfg, data)?;
        let model = init_model(&model_cfg, &mut rng_stream(cfg.seed, 0))?;
        let o = &cfg.optimizer;
        let state = RunState {
            optimizer: AdagradState::new(&model_cfg, o.lr, o.eps)?,
            scheduler: PlateauScheduler::new(o.lr, o.patience, o.min_delta),
            ema: None,
            cache: if cfg.variant.uses_cache() {
                Some(PLCache::new(cfg.cache_size)?)
            } else {
                None
            },
            update_index: 0,
            phase: Phase::Pretrain,
            pretrain_end: None,
            finished: None,
            history: Vec::new(),
            skipped_utterances: 0,
            empty_updates: 0,
            rngs: RngStreams {
                augment: rng_stream(cfg.seed, 1),
                dropout: rng_stream(cfg.seed, 2),
                cache: rng_stream(cfg.seed, 3),
            },
            labeled: BatchCursor::new(cfg.seed ^ LABELED_ORDER_SALT, data.labeled.len(), cfg.batch_size),
            unlabeled: BatchCursor::new(cfg.seed ^ UNLABELED_ORDER_SALT, data.unlabeled.len(), cfg.batch_size),
            model,
        };
        Ok(Self::from_state(cfg, data, oracle, state))
    }

    fn from_state(
        cfg: TrainConfig,
        data: &'a TrainingData,
        oracle: Option<&'a ReferenceOracle>,
        state: RunState,
    ) -> Self {
        let wall_base = state.history.last().map_or(0, |r| r.wall_ms);
        Self {
            cfg,
            data,
            oracle,
            state,
            window: Window::default(),
            trace: Vec::new(),
            tracing: false,
            clock: Instant::now(),
            wall_base,
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn state(&self) -> &RunState {
        &self.state
    }

    pub fn model(&self) -> &ModelState {
        &self.state.model
    }

    pub fn trace(&self) -> &[TraceEvent] {
        &self.trace
    }

    pub fn history(&self) -> &[MetricsRecord] {
        &self.state.history
    }

    /// Runs until max_updates, convergence or `opts.stop_after`.
    pub fn run(&mut self, sink: &mut MetricsSink, opts: &RunOptions) -> Result<RunSummary, TrainError> {
        self.tracing = opts.trace;
        if self.state.finished == Some(HaltReason::Stopped) {
            self.state.finished = None;
        }
        while self.state.finished.is_none() {
            self.advance(sink, opts)?;
        }
        if let Some(dir) = &opts.checkpoint_dir {
            checkpoint::write_atomic(&dir.join(FINAL_MODEL_FILE), &self.state.model.to_bytes())?;
        }
        Ok(self.summary())
    }

    pub fn summary(&self) -> RunSummary {
        let s = &self.state;
        RunSummary {
            halt: s.finished.unwrap_or(HaltReason::Stopped),
            update_index: s.update_index,
            pretrain_end: s.pretrain_end,
            final_dev_ter: s.history.last().and_then(|r| r.dev_ter),
            divergence_flags: s.history.iter().filter(|r| r.divergence).count(),
            skipped_utterances: s.skipped_utterances,
            empty_updates: s.empty_updates,
            rejected_steps: s.optimizer.rejected_steps,
            records: s.history.clone(),
        }
    }

    fn hit_max(&self) -> bool {
        self.state.update_index >= self.cfg.max_updates
    }

    fn eval_due(&self) -> bool {
        let last = self.state.history.last().map_or(0, |r| r.update_index);
        self.state.update_index >= last + self.cfg.eval_every
    }

    fn pretrain_done(&self) -> bool {
        self.state.update_index >= self.cfg.pretrain_updates
            || (self.cfg.auto_pretrain && self.state.scheduler.halvings >= 1)
    }

    /// One step of the phase machine: a single update in pretrain and fill,
    /// a whole round in the main phase.
    fn advance(&mut self, sink: &mut MetricsSink, opts: &RunOptions) -> Result<(), TrainError> {
        match self.state.phase {
            Phase::Pretrain => {
                if self.cfg.variant.uses_unlabeled() && self.pretrain_done() {
                    self.evaluate(sink, opts)?;
                    if self.state.finished.is_none() || self.state.finished == Some(HaltReason::Stopped) {
                        self.end_pretrain()?;
                    }
                    return Ok(());
                }
                self.labeled_step()?;
                if self.hit_max() || self.eval_due() {
                    self.evaluate(sink, opts)?;
                }
            }
            Phase::Fill => {
                let cache_full = self.state.cache.as_ref().is_some_and(PLCache::is_full);
                if cache_full {
                    self.evaluate(sink, opts)?;
                    self.start_main()?;
                    return Ok(());
                }
                let pending = self.fresh_entry()?;
                self.state.cache.as_mut().expect("fill phase has a cache").insert(pending)?;
                self.labeled_step()?;
                if self.hit_max() {
                    self.evaluate(sink, opts)?;
                }
            }
            Phase::Main => {
                for _ in 0..self.cfg.labeled_updates {
                    self.labeled_step()?;
                    if self.hit_max() {
                        return self.evaluate(sink, opts);
                    }
                }
                for _ in 0..self.cfg.unlabeled_updates {
                    self.unlabeled_step()?;
                    if self.hit_max() {
                        return self.evaluate(sink, opts);
                    }
                }
                if self.eval_due() {
                    self.evaluate(sink, opts)?;
                }
            }
        }
        Ok(())
    }

    fn end_pretrain(&mut self) -> Result<(), TrainError> {
        self.state.pretrain_end = Some(self.state.update_index);
        if self.cfg.variant.uses_ema() {
            self.state.ema = Some(EmaState::new(&self.state.model, self.cfg.ema_decay)?);
        }
        if self.cfg.variant.uses_cache() {
            self.state.phase = Phase::Fill;
            Ok(())
        } else {
            self.start_main()
        }
    }

    fn start_main(&mut self) -> Result<(), TrainError> {
        self.state.model.set_dropout(self.cfg.dropout.after_pretrain)?;
        self.state.phase = Phase::Main;
        Ok(())
    }

    fn labeled_step(&mut self) -> Result<(), TrainError> {
        let data = self.data;
        let idx = self.state.labeled.next_batch();
        let items: Vec<(&Array2<f64>, &TokenSeq, &str)> = idx
            .iter()
            .map(|&i| {
                let u = &data.labeled[i];
                (&u.features, &u.reference, u.id.as_str())
            })
            .collect();
        if let Some(loss) = self.train_step(&items, BatchSource::Labeled)? {
            self.window.labeled_loss += loss;
            self.window.labeled_steps += 1;
        }
        Ok(())
    }

    fn unlabeled_step(&mut self) -> Result<(), TrainError> {
        let loss = if self.cfg.variant.uses_cache() {
            let mut cache = self.state.cache.take().expect("cache variant has a cache");
            let mut rng = self.state.rngs.cache.clone();
            let before = cache.replacements();
            let drawn = cache.draw_and_maybe_replace::<TrainError, _>(
                self.cfg.replace_prob,
                || self.fresh_entry(),
                &mut rng,
            );
            let evicted = cache.replacements() > before;
            self.state.cache = Some(cache);
            self.state.rngs.cache = rng;
            let entry = drawn?;
            let items: Vec<(&Array2<f64>, &TokenSeq, &str)> = entry
                .batch
                .iter()
                .zip(&entry.pls)
                .map(|(u, pl)| (&u.features, pl, u.id.as_str()))
                .collect();
            let source = BatchSource::Cached {
                entry_id: entry.entry_id,
                evicted,
            };
            self.train_step(&items, source)?
        } else {
            let pending = self.fresh_entry()?;
            let items: Vec<(&Array2<f64>, &TokenSeq, &str)> = pending
                .batch
                .iter()
                .zip(&pending.pls)
                .map(|(u, pl)| (&u.features, pl, u.id.as_str()))
                .collect();
            self.train_step(&items, BatchSource::Fresh)?
        };
        if let Some(loss) = loss {
            self.window.unlabeled_loss += loss;
            self.window.unlabeled_steps += 1;
        }
        Ok(())
    }

    /// Samples the next unlabeled batch and labels it with the current PL
    /// source.
    fn fresh_entry(&mut self) -> Result<PendingEntry, TrainError> {
        let data = self.data;
        let batch: Vec<Arc<UnlabeledUtterance>> = self
            .state
            .unlabeled
            .next_batch()
            .into_iter()
            .map(|i| Arc::clone(&data.unlabeled[i]))
            .collect();
        let filter = self.cfg.filter_empty_pls;
        let from_ema = self.cfg.variant.uses_ema();
        let pls = match self.state.ema.as_mut().filter(|_| from_ema) {
            Some(ema) => {
                let guard = ema.swap_for_inference(&mut self.state.model)?;
                generate_pl(guard.model(), &batch, filter)?
            }
            None => generate_pl(&self.state.model, &batch, filter)?,
        };
        if self.tracing {
            self.trace.push(TraceEvent::Pseudolabel {
                index: self.state.update_index,
                phase: self.state.phase,
                mode: Mode::Eval,
                augmented: false,
                from_ema,
                ids: batch.iter().map(|u| u.id.clone()).collect(),
            });
        }
        self.window.pl_generated += batch.len();
        self.window.pl_empty += pls.empty;
        self.window
            .pl_pairs
            .extend(batch.iter().zip(&pls.labels).map(|(u, l)| (u.id.clone(), l.clone())));
        Ok(PendingEntry {
            batch: pls.kept,
            pls: pls.kept_labels,
            model_version: self.state.update_index,
        })
    }

    /// One counted update on `items`. Returns the mean utterance loss when a
    /// step was applied. Utterances with no feasible alignment are skipped;
    /// a batch left empty, or one with a non-finite loss, still consumes an
    /// update index.
    fn train_step(
        &mut self,
        items: &[(&Array2<f64>, &TokenSeq, &str)],
        source: BatchSource,
    ) -> Result<Option<f64>, TrainError> {
        let mcfg = self.state.model.config().clone();
        let mut grads: Option<Gradients> = None;
        let mut loss_sum = 0.0;
        let mut used = 0usize;
        let mut non_finite = false;
        for &(features, target, _) in items {
            let frames = features.nrows();
            if frames < mcfg.conv_kernel
                || mcfg.output_frames(frames) < required_frames(target)
                || target.check_vocab(mcfg.vocab_size).is_err()
            {
                self.state.skipped_utterances += 1;
                continue;
            }
            let augmented = spec_augment(features.view(), &self.cfg.augment, &mut self.state.rngs.augment);
            let (lp, tape) = self
                .state
                .model
                .forward(augmented.view(), Mode::Train, &mut self.state.rngs.dropout)?;
            let loss = ctc_loss(&lp, target);
            if !loss.is_feasible() {
                self.state.skipped_utterances += 1;
                continue;
            }
            if !loss.loss.is_finite() {
                non_finite = true;
                break;
            }
            let g = self.state.model.backward(tape, loss.grad.view())?;
            match &mut grads {
                Some(acc) => acc.add_assign(&g),
                None => grads = Some(g),
            }
            loss_sum += loss.loss;
            used += 1;
        }
        if self.tracing {
            self.trace.push(TraceEvent::Update {
                index: self.state.update_index,
                phase: self.state.phase,
                source,
                mode: Mode::Train,
                augmented: !self.cfg.augment.is_identity(),
                dropout: self.state.model.dropout(),
                ids: items.iter().map(|(_, _, id)| id.to_string()).collect(),
            });
        }
        self.state.update_index += 1;
        let result = match grads {
            _ if non_finite => {
                self.state.optimizer.rejected_steps += 1;
                None
            }
            None => {
                self.state.empty_updates += 1;
                None
            }
            Some(mut g) => {
                g.scale(1.0 / used as f64);
                match self.state.optimizer.step(&mut self.state.model, &g)? {
                    StepOutcome::Applied => Some(loss_sum / used as f64),
                    StepOutcome::Rejected => None,
                }
            }
        };
        if let Some(ema) = &mut self.state.ema {
            ema.update(&self.state.model)?;
        }
        Ok(result)
    }

    /// Greedy dev TER of the live model.
    pub fn dev_ter(&self) -> Result<f64, TrainError> {
        let mut hyps = Vec::with_capacity(self.data.dev.len());
        let mut refs = Vec::with_capacity(self.data.dev.len());
        for u in &self.data.dev {
            hyps.push(match self.state.model.forward_eval(u.features.view()) {
                Ok(lp) => greedy_decode(&lp),
                Err(ModelError::InputTooShort { .. }) => TokenSeq::empty(),
                Err(e) => return Err(e.into()),
            });
            refs.push(u.reference.clone());
        }
        Ok(error_rate(&hyps, &refs)?)
    }

    fn evaluate(&mut self, sink: &mut MetricsSink, opts: &RunOptions) -> Result<(), TrainError> {
        let index = self.state.update_index;
        if self.state.history.last().is_some_and(|r| r.update_index == index) {
            return Ok(());
        }
        let dev_ter = self.dev_ter()?;
        let lr = self.state.scheduler.update(dev_ter);
        self.state.optimizer.lr = lr;

        let w = std::mem::take(&mut self.window);
        let mean = |sum: f64, n: u64| (n > 0).then(|| sum / n as f64);
        let pl_oracle = match self.oracle {
            Some(oracle) if !w.pl_pairs.is_empty() => {
                pl_oracle_ter(w.pl_pairs.iter().map(|(id, pl)| (id.as_str(), pl)), oracle).ok()
            }
            _ => None,
        };
        let mut record = MetricsRecord {
            update_index: index,
            phase: self.state.phase,
            dev_ter: Some(dev_ter),
            train_loss_labeled: mean(w.labeled_loss, w.labeled_steps),
            train_loss_unlabeled: mean(w.unlabeled_loss, w.unlabeled_steps),
            pl_oracle_ter: pl_oracle,
            empty_pl_fraction: (w.pl_generated > 0).then(|| w.pl_empty as f64 / w.pl_generated as f64),
            lr,
            cache_mean_staleness: self.state.cache.as_ref().and_then(|c| c.age_stats(index)).map(|s| s.mean),
            skipped_utterances: self.state.skipped_utterances,
            divergence: false,
            wall_ms: self.wall_base + self.clock.elapsed().as_millis() as u64,
        };
        self.state.history.push(record.clone());
        record.divergence = detect_divergence(&self.state.history, &self.cfg.divergence);
        *self.state.history.last_mut().expect("just pushed") = record.clone();
        sink.push(record)?;

        if self.state.scheduler.halvings >= self.cfg.optimizer.max_halvings {
            self.state.finished = Some(HaltReason::Converged);
        } else if self.hit_max() {
            self.state.finished = Some(HaltReason::MaxUpdates);
        }
        if let Some(dir) = &opts.checkpoint_dir {
            let bytes = self.checkpoint_bytes();
            checkpoint::write_atomic(&dir.join(CHECKPOINT_FILE), &bytes)?;
            if opts.keep_all_checkpoints {
                let path = dir.join(checkpoint::CHECKPOINT_DIR).join(checkpoint::indexed_name(index));
                checkpoint::write_atomic(&path, &bytes)?;
            }
        }
        if self.state.finished.is_none() && opts.stop_after.is_some_and(|s| index >= s) {
            self.state.finished = Some(HaltReason::Stopped);
        }
        Ok(())
    }
}
