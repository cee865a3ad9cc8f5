use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::binio::{BinReader, BinWriter, FormatError};
use crate::cache::PLCache;
use crate::data::{ReferenceOracle, TrainingData};
use crate::eval::{MetricsRecord, Phase};
use crate::model::ModelState;
use crate::optim::{AdagradState, EmaState, PlateauScheduler};

use super::{BatchCursor, HaltReason, RngStreams, RunState, TrainConfig, TrainError, Trainer};
use super::{LABELED_ORDER_SALT, UNLABELED_ORDER_SALT};

const RUN_MAGIC: &[u8; 8] = b"SLIPRUNS";
const RUN_FORMAT: u32 = 1;

/// Written into every checkpoint; a different build refuses to resume.
pub const BUILD_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const CHECKPOINT_FILE: &str = "checkpoint_latest.bin";
pub const FINAL_MODEL_FILE: &str = "final_model.bin";
pub(super) const CHECKPOINT_DIR: &str = "checkpoints";

pub(super) fn indexed_name(index: u64) -> String {
    format!("ckpt_{index:08}.bin")
}

/// Writes through a temporary sibling and renames it into place.
pub(super) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)
}

fn phase_code(p: Phase) -> u8 {
    match p {
        Phase::Pretrain => 0,
        Phase::Fill => 1,
        Phase::Main => 2,
    }
}

fn phase_from(c: u8) -> Result<Phase, FormatError> {
    Ok(match c {
        0 => Phase::Pretrain,
        1 => Phase::Fill,
        2 => Phase::Main,
        _ => return Err(FormatError::Corrupt(format!("bad phase code {c}"))),
    })
}

fn write_rng<W: Write>(w: &mut BinWriter<W>, rng: &ChaCha8Rng) -> std::io::Result<()> {
    w.bytes(&rng.get_seed())?;
    w.u64(rng.get_stream())?;
    w.u128(rng.get_word_pos())
}

fn read_rng<R: Read>(r: &mut BinReader<R>) -> Result<ChaCha8Rng, FormatError> {
    let seed: [u8; 32] = r
        .bytes()?
        .try_into()
        .map_err(|_| FormatError::Corrupt("rng seed is not 32 bytes".into()))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(r.u64()?);
    rng.set_word_pos(r.u128()?);
    Ok(rng)
}

fn write_opt_u64<W: Write>(w: &mut BinWriter<W>, v: Option<u64>) -> std::io::Result<()> {
    w.bool(v.is_some())?;
    w.u64(v.unwrap_or(0))
}

fn read_opt_u64<R: Read>(r: &mut BinReader<R>) -> Result<Option<u64>, FormatError> {
    let some = r.bool()?;
    let v = r.u64()?;
    Ok(some.then_some(v))
}

impl Trainer<'_> {
    /// Serializes the full run state. Only meaningful at evaluation points,
    /// where the per-interval accumulators are empty.
    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let mut w = BinWriter::new(Vec::new());
        self.write_checkpoint(&mut w).expect("writing to a Vec cannot fail");
        w.into_inner()
    }

    fn write_checkpoint<W: Write>(&self, w: &mut BinWriter<W>) -> std::io::Result<()> {
        let s = &self.state;
        w.magic(RUN_MAGIC)?;
        w.u32(RUN_FORMAT)?;
        w.str(BUILD_VERSION)?;
        w.str(&serde_json::to_string(&self.cfg).expect("config serializes"))?;
        w.usize(self.data.labeled.len())?;
        w.usize(self.data.unlabeled.len())?;
        w.usize(self.data.dev.len())?;

        w.u64(s.update_index)?;
        w.u8(phase_code(s.phase))?;
        write_opt_u64(w, s.pretrain_end)?;
        w.u8(match s.finished {
            Some(HaltReason::MaxUpdates) => 1,
            Some(HaltReason::Converged) => 2,
            _ => 0,
        })?;
        w.u64(s.skipped_utterances)?;
        w.u64(s.empty_updates)?;
        w.usize(s.history.len())?;
        for rec in &s.history {
            w.str(&serde_json::to_string(rec).expect("record serializes"))?;
        }

        for rng in [&s.rngs.augment, &s.rngs.dropout, &s.rngs.cache] {
            write_rng(w, rng)?;
        }
        for cursor in [&s.labeled, &s.unlabeled] {
            w.u64(cursor.epoch)?;
            w.usize(cursor.pos)?;
        }

        let sch = &s.scheduler;
        w.f64(sch.lr)?;
        w.u32(sch.patience)?;
        w.f64(sch.min_delta)?;
        w.opt_f64(sch.best)?;
        w.u32(sch.evals_since_best)?;
        w.u32(sch.halvings)?;

        let names = s.model.param_names();
        s.model.write_to(w)?;
        s.optimizer.write_to(w, &names)?;
        w.bool(s.ema.is_some())?;
        if let Some(ema) = &s.ema {
            ema.write_to(w, &names)?;
        }
        w.bool(s.cache.is_some())?;
        if let Some(cache) = &s.cache {
            cache.write_to(w)?;
        }
        Ok(())
    }

    /// Restores a run from checkpoint bytes. With `expected`, the stored
    /// config must match it exactly.
    pub fn resume<'a>(
        bytes: &[u8],
        data: &'a TrainingData,
        oracle: Option<&'a ReferenceOracle>,
        expected: Option<&TrainConfig>,
    ) -> Result<Trainer<'a>, TrainError> {
        let r = &mut BinReader::new(bytes);
        r.expect_magic(RUN_MAGIC)?;
        let format = r.u32()?;
        if format != RUN_FORMAT {
            return Err(FormatError::Version {
                what: "run checkpoint",
                expected: RUN_FORMAT.to_string(),
                found: format.to_string(),
            }
            .into());
        }
        let build = r.str()?;
        if build != BUILD_VERSION {
            return Err(TrainError::BuildVersion {
                expected: BUILD_VERSION.into(),
                found: build,
            });
        }
        let cfg: TrainConfig =
            serde_json::from_str(&r.str()?).map_err(|e| FormatError::Corrupt(format!("stored config: {e}")))?;
        if expected.is_some_and(|e| *e != cfg) {
            return Err(TrainError::ConfigMismatch);
        }
        let counts = (r.usize()?, r.usize()?, r.usize()?);
        let actual = (data.labeled.len(), data.unlabeled.len(), data.dev.len());
        if counts != actual {
            return Err(TrainError::CorpusMismatch(format!(
                "checkpoint split sizes {counts:?}, corpus has {actual:?}"
            )));
        }

        let update_index = r.u64()?;
        let phase = phase_from(r.u8()?)?;
        let pretrain_end = read_opt_u64(r)?;
        let finished = match r.u8()? {
            0 => None,
            1 => Some(HaltReason::MaxUpdates),
            2 => Some(HaltReason::Converged),
            c => return Err(FormatError::Corrupt(format!("bad halt code {c}")).into()),
        };
        let skipped_utterances = r.u64()?;
        let empty_updates = r.u64()?;
        let n = r.usize()?;
        let mut history = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let rec: MetricsRecord =
                serde_json::from_str(&r.str()?).map_err(|e| FormatError::Corrupt(format!("stored record: {e}")))?;
            history.push(rec);
        }

        let rngs = RngStreams {
            augment: read_rng(r)?,
            dropout: read_rng(r)?,
            cache: read_rng(r)?,
        };
        let labeled = BatchCursor::restore(
            cfg.seed ^ LABELED_ORDER_SALT,
            data.labeled.len(),
            cfg.batch_size,
            r.u64()?,
            r.usize()?,
        );
        let unlabeled = BatchCursor::restore(
            cfg.seed ^ UNLABELED_ORDER_SALT,
            data.unlabeled.len(),
            cfg.batch_size,
            r.u64()?,
            r.usize()?,
        );

        let scheduler = PlateauScheduler {
            lr: r.f64()?,
            patience: r.u32()?,
            min_delta: r.f64()?,
            best: r.opt_f64()?,
            evals_since_best: r.u32()?,
            halvings: r.u32()?,
        };

        let model = ModelState::read_from(r)?;
        let optimizer = AdagradState::read_from(r, model.config())?;
        let ema = if r.bool()? {
            Some(EmaState::read_from(r, model.config())?)
        } else {
            None
        };
        let cache = if r.bool()? {
            let index = data.unlabeled_index();
            Some(PLCache::read_from(r, |id| {
                index.get(id).map(|&i| std::sync::Arc::clone(&data.unlabeled[i]))
            })?)
        } else {
            None
        };
        let state = RunState {
            model,
            optimizer,
            scheduler,
            ema,
            cache,
            update_index,
            phase,
            pretrain_end,
            finished,
            history,
            skipped_utterances,
            empty_updates,
            rngs,
            labeled,
            unlabeled,
        };
        Ok(Trainer::from_state(cfg, data, oracle, state))
    }

    pub fn resume_from_path<'a>(
        path: &Path,
        data: &'a TrainingData,
        oracle: Option<&'a ReferenceOracle>,
        expected: Option<&TrainConfig>,
    ) -> Result<Trainer<'a>, TrainError> {
        Self::resume(&fs::read(path)?, data, oracle, expected)
    }
}
