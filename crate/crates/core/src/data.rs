//! Synthetic transcription corpus: random token strings rendered as noisy
//! prototype frames of variable duration, normalized per utterance.

use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};
use std::sync::Arc;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binio::{BinReader, BinWriter, FormatError};
use crate::ctc::TokenSeq;

const CORPUS_MAGIC: &[u8; 8] = b"SLIPCORP";
const CORPUS_FORMAT: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid task config: {0}")]
    InvalidConfig(String),
    #[error("utterance {0} in a labeled split has no reference")]
    MissingReference(String),
    #[error("duplicate utterance id {0}")]
    DuplicateId(String),
    #[error(transparent)]
    Format(#[from] FormatError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthTaskConfig {
    pub vocab_size: usize,
    pub feature_dim: usize,
    /// Inclusive `[d_min, d_max]` frames emitted per token.
    pub frames_per_token: [usize; 2],
    pub noise_std: f64,
    pub prototype_seed: u64,
    /// Inclusive `[min, max]` tokens per utterance.
    pub length_range: [usize; 2],
    /// Fraction of the unlabeled split replaced by pure-noise utterances with
    /// an empty reference.
    #[serde(default)]
    pub unlabeled_silence_fraction: f64,
}

impl SynthTaskConfig {
    /// The default desk-scale task.
    pub fn desk() -> Self {
        Self {
            vocab_size: 28,
            feature_dim: 64,
            frames_per_token: [3, 6],
            noise_std: 0.3,
            prototype_seed: 1234,
            length_range: [4, 10],
            unlabeled_silence_fraction: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidConfig(m));
        if self.vocab_size == 0 || self.feature_dim == 0 {
            return bad("vocab_size and feature_dim must be positive".into());
        }
        let [dmin, dmax] = self.frames_per_token;
        if dmin == 0 || dmin > dmax {
            return bad(format!("frames_per_token {:?} must satisfy 1 <= min <= max", self.frames_per_token));
        }
        let [lmin, lmax] = self.length_range;
        if lmin > lmax || lmax == 0 {
            return bad(format!("length_range {:?} must satisfy min <= max, max >= 1", self.length_range));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be finite and >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.unlabeled_silence_fraction) {
            return bad("unlabeled_silence_fraction must be in [0, 1]".into());
        }
        Ok(())
    }

    /// `V` unit-norm prototype vectors, one per row.
    pub fn prototypes(&self) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.prototype_seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut protos: Array2<f64> = Array2::from_shape_simple_fn((self.vocab_size, self.feature_dim), || normal.sample(&mut rng));
        for mut row in protos.axis_iter_mut(Axis(0)) {
            let norm = row.dot(&row).sqrt();
            row.mapv_inplace(|v| v / norm);
        }
        protos
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub labeled: usize,
    pub unlabeled: usize,
    pub dev: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    /// 250 / 5000 / 200 / 500, roughly a 1:20 labeled-to-unlabeled ratio.
    fn default() -> Self {
        Self {
            labeled: 250,
            unlabeled: 5000,
            dev: 200,
            test: 500,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Labeled,
    Unlabeled,
    Dev,
    Test,
}

impl Split {
    fn code(self) -> u8 {
        match self {
            Split::Labeled => 0,
            Split::Unlabeled => 1,
            Split::Dev => 2,
            Split::Test => 3,
        }
    }

    fn from_code(c: u8) -> Result<Self, FormatError> {
        Ok(match c {
            0 => Split::Labeled,
            1 => Split::Unlabeled,
            2 => Split::Dev,
            3 => Split::Test,
            _ => return Err(FormatError::Corrupt(format!("bad split code {c}"))),
        })
    }

    pub fn prefix(self) -> char {
        match self {
            Split::Labeled => 'L',
            Split::Unlabeled => 'U',
            Split::Dev => 'D',
            Split::Test => 'T',
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub features: Array2<f64>,
    pub reference: Option<TokenSeq>,
    /// Set when normalization met a zero-variance input.
    pub degenerate: bool,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.features.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplit {
    pub labeled: Vec<Utterance>,
    pub unlabeled: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

/// Normalizes all cells to zero mean and unit (population) variance. A
/// zero-variance input comes back as zeros with the flag set.
pub fn normalize(mut utt: Utterance) -> Utterance {
    let n = utt.features.len() as f64;
    let mean = utt.features.sum() / n;
    let var = utt.features.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var <= f64::EPSILON * mean.abs().max(1.0) || !var.is_finite() {
        utt.features.fill(0.0);
        utt.degenerate = true;
    } else {
        let inv = 1.0 / var.sqrt();
        utt.features.mapv_inplace(|v| (v - mean) * inv);
    }
    utt
}

/// Renders tokens as prototype frames plus isotropic Gaussian noise, before
/// normalization.
pub fn render_frames(
    tokens: &[usize],
    cfg: &SynthTaskConfig,
    prototypes: &Array2<f64>,
    rng: &mut impl Rng,
) -> Array2<f64> {
    let [dmin, dmax] = cfg.frames_per_token;
    let durations: Vec<usize> = tokens.iter().map(|_| rng.random_range(dmin..=dmax)).collect();
    let total: usize = durations.iter().sum();
    let mut out = Array2::zeros((total, cfg.feature_dim));
    let noise = Normal::new(0.0, cfg.noise_std.max(0.0)).expect("finite std");
    let mut t = 0;
    for (&tok, &d) in tokens.iter().zip(&durations) {
        for _ in 0..d {
            let mut row = out.row_mut(t);
            row.assign(&prototypes.row(tok));
            if cfg.noise_std > 0.0 {
                row.mapv_inplace(|v| v + noise.sample(rng));
            }
            t += 1;
        }
    }
    out
}

fn random_tokens(cfg: &SynthTaskConfig, rng: &mut impl Rng) -> Vec<usize> {
    let [lmin, lmax] = cfg.length_range;
    let len = rng.random_range(lmin..=lmax);
    (0..len).map(|_| rng.random_range(0..cfg.vocab_size)).collect()
}

fn silence_frames(cfg: &SynthTaskConfig, rng: &mut impl Rng) -> Array2<f64> {
    let tokens = random_tokens(cfg, rng);
    let [dmin, dmax] = cfg.frames_per_token;
    let frames: usize = tokens.iter().map(|_| rng.random_range(dmin..=dmax)).sum::<usize>().max(1);
    let noise = Normal::new(0.0, cfg.noise_std.max(1e-3)).expect("finite std");
    Array2::from_shape_simple_fn((frames, cfg.feature_dim), || noise.sample(rng))
}

/// Deterministic corpus for `(cfg, sizes, seed)`.
pub fn generate_corpus(cfg: &SynthTaskConfig, sizes: SplitSizes, seed: u64) -> Result<CorpusSplit, DataError> {
    cfg.validate()?;
    let prototypes = cfg.prototypes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let silent: HashSet<usize> = {
        let k = (cfg.unlabeled_silence_fraction * sizes.unlabeled as f64).round() as usize;
        rand::seq::index::sample(&mut rng, sizes.unlabeled, k.min(sizes.unlabeled))
            .into_iter()
            .collect()
    };
    let make = |split: Split, count: usize, rng: &mut ChaCha8Rng| -> Vec<Utterance> {
        (0..count)
            .map(|i| {
                let id = format!("{}{i:05}", split.prefix());
                let (features, reference) = if split == Split::Unlabeled && silent.contains(&i) {
                    (silence_frames(cfg, rng), TokenSeq::empty())
                } else {
                    let tokens = random_tokens(cfg, rng);
                    (render_frames(&tokens, cfg, &prototypes, rng), TokenSeq::new(tokens))
                };
                normalize(Utterance {
                    id,
                    features,
                    reference: Some(reference),
                    degenerate: false,
                })
            })
            .collect()
    };
    Ok(CorpusSplit {
        labeled: make(Split::Labeled, sizes.labeled, &mut rng),
        unlabeled: make(Split::Unlabeled, sizes.unlabeled, &mut rng),
        dev: make(Split::Dev, sizes.dev, &mut rng),
        test: make(Split::Test, sizes.test, &mut rng),
    })
}

/// Seeded shuffle of `0..count` for one epoch, cut into batches; the last
/// batch may be short.
pub fn make_batches(count: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..count).collect();
    let mixed = seed ^ epoch.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mixed));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// A labeled example as the trainer sees it.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledUtterance {
    pub id: String,
    pub features: Array2<f64>,
    pub reference: TokenSeq,
}

/// An unlabeled example: features only.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledUtterance {
    pub id: String,
    pub features: Array2<f64>,
}

/// Everything the training loop may read.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub labeled: Vec<Arc<LabeledUtterance>>,
    pub unlabeled: Vec<Arc<UnlabeledUtterance>>,
    pub dev: Vec<Arc<LabeledUtterance>>,
}

impl TrainingData {
    pub fn unlabeled_index(&self) -> HashMap<&str, usize> {
        self.unlabeled.iter().enumerate().map(|(i, u)| (u.id.as_str(), i)).collect()
    }
}

/// Hidden transcripts of unlabeled utterances, used only to measure
/// pseudo-label quality.
#[derive(Debug, Clone, Default)]
pub struct ReferenceOracle {
    refs: HashMap<String, TokenSeq>,
}

impl ReferenceOracle {
    pub fn reference(&self, id: &str) -> Option<&TokenSeq> {
        self.refs.get(id)
    }

    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }
}

fn labeled_view(utts: &[Utterance]) -> Result<Vec<Arc<LabeledUtterance>>, DataError> {
    utts.iter()
        .map(|u| {
            let reference = u.reference.clone().ok_or_else(|| DataError::MissingReference(u.id.clone()))?;
            Ok(Arc::new(LabeledUtterance {
                id: u.id.clone(),
                features: u.features.clone(),
                reference,
            }))
        })
        .collect()
}

impl CorpusSplit {
    pub fn all(&self) -> impl Iterator<Item = (Split, &Utterance)> {
        self.labeled
            .iter()
            .map(|u| (Split::Labeled, u))
            .chain(self.unlabeled.iter().map(|u| (Split::Unlabeled, u)))
            .chain(self.dev.iter().map(|u| (Split::Dev, u)))
            .chain(self.test.iter().map(|u| (Split::Test, u)))
    }

    pub fn split(&self, which: Split) -> &[Utterance] {
        match which {
            Split::Labeled => &self.labeled,
            Split::Unlabeled => &self.unlabeled,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    pub fn check_disjoint(&self) -> Result<(), DataError> {
        let mut seen = HashSet::new();
        for (_, u) in self.all() {
            if !seen.insert(u.id.as_str()) {
                return Err(DataError::DuplicateId(u.id.clone()));
            }
        }
        Ok(())
    }

    /// Splits the corpus into the trainer's view, which carries no unlabeled
    /// transcripts, and an oracle holding those transcripts.
    pub fn training_view(&self) -> Result<(TrainingData, ReferenceOracle), DataError> {
        self.check_disjoint()?;
        let unlabeled = self
            .unlabeled
            .iter()
            .map(|u| {
                Arc::new(UnlabeledUtterance {
                    id: u.id.clone(),
                    features: u.features.clone(),
                })
            })
            .collect();
        let refs = self
            .unlabeled
            .iter()
            .filter_map(|u| u.reference.clone().map(|r| (u.id.clone(), r)))
            .collect();
        Ok((
            TrainingData {
                labeled: labeled_view(&self.labeled)?,
                unlabeled,
                dev: labeled_view(&self.dev)?,
            },
            ReferenceOracle { refs },
        ))
    }

    /// Corpus file: magic, format, a header (task config as JSON, split
    /// sizes, seed), then one record per utterance with id, split, optional
    /// token string, flag and a shape-prefixed little-endian f64 matrix.
    pub fn write_to<W: Write>(&self, w: &mut BinWriter<W>, cfg: &SynthTaskConfig, seed: u64) -> std::io::Result<()> {
        w.magic(CORPUS_MAGIC)?;
        w.u32(CORPUS_FORMAT)?;
        w.str(&serde_json::to_string(cfg).expect("config serializes"))?;
        for n in [self.labeled.len(), self.unlabeled.len(), self.dev.len(), self.test.len()] {
            w.usize(n)?;
        }
        w.u64(seed)?;
        for (split, u) in self.all() {
            w.str(&u.id)?;
            w.u8(split.code())?;
            match &u.reference {
                Some(r) => {
                    w.bool(true)?;
                    w.usizes(r.tokens())?;
                }
                None => w.bool(false)?,
            }
            w.bool(u.degenerate)?;
            w.matrix(&u.features)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut BinReader<R>) -> Result<(Self, CorpusHeader), DataError> {
        r.expect_magic(CORPUS_MAGIC)?;
        let format = r.u32()?;
        if format != CORPUS_FORMAT {
            return Err(FormatError::Version {
                what: "corpus",
                expected: CORPUS_FORMAT.to_string(),
                found: format.to_string(),
            }
            .into());
        }
        let config: SynthTaskConfig =
            serde_json::from_str(&r.str()?).map_err(|e| FormatError::Corrupt(format!("header config: {e}")))?;
        let sizes = SplitSizes {
            labeled: r.usize()?,
            unlabeled: r.usize()?,
            dev: r.usize()?,
            test: r.usize()?,
        };
        let seed = r.u64()?;
        let mut corpus = CorpusSplit {
            labeled: Vec::with_capacity(sizes.labeled),
            unlabeled: Vec::with_capacity(sizes.unlabeled),
            dev: Vec::with_capacity(sizes.dev),
            test: Vec::with_capacity(sizes.test),
        };
        let total = sizes.labeled + sizes.unlabeled + sizes.dev + sizes.test;
        for _ in 0..total {
            let id = r.str()?;
            let split = Split::from_code(r.u8()?)?;
            let reference = if r.bool()? { Some(TokenSeq::new(r.usizes()?)) } else { None };
            let degenerate = r.bool()?;
            let features = r.matrix()?;
            let utt = Utterance {
                id,
                features,
                reference,
                degenerate,
            };
            match split {
                Split::Labeled => corpus.labeled.push(utt),
                Split::Unlabeled => corpus.unlabeled.push(utt),
                Split::Dev => corpus.dev.push(utt),
                Split::Test => corpus.test.push(utt),
            }
        }
        if corpus.labeled.len() != sizes.labeled
            || corpus.unlabeled.len() != sizes.unlabeled
            || corpus.dev.len() != sizes.dev
            || corpus.test.len() != sizes.test
        {
            return Err(FormatError::Corrupt("split counts disagree with header".into()).into());
        }
        Ok((corpus, CorpusHeader { config, sizes, seed }))
    }

    pub fn to_bytes(&self, cfg: &SynthTaskConfig, seed: u64) -> Vec<u8> {
        let mut w = BinWriter::new(Vec::new());
        self.write_to(&mut w, cfg, seed).expect("writing to a Vec cannot fail");
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, CorpusHeader), DataError> {
        Self::read_from(&mut BinReader::new(bytes))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusHeader {
    pub config: SynthTaskConfig,
    pub sizes: SplitSizes,
    pub seed: u64,
}
