//! Token error rate, pseudo-label quality against hidden references, and the
//! per-evaluation metrics stream.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ctc::TokenSeq;
use crate::data::ReferenceOracle;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("hypotheses ({hyps}) and references ({refs}) differ in count")]
    LengthMismatch { hyps: usize, refs: usize },
    #[error("total reference length is zero")]
    EmptyReferences,
    #[error("no reference for utterance {0}")]
    MissingReference(String),
    #[error("update index {index} does not follow {last}")]
    NonMonotoneIndex { index: u64, last: u64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad metrics line: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Levenshtein distance with unit insert, delete and substitute costs.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, &x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Pooled error rate: summed distances over summed reference lengths.
pub fn error_rate(hyps: &[TokenSeq], refs: &[TokenSeq]) -> Result<f64, EvalError> {
    if hyps.len() != refs.len() {
        return Err(EvalError::LengthMismatch {
            hyps: hyps.len(),
            refs: refs.len(),
        });
    }
    pooled(hyps.iter().zip(refs).map(|(h, r)| (h.tokens(), r.tokens())))
}

fn pooled<'a>(pairs: impl Iterator<Item = (&'a [usize], &'a [usize])>) -> Result<f64, EvalError> {
    let (mut dist, mut len) = (0usize, 0usize);
    for (h, r) in pairs {
        dist += edit_distance(h, r);
        len += r.len();
    }
    if len == 0 {
        return Err(EvalError::EmptyReferences);
    }
    Ok(dist as f64 / len as f64)
}

/// Error rate of pseudo-labels `(utterance id, label)` against the hidden
/// transcripts.
pub fn pl_oracle_ter<'a>(
    labels: impl IntoIterator<Item = (&'a str, &'a TokenSeq)>,
    oracle: &ReferenceOracle,
) -> Result<f64, EvalError> {
    let pairs: Vec<(&[usize], &[usize])> = labels
        .into_iter()
        .map(|(id, pl)| {
            oracle
                .reference(id)
                .map(|r| (pl.tokens(), r.tokens()))
                .ok_or_else(|| EvalError::MissingReference(id.to_string()))
        })
        .collect::<Result<_, _>>()?;
    pooled(pairs.into_iter())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Fill,
    Main,
}

/// One evaluation point. `None` marks a quantity that does not apply or
/// could not be measured at this point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub update_index: u64,
    pub phase: Phase,
    pub dev_ter: Option<f64>,
    pub train_loss_labeled: Option<f64>,
    pub train_loss_unlabeled: Option<f64>,
    pub pl_oracle_ter: Option<f64>,
    pub empty_pl_fraction: Option<f64>,
    pub lr: f64,
    pub cache_mean_staleness: Option<f64>,
    /// Utterances skipped so far because no alignment was possible.
    pub skipped_utterances: u64,
    /// Set when this evaluation shows pseudo-label collapse or a sustained
    /// dev regression.
    #[serde(default)]
    pub divergence: bool,
    pub wall_ms: u64,
}

impl MetricsRecord {
    /// Equality ignoring wall-clock time.
    pub fn same_values(&self, other: &Self) -> bool {
        Self { wall_ms: 0, ..self.clone() } == Self { wall_ms: 0, ..other.clone() }
    }
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CURVE_FILE: &str = "learning_curve.csv";
const CURVE_HEADER: &str = "update_index,dev_ter";

struct SinkFiles {
    jsonl: BufWriter<File>,
    csv: BufWriter<File>,
}

/// Append-only record stream, mirrored to `metrics.jsonl` and a learning
/// curve CSV when backed by a directory.
pub struct MetricsSink {
    records: Vec<MetricsRecord>,
    files: Option<SinkFiles>,
    dir: Option<PathBuf>,
}

impl MetricsSink {
    pub fn in_memory() -> Self {
        Self {
            records: Vec::new(),
            files: None,
            dir: None,
        }
    }

    /// Opens the sink in `dir`. With `resume_after`, records up to and
    /// including that update index are kept and later ones dropped, so a
    /// resumed run continues the stream without duplicates; otherwise any
    /// existing stream is replaced.
    pub fn create(dir: &Path, resume_after: Option<u64>) -> Result<Self, EvalError> {
        fs::create_dir_all(dir)?;
        let mut kept = Vec::new();
        if let Some(limit) = resume_after {
            let path = dir.join(METRICS_FILE);
            if path.exists() {
                for line in BufReader::new(File::open(&path)?).lines() {
                    let line = line?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    let rec: MetricsRecord = serde_json::from_str(&line)?;
                    if rec.update_index <= limit {
                        kept.push(rec);
                    }
                }
            }
        }
        let open = |name: &str| -> Result<BufWriter<File>, EvalError> {
            Ok(BufWriter::new(
                OpenOptions::new().create(true).write(true).truncate(true).open(dir.join(name))?,
            ))
        };
        let mut sink = Self {
            records: Vec::new(),
            files: Some(SinkFiles {
                jsonl: open(METRICS_FILE)?,
                csv: open(CURVE_FILE)?,
            }),
            dir: Some(dir.to_path_buf()),
        };
        if let Some(files) = &mut sink.files {
            writeln!(files.csv, "{CURVE_HEADER}")?;
        }
        for rec in kept {
            sink.push(rec)?;
        }
        Ok(sink)
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn push(&mut self, rec: MetricsRecord) -> Result<(), EvalError> {
        if let Some(last) = self.records.last() {
            if rec.update_index <= last.update_index {
                return Err(EvalError::NonMonotoneIndex {
                    index: rec.update_index,
                    last: last.update_index,
                });
            }
        }
        if let Some(files) = &mut self.files {
            serde_json::to_writer(&mut files.jsonl, &rec)?;
            writeln!(files.jsonl)?;
            match rec.dev_ter {
                Some(ter) => writeln!(files.csv, "{},{ter}", rec.update_index)?,
                None => writeln!(files.csv, "{},", rec.update_index)?,
            }
            files.jsonl.flush()?;
            files.csv.flush()?;
        }
        self.records.push(rec);
        Ok(())
    }

    pub fn records(&self) -> &[MetricsRecord] {
        &self.records
    }

    pub fn last(&self) -> Option<&MetricsRecord> {
        self.records.last()
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>, EvalError> {
    BufReader::new(File::open(path)?)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()))
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_corpus, SplitSizes, SynthTaskConfig};
    use proptest::prelude::*;

    /// Plain exponential recursion.
    fn brute_distance(a: &[usize], b: &[usize]) -> usize {
        match (a.split_first(), b.split_first()) {
            (None, _) => b.len(),
            (_, None) => a.len(),
            (Some((x, ra)), Some((y, rb))) => {
                let sub = brute_distance(ra, rb) + usize::from(x != y);
                let del = brute_distance(ra, b) + 1;
                let ins = brute_distance(a, rb) + 1;
                sub.min(del).min(ins)
            }
        }
    }

    fn seq(v: &[usize]) -> TokenSeq {
        TokenSeq::new(v.to_vec())
    }

    #[test]
    fn simple_distances() {
        assert_eq!(edit_distance(&[0, 1, 2], &[0, 1, 2]), 0);
        // "abc" vs "axc"
        assert_eq!(edit_distance(&[0, 1, 2], &[0, 23, 2]), 1);
        assert_eq!(edit_distance(&[], &[1, 2]), 2);
        assert_eq!(edit_distance(&[1, 2, 3], &[]), 3);
    }

    #[test]
    fn error_rate_edge_cases() {
        let refs = vec![seq(&[1, 2]), seq(&[3])];
        assert_eq!(error_rate(&refs, &refs).unwrap(), 0.0);
        assert_eq!(error_rate(&[TokenSeq::empty(), TokenSeq::empty()], &refs).unwrap(), 1.0);
        assert!(matches!(
            error_rate(&[TokenSeq::empty()], &[TokenSeq::empty()]),
            Err(EvalError::EmptyReferences)
        ));
        assert!(matches!(error_rate(&refs[..1], &refs), Err(EvalError::LengthMismatch { .. })));
    }

    #[test]
    fn pooled_rate_by_hand() {
        // distances 1, 0, 3 over reference lengths 4, 2, 3: 4/9, while the
        // per-utterance average would be (0.25 + 0 + 1) / 3
        let refs = vec![seq(&[0, 1, 2, 3]), seq(&[4, 5]), seq(&[1, 1, 1])];
        let hyps = vec![seq(&[0, 1, 2]), seq(&[4, 5]), seq(&[])];
        let rate = error_rate(&hyps, &refs).unwrap();
        assert!((rate - 4.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn oracle_rate_uses_hidden_references() {
        let corpus = generate_corpus(
            &SynthTaskConfig::desk(),
            SplitSizes {
                labeled: 1,
                unlabeled: 6,
                dev: 1,
                test: 1,
            },
            0,
        )
        .unwrap();
        let (data, oracle) = corpus.training_view().unwrap();
        let truth: Vec<TokenSeq> = data
            .unlabeled
            .iter()
            .map(|u| oracle.reference(&u.id).unwrap().clone())
            .collect();
        let ids: Vec<&str> = data.unlabeled.iter().map(|u| u.id.as_str()).collect();
        assert_eq!(pl_oracle_ter(ids.iter().copied().zip(&truth), &oracle).unwrap(), 0.0);
        let empty = vec![TokenSeq::empty(); ids.len()];
        assert_eq!(pl_oracle_ter(ids.iter().copied().zip(&empty), &oracle).unwrap(), 1.0);
        let unknown = TokenSeq::empty();
        assert!(matches!(
            pl_oracle_ter([("L00000", &unknown)], &oracle),
            Err(EvalError::MissingReference(_))
        ));
    }

    fn record(index: u64, dev: Option<f64>) -> MetricsRecord {
        MetricsRecord {
            update_index: index,
            phase: Phase::Main,
            dev_ter: dev,
            train_loss_labeled: Some(1.5),
            train_loss_unlabeled: None,
            pl_oracle_ter: None,
            empty_pl_fraction: Some(0.0),
            lr: 0.1,
            cache_mean_staleness: None,
            skipped_utterances: 0,
            divergence: false,
            wall_ms: index * 3,
        }
    }

    #[test]
    fn sink_rejects_non_increasing_index() {
        let mut sink = MetricsSink::in_memory();
        sink.push(record(5, None)).unwrap();
        assert!(matches!(sink.push(record(5, None)), Err(EvalError::NonMonotoneIndex { .. })));
        assert!(sink.push(record(4, None)).is_err());
        sink.push(record(6, None)).unwrap();
        assert_eq!(sink.records().len(), 2);
    }

    #[test]
    fn sink_files_and_resume_truncation() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut sink = MetricsSink::create(dir.path(), None).unwrap();
            for i in 1..=5 {
                sink.push(record(i * 10, Some(0.5 / i as f64))).unwrap();
            }
        }
        let recs = read_metrics(&dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(recs.len(), 5);
        assert_eq!(recs[2], record(30, Some(0.5 / 3.0)));
        let csv = fs::read_to_string(dir.path().join(CURVE_FILE)).unwrap();
        assert_eq!(csv.lines().next(), Some(CURVE_HEADER));
        assert_eq!(csv.lines().count(), 6);

        let mut sink = MetricsSink::create(dir.path(), Some(30)).unwrap();
        assert_eq!(sink.records().len(), 3);
        sink.push(record(40, None)).unwrap();
        drop(sink);
        let recs = read_metrics(&dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(recs.iter().map(|r| r.update_index).collect::<Vec<_>>(), vec![10, 20, 30, 40]);
        let csv = fs::read_to_string(dir.path().join(CURVE_FILE)).unwrap();
        assert_eq!(csv.lines().last(), Some("40,"));
    }

    #[test]
    fn same_values_ignores_wall_clock() {
        let a = record(1, Some(0.2));
        let b = MetricsRecord { wall_ms: 999, ..a.clone() };
        assert!(a.same_values(&b));
        assert!(!a.same_values(&record(2, Some(0.2))));
    }

    fn small_seq() -> impl Strategy<Value = Vec<usize>> {
        proptest::collection::vec(0usize..3, 0..=6)
    }

    proptest! {
        #[test]
        fn distance_matches_brute_force(a in small_seq(), b in small_seq()) {
            prop_assert_eq!(edit_distance(&a, &b), brute_distance(&a, &b));
        }

        #[test]
        fn distance_is_a_metric(a in small_seq(), b in small_seq(), c in small_seq()) {
            let ab = edit_distance(&a, &b);
            prop_assert_eq!(ab, edit_distance(&b, &a));
            prop_assert_eq!(ab == 0, a == b);
            prop_assert!(edit_distance(&a, &c) <= ab + edit_distance(&b, &c));
        }

        #[test]
        fn rate_is_order_invariant(
            pairs in proptest::collection::vec((small_seq(), proptest::collection::vec(0usize..3, 1..=6)), 1..8),
            rot in 0usize..8,
        ) {
            let hyps: Vec<TokenSeq> = pairs.iter().map(|(h, _)| TokenSeq::new(h.clone())).collect();
            let refs: Vec<TokenSeq> = pairs.iter().map(|(_, r)| TokenSeq::new(r.clone())).collect();
            let k = rot % hyps.len();
            let mut h2 = hyps.clone();
            let mut r2 = refs.clone();
            h2.rotate_left(k);
            r2.rotate_left(k);
            h2.reverse();
            r2.reverse();
            prop_assert_eq!(error_rate(&hyps, &refs).unwrap(), error_rate(&h2, &r2).unwrap());
        }
    }
}
