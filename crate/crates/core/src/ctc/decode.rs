use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{log_add, CharNGramLM, CtcError, LmSymbol, LogPosteriors, TokenSeq};

/// Merges adjacent repeats, then drops blanks.
pub fn collapse_path(path: &[usize], blank: usize) -> TokenSeq {
    let mut out = Vec::new();
    let mut prev = None;
    for &sym in path {
        if Some(sym) != prev && sym != blank {
            out.push(sym);
        }
        prev = Some(sym);
    }
    TokenSeq::new(out)
}

/// Per-frame argmax, ties resolved toward the lowest index.
pub fn greedy_path(lp: &LogPosteriors) -> Vec<usize> {
    lp.values()
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (v, &x) in row.iter().enumerate().skip(1) {
                if x > row[best] {
                    best = v;
                }
            }
            best
        })
        .collect()
}

/// Hard label: the collapsed best path.
pub fn greedy_decode(lp: &LogPosteriors) -> TokenSeq {
    collapse_path(&greedy_path(lp), lp.blank())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub beam_size: usize,
    #[serde(default)]
    pub lm_weight: f64,
    #[serde(default)]
    pub length_bonus: f64,
    #[serde(skip)]
    pub lm: Option<CharNGramLM>,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            beam_size: 1,
            lm_weight: 0.0,
            length_bonus: 0.0,
            lm: None,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<(), CtcError> {
        if self.beam_size == 0 {
            return Err(CtcError::InvalidConfig("beam_size must be at least 1".into()));
        }
        if !self.lm_weight.is_finite() || self.lm_weight < 0.0 {
            return Err(CtcError::InvalidConfig("lm_weight must be finite and >= 0".into()));
        }
        if !self.length_bonus.is_finite() {
            return Err(CtcError::InvalidConfig("length_bonus must be finite".into()));
        }
        if self.lm.is_none() && self.lm_weight != 0.0 {
            return Err(CtcError::InvalidConfig("lm_weight is nonzero but no LM is set".into()));
        }
        Ok(())
    }
}

/// A decoded label sequence with its score decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: TokenSeq,
    /// `log p(y|x)` summed over all alignments that survived the search.
    pub acoustic: f64,
    /// `log p_lm(y)` including the end marker; zero without an LM.
    pub lm: f64,
    /// `acoustic + lm_weight * lm + length_bonus * |y|`.
    pub score: f64,
}

#[derive(Debug, Clone, Copy)]
struct PrefixMass {
    blank_end: f64,
    label_end: f64,
    lm: f64,
}

impl PrefixMass {
    fn total(&self) -> f64 {
        log_add(self.blank_end, self.label_end)
    }
}

fn lm_context(prefix: &[usize]) -> Vec<LmSymbol> {
    prefix.iter().map(|&t| LmSymbol::Token(t)).collect()
}

/// Returns the best-scoring label sequence under
/// `log p(y|x) + lm_weight * log p_lm(y) + length_bonus * |y|`.
pub fn beam_search_decode(lp: &LogPosteriors, cfg: &DecoderConfig) -> Result<TokenSeq, CtcError> {
    beam_search_hypothesis(lp, cfg).map(|h| h.tokens)
}

/// Prefix beam search over collapsed label prefixes. Each prefix tracks the
/// mass of alignments ending in blank and ending in its last label so that
/// all alignments of a prefix are merged.
pub fn beam_search_hypothesis(lp: &LogPosteriors, cfg: &DecoderConfig) -> Result<Hypothesis, CtcError> {
    cfg.validate()?;
    let lm = cfg.lm.as_ref().filter(|_| cfg.lm_weight != 0.0);
    if let Some(lm) = lm {
        if lm.num_tokens() != lp.num_tokens() {
            return Err(CtcError::InvalidConfig(format!(
                "LM covers {} tokens, posteriors cover {}",
                lm.num_tokens(),
                lp.num_tokens()
            )));
        }
    }
    let blank = lp.blank();
    let values = lp.values();
    let neg_inf = f64::NEG_INFINITY;
    let prefix_score = |prefix: &[usize], mass: &PrefixMass| {
        mass.total() + cfg.lm_weight * mass.lm + cfg.length_bonus * prefix.len() as f64
    };

    let mut beams: BTreeMap<Vec<usize>, PrefixMass> = BTreeMap::new();
    beams.insert(
        Vec::new(),
        PrefixMass {
            blank_end: 0.0,
            label_end: neg_inf,
            lm: 0.0,
        },
    );

    for t in 0..lp.frames() {
        let row = values.row(t);
        let mut next: BTreeMap<Vec<usize>, PrefixMass> = BTreeMap::new();
        for (prefix, mass) in &beams {
            let entry = next.entry(prefix.clone()).or_insert(PrefixMass {
                blank_end: neg_inf,
                label_end: neg_inf,
                lm: mass.lm,
            });
            entry.blank_end = log_add(entry.blank_end, mass.total() + row[blank]);
            let last = prefix.last().copied();
            if let Some(last) = last {
                // repeated label without an intervening blank stays on the prefix
                entry.label_end = log_add(entry.label_end, mass.label_end + row[last]);
            }
            for tok in 0..blank {
                let mut extended = prefix.clone();
                extended.push(tok);
                let from = if Some(tok) == last {
                    mass.blank_end
                } else {
                    mass.total()
                };
                let e = next.entry(extended).or_insert_with(|| PrefixMass {
                    blank_end: neg_inf,
                    label_end: neg_inf,
                    lm: match lm {
                        Some(lm) => mass.lm + lm.log_prob(&lm_context(prefix), LmSymbol::Token(tok)),
                        None => 0.0,
                    },
                });
                e.label_end = log_add(e.label_end, from + row[tok]);
            }
        }
        next.retain(|_, m| m.total() > neg_inf);
        if next.len() > cfg.beam_size {
            let mut ranked: Vec<(Vec<usize>, PrefixMass)> = next.into_iter().collect();
            ranked.sort_by(|a, b| compare_scored(prefix_score(&b.0, &b.1), &b.0, prefix_score(&a.0, &a.1), &a.0));
            ranked.truncate(cfg.beam_size);
            next = ranked.into_iter().collect();
        }
        beams = next;
    }

    let mut best: Option<Hypothesis> = None;
    for (prefix, mass) in beams {
        let lm_total = match lm {
            Some(lm) => mass.lm + lm.log_prob(&lm_context(&prefix), LmSymbol::End),
            None => 0.0,
        };
        let acoustic = mass.total();
        let score = acoustic + cfg.lm_weight * lm_total + cfg.length_bonus * prefix.len() as f64;
        let better = match &best {
            None => true,
            Some(b) => compare_scored(score, &prefix, b.score, b.tokens.tokens()) == Ordering::Greater,
        };
        if better {
            best = Some(Hypothesis {
                tokens: TokenSeq::new(prefix),
                acoustic,
                lm: lm_total,
                score,
            });
        }
    }
    Ok(best.expect("every frame keeps at least one finite prefix"))
}

/// Orders by score, breaking ties toward shorter and then lexicographically
/// smaller sequences (which rank higher).
fn compare_scored(score_a: f64, a: &[usize], score_b: f64, b: &[usize]) -> Ordering {
    score_a
        .partial_cmp(&score_b)
        .unwrap_or(Ordering::Equal)
        .then_with(|| b.len().cmp(&a.len()))
        .then_with(|| b.cmp(a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctc::test_support::{for_each_path, random_log_posteriors};
    use crate::ctc::train_ngram_lm;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lp_from_probs(rows: &[&[f64]]) -> LogPosteriors {
        let cols = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().map(|p| p.ln())).collect();
        LogPosteriors::new(ndarray::Array2::from_shape_vec((rows.len(), cols), flat).unwrap()).unwrap()
    }

    /// Exhaustive label-sequence posterior: sums path probability per
    /// collapsed sequence and returns the argmax.
    fn brute_force_best_sequence(lp: &LogPosteriors) -> (TokenSeq, f64) {
        let mut mass: BTreeMap<TokenSeq, f64> = BTreeMap::new();
        for_each_path(lp.frames(), lp.num_tokens() + 1, |path| {
            let p: f64 = path.iter().enumerate().map(|(t, &v)| lp.values()[[t, v]]).sum::<f64>().exp();
            *mass.entry(collapse_path(path, lp.blank())).or_insert(0.0) += p;
        });
        let mut best: Option<(TokenSeq, f64)> = None;
        for (seq, p) in mass {
            if best.as_ref().is_none_or(|(_, bp)| p > *bp) {
                best = Some((seq, p));
            }
        }
        best.unwrap()
    }

    /// Argmax over explicit per-frame paths, independent of `greedy_path`.
    fn brute_force_best_path(lp: &LogPosteriors) -> TokenSeq {
        let mut best = (f64::NEG_INFINITY, Vec::new());
        for_each_path(lp.frames(), lp.num_tokens() + 1, |path| {
            let s: f64 = path.iter().enumerate().map(|(t, &v)| lp.values()[[t, v]]).sum();
            if s > best.0 {
                best = (s, path.to_vec());
            }
        });
        collapse_path(&best.1, lp.blank())
    }

    #[test]
    fn greedy_collapses_repeats_and_blanks() {
        // a=0, b=1, blank=2; argmaxes [a,a,blank,a,b,blank]
        let hi = 0.8;
        let lo = 0.1;
        let lp = lp_from_probs(&[
            &[hi, lo, lo],
            &[hi, lo, lo],
            &[lo, lo, hi],
            &[hi, lo, lo],
            &[lo, hi, lo],
            &[lo, lo, hi],
        ]);
        assert_eq!(greedy_decode(&lp), TokenSeq::new(vec![0, 0, 1]));
    }

    #[test]
    fn greedy_all_blank_is_empty() {
        let lp = lp_from_probs(&[&[0.2, 0.8], &[0.3, 0.7]]);
        assert!(greedy_decode(&lp).is_empty());
    }

    #[test]
    fn greedy_ties_go_to_lowest_index() {
        let lp = lp_from_probs(&[&[0.4, 0.4, 0.2]]);
        assert_eq!(greedy_path(&lp), vec![0]);
    }

    #[test]
    fn greedy_matches_explicit_best_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let lp = random_log_posteriors(&mut rng, 5, 3);
            assert_eq!(greedy_decode(&lp), brute_force_best_path(&lp));
        }
    }

    #[test]
    fn beam_single_frame_picks_best_token() {
        let cfg = DecoderConfig {
            beam_size: 4,
            ..Default::default()
        };
        let lp = lp_from_probs(&[&[0.2, 0.5, 0.3]]);
        assert_eq!(beam_search_decode(&lp, &cfg).unwrap(), TokenSeq::new(vec![1]));
        let lp = lp_from_probs(&[&[0.2, 0.1, 0.7]]);
        assert!(beam_search_decode(&lp, &cfg).unwrap().is_empty());
    }

    #[test]
    fn zero_beam_is_invalid() {
        let cfg = DecoderConfig {
            beam_size: 0,
            ..Default::default()
        };
        let lp = lp_from_probs(&[&[0.5, 0.5]]);
        assert!(matches!(beam_search_decode(&lp, &cfg), Err(CtcError::InvalidConfig(_))));
    }

    #[test]
    fn lm_weight_without_lm_is_invalid() {
        let cfg = DecoderConfig {
            beam_size: 2,
            lm_weight: 0.5,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn sequence_argmax_can_beat_best_path() {
        // best single path is blank-blank, but "a" collects more total mass
        let lp = lp_from_probs(&[&[0.4, 0.6], &[0.4, 0.6]]);
        assert!(greedy_decode(&lp).is_empty());
        let cfg = DecoderConfig {
            beam_size: 16,
            ..Default::default()
        };
        let hyp = beam_search_hypothesis(&lp, &cfg).unwrap();
        assert_eq!(hyp.tokens, TokenSeq::new(vec![0]));
        assert!((hyp.acoustic - (0.4f64 * 0.4 + 0.4 * 0.6 * 2.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn exhaustive_beam_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let cfg = DecoderConfig {
            beam_size: 10_000,
            ..Default::default()
        };
        for _ in 0..30 {
            let frames = rng.random_range(1..=5);
            let vocab = rng.random_range(1..=3);
            let lp = random_log_posteriors(&mut rng, frames, vocab);
            let hyp = beam_search_hypothesis(&lp, &cfg).unwrap();
            let (seq, p) = brute_force_best_sequence(&lp);
            assert_eq!(hyp.tokens, seq);
            assert!((hyp.acoustic - p.ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn length_is_monotone_in_bonus() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let lp = random_log_posteriors(&mut rng, 5, 3);
        let mut last_len = 0;
        for i in 0..40 {
            let cfg = DecoderConfig {
                beam_size: 10_000,
                length_bonus: -5.0 + 0.5 * i as f64,
                ..Default::default()
            };
            let len = beam_search_decode(&lp, &cfg).unwrap().len();
            assert!(len >= last_len, "length dropped at bonus {}", cfg.length_bonus);
            last_len = len;
        }
        assert_eq!(last_len, 5);
    }

    #[test]
    fn acoustic_score_is_monotone_in_lm_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let corpus: Vec<TokenSeq> = (0..50)
            .map(|_| TokenSeq::new((0..4).map(|i| i % 3).collect()))
            .chain((0..5).map(|_| TokenSeq::new(vec![rng.random_range(0..3)])))
            .collect();
        let lm = train_ngram_lm(&corpus, 2, 0.5, 3).unwrap();
        for _ in 0..10 {
            let lp = random_log_posteriors(&mut rng, 5, 3);
            let mut last = f64::INFINITY;
            for i in 0..12 {
                let cfg = DecoderConfig {
                    beam_size: 10_000,
                    lm_weight: 0.25 * i as f64,
                    length_bonus: 0.0,
                    lm: Some(lm.clone()),
                };
                let hyp = beam_search_hypothesis(&lp, &cfg).unwrap();
                assert!(hyp.acoustic <= last + 1e-12);
                last = hyp.acoustic;
            }
        }
    }

    #[test]
    fn lm_fusion_shifts_toward_lm_preferred_sequence() {
        let lm = train_ngram_lm(&[TokenSeq::new(vec![1])], 1, 0.01, 2).unwrap();
        let lp = LogPosteriors::from_logits(array![[1.0, 0.9, -5.0]].view()).unwrap();
        let plain = DecoderConfig {
            beam_size: 8,
            ..Default::default()
        };
        let fused = DecoderConfig {
            lm_weight: 1.0,
            lm: Some(lm),
            ..plain.clone()
        };
        assert_eq!(beam_search_decode(&lp, &plain).unwrap().tokens(), &[0]);
        assert_eq!(beam_search_decode(&lp, &fused).unwrap().tokens(), &[1]);
    }

    fn dedup_adjacent(path: &[usize]) -> Vec<usize> {
        let mut out: Vec<usize> = path.to_vec();
        out.dedup();
        out
    }

    proptest! {
        #[test]
        fn collapse_factors_through_dedup(path in proptest::collection::vec(0usize..4, 0..20)) {
            let deduped = dedup_adjacent(&path);
            prop_assert_eq!(dedup_adjacent(&deduped), deduped.clone());
            let collapsed = collapse_path(&path, 3);
            prop_assert_eq!(&collapse_path(&deduped, 3), &collapsed);
            prop_assert!(!collapsed.tokens().contains(&3));
            // one output token per maximal non-blank run
            let runs = deduped.iter().filter(|&&s| s != 3).count();
            prop_assert_eq!(collapsed.len(), runs);
        }
    }
}
