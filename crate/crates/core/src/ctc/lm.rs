use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use super::{CtcError, TokenSeq};

/// Symbols seen by the n-gram model. `Start` only appears in contexts and
/// `End` only as a predicted symbol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LmSymbol {
    Start,
    Token(usize),
    End,
}

impl fmt::Display for LmSymbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LmSymbol::Start => f.write_str("<s>"),
            LmSymbol::Token(t) => write!(f, "{t}"),
            LmSymbol::End => f.write_str("</s>"),
        }
    }
}

impl FromStr for LmSymbol {
    type Err = CtcError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "<s>" => Ok(LmSymbol::Start),
            "</s>" => Ok(LmSymbol::End),
            _ => s
                .parse()
                .map(LmSymbol::Token)
                .map_err(|_| CtcError::LmFormat(format!("bad symbol {s:?}"))),
        }
    }
}

type Counts = BTreeMap<LmSymbol, u64>;

/// Additively smoothed character n-gram model over `V` tokens plus an end
/// marker. Unseen contexts back off to the smoothed unigram distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct CharNGramLM {
    order: usize,
    delta: f64,
    /// `V + 1`: tokens plus the end marker.
    vocab_size: usize,
    /// Keyed by full `order - 1` contexts; the empty context holds unigram
    /// counts.
    counts: BTreeMap<Vec<LmSymbol>, Counts>,
}

pub fn train_ngram_lm(
    corpus: &[TokenSeq],
    order: usize,
    delta: f64,
    num_tokens: usize,
) -> Result<CharNGramLM, CtcError> {
    if corpus.is_empty() {
        return Err(CtcError::InvalidInput("empty LM training corpus".into()));
    }
    if order == 0 {
        return Err(CtcError::InvalidInput("n-gram order must be at least 1".into()));
    }
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(CtcError::InvalidInput("smoothing constant must be positive".into()));
    }
    if num_tokens == 0 {
        return Err(CtcError::InvalidInput("vocabulary must be nonempty".into()));
    }
    let mut counts: BTreeMap<Vec<LmSymbol>, Counts> = BTreeMap::new();
    for seq in corpus {
        seq.check_vocab(num_tokens)?;
        let mut padded = vec![LmSymbol::Start; order - 1];
        padded.extend(seq.tokens().iter().map(|&t| LmSymbol::Token(t)));
        padded.push(LmSymbol::End);
        for i in (order - 1)..padded.len() {
            let next = padded[i];
            *counts.entry(Vec::new()).or_default().entry(next).or_insert(0) += 1;
            if order > 1 {
                let ctx = padded[i + 1 - order..i].to_vec();
                *counts.entry(ctx).or_default().entry(next).or_insert(0) += 1;
            }
        }
    }
    Ok(CharNGramLM {
        order,
        delta,
        vocab_size: num_tokens + 1,
        counts,
    })
}

impl CharNGramLM {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn num_tokens(&self) -> usize {
        self.vocab_size - 1
    }

    fn context_of(&self, history: &[LmSymbol]) -> Vec<LmSymbol> {
        let need = self.order - 1;
        let mut ctx = vec![LmSymbol::Start; need.saturating_sub(history.len())];
        ctx.extend_from_slice(&history[history.len().saturating_sub(need)..]);
        ctx
    }

    fn smoothed(&self, counts: Option<&Counts>, next: LmSymbol) -> f64 {
        let (hit, total) = match counts {
            Some(c) => (c.get(&next).copied().unwrap_or(0), c.values().sum::<u64>()),
            None => (0, 0),
        };
        (hit as f64 + self.delta) / (total as f64 + self.delta * self.vocab_size as f64)
    }

    /// `p(next | history)`; `history` is the preceding tokens without start
    /// padding.
    pub fn prob(&self, history: &[LmSymbol], next: LmSymbol) -> f64 {
        let ctx = self.context_of(history);
        match self.counts.get(&ctx) {
            Some(c) if !c.is_empty() => self.smoothed(Some(c), next),
            _ => self.smoothed(self.counts.get(&Vec::new()), next),
        }
    }

    pub fn log_prob(&self, history: &[LmSymbol], next: LmSymbol) -> f64 {
        self.prob(history, next).ln()
    }

    /// Every symbol that can be predicted: tokens then the end marker.
    pub fn outcomes(&self) -> impl Iterator<Item = LmSymbol> {
        (0..self.num_tokens()).map(LmSymbol::Token).chain(std::iter::once(LmSymbol::End))
    }

    /// `log p_lm(seq)` including the end marker.
    pub fn score(&self, seq: &TokenSeq) -> f64 {
        let symbols: Vec<LmSymbol> = seq.tokens().iter().map(|&t| LmSymbol::Token(t)).collect();
        let body: f64 = (0..symbols.len())
            .map(|i| self.log_prob(&symbols[..i], symbols[i]))
            .sum();
        body + self.log_prob(&symbols, LmSymbol::End)
    }

    /// Line-oriented text form: a header then `context<TAB>token<TAB>count`
    /// lines. Contexts are space-separated symbols; the unigram context is
    /// the empty string.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "ngram\torder={}\tdelta={:?}\tvocab={}\n",
            self.order, self.delta, self.vocab_size
        );
        for (ctx, nexts) in &self.counts {
            let ctx_str = ctx.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ");
            for (next, count) in nexts {
                out.push_str(&format!("{ctx_str}\t{next}\t{count}\n"));
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, CtcError> {
        let bad = |msg: String| CtcError::LmFormat(msg);
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("missing header".into()))?;
        let fields: Vec<&str> = header.split('\t').collect();
        if fields.len() != 4 || fields[0] != "ngram" {
            return Err(bad(format!("bad header {header:?}")));
        }
        let value = |field: &str, key: &str| -> Result<String, CtcError> {
            field
                .strip_prefix(key)
                .and_then(|rest| rest.strip_prefix('='))
                .map(str::to_owned)
                .ok_or_else(|| bad(format!("expected {key}=..., got {field:?}")))
        };
        let order: usize = value(fields[1], "order")?
            .parse()
            .map_err(|_| bad("bad order".into()))?;
        let delta: f64 = value(fields[2], "delta")?
            .parse()
            .map_err(|_| bad("bad delta".into()))?;
        let vocab_size: usize = value(fields[3], "vocab")?
            .parse()
            .map_err(|_| bad("bad vocab".into()))?;
        if order == 0 || vocab_size < 2 || !(delta > 0.0) {
            return Err(bad("header values out of range".into()));
        }

        let mut counts: BTreeMap<Vec<LmSymbol>, Counts> = BTreeMap::new();
        for (lineno, line) in lines.enumerate() {
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 3 {
                return Err(bad(format!("line {}: expected 3 fields", lineno + 2)));
            }
            let ctx = if parts[0].is_empty() {
                Vec::new()
            } else {
                parts[0]
                    .split(' ')
                    .map(LmSymbol::from_str)
                    .collect::<Result<Vec<_>, _>>()?
            };
            if !ctx.is_empty() && ctx.len() != order - 1 {
                return Err(bad(format!("line {}: context length {}", lineno + 2, ctx.len())));
            }
            let next: LmSymbol = parts[1].parse()?;
            match next {
                LmSymbol::Start => return Err(bad(format!("line {}: <s> cannot be predicted", lineno + 2))),
                LmSymbol::Token(t) if t + 1 >= vocab_size => {
                    return Err(bad(format!("line {}: token {t} out of range", lineno + 2)))
                }
                _ => {}
            }
            let count: u64 = parts[2]
                .parse()
                .map_err(|_| bad(format!("line {}: bad count", lineno + 2)))?;
            if counts.entry(ctx).or_default().insert(next, count).is_some() {
                return Err(bad(format!("line {}: duplicate entry", lineno + 2)));
            }
        }
        Ok(Self {
            order,
            delta,
            vocab_size,
            counts,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(matches!(train_ngram_lm(&[], 2, 0.1, 3), Err(CtcError::InvalidInput(_))));
    }

    #[test]
    fn unigram_relative_frequencies() {
        // "ab": a, b and the end marker each seen once
        let lm = train_ngram_lm(&[TokenSeq::new(vec![0, 1])], 1, 1e-12, 2).unwrap();
        for sym in [LmSymbol::Token(0), LmSymbol::Token(1), LmSymbol::End] {
            assert!((lm.prob(&[], sym) - 1.0 / 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn unseen_context_backs_off_to_unigram() {
        let lm = train_ngram_lm(&[TokenSeq::new(vec![0, 0, 0])], 2, 0.5, 3).unwrap();
        let backed = lm.prob(&[LmSymbol::Token(2)], LmSymbol::Token(0));
        assert_eq!(backed, lm.smoothed(lm.counts.get(&Vec::new()), LmSymbol::Token(0)));
    }

    #[test]
    fn conditionals_normalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let corpus: Vec<TokenSeq> = (0..30)
            .map(|_| TokenSeq::new((0..rng.random_range(0..6)).map(|_| rng.random_range(0..4)).collect()))
            .collect();
        for order in 1..=3 {
            let lm = train_ngram_lm(&corpus, order, 0.3, 4).unwrap();
            for h0 in 0..5 {
                for h1 in 0..5 {
                    let history: Vec<LmSymbol> = [h0, h1]
                        .iter()
                        .filter(|&&h| h < 4)
                        .map(|&h| LmSymbol::Token(h))
                        .collect();
                    let total: f64 = lm.outcomes().map(|s| lm.prob(&history, s)).sum();
                    assert!((total - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn bigram_beats_unigram_on_bigram_source() {
        // deterministic-ish cycle 0 -> 1 -> 2 -> 0 with some noise
        let table = [[0.05, 0.85, 0.05, 0.05], [0.05, 0.05, 0.85, 0.05], [0.8, 0.05, 0.05, 0.1]];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sample = |rng: &mut ChaCha8Rng| {
            let mut seq = Vec::new();
            let mut prev = rng.random_range(0..3);
            seq.push(prev);
            loop {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut next = 3;
                for (k, p) in table[prev].iter().enumerate() {
                    acc += p;
                    if u < acc {
                        next = k;
                        break;
                    }
                }
                if next == 3 || seq.len() > 40 {
                    return TokenSeq::new(seq);
                }
                seq.push(next);
                prev = next;
            }
        };
        let train: Vec<TokenSeq> = (0..300).map(|_| sample(&mut rng)).collect();
        let held: Vec<TokenSeq> = (0..100).map(|_| sample(&mut rng)).collect();
        let uni = train_ngram_lm(&train, 1, 0.1, 3).unwrap();
        let bi = train_ngram_lm(&train, 2, 0.1, 3).unwrap();
        let ll = |lm: &CharNGramLM| held.iter().map(|s| lm.score(s)).sum::<f64>();
        assert!(ll(&bi) >= ll(&uni), "{} < {}", ll(&bi), ll(&uni));
    }

    #[test]
    fn rejects_malformed_text() {
        assert!(CharNGramLM::from_text("").is_err());
        assert!(CharNGramLM::from_text("ngram\torder=2\tdelta=0.1\tvocab=3\n\t0\n").is_err());
        assert!(CharNGramLM::from_text("ngram\torder=2\tdelta=0.1\tvocab=3\n<s>\t<s>\t1\n").is_err());
        assert!(CharNGramLM::from_text("ngram\torder=2\tdelta=0.1\tvocab=3\n<s>\t7\t1\n").is_err());
    }

    proptest! {
        #[test]
        fn text_round_trip_is_exact(
            seqs in proptest::collection::vec(proptest::collection::vec(0usize..5, 0..8), 1..12),
            order in 1usize..4,
            delta in 1e-6f64..3.0,
        ) {
            let corpus: Vec<TokenSeq> = seqs.into_iter().map(TokenSeq::new).collect();
            let lm = train_ngram_lm(&corpus, order, delta, 5).unwrap();
            let text = lm.to_text();
            let back = CharNGramLM::from_text(&text).unwrap();
            prop_assert_eq!(&back, &lm);
            prop_assert_eq!(back.to_text(), text);
            prop_assert!(lm.score(&corpus[0]).is_finite());
        }
    }
}
