use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{Symbol, SymbolVocab};
use crate::error::{Error, Result};

pub const MAX_TRANSCRIPT_LEN: usize = 64;
pub const DEFAULT_BRANCHING: usize = 4;

/// Sparse first-order Markov chain over transcript symbols.
///
/// Each symbol has `branching` allowed successors (never itself); all other
/// transitions have probability zero. Successors are drawn with a Zipf-like
/// preference so symbol frequencies are skewed the way natural text is.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BigramGrammar {
    vocab: SymbolVocab,
    initial: Vec<f64>,
    /// `transitions[s - 1]` lists `(successor, probability)` for symbol `s`.
    transitions: Vec<Vec<(Symbol, f64)>>,
}

impl BigramGrammar {
    pub fn from_seed(grammar_seed: u64, vocab: SymbolVocab, branching: usize) -> Result<Self> {
        let n = vocab.num_symbols;
        if branching == 0 || branching >= n {
            return Err(Error::invalid_argument(format!(
                "branching must be in [1, {}), got {branching}",
                n
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(grammar_seed);
        // popularity[i] ~ 1 / rank under a seeded permutation of the symbols
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut popularity = vec![0.0; n];
        for (rank, &sym) in order.iter().enumerate() {
            popularity[sym] = 1.0 / (rank as f64 + 1.0);
        }
        let mut transitions = Vec::with_capacity(n);
        for s in 0..n {
            let mut candidates: Vec<usize> = (0..n).filter(|&c| c != s).collect();
            let mut chosen = Vec::with_capacity(branching);
            for _ in 0..branching {
                let weights: Vec<f64> = candidates.iter().map(|&c| popularity[c]).collect();
                let idx = categorical(&mut rng, &weights);
                chosen.push(candidates.remove(idx));
            }
            chosen.sort_unstable();
            let raw: Vec<f64> = chosen
                .iter()
                .map(|_| -(1.0 - rng.random::<f64>()).ln() + 0.1)
                .collect();
            let total: f64 = raw.iter().sum();
            transitions.push(
                chosen
                    .iter()
                    .zip(&raw)
                    .map(|(&c, &w)| (c as Symbol + 1, w / total))
                    .collect(),
            );
        }
        let ptotal: f64 = popularity.iter().sum();
        let initial = popularity.iter().map(|p| p / ptotal).collect();
        Ok(Self {
            vocab,
            initial,
            transitions,
        })
    }

    pub fn vocab(&self) -> SymbolVocab {
        self.vocab
    }

    pub fn successors(&self, s: Symbol) -> &[(Symbol, f64)] {
        &self.transitions[s as usize - 1]
    }

    pub fn transition_prob(&self, from: Symbol, to: Symbol) -> f64 {
        if !self.vocab.is_symbol(from) {
            return 0.0;
        }
        self.successors(from)
            .iter()
            .find(|(t, _)| *t == to)
            .map_or(0.0, |(_, p)| *p)
    }

    pub fn is_allowed(&self, from: Symbol, to: Symbol) -> bool {
        self.transition_prob(from, to) > 0.0
    }

    pub fn initial_prob(&self, s: Symbol) -> f64 {
        if self.vocab.is_symbol(s) {
            self.initial[s as usize - 1]
        } else {
            0.0
        }
    }

    /// Unigram frequencies of the chain (initial distribution propagated ten steps
    /// and averaged, matching the transcript lengths actually sampled).
    pub fn unigram_frequencies(&self) -> Vec<f64> {
        let n = self.vocab.num_symbols;
        let mut dist = self.initial.clone();
        let mut acc = dist.clone();
        for _ in 0..9 {
            let mut next = vec![0.0; n];
            for (s, p) in dist.iter().enumerate() {
                for &(t, q) in &self.transitions[s] {
                    next[t as usize - 1] += p * q;
                }
            }
            for (a, v) in acc.iter_mut().zip(&next) {
                *a += v;
            }
            dist = next;
        }
        let total: f64 = acc.iter().sum();
        acc.iter().map(|v| v / total).collect()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R, length_range: (usize, usize)) -> Result<Vec<Symbol>> {
        check_length_range(length_range)?;
        let len = rng.random_range(length_range.0..=length_range.1);
        let mut out = Vec::with_capacity(len);
        let first = categorical(rng, &self.initial);
        out.push(first as Symbol + 1);
        while out.len() < len {
            let succ = self.successors(*out.last().expect("nonempty"));
            let weights: Vec<f64> = succ.iter().map(|(_, p)| *p).collect();
            out.push(succ[categorical(rng, &weights)].0);
        }
        Ok(out)
    }

    /// Log-probability of a transcript under the chain (`-inf` for forbidden bigrams).
    pub fn log_prob(&self, seq: &[Symbol]) -> f64 {
        let Some((&first, rest)) = seq.split_first() else {
            return 0.0;
        };
        let mut lp = self.initial_prob(first).ln();
        let mut prev = first;
        for &s in rest {
            lp += self.transition_prob(prev, s).ln();
            prev = s;
        }
        lp
    }
}

fn check_length_range(range: (usize, usize)) -> Result<()> {
    let (lo, hi) = range;
    if lo == 0 || hi > MAX_TRANSCRIPT_LEN || lo > hi {
        return Err(Error::invalid_argument(format!(
            "length range ({lo}, {hi}) must be a nonempty range within [1, {MAX_TRANSCRIPT_LEN}]"
        )));
    }
    Ok(())
}

/// Draws a single transcript from the grammar seeded by `grammar_seed`, using
/// the same seed for the draw. Repeated calls return the same sequence.
pub fn sample_transcript(grammar_seed: u64, length_range: (usize, usize)) -> Result<Vec<Symbol>> {
    check_length_range(length_range)?;
    let grammar =
        BigramGrammar::from_seed(grammar_seed, SymbolVocab::default(), DEFAULT_BRANCHING)?;
    let mut rng = ChaCha8Rng::seed_from_u64(grammar_seed ^ 0x5eed_7e47);
    grammar.sample(&mut rng, length_range)
}

pub(crate) fn categorical<R: Rng>(rng: &mut R, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_boundary_lengths() {
        let a = sample_transcript(7, (3, 3)).unwrap();
        let b = sample_transcript(7, (3, 3)).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a, b);
        assert_eq!(sample_transcript(7, (1, 1)).unwrap().len(), 1);
    }

    #[test]
    fn invalid_ranges_rejected() {
        assert!(matches!(
            sample_transcript(7, (5, 4)),
            Err(Error::InvalidArgument(_))
        ));
        assert!(sample_transcript(7, (0, 3)).is_err());
        assert!(sample_transcript(7, (1, 65)).is_err());
    }

    #[test]
    fn forbidden_bigrams_never_sampled() {
        let vocab = SymbolVocab::default();
        let g = BigramGrammar::from_seed(7, vocab, DEFAULT_BRANCHING).unwrap();
        // Count bigram occurrences over 10,000 samples and compare against the
        // zero pattern of the transition matrix.
        let n = vocab.num_symbols;
        let mut counts = vec![vec![0usize; n + 1]; n + 1];
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..10_000 {
            let s = g.sample(&mut rng, (1, 12)).unwrap();
            assert!(s.iter().all(|&x| vocab.is_symbol(x)));
            for w in s.windows(2) {
                counts[w[0] as usize][w[1] as usize] += 1;
            }
        }
        for a in 1..=n {
            for b in 1..=n {
                if g.transition_prob(a as Symbol, b as Symbol) == 0.0 {
                    assert_eq!(counts[a][b], 0, "forbidden bigram {a}->{b} sampled");
                }
            }
        }
    }

    #[test]
    fn rows_are_distributions_without_self_loops() {
        let g = BigramGrammar::from_seed(1, SymbolVocab::default(), 4).unwrap();
        for s in g.vocab().symbols() {
            let succ = g.successors(s);
            assert_eq!(succ.len(), 4);
            assert!(succ.iter().all(|(t, _)| *t != s));
            let total: f64 = succ.iter().map(|(_, p)| p).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
        let f: f64 = g.unigram_frequencies().iter().sum();
        assert!((f - 1.0).abs() < 1e-12);
    }
}
