use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::grammar::{categorical, BigramGrammar};
use super::vocab::{Symbol, SymbolVocab};
use crate::error::{Error, Result};

/// How one accent distorts pronunciation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccentProfile {
    pub accent_id: usize,
    /// `(source, target)`: frames of `source` drift toward the prototype of `target`.
    pub confusion_pairs: Vec<(Symbol, Symbol)>,
    pub shift_strength: f64,
    pub duration_range: (usize, usize),
    pub noise_sigma: f64,
}

impl AccentProfile {
    pub fn standard(duration_range: (usize, usize), noise_sigma: f64) -> Self {
        Self {
            accent_id: 0,
            confusion_pairs: Vec::new(),
            shift_strength: 0.0,
            duration_range,
            noise_sigma,
        }
    }

    /// Draws `num_pairs` disjoint confusion pairs seeded by `(seed, accent_id)`.
    /// Sources are drawn in proportion to symbol frequency, so accents touch
    /// common sounds; targets are uniform over the remaining symbols.
    pub fn seeded(
        accent_id: usize,
        shift_strength: f64,
        grammar: &BigramGrammar,
        num_pairs: usize,
        seed: u64,
        duration_range: (usize, usize),
        noise_sigma: f64,
    ) -> Result<Self> {
        if accent_id == 0 {
            return Ok(Self::standard(duration_range, noise_sigma));
        }
        let n = grammar.vocab().num_symbols;
        if 2 * num_pairs > n {
            return Err(Error::invalid_argument(format!(
                "{num_pairs} disjoint pairs need {} symbols, vocabulary has {n}",
                2 * num_pairs
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(
            seed ^ (accent_id as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
        );
        let freq = grammar.unigram_frequencies();
        let mut used = vec![false; n];
        let mut pairs = Vec::with_capacity(num_pairs);
        for _ in 0..num_pairs {
            let weights: Vec<f64> = (0..n)
                .map(|i| if used[i] { 0.0 } else { freq[i] })
                .collect();
            let src = categorical(&mut rng, &weights);
            used[src] = true;
            let free: Vec<usize> = (0..n).filter(|&i| !used[i]).collect();
            let dst = free[rng.random_range(0..free.len())];
            used[dst] = true;
            pairs.push((src as Symbol + 1, dst as Symbol + 1));
        }
        let profile = Self {
            accent_id,
            confusion_pairs: pairs,
            shift_strength,
            duration_range,
            noise_sigma,
        };
        profile.validate(grammar.vocab())?;
        Ok(profile)
    }

    pub fn validate(&self, vocab: SymbolVocab) -> Result<()> {
        if !(0.0..=1.0).contains(&self.shift_strength) {
            return Err(Error::invalid_argument("shift strength must lie in [0, 1]"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid_argument(
                "noise sigma must be finite and nonnegative",
            ));
        }
        let (lo, hi) = self.duration_range;
        if lo == 0 || lo > hi {
            return Err(Error::invalid_argument(format!(
                "duration range ({lo}, {hi}) must satisfy 1 <= min <= max"
            )));
        }
        if self.accent_id == 0 && (!self.confusion_pairs.is_empty() || self.shift_strength != 0.0) {
            return Err(Error::invalid_argument(
                "accent 0 is the standard accent: no pairs, no shift",
            ));
        }
        let mut sources: Vec<Symbol> = self.confusion_pairs.iter().map(|p| p.0).collect();
        sources.sort_unstable();
        sources.dedup();
        if sources.len() != self.confusion_pairs.len() {
            return Err(Error::invalid_argument(
                "confusion sources must be distinct",
            ));
        }
        for &(s, t) in &self.confusion_pairs {
            vocab.check_transcript(&[s, t])?;
        }
        Ok(())
    }

    fn target_of(&self, s: Symbol) -> Option<Symbol> {
        self.confusion_pairs.iter().find(|p| p.0 == s).map(|p| p.1)
    }
}

/// One mean feature vector per symbol, fixed by the vocabulary seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototypes {
    pub feature_dim: usize,
    /// Row `s - 1` is the prototype of symbol `s`.
    pub vectors: Vec<Vec<f64>>,
}

impl Prototypes {
    pub fn from_seed(seed: u64, vocab: SymbolVocab, feature_dim: usize, scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0070_7261_7474_7970);
        let vectors = (0..vocab.num_symbols)
            .map(|_| {
                (0..feature_dim)
                    .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                    .collect()
            })
            .collect();
        Self {
            feature_dim,
            vectors,
        }
    }

    pub fn of(&self, s: Symbol) -> &[f64] {
        &self.vectors[s as usize - 1]
    }
}

/// The unit of training and evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub utt_id: String,
    /// Row-major `num_frames x feature_dim`.
    pub frames: Vec<f32>,
    pub num_frames: usize,
    pub feature_dim: usize,
    pub transcript: Vec<Symbol>,
    pub accent: usize,
}

impl Utterance {
    pub fn frame(&self, t: usize) -> &[f32] {
        &self.frames[t * self.feature_dim..(t + 1) * self.feature_dim]
    }
}

/// Renders a transcript as frames under an accent profile.
pub fn synthesize_utterance(
    utt_id: &str,
    transcript: &[Symbol],
    profile: &AccentProfile,
    prototypes: &Prototypes,
    seed: u64,
) -> Result<Utterance> {
    if transcript.is_empty() {
        return Err(Error::invalid_argument("transcript must be nonempty"));
    }
    let vocab = SymbolVocab::new(prototypes.vectors.len())?;
    vocab.check_transcript(transcript)?;
    let (lo, hi) = profile.duration_range;
    if lo == 0 || lo > hi {
        return Err(Error::invalid_argument("invalid duration range"));
    }
    let f = prototypes.feature_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frames = Vec::new();
    let mut num_frames = 0;
    let mut mean = vec![0.0f64; f];
    for &s in transcript {
        let base = prototypes.of(s);
        match profile.target_of(s) {
            Some(t) => {
                let target = prototypes.of(t);
                for i in 0..f {
                    mean[i] = base[i] + profile.shift_strength * (target[i] - base[i]);
                }
            }
            None => mean.copy_from_slice(base),
        }
        let d = rng.random_range(lo..=hi);
        for _ in 0..d {
            for m in &mean {
                let z: f64 = StandardNormal.sample(&mut rng);
                frames.push((m + profile.noise_sigma * z) as f32);
            }
        }
        num_frames += d;
    }
    Ok(Utterance {
        utt_id: utt_id.to_string(),
        frames,
        num_frames,
        feature_dim: f,
        transcript: transcript.to_vec(),
        accent: profile.accent_id,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn protos() -> Prototypes {
        Prototypes::from_seed(5, SymbolVocab::default(), 16, 1.0)
    }

    #[test]
    fn zero_shift_zero_noise_frames_equal_prototypes() {
        let p = protos();
        let prof = AccentProfile::standard((2, 4), 0.0);
        let u = synthesize_utterance("u", &[3, 7], &prof, &p, 1).unwrap();
        let mut t = 0;
        for &s in &u.transcript {
            let proto: Vec<f32> = p.of(s).iter().map(|&v| v as f32).collect();
            while t < u.num_frames && u.frame(t) == proto.as_slice() {
                t += 1;
            }
        }
        assert_eq!(t, u.num_frames);
    }

    #[test]
    fn full_shift_moves_to_target() {
        let p = protos();
        let prof = AccentProfile {
            accent_id: 1,
            confusion_pairs: vec![(3, 9)],
            shift_strength: 1.0,
            duration_range: (2, 2),
            noise_sigma: 0.0,
        };
        let u = synthesize_utterance("u", &[3], &prof, &p, 1).unwrap();
        let target: Vec<f32> = p.of(9).iter().map(|&v| v as f32).collect();
        assert_eq!(u.frame(0), target.as_slice());
        assert_eq!(u.frame(1), target.as_slice());
    }

    #[test]
    fn frame_count_within_duration_bounds() {
        let p = protos();
        let prof = AccentProfile::standard((2, 4), 0.3);
        for seed in 0..50 {
            let u = synthesize_utterance("u", &[1, 2, 3, 4, 5], &prof, &p, seed).unwrap();
            assert!((10..=20).contains(&u.num_frames));
            assert!(u.frames.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn unknown_symbol_rejected() {
        let p = protos();
        let prof = AccentProfile::standard((2, 4), 0.3);
        assert!(matches!(
            synthesize_utterance("u", &[0], &prof, &p, 0),
            Err(Error::InvalidArgument(_))
        ));
        assert!(synthesize_utterance("u", &[25], &prof, &p, 0).is_err());
        assert!(synthesize_utterance("u", &[], &prof, &p, 0).is_err());
    }

    #[test]
    fn seeded_pairs_are_disjoint() {
        let g = BigramGrammar::from_seed(3, SymbolVocab::default(), 4).unwrap();
        for a in 1..4 {
            let prof = AccentProfile::seeded(a, 0.5, &g, 4, 11, (2, 4), 0.3).unwrap();
            let mut all: Vec<Symbol> = prof
                .confusion_pairs
                .iter()
                .flat_map(|p| [p.0, p.1])
                .collect();
            all.sort_unstable();
            all.dedup();
            assert_eq!(all.len(), 8);
        }
        let std = AccentProfile::seeded(0, 0.0, &g, 4, 11, (2, 4), 0.3).unwrap();
        assert!(std.confusion_pairs.is_empty());
    }
}
