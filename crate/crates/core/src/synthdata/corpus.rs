//! Corpus generation and the on-disk dataset format.
//!
//! A corpus directory holds `manifest.json` plus, per split, a frames archive
//! (`<split>.frames.f32`, flat little-endian `f32`) and a sidecar index
//! (`<split>.index.tsv`: `utt_id  byte_offset  num_frames  feature_dim  accent  transcript`).

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::accent::{synthesize_utterance, AccentProfile, Prototypes, Utterance};
use super::grammar::BigramGrammar;
use super::vocab::{Symbol, SymbolVocab};
use crate::error::{Error, Result};
use crate::nn::derive_seed;

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub num_symbols: usize,
    pub feature_dim: usize,
    pub num_accents: usize,
    /// One shift strength per accent; entry 0 must be 0.
    pub shift_strengths: Vec<f64>,
    pub noise_sigma: f64,
    pub duration_range: (usize, usize),
    pub length_range: (usize, usize),
    pub pairs_per_accent: usize,
    pub branching: usize,
    pub prototype_scale: f64,
    /// Fixes grammar, prototypes and accent profiles.
    pub grammar_seed: u64,
    /// Fixes every sampled utterance.
    pub seed: u64,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            num_symbols: 24,
            feature_dim: 16,
            num_accents: 4,
            shift_strengths: vec![0.0, 0.4, 0.6, 0.8],
            noise_sigma: 0.3,
            duration_range: (2, 4),
            length_range: (3, 12),
            pairs_per_accent: 4,
            branching: 4,
            prototype_scale: 0.25,
            grammar_seed: 1234,
            seed: 20240101,
            train_size: 2000,
            dev_size: 400,
            test_size: 400,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_accents < 2 {
            return Err(Error::invalid_argument("at least 2 accents are required"));
        }
        if self.shift_strengths.len() != self.num_accents {
            return Err(Error::invalid_argument(format!(
                "{} shift strengths given for {} accents",
                self.shift_strengths.len(),
                self.num_accents
            )));
        }
        if self.shift_strengths[0] != 0.0 {
            return Err(Error::invalid_argument(
                "accent 0 must have shift strength 0",
            ));
        }
        if self.feature_dim == 0 {
            return Err(Error::invalid_argument("feature_dim must be positive"));
        }
        if !(self.prototype_scale > 0.0 && self.prototype_scale.is_finite()) {
            return Err(Error::invalid_argument("prototype_scale must be positive"));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Result<SymbolVocab> {
        SymbolVocab::new(self.num_symbols)
    }

    pub fn grammar(&self) -> Result<BigramGrammar> {
        BigramGrammar::from_seed(self.grammar_seed, self.vocab()?, self.branching)
    }

    pub fn prototypes(&self) -> Result<Prototypes> {
        Ok(Prototypes::from_seed(
            self.grammar_seed,
            self.vocab()?,
            self.feature_dim,
            self.prototype_scale,
        ))
    }

    pub fn accent_profiles(&self, grammar: &BigramGrammar) -> Result<Vec<AccentProfile>> {
        (0..self.num_accents)
            .map(|a| {
                AccentProfile::seeded(
                    a,
                    self.shift_strengths[a],
                    grammar,
                    self.pairs_per_accent,
                    self.grammar_seed,
                    self.duration_range,
                    self.noise_sigma,
                )
            })
            .collect()
    }

    fn splits(&self) -> [(&'static str, usize); 3] {
        [
            ("train", self.train_size),
            ("dev", self.dev_size),
            ("test", self.test_size),
        ]
    }
}

/// Everything needed to sample utterances, derived from a [`GeneratorConfig`].
#[derive(Debug, Clone)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub grammar: BigramGrammar,
    pub prototypes: Prototypes,
    pub profiles: Vec<AccentProfile>,
}

impl Generator {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let grammar = config.grammar()?;
        let prototypes = config.prototypes()?;
        let profiles = config.accent_profiles(&grammar)?;
        Ok(Self {
            config,
            grammar,
            prototypes,
            profiles,
        })
    }

    /// Accents are assigned round-robin, which balances every split.
    pub fn utterance(&self, split: &str, index: usize) -> Result<Utterance> {
        let utt_id = format!("{split}-{index:06}");
        let accent = index % self.config.num_accents;
        let utt_seed = derive_seed(self.config.seed, &utt_id);
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(utt_seed);
        let transcript = self.grammar.sample(&mut rng, self.config.length_range)?;
        synthesize_utterance(
            &utt_id,
            &transcript,
            &self.profiles[accent],
            &self.prototypes,
            derive_seed(utt_seed, "frames"),
        )
    }

    pub fn split(&self, split: &str, size: usize) -> Result<Vec<Utterance>> {
        (0..size).map(|i| self.utterance(split, i)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabDescriptor {
    pub num_symbols: usize,
    pub blank_id: Symbol,
    pub eos_id: Symbol,
    pub pad_id: Symbol,
}

impl From<SymbolVocab> for VocabDescriptor {
    fn from(v: SymbolVocab) -> Self {
        Self {
            num_symbols: v.num_symbols,
            blank_id: v.blank_id(),
            eos_id: v.eos_id(),
            pad_id: v.pad_id(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: String,
    pub num_utterances: usize,
    pub per_accent: Vec<usize>,
    pub vocab: VocabDescriptor,
    pub accents: Vec<AccentProfile>,
    pub seed: u64,
    /// Paths relative to the manifest directory.
    pub frames_path: String,
    pub index_path: String,
    pub frames_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format_version: u32,
    pub generator: GeneratorConfig,
    pub splits: Vec<DatasetManifest>,
}

impl CorpusManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Self = serde_json::from_str(&text)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::invalid_state(format!(
                "unsupported corpus format version {}",
                manifest.format_version
            )));
        }
        Ok(manifest)
    }

    pub fn split(&self, name: &str) -> Result<&DatasetManifest> {
        self.splits
            .iter()
            .find(|s| s.split == name)
            .ok_or_else(|| Error::invalid_argument(format!("corpus has no split named {name}")))
    }
}

/// Resolves a corpus argument given either as a directory or as the manifest file.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_file() || path.extension().is_some_and(|e| e == "json") {
        path.to_path_buf()
    } else {
        path.join(MANIFEST_FILE)
    }
}

pub fn generate_corpus(config: &GeneratorConfig, out_dir: &Path) -> Result<CorpusManifest> {
    let generator = Generator::new(config.clone())?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut splits = Vec::new();
    for (name, size) in config.splits() {
        let utts = generator.split(name, size)?;
        let frames_path = format!("{name}.frames.f32");
        let index_path = format!("{name}.index.tsv");
        let sha = write_archive(
            &utts,
            &out_dir.join(&frames_path),
            &out_dir.join(&index_path),
        )?;
        let mut per_accent = vec![0; config.num_accents];
        for u in &utts {
            per_accent[u.accent] += 1;
        }
        splits.push(DatasetManifest {
            split: name.to_string(),
            num_utterances: utts.len(),
            per_accent,
            vocab: generator.grammar.vocab().into(),
            accents: generator.profiles.clone(),
            seed: config.seed,
            frames_path,
            index_path,
            frames_sha256: sha,
        });
    }
    let manifest = CorpusManifest {
        format_version: FORMAT_VERSION,
        generator: config.clone(),
        splits,
    };
    let path = out_dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Writes frames and the sidecar index; returns the SHA-256 of the frames file.
pub fn write_archive(utts: &[Utterance], frames_path: &Path, index_path: &Path) -> Result<String> {
    let mut bytes = Vec::new();
    let mut index = String::new();
    for u in utts {
        let offset = bytes.len();
        for v in &u.frames {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let transcript: Vec<String> = u.transcript.iter().map(|s| s.to_string()).collect();
        index.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            u.utt_id,
            offset,
            u.num_frames,
            u.feature_dim,
            u.accent,
            transcript.join(" ")
        ));
    }
    fs::write(frames_path, &bytes).map_err(|e| Error::io(frames_path, e))?;
    let mut f = fs::File::create(index_path).map_err(|e| Error::io(index_path, e))?;
    f.write_all(index.as_bytes())
        .map_err(|e| Error::io(index_path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Loads one split of a corpus into memory, verifying the frames checksum.
pub fn load_split(manifest_path: &Path, split: &str) -> Result<(DatasetManifest, Vec<Utterance>)> {
    let corpus = CorpusManifest::load(manifest_path)?;
    let ds = corpus.split(split)?.clone();
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let frames_path = dir.join(&ds.frames_path);
    let bytes = fs::read(&frames_path).map_err(|e| Error::io(&frames_path, e))?;
    let found = hex::encode(Sha256::digest(&bytes));
    if found != ds.frames_sha256 {
        return Err(Error::Checksum {
            what: frames_path.display().to_string(),
            expected: ds.frames_sha256.clone(),
            found,
        });
    }
    let index_path = dir.join(&ds.index_path);
    let file = fs::File::open(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let mut utts = Vec::with_capacity(ds.num_utterances);
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(&index_path, e))?;
        if line.is_empty() {
            continue;
        }
        utts.push(parse_index_line(&line, &bytes)?);
    }
    if utts.len() != ds.num_utterances {
        return Err(Error::invalid_state(format!(
            "index lists {} utterances, manifest says {}",
            utts.len(),
            ds.num_utterances
        )));
    }
    Ok((ds, utts))
}

fn parse_index_line(line: &str, bytes: &[u8]) -> Result<Utterance> {
    let bad = || Error::invalid_state(format!("malformed index line: {line:?}"));
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() != 6 {
        return Err(bad());
    }
    let offset: usize = cols[1].parse().map_err(|_| bad())?;
    let num_frames: usize = cols[2].parse().map_err(|_| bad())?;
    let feature_dim: usize = cols[3].parse().map_err(|_| bad())?;
    let accent: usize = cols[4].parse().map_err(|_| bad())?;
    let transcript = cols[5]
        .split(' ')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<Symbol>().map_err(|_| bad()))
        .collect::<Result<Vec<_>>>()?;
    let end = offset + num_frames * feature_dim * 4;
    if end > bytes.len() {
        return Err(bad());
    }
    let frames = bytes[offset..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Utterance {
        utt_id: cols[0].to_string(),
        frames,
        num_frames,
        feature_dim,
        transcript,
        accent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            train_size: 40,
            dev_size: 8,
            test_size: 8,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn needs_two_accents() {
        let cfg = GeneratorConfig {
            num_accents: 1,
            shift_strengths: vec![0.0],
            ..small()
        };
        let dir = tempfile::tempdir().unwrap();
        assert!(generate_corpus(&cfg, dir.path()).is_err());
    }

    #[test]
    fn archive_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        generate_corpus(&small(), dir.path()).unwrap();
        let gen = Generator::new(small()).unwrap();
        let (ds, utts) = load_split(&dir.path().join(MANIFEST_FILE), "dev").unwrap();
        assert_eq!(ds.num_utterances, 8);
        assert_eq!(utts, gen.split("dev", 8).unwrap());
    }

    #[test]
    fn corrupted_archive_rejected() {
        let dir = tempfile::tempdir().unwrap();
        generate_corpus(&small(), dir.path()).unwrap();
        let p = dir.path().join("dev.frames.f32");
        let mut bytes = fs::read(&p).unwrap();
        bytes[0] ^= 1;
        fs::write(&p, bytes).unwrap();
        assert!(matches!(
            load_split(&dir.path().join(MANIFEST_FILE), "dev"),
            Err(Error::Checksum { .. })
        ));
    }
}
