//! Toy causal language model: text-only pretraining, then frozen use as the
//! corrector that reads the assembled prompt.
//!
//! The output projection is the transposed embedding table, so hypothesis
//! lookups, label inputs and predictions all share one token space.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    causal_mask, derive_seed, from_f64, join, log_softmax_last, BlockDims, Init, LayerNorm,
    ParamStore, TransformerBlock,
};
use crate::optim::{Adam, OptimizerConfig};
use crate::synthdata::{BigramGrammar, Symbol, SymbolVocab};
use crate::tensor_io;

const PREFIX: &str = "lm";
const FORMAT: &str = "mmger-frozen-lm/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub context_cap: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            num_layers: 4,
            num_heads: 4,
            ffn_dim: 256,
            context_cap: 384,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub corpus_size: usize,
    pub heldout_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Share of documents written as `hypothesis <eos> transcript` pairs.
    pub correction_fraction: f64,
    /// Upper bound of the per-document corruption rate of those hypotheses.
    pub max_error_rate: f64,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            corpus_size: 20_000,
            heldout_size: 1_000,
            epochs: 5,
            batch_size: 32,
            correction_fraction: 0.5,
            max_error_rate: 0.3,
            seed: 17,
            optimizer: OptimizerConfig {
                lr: 2e-3,
                warmup_steps: 200,
                ..OptimizerConfig::default()
            },
        }
    }
}

/// Decoder-only transformer with rotary positions and tied output projection.
#[derive(Debug, Clone)]
pub struct LanguageModel {
    cfg: LmConfig,
    vocab: SymbolVocab,
    embed: Tensor,
    blocks: Vec<TransformerBlock>,
    final_norm: LayerNorm,
}

impl LanguageModel {
    pub fn new(store: &mut ParamStore, vocab: SymbolVocab, cfg: &LmConfig) -> Result<Self> {
        let embed = store.get(
            &join(PREFIX, "embed"),
            &[vocab.lm_size(), cfg.dim],
            Init::Normal(1.0 / (cfg.dim as f64).sqrt()),
        )?;
        let dims = BlockDims {
            dim: cfg.dim,
            ffn_dim: cfg.ffn_dim,
            heads: cfg.num_heads,
            rotary: true,
            conv_kernel: None,
        };
        let blocks = (0..cfg.num_layers)
            .map(|i| TransformerBlock::new(store, &join(PREFIX, &format!("layer{i}")), dims))
            .collect::<Result<Vec<_>>>()?;
        let final_norm = LayerNorm::new(store, &join(PREFIX, "final_norm"), cfg.dim)?;
        Ok(Self {
            cfg: cfg.clone(),
            vocab,
            embed,
            blocks,
            final_norm,
        })
    }

    pub fn config(&self) -> &LmConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> SymbolVocab {
        self.vocab
    }

    pub fn dim(&self) -> usize {
        self.cfg.dim
    }

    pub fn dtype(&self) -> DType {
        self.embed.dtype()
    }

    /// The `(|vocab|, D_lm)` embedding table.
    pub fn table(&self) -> &Tensor {
        &self.embed
    }

    fn check_ids(&self, ids: &[Symbol]) -> Result<()> {
        match ids.iter().find(|&&i| i as usize >= self.vocab.lm_size()) {
            Some(bad) => Err(Error::invalid_argument(format!(
                "token id {bad} outside LM vocabulary of {}",
                self.vocab.lm_size()
            ))),
            None => Ok(()),
        }
    }

    /// Rows of the embedding table, `(n, D_lm)`; `n = 0` yields an empty matrix.
    pub fn embed_ids(&self, ids: &[Symbol]) -> Result<Tensor> {
        self.check_ids(ids)?;
        if ids.is_empty() {
            return Ok(Tensor::zeros(
                (0, self.cfg.dim),
                self.dtype(),
                &Device::Cpu,
            )?);
        }
        let idx = Tensor::new(ids, &Device::Cpu)?;
        Ok(self.embed.index_select(&idx, 0)?)
    }

    /// `(B, P)` ids (row-major, padded) to `(B, P, D_lm)`.
    pub fn embed_batch(&self, ids: &[Symbol], batch: usize, len: usize) -> Result<Tensor> {
        if ids.len() != batch * len {
            return Err(Error::invalid_argument(
                "id buffer does not match (batch, len)",
            ));
        }
        Ok(self.embed_ids(ids)?.reshape((batch, len, self.cfg.dim))?)
    }

    /// Causal forward over continuous inputs `(B, P, D_lm)` to logits `(B, P, |vocab|)`.
    pub fn forward(&self, inputs: &Tensor) -> Result<Tensor> {
        let (b, p, d) = inputs.dims3()?;
        if d != self.cfg.dim {
            return Err(Error::invalid_argument(format!(
                "LM expects width {}, got {d}",
                self.cfg.dim
            )));
        }
        if p > self.cfg.context_cap {
            return Err(Error::invalid_argument(format!(
                "sequence of {p} positions exceeds the context cap of {}",
                self.cfg.context_cap
            )));
        }
        let mask = causal_mask(p, inputs.dtype())?;
        let mut x = inputs.clone();
        for block in &self.blocks {
            x = block.forward(&x, Some(&mask), None)?;
        }
        let h = self.final_norm.forward(&x)?.reshape((b * p, d))?;
        Ok(h.matmul(&self.embed.t()?)?
            .reshape((b, p, self.vocab.lm_size()))?)
    }

    /// Greedy continuation of each prompt `(P_b, D_lm)`: appends argmax tokens
    /// until eos or `max_lens[b]` tokens; eos is not returned.
    pub fn greedy_decode(
        &self,
        prompts: &[Tensor],
        max_lens: &[usize],
    ) -> Result<Vec<Vec<Symbol>>> {
        if prompts.len() != max_lens.len() {
            return Err(Error::invalid_argument("prompts/max_lens mismatch"));
        }
        let eos = self.vocab.eos_id();
        let n = prompts.len();
        let mut out: Vec<Vec<Symbol>> = vec![Vec::new(); n];
        let mut done: Vec<bool> = max_lens.iter().map(|&m| m == 0).collect();
        let prompt_lens: Vec<usize> = prompts
            .iter()
            .map(|p| p.dims2().map(|(l, _)| l))
            .collect::<candle_core::Result<_>>()?;
        if let Some(i) = prompt_lens.iter().position(|&l| l == 0) {
            return Err(Error::invalid_argument(format!("prompt {i} is empty")));
        }
        while done.iter().any(|d| !d) {
            let active: Vec<usize> = (0..n).filter(|&i| !done[i]).collect();
            let lens: Vec<usize> = active
                .iter()
                .map(|&i| prompt_lens[i] + out[i].len())
                .collect();
            let max_len = *lens.iter().max().expect("nonempty");
            let mut rows = Vec::with_capacity(active.len());
            for (&i, &len) in active.iter().zip(&lens) {
                let mut seq = prompts[i].detach();
                if !out[i].is_empty() {
                    seq = Tensor::cat(&[&seq, &self.embed_ids(&out[i])?.detach()], 0)?;
                }
                rows.push(seq.pad_with_zeros(0, 0, max_len - len)?);
            }
            let logits = self.forward(&Tensor::stack(&rows, 0)?)?;
            for (row, (&i, &len)) in active.iter().zip(&lens).enumerate() {
                let last = logits
                    .get(row)?
                    .get(len - 1)?
                    .to_dtype(DType::F64)?
                    .to_vec1::<f64>()?;
                let mut best = 0;
                for (k, &v) in last.iter().enumerate() {
                    if v > last[best] {
                        best = k;
                    }
                }
                let tok = best as Symbol;
                if tok == eos {
                    done[i] = true;
                } else {
                    out[i].push(tok);
                    if out[i].len() >= max_lens[i] {
                        done[i] = true;
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Mean cross-entropy per batch row over positions where `weights` is nonzero.
///
/// `logits`: `(B, P, V)`; `targets`: `B * P` ids (ignored where the weight is 0);
/// `weights`: `B * P` values in {0, 1}. Rows without scored positions yield 0.
pub fn masked_cross_entropy(
    logits: &Tensor,
    targets: &[Symbol],
    weights: &[f64],
) -> Result<Tensor> {
    let (b, p, v) = logits.dims3()?;
    if targets.len() != b * p || weights.len() != b * p {
        return Err(Error::invalid_argument(
            "targets/weights do not match logits",
        ));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= v) {
        return Err(Error::invalid_argument(format!(
            "target id {bad} out of range"
        )));
    }
    let logp = log_softmax_last(logits)?;
    let idx = Tensor::from_vec(targets.to_vec(), (b, p, 1), &Device::Cpu)?;
    let picked = logp.gather(&idx, D::Minus1)?.squeeze(D::Minus1)?;
    let mask = from_f64(weights.to_vec(), &[b, p], logits.dtype())?;
    let counts: Vec<f64> = weights
        .chunks(p)
        .map(|row| {
            let c: f64 = row.iter().sum();
            if c > 0.0 {
                -1.0 / c
            } else {
                0.0
            }
        })
        .collect();
    let counts = from_f64(counts, &[b], logits.dtype())?;
    Ok((picked * mask)?.sum(1)?.mul(&counts)?)
}

/// A language model whose parameters never change once built.
#[derive(Debug, Clone)]
pub struct FrozenLm {
    store: ParamStore,
    model: LanguageModel,
    checksum: String,
    heldout_perplexity: f64,
}

impl FrozenLm {
    pub fn from_weights(
        vocab: SymbolVocab,
        cfg: &LmConfig,
        weights: &BTreeMap<String, Tensor>,
        dtype: DType,
        heldout_perplexity: f64,
    ) -> Result<Self> {
        let mut store = ParamStore::new(0, dtype);
        LanguageModel::new(&mut store, vocab, cfg)?;
        store.load(weights)?;
        store.set_frozen(true);
        let model = LanguageModel::new(&mut store, vocab, cfg)?;
        let checksum = store.checksum()?;
        Ok(Self {
            store,
            model,
            checksum,
            heldout_perplexity,
        })
    }

    pub fn model(&self) -> &LanguageModel {
        &self.model
    }

    pub fn vocab(&self) -> SymbolVocab {
        self.model.vocab
    }

    pub fn config(&self) -> &LmConfig {
        &self.model.cfg
    }

    /// Checksum recorded when the model was frozen.
    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    /// Checksum of the weights as they are now.
    pub fn current_checksum(&self) -> Result<String> {
        self.store.checksum()
    }

    pub fn heldout_perplexity(&self) -> f64 {
        self.heldout_perplexity
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Self::from_weights(
            self.vocab(),
            self.config(),
            &self.store.snapshot(),
            dtype,
            self.heldout_perplexity,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = HashMap::new();
        meta.insert("format".into(), FORMAT.into());
        meta.insert("config".into(), serde_json::to_string(self.config())?);
        meta.insert("num_symbols".into(), self.vocab().num_symbols.to_string());
        meta.insert("checksum".into(), self.checksum.clone());
        meta.insert(
            "heldout_perplexity".into(),
            self.heldout_perplexity.to_string(),
        );
        tensor_io::save(path, &self.store.snapshot(), meta)
    }

    /// Loads a frozen LM, refusing files whose weights do not match the embedded checksum.
    pub fn load(path: &Path, dtype: DType) -> Result<Self> {
        let (tensors, meta) = tensor_io::load(path)?;
        if tensor_io::meta_get(&meta, "format", path)? != FORMAT {
            return Err(Error::invalid_state(format!(
                "{} is not a frozen LM file",
                path.display()
            )));
        }
        let cfg: LmConfig = serde_json::from_str(tensor_io::meta_get(&meta, "config", path)?)?;
        let num_symbols: usize = tensor_io::meta_get(&meta, "num_symbols", path)?
            .parse()
            .map_err(|_| Error::invalid_state("bad num_symbols metadata"))?;
        let expected = tensor_io::meta_get(&meta, "checksum", path)?.to_string();
        let ppl: f64 = tensor_io::meta_get(&meta, "heldout_perplexity", path)?
            .parse()
            .map_err(|_| Error::invalid_state("bad perplexity metadata"))?;
        let stored = crate::nn::checksum(tensors.iter().map(|(k, v)| (k.as_str(), v)))?;
        if stored != expected {
            return Err(Error::Checksum {
                what: path.display().to_string(),
                expected,
                found: stored,
            });
        }
        let lm = Self::from_weights(SymbolVocab::new(num_symbols)?, &cfg, &tensors, dtype, ppl)?;
        if lm.checksum != expected {
            return Err(Error::Checksum {
                what: path.display().to_string(),
                expected,
                found: lm.checksum,
            });
        }
        Ok(lm)
    }
}

/// Text-only pretraining summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: u64,
    pub final_train_loss: f64,
    pub heldout_perplexity: f64,
    pub heldout_correction_token_accuracy: f64,
    pub uniform_perplexity: f64,
}

/// Randomly substitutes, deletes and inserts symbols at a rate drawn from `[0, max_rate]`.
pub fn corrupt<R: Rng>(
    rng: &mut R,
    seq: &[Symbol],
    vocab: SymbolVocab,
    max_rate: f64,
) -> Vec<Symbol> {
    let rate = rng.random::<f64>() * max_rate;
    let n = vocab.num_symbols as Symbol;
    let mut out = Vec::with_capacity(seq.len() + 2);
    for &s in seq {
        let u = rng.random::<f64>();
        if u < 0.7 * rate {
            let mut r = rng.random_range(1..n);
            if r >= s {
                r += 1;
            }
            out.push(r);
        } else if u < 0.85 * rate {
            // deletion
        } else {
            out.push(s);
            if u < rate {
                out.push(rng.random_range(1..=n));
            }
        }
    }
    out
}

/// Draws `n` pretraining transcripts from the grammar.
pub fn sample_text_corpus(
    grammar: &BigramGrammar,
    n: usize,
    length_range: (usize, usize),
    seed: u64,
) -> Result<Vec<Vec<Symbol>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "lm-corpus"));
    (0..n)
        .map(|_| grammar.sample(&mut rng, length_range))
        .collect()
}

/// Plain document: `<eos> y <eos>`.
pub fn plain_document(y: &[Symbol], vocab: SymbolVocab) -> Vec<Symbol> {
    let mut d = Vec::with_capacity(y.len() + 2);
    d.push(vocab.eos_id());
    d.extend_from_slice(y);
    d.push(vocab.eos_id());
    d
}

/// Correction document: `<eos> h <eos> y <eos>`.
pub fn correction_document(h: &[Symbol], y: &[Symbol], vocab: SymbolVocab) -> Vec<Symbol> {
    let mut d = Vec::with_capacity(h.len() + y.len() + 3);
    d.push(vocab.eos_id());
    d.extend_from_slice(h);
    d.extend(plain_document(y, vocab));
    d
}

struct DocBatch {
    inputs: Vec<Symbol>,
    targets: Vec<Symbol>,
    weights: Vec<f64>,
    batch: usize,
    len: usize,
}

fn batch_documents(docs: &[&Vec<Symbol>], vocab: SymbolVocab, score_from: &[usize]) -> DocBatch {
    let len = docs.iter().map(|d| d.len() - 1).max().unwrap_or(0);
    let pad = vocab.pad_id();
    let mut inputs = vec![pad; docs.len() * len];
    let mut targets = vec![pad; docs.len() * len];
    let mut weights = vec![0.0; docs.len() * len];
    for (i, d) in docs.iter().enumerate() {
        for t in 0..d.len() - 1 {
            inputs[i * len + t] = d[t];
            targets[i * len + t] = d[t + 1];
            if t + 1 >= score_from[i] {
                weights[i * len + t] = 1.0;
            }
        }
    }
    DocBatch {
        inputs,
        targets,
        weights,
        batch: docs.len(),
        len,
    }
}

fn batch_nll(model: &LanguageModel, b: &DocBatch) -> Result<(Tensor, Tensor)> {
    let x = model.embed_batch(&b.inputs, b.batch, b.len)?;
    let logits = model.forward(&x)?;
    let per_row = masked_cross_entropy(&logits, &b.targets, &b.weights)?;
    Ok((logits, per_row))
}

/// Next-token pretraining on transcripts; the last `heldout_size` transcripts are held out.
pub fn pretrain_lm(
    transcripts: &[Vec<Symbol>],
    vocab: SymbolVocab,
    lm_cfg: &LmConfig,
    cfg: &PretrainConfig,
) -> Result<(FrozenLm, PretrainReport)> {
    if transcripts.is_empty() {
        return Err(Error::invalid_argument("pretraining corpus is empty"));
    }
    for t in transcripts {
        vocab.check_transcript(t)?;
    }
    let heldout_n = cfg.heldout_size.min(transcripts.len() / 5);
    let (train, heldout) = transcripts.split_at(transcripts.len() - heldout_n);
    if train.is_empty() {
        return Err(Error::invalid_argument(
            "no pretraining transcripts left after holding out",
        ));
    }
    let mut store = ParamStore::new(cfg.seed, DType::F32);
    let model = LanguageModel::new(&mut store, vocab, lm_cfg)?;
    let mut adam = Adam::new(cfg.optimizer.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batch_size = cfg.batch_size.max(1);
    let mut last_loss = f64::NAN;
    for epoch in 0..cfg.epochs {
        let mut docs: Vec<Vec<Symbol>> = train
            .iter()
            .map(|y| {
                if rng.random::<f64>() < cfg.correction_fraction {
                    let h = corrupt(&mut rng, y, vocab, cfg.max_error_rate);
                    correction_document(&h, y, vocab)
                } else {
                    plain_document(y, vocab)
                }
            })
            .collect();
        docs.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in docs.chunks(batch_size) {
            let refs: Vec<&Vec<Symbol>> = chunk.iter().collect();
            let b = batch_documents(&refs, vocab, &vec![0; refs.len()]);
            let (_, per_row) = batch_nll(&model, &b)?;
            // token-level mean over the batch
            let counts: Vec<f64> = b.weights.chunks(b.len).map(|r| r.iter().sum()).collect();
            let total: f64 = counts.iter().sum();
            let w = from_f64(
                counts.iter().map(|c| c / total).collect(),
                &[b.batch],
                DType::F32,
            )?;
            let loss = (per_row * w)?.sum_all()?;
            let lv = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !lv.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: adam.step_count(),
                    detail: "language-model pretraining".into(),
                });
            }
            let grads = loss.backward()?;
            adam.step(&store, &grads)?;
            epoch_loss += lv;
            batches += 1;
        }
        last_loss = epoch_loss / batches.max(1) as f64;
        info!("lm pretrain epoch {} loss {:.4}", epoch + 1, last_loss);
    }

    let weights = store.snapshot();
    let (ppl, acc) = heldout_metrics(&model, heldout, vocab, cfg)?;
    let frozen = FrozenLm::from_weights(vocab, lm_cfg, &weights, DType::F32, ppl)?;
    let report = PretrainReport {
        steps: adam.step_count(),
        final_train_loss: last_loss,
        heldout_perplexity: ppl,
        heldout_correction_token_accuracy: acc,
        uniform_perplexity: vocab.lm_size() as f64,
    };
    info!(
        "lm held-out perplexity {:.3} (uniform {}), correction token accuracy {:.3}",
        ppl,
        vocab.lm_size(),
        acc
    );
    Ok((frozen, report))
}

/// Held-out perplexity over plain documents and teacher-forced token accuracy
/// on the transcript half of correction documents.
fn heldout_metrics(
    model: &LanguageModel,
    heldout: &[Vec<Symbol>],
    vocab: SymbolVocab,
    cfg: &PretrainConfig,
) -> Result<(f64, f64)> {
    if heldout.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let mut nll = 0.0;
    let mut count = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xfeed);
    let mut correct = 0usize;
    let mut scored = 0usize;
    for chunk in heldout.chunks(64) {
        let plain: Vec<Vec<Symbol>> = chunk.iter().map(|y| plain_document(y, vocab)).collect();
        let refs: Vec<&Vec<Symbol>> = plain.iter().collect();
        let b = batch_documents(&refs, vocab, &vec![0; refs.len()]);
        let (_, per_row) = batch_nll(model, &b)?;
        let per_row = per_row.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        for (row, w) in per_row.iter().zip(b.weights.chunks(b.len)) {
            let c: f64 = w.iter().sum();
            nll += row * c;
            count += c;
        }

        let docs: Vec<Vec<Symbol>> = chunk
            .iter()
            .map(|y| {
                let h = corrupt(&mut rng, y, vocab, cfg.max_error_rate);
                correction_document(&h, y, vocab)
            })
            .collect();
        let starts: Vec<usize> = docs
            .iter()
            .zip(chunk)
            .map(|(d, y)| d.len() - y.len() - 1)
            .collect();
        let refs: Vec<&Vec<Symbol>> = docs.iter().collect();
        let b = batch_documents(&refs, vocab, &starts);
        let (logits, _) = batch_nll(model, &b)?;
        let pred = logits.argmax(D::Minus1)?.flatten_all()?.to_vec1::<u32>()?;
        for i in 0..b.inputs.len() {
            if b.weights[i] > 0.0 {
                scored += 1;
                if pred[i] == b.targets[i] {
                    correct += 1;
                }
            }
        }
    }
    Ok(((nll / count).exp(), correct as f64 / scored.max(1) as f64))
}
