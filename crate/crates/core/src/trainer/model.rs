use candle_core::{DType, Tensor};

use crate::arfusion::{ar_loss, embed_hypothesis_batch, ArFusion, ArOutput};
use crate::correction::{
    assemble_prompts, build_mmc, embed_frame_hypothesis_batch, label_targets, MmcMode,
    MmcProjector, Padded, PromptBatch, PromptInputs, SpecialTokens,
};
use crate::ctc::{ctc_loss_batch, greedy_frame_labels_batch, is_feasible, CtcHead, Hypothesis};
use crate::encoders::{pad_frames, subsampled_len, tap_concat, Adapter, Encoder};
use crate::error::{Error, Result};
use crate::lm::{masked_cross_entropy, FrozenLm};
use crate::nn::{Dropout, ParamStore};
use crate::synthdata::{Symbol, SymbolVocab, Utterance};

use super::config::MmgerConfig;

/// Trainable components around a frozen language model.
#[derive(Debug, Clone)]
pub struct MmgerModel {
    cfg: MmgerConfig,
    num_accents: usize,
    store: ParamStore,
    lm: FrozenLm,
    shared: Encoder,
    ctc: CtcHead,
    fusion: Option<ArFusion>,
    asr: Option<Encoder>,
    adapter: Option<Adapter>,
    mmc_proj: Option<MmcProjector>,
    special: Option<SpecialTokens>,
}

/// Everything computed for one padded batch.
#[derive(Debug, Clone)]
pub struct BatchForward {
    pub frame_lengths: Vec<usize>,
    /// `(B, T', |V| + 1)`
    pub ctc_logits: Tensor,
    pub hypotheses: Vec<Hypothesis>,
    pub ar: Option<ArOutput>,
    pub prompts: Option<PromptBatch>,
}

/// Batch-mean loss terms as scalar tensors.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub l_llm: Option<Tensor>,
    pub l_ctc: Tensor,
    pub l_ar: Option<Tensor>,
    pub total: Tensor,
}

impl MmgerModel {
    pub fn new(cfg: &MmgerConfig, lm: FrozenLm, num_accents: usize, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        if num_accents < 2 {
            return Err(Error::invalid_argument("need at least two accents"));
        }
        let lm = if lm.model().dtype() == dtype {
            lm
        } else {
            lm.to_dtype(dtype)?
        };
        let vocab = lm.vocab();
        let lm_dim = lm.model().dim();
        let enc = &cfg.encoders;
        let mut store = ParamStore::new(cfg.trainer.seed, dtype);
        let shared = Encoder::new(&mut store, "shared", &enc.shared)?;
        let ctc = CtcHead::new(&mut store, "ctc", enc.shared.model_dim, vocab.ctc_classes())?;
        let fusion = if cfg.uses_ar_stack() {
            let shared_dim = enc.shared.tap_layers.len() * enc.shared.model_dim;
            Some(ArFusion::new(
                &mut store,
                "ar",
                &cfg.arfusion,
                lm_dim,
                shared_dim,
                num_accents,
            )?)
        } else {
            None
        };
        let special = if cfg.trainer.enable_lm_path {
            Some(SpecialTokens::new(&mut store, "special", lm_dim)?)
        } else {
            None
        };
        let (asr, adapter) = if cfg.uses_mmc() {
            (
                Some(Encoder::new(&mut store, "asr", &enc.asr)?),
                Some(Adapter::new(
                    &mut store,
                    "adapter",
                    &enc.adapter,
                    enc.asr.model_dim,
                    lm_dim,
                )?),
            )
        } else {
            (None, None)
        };
        let mmc_proj = if cfg.uses_mmc() && cfg.correction.mmc_mode == MmcMode::Both {
            Some(MmcProjector::new(&mut store, "mmc_proj", lm_dim)?)
        } else {
            None
        };
        Ok(Self {
            cfg: cfg.clone(),
            num_accents,
            store,
            lm,
            shared,
            ctc,
            fusion,
            asr,
            adapter,
            mmc_proj,
            special,
        })
    }

    pub fn config(&self) -> &MmgerConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn lm(&self) -> &FrozenLm {
        &self.lm
    }

    pub fn vocab(&self) -> SymbolVocab {
        self.lm.vocab()
    }

    pub fn num_accents(&self) -> usize {
        self.num_accents
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn special_tokens(&self) -> Option<&SpecialTokens> {
        self.special.as_ref()
    }

    /// Frames the encoders emit for an utterance.
    pub fn encoded_len(&self, utt: &Utterance) -> usize {
        subsampled_len(utt.num_frames, self.cfg.encoders.shared.subsample_factor)
    }

    /// Whether CTC can align the utterance's transcript at all.
    pub fn is_feasible(&self, utt: &Utterance) -> bool {
        is_feasible(&utt.transcript, self.encoded_len(utt))
    }

    /// Runs every enabled path. With `labels`, prompts carry the teacher-forced
    /// transcript; without them they end at the accent slot.
    pub fn forward(
        &self,
        utts: &[&Utterance],
        labels: Option<&[Vec<Symbol>]>,
    ) -> Result<BatchForward> {
        self.forward_with(utts, labels, None)
    }

    /// As [`forward`](Self::forward), with training-time dropout in the
    /// encoders and adapter.
    pub fn forward_with(
        &self,
        utts: &[&Utterance],
        labels: Option<&[Vec<Symbol>]>,
        drop: Option<&Dropout>,
    ) -> Result<BatchForward> {
        let expected = self.cfg.encoders.shared.input_dim;
        if let Some(u) = utts.iter().find(|u| u.feature_dim != expected) {
            return Err(Error::invalid_argument(format!(
                "{} has {} features, encoders expect {expected}",
                u.utt_id, u.feature_dim
            )));
        }
        let (frames, lengths) = pad_frames(utts, self.dtype())?;
        let shared_out = self.shared.forward_with(&frames, &lengths, drop)?;
        let t_lens = shared_out.lengths.clone();
        let ctc_logits = self.ctc.logits(&shared_out.hidden)?;
        let frame_labels = greedy_frame_labels_batch(&ctc_logits, &t_lens)?;
        let hypotheses: Vec<Hypothesis> = frame_labels
            .iter()
            .cloned()
            .map(Hypothesis::from_frame_labels)
            .collect();
        let regular: Vec<Vec<Symbol>> = hypotheses
            .iter()
            .map(|h| h.regular_tokens.clone())
            .collect();

        let mut hyp_embeds = None;
        let ar = match &self.fusion {
            Some(fusion) => {
                let (x_hyp, hyp_lens) = embed_hypothesis_batch(self.lm.model(), &regular)?;
                let x_shared = tap_concat(&shared_out)?;
                let out = fusion.forward(
                    &x_hyp,
                    &hyp_lens,
                    &x_shared,
                    &t_lens,
                    self.cfg.trainer.stop_gradient_accent,
                )?;
                hyp_embeds = Some((x_hyp, hyp_lens));
                Some(out)
            }
            None => None,
        };

        let prompts = match (&self.special, &ar) {
            (Some(special), Some(ar)) => {
                let gran = self.cfg.correction.granularity;
                let mmc = match (&self.asr, &self.adapter) {
                    (Some(asr), Some(adapter)) if gran.uses_mmc() => {
                        let asr_out = asr.forward_with(&frames, &lengths, drop)?;
                        if asr_out.lengths != t_lens {
                            return Err(Error::invalid_state("encoders disagree on output length"));
                        }
                        let x_asr = adapter.forward_with(&asr_out.hidden, &t_lens, drop)?;
                        let t_max = x_asr.dim(1)?;
                        let x_hyp_frames = embed_frame_hypothesis_batch(
                            self.lm.model(),
                            special,
                            &frame_labels,
                            t_max,
                        )?;
                        Some(build_mmc(
                            &x_asr,
                            &x_hyp_frames,
                            self.cfg.correction.mmc_mode,
                            self.mmc_proj.as_ref(),
                        )?)
                    }
                    _ => None,
                };
                let label_embeds = match labels {
                    Some(labels) => Some(self.embed_labels(labels)?),
                    None => None,
                };
                let batch = assemble_prompts(
                    PromptInputs {
                        mmc: mmc.as_ref().map(|values| Padded {
                            values,
                            lengths: &t_lens,
                        }),
                        mgc: match &hyp_embeds {
                            Some((values, lengths)) if gran.uses_mgc() => {
                                Some(Padded { values, lengths })
                            }
                            _ => None,
                        },
                        x_accent: &ar.x_accent,
                        labels: label_embeds
                            .as_ref()
                            .map(|(values, lengths)| Padded { values, lengths }),
                    },
                    special,
                )?;
                Some(batch)
            }
            _ => None,
        };

        Ok(BatchForward {
            frame_lengths: t_lens,
            ctc_logits,
            hypotheses,
            ar,
            prompts,
        })
    }

    fn embed_labels(&self, labels: &[Vec<Symbol>]) -> Result<(Tensor, Vec<usize>)> {
        let vocab = self.vocab();
        let lens: Vec<usize> = labels.iter().map(Vec::len).collect();
        let width = lens.iter().copied().max().unwrap_or(0).max(1);
        let mut ids = vec![vocab.pad_id(); labels.len() * width];
        for (i, y) in labels.iter().enumerate() {
            ids[i * width..i * width + y.len()].copy_from_slice(y);
        }
        Ok((
            self.lm.model().embed_batch(&ids, labels.len(), width)?,
            lens,
        ))
    }

    /// Loss terms for a batch of CTC-feasible utterances.
    pub fn losses(&self, utts: &[&Utterance]) -> Result<(LossTerms, BatchForward)> {
        self.losses_with(utts, None)
    }

    pub fn losses_with(
        &self,
        utts: &[&Utterance],
        drop: Option<&Dropout>,
    ) -> Result<(LossTerms, BatchForward)> {
        if let Some(u) = utts.iter().find(|u| !self.is_feasible(u)) {
            return Err(Error::invalid_argument(format!(
                "{} cannot be aligned by CTC",
                u.utt_id
            )));
        }
        let transcripts: Vec<Vec<Symbol>> = utts.iter().map(|u| u.transcript.clone()).collect();
        let with_labels = self.cfg.trainer.enable_lm_path;
        let fwd = self.forward_with(utts, with_labels.then_some(transcripts.as_slice()), drop)?;

        let l_ctc = ctc_loss_batch(&fwd.ctc_logits, &transcripts, &fwd.frame_lengths)?.mean(0)?;
        let l_ar = match (&fwd.ar, self.cfg.trainer.enable_ar_path) {
            (Some(ar), true) => {
                let accents: Vec<usize> = utts.iter().map(|u| u.accent).collect();
                Some(ar_loss(&ar.logits, &accents)?.mean(0)?)
            }
            _ => None,
        };
        let l_llm = match &fwd.prompts {
            Some(prompts) => {
                let (targets, weights, _) =
                    label_targets(&prompts.layouts, &transcripts, self.vocab())?;
                let logits = self.lm.model().forward(&prompts.embeddings)?;
                Some(masked_cross_entropy(&logits, &targets, &weights)?.mean(0)?)
            }
            None => None,
        };

        let mut total = l_ctc.affine(self.cfg.trainer.lambda, 0.0)?;
        if let Some(l) = &l_llm {
            total = (l + total)?;
        }
        if let Some(a) = &l_ar {
            total = (total + a.affine(self.cfg.trainer.mu, 0.0)?)?;
        }
        Ok((
            LossTerms {
                l_llm,
                l_ctc,
                l_ar,
                total,
            },
            fwd,
        ))
    }

    /// Greedy transcriptions from the frozen corrector; the CTC hypothesis when
    /// the corrector path is disabled.
    pub fn decode(&self, utts: &[&Utterance]) -> Result<(BatchForward, Vec<Vec<Symbol>>)> {
        let fwd = self.forward(utts, None)?;
        let corrected = match &fwd.prompts {
            Some(prompts) => {
                let rows = (0..utts.len())
                    .map(|b| prompts.row(b))
                    .collect::<Result<Vec<_>>>()?;
                let max_lens: Vec<usize> = fwd.frame_lengths.iter().map(|&t| 2 * t + 5).collect();
                self.lm.model().greedy_decode(&rows, &max_lens)?
            }
            None => fwd
                .hypotheses
                .iter()
                .map(|h| h.regular_tokens.clone())
                .collect(),
        };
        Ok((fwd, corrected))
    }
}
