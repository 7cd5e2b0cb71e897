//! Joint training, evaluation, checkpointing and the ablation matrix.

mod ablation;
mod checkpoint;
mod config;
mod eval;
mod model;
mod reference;

use std::io::Write;

use candle_core::DType;
use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::FrozenLm;
use crate::nn::{derive_seed, Dropout};
use crate::optim::Adam;
use crate::synthdata::Utterance;

pub use ablation::{render_ablation_table, run_ablation_matrix, AblationOutcome, AblationReport};
pub use checkpoint::CHECKPOINT_FORMAT;
pub use config::{
    ablation_row, total_loss, AblationRow, CorrectionConfig, EncodersConfig, MmgerConfig,
    TrainerConfig, ABLATION_ROWS,
};
pub use eval::{cer, edit_distance, evaluate, AccentReport, DecodeRow, EvalReport};
pub use model::{BatchForward, LossTerms, MmgerModel};
pub use reference::ctc_reference_losses;

/// Order in which utterances are visited during `epoch`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("epoch{epoch}")));
    order.shuffle(&mut rng);
    order
}

/// Dropout for the update at 1-based `position`; `None` when disabled.
pub(crate) fn step_dropout(cfg: &TrainerConfig, position: u64) -> Result<Option<Dropout>> {
    if cfg.dropout == 0.0 {
        return Ok(None);
    }
    Dropout::new(
        cfg.dropout,
        derive_seed(cfg.seed, &format!("dropout/{position}")),
    )
    .map(Some)
}

pub fn batches_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

/// Losses of one update. `l_llm`/`l_ar` are NaN when their path is off.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub l_llm: f64,
    pub l_ctc: f64,
    pub l_ar: f64,
    pub total: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub utterances: usize,
    pub skipped_infeasible: usize,
}

impl StepRecord {
    pub const TSV_HEADER: &'static str =
        "step\tl_llm\tl_ctc\tl_ar\ttotal\tlr\tgrad_norm\tutterances\tskipped";

    pub fn tsv(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.3e}\t{:.4}\t{}\t{}",
            self.step,
            self.l_llm,
            self.l_ctc,
            self.l_ar,
            self.total,
            self.lr,
            self.grad_norm,
            self.utterances,
            self.skipped_infeasible
        )
    }
}

fn scalar(t: &candle_core::Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Model plus optimizer state and the position in the data stream.
#[derive(Debug, Clone)]
pub struct Trainer {
    model: MmgerModel,
    adam: Adam,
    /// Batches consumed so far, across epochs.
    position: u64,
    skipped_infeasible: u64,
    history: Vec<StepRecord>,
}

impl Trainer {
    pub fn new(cfg: &MmgerConfig, lm: FrozenLm, num_accents: usize, dtype: DType) -> Result<Self> {
        let model = MmgerModel::new(cfg, lm, num_accents, dtype)?;
        Ok(Self::from_parts(
            model,
            Adam::new(cfg.trainer.optimizer.clone()),
            0,
            0,
        ))
    }

    pub(crate) fn from_parts(
        model: MmgerModel,
        adam: Adam,
        position: u64,
        skipped_infeasible: u64,
    ) -> Self {
        Self {
            model,
            adam,
            position,
            skipped_infeasible,
            history: Vec::new(),
        }
    }

    pub fn model(&self) -> &MmgerModel {
        &self.model
    }

    pub fn optimizer(&self) -> &Adam {
        &self.adam
    }

    pub fn position(&self) -> u64 {
        self.position
    }

    pub fn skipped_infeasible(&self) -> u64 {
        self.skipped_infeasible
    }

    /// Records of the steps run by this instance.
    pub fn history(&self) -> &[StepRecord] {
        &self.history
    }

    /// One update on `batch`; CTC-infeasible utterances are dropped first.
    /// Returns `None` when nothing in the batch is trainable.
    pub fn train_step(&mut self, batch: &[&Utterance]) -> Result<Option<StepRecord>> {
        self.position += 1;
        let kept: Vec<&Utterance> = batch
            .iter()
            .copied()
            .filter(|u| self.model.is_feasible(u))
            .collect();
        let skipped = batch.len() - kept.len();
        self.skipped_infeasible += skipped as u64;
        if skipped > 0 {
            debug!("skipping {skipped} CTC-infeasible utterances");
        }
        if kept.is_empty() {
            return Ok(None);
        }
        let drop = step_dropout(&self.model.config().trainer, self.position)?;
        let (terms, _) = self.model.losses_with(&kept, drop.as_ref())?;
        let l_ctc = scalar(&terms.l_ctc)?;
        let l_llm = terms
            .l_llm
            .as_ref()
            .map(scalar)
            .transpose()?
            .unwrap_or(f64::NAN);
        let l_ar = terms
            .l_ar
            .as_ref()
            .map(scalar)
            .transpose()?
            .unwrap_or(f64::NAN);
        let total = scalar(&terms.total)?;
        if !total.is_finite() {
            let ids: Vec<&str> = kept.iter().map(|u| u.utt_id.as_str()).collect();
            return Err(Error::NonFiniteLoss {
                step: self.adam.step_count() + 1,
                detail: format!(
                    "l_llm={l_llm} l_ctc={l_ctc} l_ar={l_ar} total={total} batch={ids:?}"
                ),
            });
        }
        let grads = terms.total.backward()?;
        let stats = self.adam.step(self.model.store(), &grads)?;
        let record = StepRecord {
            step: self.adam.step_count(),
            l_llm,
            l_ctc,
            l_ar,
            total,
            lr: stats.lr,
            grad_norm: stats.grad_norm,
            utterances: kept.len(),
            skipped_infeasible: skipped,
        };
        self.history.push(record);
        Ok(Some(record))
    }

    /// Trains from the current position to the end of the configured epochs,
    /// or until `stop_at` batches have been consumed. Each record goes to `log`.
    pub fn fit(
        &mut self,
        data: &[Utterance],
        stop_at: Option<u64>,
        mut log: Option<&mut dyn Write>,
    ) -> Result<()> {
        if data.is_empty() {
            return Err(Error::invalid_argument("training set is empty"));
        }
        let cfg = self.model.config().trainer.clone();
        let per_epoch = batches_per_epoch(data.len(), cfg.batch_size) as u64;
        let end = per_epoch * cfg.epochs as u64;
        let end = stop_at.map_or(end, |s| s.min(end));
        let lm_checksum = self.model.lm().checksum().to_string();
        let mut order_epoch = None;
        let mut order = Vec::new();
        while self.position < end {
            let epoch = (self.position / per_epoch) as usize;
            let index = (self.position % per_epoch) as usize;
            if order_epoch != Some(epoch) {
                order = epoch_order(cfg.seed, epoch, data.len());
                order_epoch = Some(epoch);
            }
            let lo = index * cfg.batch_size;
            let hi = (lo + cfg.batch_size).min(data.len());
            let batch: Vec<&Utterance> = order[lo..hi].iter().map(|&i| &data[i]).collect();
            if let Some(rec) = self.train_step(&batch)? {
                if let Some(w) = log.as_deref_mut() {
                    writeln!(w, "{}", rec.tsv()).map_err(|e| Error::io("metrics log", e))?;
                }
                if rec.step % 50 == 0 {
                    info!(
                        "epoch {} step {} total {:.4} (llm {:.4}, ctc {:.4}, ar {:.4})",
                        epoch + 1,
                        rec.step,
                        rec.total,
                        rec.l_llm,
                        rec.l_ctc,
                        rec.l_ar
                    );
                }
            }
        }
        let now = self.model.lm().current_checksum()?;
        if now != lm_checksum {
            return Err(Error::Checksum {
                what: "frozen language model after training".into(),
                expected: lm_checksum,
                found: now,
            });
        }
        Ok(())
    }
}
