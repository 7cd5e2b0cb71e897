use candle_core::DType;

use super::{batches_per_epoch, epoch_order, step_dropout, MmgerConfig};
use crate::ctc::{ctc_loss_batch, is_feasible, CtcHead};
use crate::encoders::{pad_frames, subsampled_len, Encoder};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::optim::Adam;
use crate::synthdata::{SymbolVocab, Utterance};

/// Plain CTC training on the shared encoder alone, scaled by `lambda`; returns
/// the loss of every update. Used to check that the joint trainer reduces to it.
pub fn ctc_reference_losses(
    cfg: &MmgerConfig,
    vocab: SymbolVocab,
    data: &[Utterance],
    max_batches: u64,
    dtype: DType,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::invalid_argument("training set is empty"));
    }
    let t = &cfg.trainer;
    let enc_cfg = &cfg.encoders.shared;
    let mut store = ParamStore::new(t.seed, dtype);
    let encoder = Encoder::new(&mut store, "shared", enc_cfg)?;
    let head = CtcHead::new(&mut store, "ctc", enc_cfg.model_dim, vocab.ctc_classes())?;
    let mut adam = Adam::new(t.optimizer.clone());
    let per_epoch = batches_per_epoch(data.len(), t.batch_size) as u64;
    let end = max_batches.min(per_epoch * t.epochs as u64);
    let mut losses = Vec::new();
    for pos in 0..end {
        let epoch = (pos / per_epoch) as usize;
        let order = epoch_order(t.seed, epoch, data.len());
        let lo = (pos % per_epoch) as usize * t.batch_size;
        let hi = (lo + t.batch_size).min(data.len());
        let batch: Vec<&Utterance> = order[lo..hi]
            .iter()
            .map(|&i| &data[i])
            .filter(|u| {
                is_feasible(
                    &u.transcript,
                    subsampled_len(u.num_frames, enc_cfg.subsample_factor),
                )
            })
            .collect();
        if batch.is_empty() {
            continue;
        }
        let (frames, lengths) = pad_frames(&batch, dtype)?;
        let drop = step_dropout(t, pos + 1)?;
        let out = encoder.forward_with(&frames, &lengths, drop.as_ref())?;
        let logits = head.logits(&out.hidden)?;
        let targets: Vec<_> = batch.iter().map(|u| u.transcript.clone()).collect();
        let loss = ctc_loss_batch(&logits, &targets, &out.lengths)?
            .mean(0)?
            .affine(t.lambda, 0.0)?;
        let grads = loss.backward()?;
        adam.step(&store, &grads)?;
        losses.push(loss.to_dtype(DType::F64)?.to_scalar::<f64>()?);
    }
    Ok(losses)
}
