//! Shared encoder (with intermediate taps), ASR encoder and LM adapter.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    join, key_padding_mask, length_mask, sinusoidal_positions, BlockDims, Dropout, LayerNorm,
    Linear, ParamStore, TransformerBlock,
};
use crate::synthdata::Utterance;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub num_layers: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub num_heads: usize,
    pub subsample_factor: usize,
    /// 1-based layer indices whose outputs are recorded.
    pub tap_layers: Vec<usize>,
    /// Kernel of the optional convolution sub-block; `None` disables it.
    pub conv_kernel: Option<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            num_layers: 4,
            model_dim: 64,
            ffn_dim: 256,
            num_heads: 4,
            subsample_factor: 1,
            tap_layers: quarter_taps(4),
            conv_kernel: None,
        }
    }
}

/// Evenly spaced quarter points of a stack of `num_layers` layers.
pub fn quarter_taps(num_layers: usize) -> Vec<usize> {
    let mut taps: Vec<usize> = (1..=4)
        .map(|q| (q * num_layers).div_ceil(4).max(1))
        .collect();
    taps.dedup();
    taps
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.subsample_factor == 0 {
            return Err(Error::invalid_argument("subsample factor must be >= 1"));
        }
        if self.num_heads == 0 || !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::invalid_argument(format!(
                "model dim {} must be divisible by {} heads",
                self.model_dim, self.num_heads
            )));
        }
        if let Some(&bad) = self
            .tap_layers
            .iter()
            .find(|&&l| l == 0 || l > self.num_layers)
        {
            return Err(Error::invalid_argument(format!(
                "tap layer {bad} outside [1, {}]",
                self.num_layers
            )));
        }
        Ok(())
    }

    fn block_dims(&self) -> BlockDims {
        BlockDims {
            dim: self.model_dim,
            ffn_dim: self.ffn_dim,
            heads: self.num_heads,
            rotary: false,
            conv_kernel: self.conv_kernel,
        }
    }
}

/// Hidden sequence plus recorded intermediate layers, for a padded batch.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `(B, T', D_enc)`
    pub hidden: Tensor,
    /// Each `(B, T', D_enc)`, in `tap_layers` order.
    pub taps: Vec<Tensor>,
    pub lengths: Vec<usize>,
}

/// Feature-dimension concatenation of the taps: `(B, T', k * D_enc)`.
pub fn tap_concat(out: &EncoderOutput) -> Result<Tensor> {
    if out.taps.is_empty() {
        return Err(Error::invalid_state("encoder output has no taps"));
    }
    if out.taps.len() == 1 {
        return Ok(out.taps[0].clone());
    }
    Ok(Tensor::cat(&out.taps, candle_core::D::Minus1)?)
}

pub fn subsampled_len(frames: usize, factor: usize) -> usize {
    frames.div_ceil(factor)
}

#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: EncoderConfig,
    input: Linear,
    blocks: Vec<TransformerBlock>,
    final_norm: LayerNorm,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let input = Linear::new(
            store,
            &join(prefix, "input"),
            cfg.input_dim * cfg.subsample_factor,
            cfg.model_dim,
        )?;
        let blocks = (0..cfg.num_layers)
            .map(|i| {
                TransformerBlock::new(store, &join(prefix, &format!("layer{i}")), cfg.block_dims())
            })
            .collect::<Result<Vec<_>>>()?;
        let final_norm = LayerNorm::new(store, &join(prefix, "final_norm"), cfg.model_dim)?;
        Ok(Self {
            cfg: cfg.clone(),
            input,
            blocks,
            final_norm,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// `frames`: `(B, T, F)` zero-padded; `lengths`: valid frames per utterance.
    pub fn forward(&self, frames: &Tensor, lengths: &[usize]) -> Result<EncoderOutput> {
        self.forward_with(frames, lengths, None)
    }

    /// As [`forward`](Self::forward), with training-time dropout.
    pub fn forward_with(
        &self,
        frames: &Tensor,
        lengths: &[usize],
        drop: Option<&Dropout>,
    ) -> Result<EncoderOutput> {
        let (b, t, f) = frames.dims3()?;
        if f != self.cfg.input_dim {
            return Err(Error::invalid_argument(format!(
                "encoder expects {} features per frame, got {f}",
                self.cfg.input_dim
            )));
        }
        if lengths.len() != b {
            return Err(Error::invalid_argument("lengths/batch mismatch"));
        }
        let r = self.cfg.subsample_factor;
        if let Some(&bad) = lengths.iter().find(|&&l| l < r || l > t) {
            return Err(Error::invalid_argument(format!(
                "utterance with {bad} frames cannot be encoded (subsample factor {r}, padded length {t})"
            )));
        }
        let t_out = subsampled_len(t, r);
        let stacked = frames
            .pad_with_zeros(1, 0, t_out * r - t)?
            .reshape((b, t_out, r * f))?;
        let out_lengths: Vec<usize> = lengths.iter().map(|&l| subsampled_len(l, r)).collect();
        let pos = sinusoidal_positions(t_out, self.cfg.model_dim, frames.dtype())?;
        let mut x = self.input.forward(&stacked)?.broadcast_add(&pos)?;
        let mask = key_padding_mask(&out_lengths, t_out, frames.dtype())?;
        let valid = if self.cfg.conv_kernel.is_some() {
            Some(length_mask(&out_lengths, t_out, frames.dtype())?)
        } else {
            None
        };
        let mut taps = Vec::with_capacity(self.cfg.tap_layers.len());
        let mut layer_out = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            x = block.forward_with(&x, Some(&mask), valid.as_ref(), drop)?;
            layer_out.push(x.clone());
        }
        for &l in &self.cfg.tap_layers {
            taps.push(layer_out[l - 1].clone());
        }
        let hidden = self.final_norm.forward(&x)?;
        Ok(EncoderOutput {
            hidden,
            taps,
            lengths: out_lengths,
        })
    }

    /// Single-utterance convenience: `frames` is `(T, F)`.
    pub fn encode(&self, frames: &Tensor) -> Result<EncoderOutput> {
        let (t, _) = frames.dims2()?;
        let out = self.forward(&frames.unsqueeze(0)?, &[t])?;
        Ok(EncoderOutput {
            hidden: out.hidden.squeeze(0)?,
            taps: out
                .taps
                .iter()
                .map(|x| x.squeeze(0))
                .collect::<candle_core::Result<_>>()?,
            lengths: out.lengths,
        })
    }
}

/// Maps ASR-encoder states into the language model's embedding space,
/// preserving sequence length.
#[derive(Debug, Clone)]
pub struct Adapter {
    blocks: Vec<TransformerBlock>,
    out: Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            num_heads: 4,
            ffn_dim: 256,
        }
    }
}

impl Adapter {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &AdapterConfig,
        input_dim: usize,
        lm_dim: usize,
    ) -> Result<Self> {
        let dims = BlockDims {
            dim: input_dim,
            ffn_dim: cfg.ffn_dim,
            heads: cfg.num_heads,
            rotary: false,
            conv_kernel: None,
        };
        let blocks = (0..cfg.num_layers)
            .map(|i| TransformerBlock::new(store, &join(prefix, &format!("layer{i}")), dims))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            blocks,
            out: Linear::new(store, &join(prefix, "out"), input_dim, lm_dim)?,
        })
    }

    /// `(B, T', D_enc)` to `(B, T', D_lm)`.
    pub fn forward(&self, asr_hidden: &Tensor, lengths: &[usize]) -> Result<Tensor> {
        self.forward_with(asr_hidden, lengths, None)
    }

    pub fn forward_with(
        &self,
        asr_hidden: &Tensor,
        lengths: &[usize],
        drop: Option<&Dropout>,
    ) -> Result<Tensor> {
        let (_, t, _) = asr_hidden.dims3()?;
        let mask = key_padding_mask(lengths, t, asr_hidden.dtype())?;
        let mut x = asr_hidden.clone();
        for block in &self.blocks {
            x = block.forward_with(&x, Some(&mask), None, drop)?;
        }
        self.out.forward(&x)
    }
}

/// Zero-padded `(B, T_max, F)` frames and valid lengths for a batch.
pub fn pad_frames(utts: &[&Utterance], dtype: DType) -> Result<(Tensor, Vec<usize>)> {
    let f = utts
        .first()
        .ok_or_else(|| Error::invalid_argument("empty batch"))?
        .feature_dim;
    let t_max = utts.iter().map(|u| u.num_frames).max().unwrap_or(0);
    let mut data = vec![0f32; utts.len() * t_max * f];
    for (i, u) in utts.iter().enumerate() {
        if u.feature_dim != f {
            return Err(Error::invalid_argument("mixed feature dims in batch"));
        }
        data[i * t_max * f..i * t_max * f + u.frames.len()].copy_from_slice(&u.frames);
    }
    let lengths = utts.iter().map(|u| u.num_frames).collect();
    let x = Tensor::from_vec(data, (utts.len(), t_max, f), &Device::Cpu)?.to_dtype(dtype)?;
    Ok((x, lengths))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(r: usize) -> EncoderConfig {
        EncoderConfig {
            input_dim: 4,
            num_layers: 2,
            model_dim: 8,
            ffn_dim: 16,
            num_heads: 2,
            subsample_factor: r,
            tap_layers: vec![1, 2],
            conv_kernel: None,
        }
    }

    #[test]
    fn subsampling_lengths() {
        let mut store = ParamStore::new(0, DType::F64);
        for (r, expect) in [(1, 12), (2, 6), (5, 3)] {
            let enc = Encoder::new(&mut store, &format!("e{r}"), &cfg(r)).unwrap();
            let x = Tensor::randn(0f64, 1.0, (12, 4), &Device::Cpu).unwrap();
            let out = enc.encode(&x).unwrap();
            assert_eq!(out.hidden.dims(), &[expect, 8]);
            assert_eq!(out.taps.len(), 2);
            assert!(out.taps.iter().all(|t| t.dims() == out.hidden.dims()));
        }
    }

    #[test]
    fn zero_params_zero_input_is_finite() {
        let mut store = ParamStore::new(0, DType::F64);
        let enc = Encoder::new(&mut store, "e", &cfg(1)).unwrap();
        store.zero_all().unwrap();
        let out = enc
            .encode(&Tensor::zeros((6, 4), DType::F64, &Device::Cpu).unwrap())
            .unwrap();
        let v = out.hidden.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn padding_does_not_leak() {
        let mut store = ParamStore::new(3, DType::F64);
        let c = EncoderConfig {
            conv_kernel: Some(3),
            ..cfg(1)
        };
        let enc = Encoder::new(&mut store, "e", &c).unwrap();
        let x = Tensor::randn(0f64, 1.0, (1, 5, 4), &Device::Cpu).unwrap();
        let alone = enc.forward(&x, &[5]).unwrap().hidden;
        let padded = enc
            .forward(&x.pad_with_zeros(1, 0, 3).unwrap(), &[5])
            .unwrap()
            .hidden
            .narrow(1, 0, 5)
            .unwrap();
        let d = (alone - padded).unwrap().abs().unwrap().max_all().unwrap();
        assert!(d.to_scalar::<f64>().unwrap() < 1e-10);
    }

    #[test]
    fn invalid_configs() {
        let mut c = cfg(1);
        c.tap_layers = vec![3];
        assert!(c.validate().is_err());
        c = cfg(0);
        assert!(c.validate().is_err());
        c = cfg(1);
        c.num_heads = 3;
        assert!(c.validate().is_err());
        assert_eq!(quarter_taps(4), vec![1, 2, 3, 4]);
        assert_eq!(quarter_taps(12), vec![3, 6, 9, 12]);
    }

    #[test]
    fn frames_shorter_than_factor_rejected() {
        let mut store = ParamStore::new(0, DType::F64);
        let enc = Encoder::new(&mut store, "e", &cfg(2)).unwrap();
        let x = Tensor::zeros((1, 4), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(enc.encode(&x), Err(Error::InvalidArgument(_))));
    }
}
