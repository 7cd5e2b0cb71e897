//! Accent recognition from fused acoustic and linguistic streams.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::LanguageModel;
use crate::nn::{
    from_f64, gelu, join, key_padding_mask, log_softmax_last, masked_mean, softmax_last, Gru,
    Linear, ParamStore,
};
use crate::synthdata::Symbol;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionScheme {
    AcousticOnly,
    LinguisticOnly,
    Add,
    Concat,
    Attention,
}

impl FusionScheme {
    pub const ALL: [FusionScheme; 5] = [
        FusionScheme::AcousticOnly,
        FusionScheme::LinguisticOnly,
        FusionScheme::Add,
        FusionScheme::Concat,
        FusionScheme::Attention,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionScheme::AcousticOnly => "acoustic_only",
            FusionScheme::LinguisticOnly => "linguistic_only",
            FusionScheme::Add => "add",
            FusionScheme::Concat => "concat",
            FusionScheme::Attention => "attention",
        }
    }
}

impl fmt::Display for FusionScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionScheme::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::invalid_argument(format!("unknown fusion scheme {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub scheme: FusionScheme,
    /// Width of both projected streams and of every recurrent state.
    pub fusion_dim: usize,
    /// Width of the first two layers of the accent classifier.
    pub classifier_hidden: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            scheme: FusionScheme::Add,
            fusion_dim: 64,
            classifier_hidden: 128,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fusion_dim == 0 || self.classifier_hidden == 0 {
            return Err(Error::Config("fusion dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Table rows for a blank-free token sequence, `(U, D_lm)`.
pub fn embed_hypothesis(lm: &LanguageModel, tokens: &[Symbol]) -> Result<Tensor> {
    let vocab = lm.vocab();
    if let Some(bad) = tokens.iter().find(|&&t| !vocab.is_symbol(t)) {
        return Err(Error::invalid_argument(format!(
            "token {bad} is not a transcript symbol"
        )));
    }
    lm.embed_ids(tokens)
}

/// Batched table lookup, right-padded with the pad row; `(B, max(1, U_max), D_lm)`.
pub fn embed_hypothesis_batch(
    lm: &LanguageModel,
    hyps: &[Vec<Symbol>],
) -> Result<(Tensor, Vec<usize>)> {
    let vocab = lm.vocab();
    let lens: Vec<usize> = hyps.iter().map(Vec::len).collect();
    let u = lens.iter().copied().max().unwrap_or(0).max(1);
    let mut ids = vec![vocab.pad_id(); hyps.len() * u];
    for (i, h) in hyps.iter().enumerate() {
        if let Some(bad) = h.iter().find(|&&t| !vocab.is_symbol(t)) {
            return Err(Error::invalid_argument(format!(
                "token {bad} is not a transcript symbol"
            )));
        }
        ids[i * u..i * u + h.len()].copy_from_slice(h);
    }
    Ok((lm.embed_batch(&ids, hyps.len(), u)?, lens))
}

/// Per-utterance accent outputs.
#[derive(Debug, Clone)]
pub struct ArOutput {
    /// `(B, D_f)` classifier input.
    pub fused: Tensor,
    /// `(B, A)`.
    pub logits: Tensor,
    /// `(B, D_lm)`.
    pub x_accent: Tensor,
}

#[derive(Debug, Clone)]
pub struct ArFusion {
    cfg: FusionConfig,
    hyp_proj: Linear,
    shared_proj: Linear,
    gru_hyp: Option<Gru>,
    gru_shared: Option<Gru>,
    gru_concat: Option<Gru>,
    layers: [Linear; 3],
    accent_proj: Linear,
}

impl ArFusion {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &FusionConfig,
        lm_dim: usize,
        shared_dim: usize,
        num_accents: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let df = cfg.fusion_dim;
        let h = cfg.classifier_hidden;
        let p = |n: &str| join(prefix, n);
        let scheme = cfg.scheme;
        let gru_hyp = match scheme {
            FusionScheme::LinguisticOnly | FusionScheme::Add => {
                Some(Gru::new(store, &p("gru_hyp"), df, df)?)
            }
            _ => None,
        };
        // attention keeps an acoustic recurrence for empty hypotheses
        let gru_shared = match scheme {
            FusionScheme::AcousticOnly | FusionScheme::Add | FusionScheme::Attention => {
                Some(Gru::new(store, &p("gru_shared"), df, df)?)
            }
            _ => None,
        };
        let gru_concat = match scheme {
            FusionScheme::Concat => Some(Gru::new(store, &p("gru_concat"), df, df)?),
            _ => None,
        };
        Ok(Self {
            cfg: cfg.clone(),
            hyp_proj: Linear::new(store, &p("hyp_proj"), lm_dim, df)?,
            shared_proj: Linear::new(store, &p("shared_proj"), shared_dim, df)?,
            gru_hyp,
            gru_shared,
            gru_concat,
            layers: [
                Linear::new(store, &p("classifier.0"), df, h)?,
                Linear::new(store, &p("classifier.1"), h, h)?,
                Linear::new(store, &p("classifier.2"), h, num_accents)?,
            ],
            accent_proj: Linear::new(store, &p("accent_proj"), h, lm_dim)?,
        })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.cfg
    }

    /// Maps both streams to `D_f` with independent linear maps.
    pub fn project_streams(&self, x_hyp: &Tensor, x_shared: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((
            self.hyp_proj.forward(x_hyp)?,
            self.shared_proj.forward(x_shared)?,
        ))
    }

    fn gru<'a>(g: &'a Option<Gru>, what: &str) -> Result<&'a Gru> {
        g.as_ref()
            .ok_or_else(|| Error::invalid_state(format!("fusion has no {what} recurrence")))
    }

    pub fn acoustic_only(&self, shared_p: &Tensor, shared_lens: &[usize]) -> Result<Tensor> {
        Self::gru(&self.gru_shared, "acoustic")?.final_state(shared_p, shared_lens)
    }

    pub fn linguistic_only(&self, hyp_p: &Tensor, hyp_lens: &[usize]) -> Result<Tensor> {
        Self::gru(&self.gru_hyp, "linguistic")?.final_state(hyp_p, hyp_lens)
    }

    /// Sum of the final states of the two recurrences, `(B, D_f)`.
    pub fn add_fusion(
        &self,
        hyp_p: &Tensor,
        hyp_lens: &[usize],
        shared_p: &Tensor,
        shared_lens: &[usize],
    ) -> Result<Tensor> {
        Ok(
            (self.linguistic_only(hyp_p, hyp_lens)?
                + self.acoustic_only(shared_p, shared_lens)?)?,
        )
    }

    /// One recurrence over `[hyp ; shared]` per utterance, `(B, D_f)`.
    pub fn concat_fusion(
        &self,
        hyp_p: &Tensor,
        hyp_lens: &[usize],
        shared_p: &Tensor,
        shared_lens: &[usize],
    ) -> Result<Tensor> {
        let gru = Self::gru(&self.gru_concat, "concatenated")?;
        let (packed, lens) = concat_sequences(hyp_p, hyp_lens, shared_p, shared_lens)?;
        gru.final_state(&packed, &lens)
    }

    /// Scaled dot-product attention of hypothesis rows over acoustic frames
    /// plus a residual, `(B, U, D_f)`. Every hypothesis must be nonempty.
    pub fn attention_fusion(
        &self,
        hyp_p: &Tensor,
        hyp_lens: &[usize],
        shared_p: &Tensor,
        shared_lens: &[usize],
    ) -> Result<Tensor> {
        if hyp_lens.contains(&0) {
            return Err(Error::invalid_argument(
                "attention fusion needs a nonempty hypothesis",
            ));
        }
        let (attn, _) = attention(hyp_p, shared_p, shared_lens)?;
        Ok(attn)
    }

    /// Runs the configured scheme and the classifier.
    pub fn forward(
        &self,
        x_hyp: &Tensor,
        hyp_lens: &[usize],
        x_shared: &Tensor,
        shared_lens: &[usize],
        stop_gradient_accent: bool,
    ) -> Result<ArOutput> {
        let (hyp_p, shared_p) = self.project_streams(x_hyp, x_shared)?;
        let fused = match self.cfg.scheme {
            FusionScheme::AcousticOnly => self.acoustic_only(&shared_p, shared_lens)?,
            FusionScheme::LinguisticOnly => self.linguistic_only(&hyp_p, hyp_lens)?,
            FusionScheme::Add => self.add_fusion(&hyp_p, hyp_lens, &shared_p, shared_lens)?,
            FusionScheme::Concat => self.concat_fusion(&hyp_p, hyp_lens, &shared_p, shared_lens)?,
            FusionScheme::Attention => {
                self.attention_pooled(&hyp_p, hyp_lens, &shared_p, shared_lens)?
            }
        };
        self.classify(&fused, stop_gradient_accent)
    }

    fn attention_pooled(
        &self,
        hyp_p: &Tensor,
        hyp_lens: &[usize],
        shared_p: &Tensor,
        shared_lens: &[usize],
    ) -> Result<Tensor> {
        let empty: Vec<f64> = hyp_lens
            .iter()
            .map(|&u| if u == 0 { 1.0 } else { 0.0 })
            .collect();
        if empty.iter().all(|&e| e == 1.0) {
            return self.acoustic_only(shared_p, shared_lens);
        }
        let (attn, _) = attention(hyp_p, shared_p, shared_lens)?;
        let pooled = masked_mean(&attn, hyp_lens)?;
        if empty.iter().all(|&e| e == 0.0) {
            return Ok(pooled);
        }
        let fallback = self.acoustic_only(shared_p, shared_lens)?;
        let b = hyp_lens.len();
        let e = from_f64(empty.clone(), &[b, 1], pooled.dtype())?;
        let keep = from_f64(
            empty.iter().map(|x| 1.0 - x).collect(),
            &[b, 1],
            pooled.dtype(),
        )?;
        Ok((pooled.broadcast_mul(&keep)? + fallback.broadcast_mul(&e)?)?)
    }

    /// Three-layer classifier on `(B, D_f)`; the accent embedding is taken
    /// from the second layer.
    pub fn classify(&self, fused: &Tensor, stop_gradient_accent: bool) -> Result<ArOutput> {
        let a1 = gelu(&self.layers[0].forward(fused)?)?;
        let a2 = gelu(&self.layers[1].forward(&a1)?)?;
        let logits = self.layers[2].forward(&a2)?;
        let tap = if stop_gradient_accent {
            a2.detach()
        } else {
            a2
        };
        let x_accent = self.accent_proj.forward(&tap)?;
        Ok(ArOutput {
            fused: fused.clone(),
            logits,
            x_accent,
        })
    }
}

/// Attention output `(B, U, D)` and weights `(B, U, T)`.
pub fn attention(
    hyp_p: &Tensor,
    shared_p: &Tensor,
    shared_lens: &[usize],
) -> Result<(Tensor, Tensor)> {
    let (_, _, d) = hyp_p.dims3()?;
    let (_, t, _) = shared_p.dims3()?;
    let scores = (hyp_p.matmul(&shared_p.transpose(1, 2)?.contiguous()?)? / (d as f64).sqrt())?;
    let mask = key_padding_mask(shared_lens, t, hyp_p.dtype())?.squeeze(1)?;
    let weights = softmax_last(&scores.broadcast_add(&mask)?)?;
    Ok(((weights.matmul(shared_p)? + hyp_p)?, weights))
}

/// Packs `[hyp_b[..U_b] ; shared_b[..T_b]]` per row, right-padded with zeros.
fn concat_sequences(
    hyp_p: &Tensor,
    hyp_lens: &[usize],
    shared_p: &Tensor,
    shared_lens: &[usize],
) -> Result<(Tensor, Vec<usize>)> {
    let (b, u, d) = hyp_p.dims3()?;
    let (_, t, _) = shared_p.dims3()?;
    let lens: Vec<usize> = hyp_lens
        .iter()
        .zip(shared_lens)
        .map(|(a, c)| a + c)
        .collect();
    let total = lens.iter().copied().max().unwrap_or(0).max(1);
    let zero_row = (b * u + b * t) as u32;
    let mut idx = vec![zero_row; b * total];
    for i in 0..b {
        let mut k = 0;
        for j in 0..hyp_lens[i] {
            idx[i * total + k] = (i * u + j) as u32;
            k += 1;
        }
        for j in 0..shared_lens[i] {
            idx[i * total + k] = (b * u + i * t + j) as u32;
            k += 1;
        }
    }
    let bank = Tensor::cat(
        &[
            &hyp_p.reshape((b * u, d))?,
            &shared_p.reshape((b * t, d))?,
            &Tensor::zeros((1, d), hyp_p.dtype(), &Device::Cpu)?,
        ],
        0,
    )?;
    let idx = Tensor::from_vec(idx, b * total, &Device::Cpu)?;
    Ok((bank.index_select(&idx, 0)?.reshape((b, total, d))?, lens))
}

/// Softmax cross-entropy per utterance, `(B,)`.
pub fn ar_loss(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (b, a) = logits.dims2()?;
    if labels.len() != b {
        return Err(Error::invalid_argument("labels/batch mismatch"));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= a) {
        return Err(Error::invalid_argument(format!(
            "accent label {bad} outside [0, {a})"
        )));
    }
    let idx = Tensor::from_vec(
        labels.iter().map(|&l| l as u32).collect::<Vec<_>>(),
        (b, 1),
        &Device::Cpu,
    )?;
    Ok(log_softmax_last(logits)?
        .gather(&idx, D::Minus1)?
        .squeeze(1)?
        .neg()?)
}

/// Argmax accent per row.
pub fn predicted_accents(logits: &Tensor) -> Result<Vec<usize>> {
    let v = logits.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    Ok(v.iter()
        .map(|row| {
            let mut best = 0;
            for (k, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fusion(scheme: FusionScheme) -> (ParamStore, ArFusion) {
        let mut store = ParamStore::new(9, DType::F64);
        let cfg = FusionConfig {
            scheme,
            fusion_dim: 6,
            classifier_hidden: 8,
        };
        let f = ArFusion::new(&mut store, "ar", &cfg, 5, 7, 4).unwrap();
        (store, f)
    }

    fn randn(shape: &[usize]) -> Tensor {
        Tensor::randn(0f64, 1.0, shape, &Device::Cpu).unwrap()
    }

    fn max_abs(t: &Tensor) -> f64 {
        t.abs()
            .unwrap()
            .flatten_all()
            .unwrap()
            .max(0)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap()
    }

    #[test]
    fn every_scheme_yields_fixed_width() {
        for scheme in FusionScheme::ALL {
            let (_, f) = fusion(scheme);
            let out = f
                .forward(
                    &randn(&[2, 3, 5]),
                    &[3, 1],
                    &randn(&[2, 4, 7]),
                    &[4, 2],
                    false,
                )
                .unwrap();
            assert_eq!(out.fused.dims(), &[2, 6], "{scheme}");
            assert_eq!(out.logits.dims(), &[2, 4]);
            assert_eq!(out.x_accent.dims(), &[2, 5]);
        }
    }

    #[test]
    fn scheme_names_round_trip() {
        for s in FusionScheme::ALL {
            assert_eq!(s.as_str().parse::<FusionScheme>().unwrap(), s);
        }
        assert!("mul".parse::<FusionScheme>().is_err());
    }

    #[test]
    fn single_key_attention_adds_value() {
        let h = randn(&[1, 3, 4]);
        let v = randn(&[1, 1, 4]);
        let (out, w) = attention(&h, &v, &[1]).unwrap();
        let expect = h.broadcast_add(&v).unwrap();
        assert!(max_abs(&(out - expect).unwrap()) < 1e-12);
        assert!(max_abs(&(w - 1.0).unwrap()) < 1e-12);
    }

    #[test]
    fn attention_ignores_padded_frames() {
        let h = randn(&[1, 2, 4]);
        let s = randn(&[1, 5, 4]);
        let (a, _) = attention(&h, &s.narrow(1, 0, 3).unwrap(), &[3]).unwrap();
        let (b, _) = attention(&h, &s, &[3]).unwrap();
        assert!(max_abs(&(a - b).unwrap()) < 1e-12);
    }

    #[test]
    fn concat_with_empty_hypothesis_is_acoustic_recurrence() {
        let (_, f) = fusion(FusionScheme::Concat);
        let hyp = randn(&[1, 2, 6]);
        let shared = randn(&[1, 3, 6]);
        let a = f.concat_fusion(&hyp, &[0], &shared, &[3]).unwrap();
        let b = f
            .gru_concat
            .as_ref()
            .unwrap()
            .final_state(&shared, &[3])
            .unwrap();
        assert!(max_abs(&(a - b).unwrap()) < 1e-12);
    }

    #[test]
    fn attention_rejects_empty_but_forward_falls_back() {
        let (_, f) = fusion(FusionScheme::Attention);
        let hyp = randn(&[2, 2, 5]);
        let shared = randn(&[2, 3, 7]);
        let (hp, sp) = f.project_streams(&hyp, &shared).unwrap();
        assert!(f.attention_fusion(&hp, &[0, 2], &sp, &[3, 3]).is_err());
        let out = f.forward(&hyp, &[0, 2], &shared, &[3, 3], false).unwrap();
        let acoustic = f.acoustic_only(&sp, &[3, 3]).unwrap();
        let d = (out.fused.get(0).unwrap() - acoustic.get(0).unwrap()).unwrap();
        assert!(max_abs(&d) < 1e-12);
    }

    #[test]
    fn uniform_ar_loss_is_ln_a() {
        let logits = Tensor::zeros((2, 4), DType::F64, &Device::Cpu).unwrap();
        let l = ar_loss(&logits, &[0, 3]).unwrap().to_vec1::<f64>().unwrap();
        for v in l {
            assert!((v - 4f64.ln()).abs() < 1e-12);
        }
        assert!(ar_loss(&logits, &[4, 0]).is_err());
    }

    #[test]
    fn zero_weights_project_to_zero() {
        let (store, f) = fusion(FusionScheme::Add);
        store.zero_all().unwrap();
        let (a, b) = f
            .project_streams(&randn(&[1, 3, 5]), &randn(&[1, 4, 7]))
            .unwrap();
        assert_eq!(a.dims(), &[1, 3, 6]);
        assert_eq!(b.dims(), &[1, 4, 6]);
        assert_eq!(max_abs(&a) + max_abs(&b), 0.0);
    }
}
