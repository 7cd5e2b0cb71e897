//! Prompt construction for the frozen corrector: the frame-level multi-modal
//! segment, the token-level segment and the trainable delimiters.

use std::fmt;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::LanguageModel;
use crate::nn::{join, Init, Linear, ParamStore};
use crate::synthdata::{Symbol, SymbolVocab};

pub use crate::arfusion::embed_hypothesis as build_mgc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MmcMode {
    #[default]
    Both,
    AcousticOnly,
    LinguisticOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    #[default]
    Both,
    /// Token-level segment only.
    CoarseOnly,
    /// Frame-level segment only.
    FineOnly,
}

impl Granularity {
    pub fn uses_mmc(self) -> bool {
        self != Granularity::CoarseOnly
    }

    pub fn uses_mgc(self) -> bool {
        self != Granularity::FineOnly
    }
}

/// Five trainable delimiters and the embedding used for blank frames.
#[derive(Debug, Clone)]
pub struct SpecialTokens {
    pub som: Tensor,
    pub eom: Tensor,
    pub sog: Tensor,
    pub eog: Tensor,
    pub tra: Tensor,
    pub blank: Tensor,
}

impl SpecialTokens {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<Self> {
        let init = Init::Normal(1.0 / (dim as f64).sqrt());
        let mut get = |n: &str| store.get(&join(prefix, n), &[dim], init);
        Ok(Self {
            som: get("som")?,
            eom: get("eom")?,
            sog: get("sog")?,
            eog: get("eog")?,
            tra: get("tra")?,
            blank: get("blank")?,
        })
    }

    /// Delimiters stacked in `Segment` order: SOM, EOM, SOG, EOG, TRA.
    fn stacked(&self) -> Result<Tensor> {
        Ok(Tensor::stack(
            &[&self.som, &self.eom, &self.sog, &self.eog, &self.tra],
            0,
        )?)
    }
}

/// Per-frame lookup keeping blanks and repeats, `(T', D_lm)`.
pub fn embed_frame_hypothesis(
    lm: &LanguageModel,
    st: &SpecialTokens,
    frame_labels: &[Symbol],
) -> Result<Tensor> {
    let len = frame_labels.len();
    Ok(
        embed_frame_hypothesis_batch(lm, st, &[frame_labels.to_vec()], len.max(1))?
            .get(0)?
            .narrow(0, 0, len)?,
    )
}

/// Batched per-frame lookup right-padded to `t` rows, `(B, t, D_lm)`.
pub fn embed_frame_hypothesis_batch(
    lm: &LanguageModel,
    st: &SpecialTokens,
    frame_labels: &[Vec<Symbol>],
    t: usize,
) -> Result<Tensor> {
    let vocab = lm.vocab();
    let table = lm.table();
    let blank_row = table.dim(0)? as u32;
    let bank = Tensor::cat(&[table, &st.blank.unsqueeze(0)?], 0)?;
    let mut idx = vec![vocab.pad_id(); frame_labels.len() * t];
    for (i, labels) in frame_labels.iter().enumerate() {
        if labels.len() > t {
            return Err(Error::invalid_argument(
                "frame labels longer than the padded length",
            ));
        }
        for (j, &l) in labels.iter().enumerate() {
            idx[i * t + j] = if l == SymbolVocab::BLANK {
                blank_row
            } else if vocab.is_symbol(l) {
                l
            } else {
                return Err(Error::invalid_argument(format!(
                    "frame label {l} is not a CTC class"
                )));
            };
        }
    }
    let idx = Tensor::from_vec(idx, frame_labels.len() * t, &Device::Cpu)?;
    Ok(bank
        .index_select(&idx, 0)?
        .reshape((frame_labels.len(), t, lm.dim()))?)
}

/// Projects the feature-wise concatenation of both frame streams back to `D_lm`.
#[derive(Debug, Clone)]
pub struct MmcProjector {
    proj: Linear,
}

impl MmcProjector {
    pub fn new(store: &mut ParamStore, prefix: &str, lm_dim: usize) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(store, prefix, 2 * lm_dim, lm_dim)?,
        })
    }
}

/// Frame-level segment; inputs are `(.., T', D_lm)` with equal row counts.
pub fn build_mmc(
    x_asr: &Tensor,
    x_hyp_frames: &Tensor,
    mode: MmcMode,
    projector: Option<&MmcProjector>,
) -> Result<Tensor> {
    let rank = x_asr.rank();
    if x_asr.dims()[..rank - 1] != x_hyp_frames.dims()[..x_hyp_frames.rank().max(1) - 1] {
        return Err(Error::invalid_state(format!(
            "acoustic stream {:?} and frame hypothesis {:?} disagree in length",
            x_asr.dims(),
            x_hyp_frames.dims()
        )));
    }
    match mode {
        MmcMode::AcousticOnly => Ok(x_asr.clone()),
        MmcMode::LinguisticOnly => Ok(x_hyp_frames.clone()),
        MmcMode::Both => {
            let p = projector.ok_or_else(|| Error::invalid_state("MMC projector missing"))?;
            let cat = Tensor::cat(&[x_asr, x_hyp_frames], rank - 1)?;
            p.proj.forward(&cat)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Segment {
    Som,
    Mmc,
    Eom,
    Sog,
    Mgc,
    Eog,
    Tra,
    Acc,
    Labels,
}

impl Segment {
    pub fn tag(self) -> &'static str {
        match self {
            Segment::Som => "SOM",
            Segment::Mmc => "MMC",
            Segment::Eom => "EOM",
            Segment::Sog => "SOG",
            Segment::Mgc => "MGC",
            Segment::Eog => "EOG",
            Segment::Tra => "TRA",
            Segment::Acc => "ACC",
            Segment::Labels => "LAB",
        }
    }

    fn delimiter_row(self) -> Option<u32> {
        match self {
            Segment::Som => Some(0),
            Segment::Eom => Some(1),
            Segment::Sog => Some(2),
            Segment::Eog => Some(3),
            Segment::Tra => Some(4),
            _ => None,
        }
    }
}

/// Ordered `(segment, length)` runs of one prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptLayout {
    pub runs: Vec<(Segment, usize)>,
}

impl PromptLayout {
    pub fn new(
        mmc_len: Option<usize>,
        mgc_len: Option<usize>,
        labels_len: Option<usize>,
    ) -> Result<Self> {
        if mmc_len.is_none() && mgc_len.is_none() {
            return Err(Error::invalid_argument(
                "prompt needs a frame-level or token-level segment",
            ));
        }
        let mut runs = Vec::with_capacity(9);
        if let Some(t) = mmc_len {
            runs.extend([(Segment::Som, 1), (Segment::Mmc, t), (Segment::Eom, 1)]);
        }
        if let Some(u) = mgc_len {
            runs.extend([(Segment::Sog, 1), (Segment::Mgc, u), (Segment::Eog, 1)]);
        }
        runs.extend([(Segment::Tra, 1), (Segment::Acc, 1)]);
        if let Some(l) = labels_len {
            runs.push((Segment::Labels, l));
        }
        Ok(Self { runs })
    }

    pub fn len(&self) -> usize {
        self.runs.iter().map(|r| r.1).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Start position of the first run of `seg`.
    pub fn offset(&self, seg: Segment) -> Option<usize> {
        let mut pos = 0;
        for &(s, n) in &self.runs {
            if s == seg {
                return Some(pos);
            }
            pos += n;
        }
        None
    }

    /// One tag per position.
    pub fn tags(&self) -> Vec<Segment> {
        self.runs
            .iter()
            .flat_map(|&(s, n)| std::iter::repeat_n(s, n))
            .collect()
    }
}

impl fmt::Display for PromptLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (s, n)) in self.runs.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{}:{}", s.tag(), n)?;
        }
        Ok(())
    }
}

/// Debug dump: `utt_id<TAB>layout`, one line per utterance.
pub fn dump_layouts<'a>(
    ids: impl IntoIterator<Item = &'a str>,
    layouts: &[PromptLayout],
) -> String {
    ids.into_iter()
        .zip(layouts)
        .map(|(id, l)| format!("{id}\t{l}\n"))
        .collect()
}

/// A padded segment: `(B, N, D)` plus valid lengths.
#[derive(Debug, Clone, Copy)]
pub struct Padded<'a> {
    pub values: &'a Tensor,
    pub lengths: &'a [usize],
}

/// Batched prompt inputs; `x_accent` is `(B, D_lm)`.
#[derive(Debug, Clone, Copy)]
pub struct PromptInputs<'a> {
    pub mmc: Option<Padded<'a>>,
    pub mgc: Option<Padded<'a>>,
    pub x_accent: &'a Tensor,
    pub labels: Option<Padded<'a>>,
}

/// Right-padded prompts `(B, P_max, D_lm)`; padding rows are zero.
#[derive(Debug, Clone)]
pub struct PromptBatch {
    pub embeddings: Tensor,
    pub layouts: Vec<PromptLayout>,
}

impl PromptBatch {
    pub fn lengths(&self) -> Vec<usize> {
        self.layouts.iter().map(PromptLayout::len).collect()
    }

    /// Unpadded prompt of row `b`.
    pub fn row(&self, b: usize) -> Result<Tensor> {
        Ok(self
            .embeddings
            .get(b)?
            .narrow(0, 0, self.layouts[b].len())?)
    }
}

fn flat(p: &Padded<'_>, batch: usize) -> Result<(Tensor, usize)> {
    let (b, n, d) = p.values.dims3()?;
    if b != batch || p.lengths.len() != batch {
        return Err(Error::invalid_argument("segment batch size mismatch"));
    }
    if p.lengths.iter().any(|&l| l > n) {
        return Err(Error::invalid_argument(
            "segment length exceeds padded width",
        ));
    }
    Ok((p.values.reshape((b * n, d))?, n))
}

/// Gathers every prompt position from one bank of rows, so gradients reach
/// each source through a single indexed copy.
pub fn assemble_prompts(inputs: PromptInputs<'_>, st: &SpecialTokens) -> Result<PromptBatch> {
    let (b, d) = inputs.x_accent.dims2()?;
    let dtype: DType = inputs.x_accent.dtype();
    let mut parts: Vec<Tensor> = vec![st.stacked()?];
    let mut base = 5usize;
    let mut section =
        |p: &Option<Padded<'_>>, parts: &mut Vec<Tensor>| -> Result<Option<(usize, usize)>> {
            match p {
                Some(p) => {
                    let (f, n) = flat(p, b)?;
                    let start = base;
                    base += f.dim(0)?;
                    parts.push(f);
                    Ok(Some((start, n)))
                }
                None => Ok(None),
            }
        };
    let mmc = section(&inputs.mmc, &mut parts)?;
    let mgc = section(&inputs.mgc, &mut parts)?;
    let labels = section(&inputs.labels, &mut parts)?;
    let acc_start = base;
    parts.push(inputs.x_accent.clone());
    let zero_row = (acc_start + b) as u32;
    parts.push(Tensor::zeros((1, d), dtype, &Device::Cpu)?);
    let bank = Tensor::cat(&parts, 0)?;

    let mut layouts = Vec::with_capacity(b);
    for i in 0..b {
        layouts.push(PromptLayout::new(
            inputs.mmc.map(|p| p.lengths[i]),
            inputs.mgc.map(|p| p.lengths[i]),
            inputs.labels.map(|p| p.lengths[i]),
        )?);
    }
    let width = layouts.iter().map(PromptLayout::len).max().unwrap_or(0);
    let mut idx = vec![zero_row; b * width];
    for (i, layout) in layouts.iter().enumerate() {
        let mut pos = i * width;
        for &(seg, n) in &layout.runs {
            let source = match seg {
                Segment::Mmc => mmc,
                Segment::Mgc => mgc,
                Segment::Labels => labels,
                _ => None,
            };
            for k in 0..n {
                idx[pos] = if let Some(row) = seg.delimiter_row() {
                    row
                } else if seg == Segment::Acc {
                    (acc_start + i) as u32
                } else {
                    let (start, stride) = source.expect("layout only lists present segments");
                    (start + i * stride + k) as u32
                };
                pos += 1;
            }
        }
    }
    let idx = Tensor::from_vec(idx, b * width, &Device::Cpu)?;
    Ok(PromptBatch {
        embeddings: bank.index_select(&idx, 0)?.reshape((b, width, d))?,
        layouts,
    })
}

/// Single-utterance prompt from unbatched `(N, D_lm)` segments and a `D_lm` accent vector.
pub fn assemble_prompt(
    mmc: Option<&Tensor>,
    mgc: Option<&Tensor>,
    x_accent: &Tensor,
    labels: Option<&Tensor>,
    st: &SpecialTokens,
) -> Result<(Tensor, PromptLayout)> {
    let d = x_accent.dim(0)?;
    let prep = |t: Option<&Tensor>| -> Result<Option<(Tensor, [usize; 1])>> {
        match t {
            Some(t) => {
                let n = t.dim(0)?;
                // a one-row zero pad keeps empty segments addressable
                let padded = if n == 0 {
                    Tensor::zeros((1, 1, d), t.dtype(), &Device::Cpu)?
                } else {
                    t.unsqueeze(0)?
                };
                Ok(Some((padded, [n])))
            }
            None => Ok(None),
        }
    };
    let (mmc, mgc, labels) = (prep(mmc)?, prep(mgc)?, prep(labels)?);
    fn wrap(p: &Option<(Tensor, [usize; 1])>) -> Option<Padded<'_>> {
        p.as_ref().map(|(v, l)| Padded {
            values: v,
            lengths: l.as_slice(),
        })
    }
    let acc = x_accent.unsqueeze(0)?;
    let batch = assemble_prompts(
        PromptInputs {
            mmc: wrap(&mmc),
            mgc: wrap(&mgc),
            x_accent: &acc,
            labels: wrap(&labels),
        },
        st,
    )?;
    Ok((batch.row(0)?, batch.layouts[0].clone()))
}

/// Teacher-forcing targets for a prompt batch: each label and a final eos are
/// predicted from the position before them.
pub fn label_targets(
    layouts: &[PromptLayout],
    labels: &[Vec<Symbol>],
    vocab: SymbolVocab,
) -> Result<(Vec<Symbol>, Vec<f64>, usize)> {
    let width = layouts.iter().map(PromptLayout::len).max().unwrap_or(0);
    let mut targets = vec![vocab.pad_id(); layouts.len() * width];
    let mut weights = vec![0.0; layouts.len() * width];
    for (i, (layout, y)) in layouts.iter().zip(labels).enumerate() {
        let acc = layout
            .offset(Segment::Acc)
            .ok_or_else(|| Error::invalid_state("prompt lacks an accent slot"))?;
        if layout.len() != acc + 1 + y.len() {
            return Err(Error::invalid_state(
                "label segment does not match the transcript",
            ));
        }
        for (k, &tok) in y.iter().chain(std::iter::once(&vocab.eos_id())).enumerate() {
            targets[i * width + acc + k] = tok;
            weights[i * width + acc + k] = 1.0;
        }
    }
    Ok((targets, weights, width))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::LmConfig;

    fn setup() -> (LanguageModel, SpecialTokens) {
        let mut store = ParamStore::new(2, DType::F64);
        let lm = LanguageModel::new(
            &mut store,
            SymbolVocab::new(5).unwrap(),
            &LmConfig {
                dim: 4,
                num_layers: 1,
                num_heads: 1,
                ffn_dim: 8,
                context_cap: 64,
            },
        )
        .unwrap();
        let st = SpecialTokens::new(&mut store, "st", 4).unwrap();
        (lm, st)
    }

    fn rows(t: &Tensor) -> Vec<Vec<f64>> {
        t.to_vec2::<f64>().unwrap()
    }

    #[test]
    fn blank_frames_use_surrogate() {
        let (lm, st) = setup();
        let x = embed_frame_hypothesis(&lm, &st, &[0, 2, 2]).unwrap();
        let r = rows(&x);
        assert_eq!(r[0], st.blank.to_vec1::<f64>().unwrap());
        let e2 = lm.embed_ids(&[2]).unwrap();
        assert_eq!(r[1], rows(&e2)[0]);
        assert_eq!(r[2], rows(&e2)[0]);
        assert!(embed_frame_hypothesis(&lm, &st, &[6]).is_err());
    }

    #[test]
    fn mgc_matches_hypothesis_lookup() {
        let (lm, _) = setup();
        let a = build_mgc(&lm, &[3, 1]).unwrap();
        assert_eq!(rows(&a), rows(&lm.embed_ids(&[3, 1]).unwrap()));
        assert_eq!(build_mgc(&lm, &[]).unwrap().dims(), &[0, 4]);
    }

    #[test]
    fn layout_lengths() {
        let full = PromptLayout::new(Some(3), Some(2), Some(4)).unwrap();
        assert_eq!(full.len(), 15);
        assert_eq!(
            full.to_string(),
            "SOM:1 MMC:3 EOM:1 SOG:1 MGC:2 EOG:1 TRA:1 ACC:1 LAB:4"
        );
        assert_eq!(PromptLayout::new(None, Some(2), Some(4)).unwrap().len(), 10);
        assert!(PromptLayout::new(None, None, None).is_err());
        let inference = PromptLayout::new(Some(3), Some(0), None).unwrap();
        assert_eq!(*inference.tags().last().unwrap(), Segment::Acc);
        assert_eq!(inference.len(), 9);
    }

    #[test]
    fn assembled_rows_follow_layout() {
        let (lm, st) = setup();
        let mmc = Tensor::randn(0f64, 1.0, (2, 4), &Device::Cpu).unwrap();
        let mgc = lm.embed_ids(&[1]).unwrap();
        let acc = Tensor::randn(0f64, 1.0, 4, &Device::Cpu).unwrap();
        let (p, layout) = assemble_prompt(Some(&mmc), Some(&mgc), &acc, None, &st).unwrap();
        assert_eq!(layout.len(), 9);
        let r = rows(&p);
        assert_eq!(r[0], st.som.to_vec1::<f64>().unwrap());
        assert_eq!(r[1..3].to_vec(), rows(&mmc));
        assert_eq!(r[3], st.eom.to_vec1::<f64>().unwrap());
        assert_eq!(r[4], st.sog.to_vec1::<f64>().unwrap());
        assert_eq!(r[5], rows(&mgc)[0]);
        assert_eq!(r[6], st.eog.to_vec1::<f64>().unwrap());
        assert_eq!(r[7], st.tra.to_vec1::<f64>().unwrap());
        assert_eq!(r[8], acc.to_vec1::<f64>().unwrap());
    }

    #[test]
    fn mmc_modes() {
        let mut store = ParamStore::new(0, DType::F64);
        let proj = MmcProjector::new(&mut store, "mmc", 4).unwrap();
        let a = Tensor::randn(0f64, 1.0, (3, 4), &Device::Cpu).unwrap();
        let h = Tensor::randn(0f64, 1.0, (3, 4), &Device::Cpu).unwrap();
        assert_eq!(
            rows(&build_mmc(&a, &h, MmcMode::AcousticOnly, None).unwrap()),
            rows(&a)
        );
        assert_eq!(
            rows(&build_mmc(&a, &h, MmcMode::LinguisticOnly, None).unwrap()),
            rows(&h)
        );
        assert_eq!(
            build_mmc(&a, &h, MmcMode::Both, Some(&proj))
                .unwrap()
                .dims(),
            &[3, 4]
        );
        let short = h.narrow(0, 0, 2).unwrap();
        assert!(matches!(
            build_mmc(&a, &short, MmcMode::Both, Some(&proj)),
            Err(Error::InvalidState(_))
        ));
        store.zero_all().unwrap();
        let z = build_mmc(&a, &h, MmcMode::Both, Some(&proj)).unwrap();
        assert!(rows(&z).iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn targets_cover_labels_and_eos() {
        let vocab = SymbolVocab::new(5).unwrap();
        let layout = PromptLayout::new(Some(2), None, Some(2)).unwrap();
        let (t, w, width) = label_targets(&[layout], &[vec![3, 4]], vocab).unwrap();
        assert_eq!(width, 8);
        assert_eq!(&t[5..8], &[3, 4, vocab.eos_id()]);
        assert_eq!(w.iter().sum::<f64>(), 3.0);
        assert_eq!(w[4], 0.0);
    }
}
