//! CTC head, loss, greedy frame labelling and hypothesis regularization.

use candle_core::{CpuStorage, CustomOp1, DType, Layout, Shape, Tensor};

use crate::error::{Error, Result};
use crate::nn::{Linear, ParamStore};
use crate::synthdata::{Symbol, SymbolVocab};

const BLANK: Symbol = SymbolVocab::BLANK;

/// Dual-form decode result: per-frame labels (blanks and repeats kept) and the
/// collapsed token sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hypothesis {
    pub frame_labels: Vec<Symbol>,
    pub regular_tokens: Vec<Symbol>,
}

impl Hypothesis {
    pub fn from_frame_labels(frame_labels: Vec<Symbol>) -> Self {
        let regular_tokens = regularize(&frame_labels);
        Self {
            frame_labels,
            regular_tokens,
        }
    }
}

/// Linear projection from encoder features to `|V| + 1` classes; column 0 is blank.
#[derive(Debug, Clone)]
pub struct CtcHead {
    proj: Linear,
}

impl CtcHead {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        model_dim: usize,
        classes: usize,
    ) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(store, prefix, model_dim, classes)?,
        })
    }

    pub fn from_linear(proj: Linear) -> Self {
        Self { proj }
    }

    /// `(…, T', D_enc)` to `(…, T', |V| + 1)`.
    pub fn logits(&self, shared_hidden: &Tensor) -> Result<Tensor> {
        self.proj.forward(shared_hidden)
    }
}

/// Collapses consecutive duplicates, then deletes blanks.
pub fn regularize(frame_labels: &[Symbol]) -> Vec<Symbol> {
    let mut out = Vec::new();
    let mut prev: Option<Symbol> = None;
    for &l in frame_labels {
        if prev != Some(l) && l != BLANK {
            out.push(l);
        }
        prev = Some(l);
    }
    out
}

/// Per-frame argmax over a `(T', C)` logit matrix; ties go to the lowest id.
pub fn greedy_frame_labels(logits: &Tensor) -> Result<Vec<Symbol>> {
    let rows = logits.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    Ok(rows.iter().map(|r| argmax_lowest(r)).collect())
}

/// Batched greedy labelling of `(B, T', C)` logits, truncated to each valid length.
pub fn greedy_frame_labels_batch(logits: &Tensor, lengths: &[usize]) -> Result<Vec<Vec<Symbol>>> {
    let all = logits.detach().to_dtype(DType::F64)?.to_vec3::<f64>()?;
    if all.len() != lengths.len() {
        return Err(Error::invalid_argument("lengths/batch mismatch"));
    }
    Ok(all
        .iter()
        .zip(lengths)
        .map(|(rows, &len)| rows[..len].iter().map(|r| argmax_lowest(r)).collect())
        .collect())
}

fn argmax_lowest(row: &[f64]) -> Symbol {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as Symbol
}

/// Smallest number of frames that can emit `target` (a blank is needed between repeats).
pub fn min_frames(target: &[Symbol]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

pub fn is_feasible(target: &[Symbol], frames: usize) -> bool {
    min_frames(target) <= frames
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn log_softmax_rows(logits: &[f64], frames: usize, classes: usize) -> Vec<f64> {
    let mut out = vec![0.0; frames * classes];
    for t in 0..frames {
        let row = &logits[t * classes..(t + 1) * classes];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for k in 0..classes {
            out[t * classes + k] = row[k] - lse;
        }
    }
    out
}

/// Negative log-likelihood and its gradient with respect to the raw logits of
/// one utterance (`frames x classes`, row-major). Infeasible targets return
/// `(+inf, zeros)`.
pub fn ctc_forward_backward(
    logits: &[f64],
    frames: usize,
    classes: usize,
    target: &[Symbol],
) -> Result<(f64, Vec<f64>)> {
    if logits.len() != frames * classes {
        return Err(Error::invalid_argument("logit buffer does not match shape"));
    }
    if let Some(&bad) = target
        .iter()
        .find(|&&s| s == BLANK || s as usize >= classes)
    {
        return Err(Error::invalid_argument(format!(
            "target id {bad} is blank or out of range"
        )));
    }
    if frames == 0 || !is_feasible(target, frames) {
        return Ok((f64::INFINITY, vec![0.0; frames * classes]));
    }
    let lp = log_softmax_rows(logits, frames, classes);
    let s_len = 2 * target.len() + 1;
    let label = |s: usize| -> usize {
        if s.is_multiple_of(2) {
            BLANK as usize
        } else {
            target[s / 2] as usize
        }
    };
    let can_skip = |s: usize| s >= 2 && s % 2 == 1 && label(s) != label(s - 2);

    let ninf = f64::NEG_INFINITY;
    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = lp[label(0)];
    if s_len > 1 {
        alpha[1] = lp[label(1)];
    }
    for t in 1..frames {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if can_skip(s) {
                a = log_add(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = if a == ninf {
                ninf
            } else {
                a + lp[t * classes + label(s)]
            };
        }
    }
    let last = (frames - 1) * s_len;
    let mut log_p = alpha[last + s_len - 1];
    if s_len > 1 {
        log_p = log_add(log_p, alpha[last + s_len - 2]);
    }
    if log_p == ninf {
        return Ok((f64::INFINITY, vec![0.0; frames * classes]));
    }

    let mut beta = vec![ninf; frames * s_len];
    beta[last + s_len - 1] = lp[(frames - 1) * classes + label(s_len - 1)];
    if s_len > 1 {
        beta[last + s_len - 2] = lp[(frames - 1) * classes + label(s_len - 2)];
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut b = next[s];
            if s + 1 < s_len {
                b = log_add(b, next[s + 1]);
            }
            if s + 2 < s_len && can_skip(s + 2) {
                b = log_add(b, next[s + 2]);
            }
            beta[t * s_len + s] = if b == ninf {
                ninf
            } else {
                b + lp[t * classes + label(s)]
            };
        }
    }

    // d(-log p)/dz = softmax - occupancy, occupancy_t(k) = sum_{s: l'_s = k} a_t(s) b_t(s) / (y_t(k) p)
    let mut grad = vec![0.0; frames * classes];
    for t in 0..frames {
        let mut occ = vec![ninf; classes];
        for s in 0..s_len {
            let k = label(s);
            let v = alpha[t * s_len + s] + beta[t * s_len + s];
            occ[k] = log_add(occ[k], v);
        }
        for k in 0..classes {
            let y = lp[t * classes + k];
            let o = if occ[k] == ninf {
                0.0
            } else {
                (occ[k] - y - log_p).exp()
            };
            grad[t * classes + k] = y.exp() - o;
        }
    }
    Ok((-log_p, grad))
}

/// Batched CTC loss as a custom op over `(B, T', C)` logits producing `(B,)`.
struct CtcLossOp {
    targets: Vec<Vec<Symbol>>,
    lengths: Vec<usize>,
}

impl CtcLossOp {
    fn run(
        &self,
        data: &[f64],
        b: usize,
        t: usize,
        c: usize,
        want_grad: bool,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut losses = Vec::with_capacity(b);
        let mut grads = if want_grad {
            vec![0.0; b * t * c]
        } else {
            Vec::new()
        };
        for i in 0..b {
            let len = self.lengths[i];
            let slice = &data[i * t * c..i * t * c + len * c];
            let (loss, g) = ctc_forward_backward(slice, len, c, &self.targets[i])?;
            losses.push(loss);
            if want_grad {
                grads[i * t * c..i * t * c + len * c].copy_from_slice(&g);
            }
        }
        Ok((losses, grads))
    }
}

fn to_candle(e: Error) -> candle_core::Error {
    candle_core::Error::Msg(e.to_string())
}

impl CustomOp1 for CtcLossOp {
    fn name(&self) -> &'static str {
        "ctc-loss"
    }

    fn cpu_fwd(
        &self,
        storage: &CpuStorage,
        layout: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (start, end) = layout
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("ctc-loss expects contiguous logits".into()))?;
        let (b, t, c) = layout.shape().dims3()?;
        let out = match storage {
            CpuStorage::F32(v) => {
                let data: Vec<f64> = v[start..end].iter().map(|&x| x as f64).collect();
                let (l, _) = self.run(&data, b, t, c, false).map_err(to_candle)?;
                CpuStorage::F32(l.into_iter().map(|x| x as f32).collect())
            }
            CpuStorage::F64(v) => {
                let (l, _) = self
                    .run(&v[start..end], b, t, c, false)
                    .map_err(to_candle)?;
                CpuStorage::F64(l)
            }
            _ => candle_core::bail!("ctc-loss supports f32 and f64 only"),
        };
        Ok((out, Shape::from(b)))
    }

    fn bwd(
        &self,
        arg: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        let (b, t, c) = arg.dims3()?;
        let data = arg.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let (_, grads) = self.run(&data, b, t, c, true).map_err(to_candle)?;
        let g = Tensor::from_vec(grads, (b, t, c), arg.device())?.to_dtype(arg.dtype())?;
        let scale = grad_res.reshape((b, 1, 1))?;
        Ok(Some(g.broadcast_mul(&scale)?))
    }
}

/// Per-utterance CTC negative log-likelihoods for `(B, T', C)` logits; differentiable.
/// Infeasible utterances yield `+inf` with zero gradient.
pub fn ctc_loss_batch(
    logits: &Tensor,
    targets: &[Vec<Symbol>],
    lengths: &[usize],
) -> Result<Tensor> {
    let (b, t, _) = logits.dims3()?;
    if targets.len() != b || lengths.len() != b {
        return Err(Error::invalid_argument(
            "targets/lengths must match batch size",
        ));
    }
    if let Some(&bad) = lengths.iter().find(|&&l| l > t) {
        return Err(Error::invalid_argument(format!(
            "length {bad} exceeds {t} frames"
        )));
    }
    let op = CtcLossOp {
        targets: targets.to_vec(),
        lengths: lengths.to_vec(),
    };
    Ok(logits.contiguous()?.apply_op1(op)?)
}

/// CTC negative log-likelihood of one utterance, `(T', C)` logits to a scalar.
pub fn ctc_loss(logits: &Tensor, target: &[Symbol]) -> Result<Tensor> {
    let (t, _) = logits.dims2()?;
    Ok(ctc_loss_batch(&logits.unsqueeze(0)?, &[target.to_vec()], &[t])?.squeeze(0)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn scalar(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn single_frame_uniform() {
        let logits = Tensor::zeros((1, 2), DType::F64, &Device::Cpu).unwrap();
        let l = scalar(&ctc_loss(&logits, &[1]).unwrap());
        assert!((l - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_frames_uniform() {
        // aa, a., .a collapse to "a": P = 3 * 0.25
        let logits = Tensor::zeros((2, 2), DType::F64, &Device::Cpu).unwrap();
        let l = scalar(&ctc_loss(&logits, &[1]).unwrap());
        assert!((l - (-(0.75f64).ln())).abs() < 1e-12);
        assert!((l - 0.2877).abs() < 1e-4);
    }

    #[test]
    fn infeasible_is_infinite() {
        let logits = Tensor::zeros((2, 4), DType::F64, &Device::Cpu).unwrap();
        assert_eq!(
            scalar(&ctc_loss(&logits, &[1, 2, 3]).unwrap()),
            f64::INFINITY
        );
        // repeats need a separating blank
        assert_eq!(scalar(&ctc_loss(&logits, &[1, 1]).unwrap()), f64::INFINITY);
        let logits3 = Tensor::zeros((3, 4), DType::F64, &Device::Cpu).unwrap();
        assert!(scalar(&ctc_loss(&logits3, &[1, 1]).unwrap()).is_finite());
    }

    #[test]
    fn empty_target_is_all_blank() {
        let logits = Tensor::new(&[[1.0f64, 0.0], [0.5, 0.2]], &Device::Cpu).unwrap();
        let lp = log_softmax_rows(&[1.0, 0.0, 0.5, 0.2], 2, 2);
        let l = scalar(&ctc_loss(&logits, &[]).unwrap());
        assert!((l + lp[0] + lp[2]).abs() < 1e-12);
    }

    #[test]
    fn regularize_examples() {
        assert_eq!(regularize(&[0, 1, 1, 0, 2]), vec![1, 2]);
        assert_eq!(regularize(&[1, 0, 1]), vec![1, 1]);
        assert_eq!(regularize(&[0, 0]), Vec::<Symbol>::new());
        assert_eq!(regularize(&[]), Vec::<Symbol>::new());
    }

    #[test]
    fn greedy_examples() {
        let logits = Tensor::new(
            &[
                [0.0f64, 0.0, 5.0, 0.0],
                [0.0, 0.0, 5.0, 0.0],
                [5.0, 0.0, 0.0, 0.0],
                [0.0, 0.0, 0.0, 5.0],
                [1.0, 1.0, 1.0, 1.0],
            ],
            &Device::Cpu,
        )
        .unwrap();
        assert_eq!(greedy_frame_labels(&logits).unwrap(), vec![2, 2, 0, 3, 0]);
    }

    #[test]
    fn ctc_head_affine_identity() {
        let mut store = ParamStore::new(0, DType::F64);
        let head = CtcHead::new(&mut store, "ctc", 3, 4).unwrap();
        store.zero_all().unwrap();
        store
            .var("ctc.bias")
            .unwrap()
            .set(&Tensor::new(&[1.0f64, 2.0, 3.0, 4.0], &Device::Cpu).unwrap())
            .unwrap();
        let out = head
            .logits(&Tensor::zeros((5, 3), DType::F64, &Device::Cpu).unwrap())
            .unwrap()
            .to_vec2::<f64>()
            .unwrap();
        assert_eq!(out.len(), 5);
        for row in out {
            assert_eq!(row, vec![1.0, 2.0, 3.0, 4.0]);
        }
    }
}
