//! Small neural-network toolkit on top of `candle-core`.
//!
//! Everything here is built from differentiable tensor primitives so the
//! same code runs in `f32` for training and `f64` for gradient checks.
//! Parameters live in a [`ParamStore`]; every parameter draws its initial
//! values from an RNG keyed by `(store seed, parameter name)`, which makes
//! initialization independent of construction order.

use std::cell::RefCell;
use std::collections::BTreeMap;

use candle_core::{CpuStorage, CustomOp1, CustomOp2, DType, Device, Layout, Shape, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Large negative additive mask value; finite so fully-masked rows never produce NaN.
pub const MASK_NEG: f64 = -1e9;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Uniform(f64),
    Normal(f64),
}

/// Named, seeded collection of trainable variables.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    seed: u64,
    frozen: bool,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            seed,
            frozen: false,
        }
    }

    /// A frozen store hands out detached tensors: gradients flow through them
    /// to their inputs, but never accumulate on the parameters themselves.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    fn hand_out(&self, var: &Var) -> Tensor {
        if self.frozen {
            var.as_tensor().detach()
        } else {
            var.as_tensor().clone()
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Creates the variable `name` (or returns the existing one).
    pub fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(var) = self.vars.get(name) {
            if var.dims() != shape {
                return Err(Error::invalid_state(format!(
                    "parameter {name} exists with shape {:?}, requested {shape:?}",
                    var.dims()
                )));
            }
            return Ok(self.hand_out(var));
        }
        let numel: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, name));
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; numel],
            Init::Ones => vec![1.0; numel],
            Init::Uniform(bound) => (0..numel)
                .map(|_| rng.random_range(-bound..=bound))
                .collect(),
            Init::Normal(std) => {
                let normal = Normal::new(0.0, std)
                    .map_err(|e| Error::invalid_argument(format!("normal init: {e}")))?;
                (0..numel).map(|_| normal.sample(&mut rng)).collect()
            }
        };
        let tensor = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&tensor)?;
        let out = self.hand_out(&var);
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites every variable with zeros.
    pub fn zero_all(&self) -> Result<()> {
        for var in self.vars.values() {
            var.set(&var.zeros_like()?)?;
        }
        Ok(())
    }

    /// Overwrites variables from `tensors`; every stored variable must be present.
    pub fn load(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::invalid_state(format!("missing parameter {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::invalid_state(format!(
                    "parameter {name}: stored shape {:?} != model shape {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    pub fn snapshot(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().detach()))
            .collect()
    }

    pub fn checksum(&self) -> Result<String> {
        checksum(self.vars.iter().map(|(k, v)| (k.as_str(), v.as_tensor())))
    }

    /// Checksum restricted to parameters whose name starts with `prefix`.
    pub fn checksum_prefix(&self, prefix: &str) -> Result<String> {
        checksum(
            self.vars
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.as_str(), v.as_tensor())),
        )
    }
}

pub(crate) fn derive_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// SHA-256 over names, shapes and `f64` little-endian values, in iteration order.
pub fn checksum<'a>(tensors: impl Iterator<Item = (&'a str, &'a Tensor)>) -> Result<String> {
    let mut h = Sha256::new();
    for (name, t) in tensors {
        h.update(name.as_bytes());
        h.update([0u8]);
        for d in t.dims() {
            h.update((*d as u64).to_le_bytes());
        }
        let values = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        for v in values {
            h.update(v.to_le_bytes());
        }
    }
    Ok(hex::encode(h.finalize()))
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

// ---------------------------------------------------------------------------
// Functional ops

/// Softmax over the last axis as one fused CPU kernel.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(SoftmaxLast)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Logistic sigmoid via `tanh`, which keeps the backward pass finite for large inputs.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.affine(0.5, 0.0)?.tanh()? + 1.0)?.affine(0.5, 0.0)?)
}

/// GELU with the tanh approximation, as a fused CPU kernel whose backward pass
/// is the exact derivative of its forward.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Gelu)?)
}

/// Inverted dropout for one training step. Masks come from a single seeded
/// stream in call order, so a step is reproducible from its seed.
#[derive(Debug)]
pub struct Dropout {
    rate: f64,
    rng: RefCell<ChaCha8Rng>,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid_argument(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        Ok(Self {
            rate,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if self.rate == 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 / (1.0 - self.rate);
        let mut rng = self.rng.borrow_mut();
        let mask: Vec<f64> = (0..x.elem_count())
            .map(|_| {
                if rng.random::<f64>() < self.rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        Ok(x.mul(&from_f64(mask, x.dims(), x.dtype())?)?)
    }
}

/// Applies `drop` when present.
pub fn maybe_drop(x: Tensor, drop: Option<&Dropout>) -> Result<Tensor> {
    match drop {
        Some(d) => d.apply(&x),
        None => Ok(x),
    }
}

/// Builds a tensor of the given dtype from `f64` host values.
pub fn from_f64(values: Vec<f64>, shape: &[usize], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Additive key-padding mask of shape `(B, 1, 1, T)`.
pub fn key_padding_mask(lengths: &[usize], t: usize, dtype: DType) -> Result<Tensor> {
    let mut v = Vec::with_capacity(lengths.len() * t);
    for &len in lengths {
        v.extend((0..t).map(|j| if j < len { 0.0 } else { MASK_NEG }));
    }
    from_f64(v, &[lengths.len(), 1, 1, t], dtype)
}

/// Additive causal mask of shape `(1, 1, T, T)`.
pub fn causal_mask(t: usize, dtype: DType) -> Result<Tensor> {
    let mut v = Vec::with_capacity(t * t);
    for i in 0..t {
        v.extend((0..t).map(|j| if j <= i { 0.0 } else { MASK_NEG }));
    }
    from_f64(v, &[1, 1, t, t], dtype)
}

/// `(B, T, 1)` 0/1 validity mask.
pub fn length_mask(lengths: &[usize], t: usize, dtype: DType) -> Result<Tensor> {
    let mut v = Vec::with_capacity(lengths.len() * t);
    for &len in lengths {
        v.extend((0..t).map(|j| if j < len { 1.0 } else { 0.0 }));
    }
    from_f64(v, &[lengths.len(), t, 1], dtype)
}

/// Mean over valid rows of a `(B, T, D)` tensor; rows with length 0 pool to zero.
pub fn masked_mean(x: &Tensor, lengths: &[usize]) -> Result<Tensor> {
    let (_, t, _) = x.dims3()?;
    let mask = length_mask(lengths, t, x.dtype())?;
    let summed = x.broadcast_mul(&mask)?.sum(1)?;
    let denom: Vec<f64> = lengths.iter().map(|&l| 1.0 / l.max(1) as f64).collect();
    let denom = from_f64(denom, &[lengths.len(), 1], x.dtype())?;
    Ok(summed.broadcast_mul(&denom)?)
}

/// Fixed sinusoidal position table `(T, D)`.
pub fn sinusoidal_positions(t: usize, d: usize, dtype: DType) -> Result<Tensor> {
    let mut v = vec![0.0f64; t * d];
    for pos in 0..t {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            v[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    from_f64(v, &[t, d], dtype)
}

// ---------------------------------------------------------------------------
// Layers

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, prefix: &str, input: usize, output: usize) -> Result<Self> {
        let bound = 1.0 / (input as f64).sqrt();
        let weight = store.get(
            &join(prefix, "weight"),
            &[input, output],
            Init::Uniform(bound),
        )?;
        let bias = store.get(&join(prefix, "bias"), &[output], Init::Zeros)?;
        Ok(Self {
            weight,
            bias: Some(bias),
        })
    }

    pub fn no_bias(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        output: usize,
    ) -> Result<Self> {
        let bound = 1.0 / (input as f64).sqrt();
        let weight = store.get(
            &join(prefix, "weight"),
            &[input, output],
            Init::Uniform(bound),
        )?;
        Ok(Self { weight, bias: None })
    }

    pub fn from_tensors(weight: Tensor, bias: Option<Tensor>) -> Self {
        Self { weight, bias }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let (last, lead) = dims
            .split_last()
            .ok_or_else(|| Error::invalid_argument("linear input must have rank >= 1"))?;
        if *last != self.in_dim() {
            return Err(Error::invalid_argument(format!(
                "linear expects feature dim {}, got {last}",
                self.in_dim()
            )));
        }
        let rows: usize = lead.iter().product();
        let flat = x.reshape((rows, *last))?;
        let mut y = flat.matmul(&self.weight)?;
        if let Some(b) = &self.bias {
            y = y.apply_op2(b, BiasAdd)?;
        }
        let mut out_shape = lead.to_vec();
        out_shape.push(self.out_dim());
        Ok(y.reshape(out_shape)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.get(&join(prefix, "gamma"), &[dim], Init::Ones)?,
            beta: store.get(&join(prefix, "beta"), &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.gamma)?
            .broadcast_add(&self.beta)?)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, &join(prefix, "up"), dim, hidden)?,
            down: Linear::new(store, &join(prefix, "down"), hidden, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.down.forward(&gelu(&self.up.forward(x)?)?)
    }
}

/// Rotary position tables for a given head dimension.
#[derive(Debug, Clone)]
pub struct Rotary {
    head_dim: usize,
}

impl Rotary {
    pub fn new(head_dim: usize) -> Result<Self> {
        if !head_dim.is_multiple_of(2) {
            return Err(Error::invalid_argument("rotary head dim must be even"));
        }
        Ok(Self { head_dim })
    }

    fn tables(&self, t: usize, dtype: DType) -> Result<(Tensor, Tensor)> {
        let half = self.head_dim / 2;
        let mut cos = vec![0.0f64; t * self.head_dim];
        let mut sin = vec![0.0f64; t * self.head_dim];
        for pos in 0..t {
            for i in 0..half {
                let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / self.head_dim as f64);
                let a = pos as f64 * freq;
                for j in [i, i + half] {
                    cos[pos * self.head_dim + j] = a.cos();
                    sin[pos * self.head_dim + j] = a.sin();
                }
            }
        }
        Ok((
            from_f64(cos, &[t, self.head_dim], dtype)?,
            from_f64(sin, &[t, self.head_dim], dtype)?,
        ))
    }

    /// Rotates `(B, H, T, dh)` queries or keys by their positions.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, t, dh) = x.dims4()?;
        let (cos, sin) = self.tables(t, x.dtype())?;
        let half = dh / 2;
        let x1 = x.narrow(D::Minus1, 0, half)?;
        let x2 = x.narrow(D::Minus1, half, half)?;
        let rotated = Tensor::cat(&[&x2.neg()?, &x1], D::Minus1)?;
        Ok((x.broadcast_mul(&cos)? + rotated.broadcast_mul(&sin)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    qkv: Linear,
    out: Linear,
    heads: usize,
    dim: usize,
    rotary: Option<Rotary>,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        rotary: bool,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::invalid_argument(format!(
                "model dim {dim} not divisible by {heads} heads"
            )));
        }
        let rotary = if rotary {
            Some(Rotary::new(dim / heads)?)
        } else {
            None
        };
        Ok(Self {
            qkv: Linear::new(store, &join(prefix, "qkv"), dim, 3 * dim)?,
            out: Linear::new(store, &join(prefix, "out"), dim, dim)?,
            heads,
            dim,
            rotary,
        })
    }

    /// `x`: `(B, T, D)`; `mask`: additive, broadcastable to `(B, H, T, T)`.
    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let (b, t, _) = x.dims3()?;
        let dh = self.dim / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, t, 3, self.heads, dh))?
            .permute((2, 0, 3, 1, 4))?;
        let mut q = qkv.get(0)?.contiguous()?;
        let mut k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        if let Some(rot) = &self.rotary {
            q = rot.apply(&q)?;
            k = rot.apply(&k)?;
        }
        let scale = 1.0 / (dh as f64).sqrt();
        let mut scores = q.matmul(&k.t()?)?.affine(scale, 0.0)?;
        if let Some(m) = mask {
            scores = scores.broadcast_add(m)?;
        }
        let attn = softmax_last(&scores)?;
        let ctx = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .reshape((b, t, self.dim))?;
        self.out.forward(&ctx)
    }
}

/// Convolution sub-block: pointwise expansion with GLU, depthwise temporal
/// convolution, layer norm, SiLU, pointwise projection.
#[derive(Debug, Clone)]
pub struct ConvModule {
    pointwise_in: Linear,
    depthwise: Tensor,
    depthwise_bias: Tensor,
    norm: LayerNorm,
    pointwise_out: Linear,
    kernel: usize,
}

impl ConvModule {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, kernel: usize) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::invalid_argument("conv kernel size must be odd"));
        }
        Ok(Self {
            pointwise_in: Linear::new(store, &join(prefix, "pw_in"), dim, 2 * dim)?,
            depthwise: store.get(
                &join(prefix, "dw_weight"),
                &[kernel, dim],
                Init::Uniform(1.0 / (kernel as f64).sqrt()),
            )?,
            depthwise_bias: store.get(&join(prefix, "dw_bias"), &[dim], Init::Zeros)?,
            norm: LayerNorm::new(store, &join(prefix, "norm"), dim)?,
            pointwise_out: Linear::new(store, &join(prefix, "pw_out"), dim, dim)?,
            kernel,
        })
    }

    /// `x`: `(B, T, D)`; `valid`: `(B, T, 1)` mask zeroing padded frames before convolving.
    pub fn forward(&self, x: &Tensor, valid: &Tensor) -> Result<Tensor> {
        let (_, t, d) = x.dims3()?;
        let h = self.pointwise_in.forward(x)?;
        let gate = sigmoid(&h.narrow(D::Minus1, d, d)?)?;
        let h = (h.narrow(D::Minus1, 0, d)? * gate)?.broadcast_mul(valid)?;
        let pad = self.kernel / 2;
        let padded = h.pad_with_zeros(1, pad, pad)?;
        let mut acc: Option<Tensor> = None;
        for j in 0..self.kernel {
            let w = self.depthwise.get(j)?;
            let term = padded.narrow(1, j, t)?.broadcast_mul(&w)?;
            acc = Some(match acc {
                None => term,
                Some(a) => (a + term)?,
            });
        }
        let h = acc
            .ok_or_else(|| Error::invalid_state("empty conv kernel"))?
            .broadcast_add(&self.depthwise_bias)?;
        let h = self.norm.forward(&h)?.silu()?;
        self.pointwise_out.forward(&h)
    }
}

/// Pre-norm transformer block: self-attention and feed-forward with residuals,
/// optionally followed by a convolution sub-block.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    norm_attn: LayerNorm,
    attn: MultiHeadAttention,
    norm_ffn: LayerNorm,
    ffn: FeedForward,
    conv: Option<(LayerNorm, ConvModule)>,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockDims {
    pub dim: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub rotary: bool,
    pub conv_kernel: Option<usize>,
}

impl TransformerBlock {
    pub fn new(store: &mut ParamStore, prefix: &str, dims: BlockDims) -> Result<Self> {
        let conv = match dims.conv_kernel {
            Some(k) => Some((
                LayerNorm::new(store, &join(prefix, "norm_conv"), dims.dim)?,
                ConvModule::new(store, &join(prefix, "conv"), dims.dim, k)?,
            )),
            None => None,
        };
        Ok(Self {
            norm_attn: LayerNorm::new(store, &join(prefix, "norm_attn"), dims.dim)?,
            attn: MultiHeadAttention::new(
                store,
                &join(prefix, "attn"),
                dims.dim,
                dims.heads,
                dims.rotary,
            )?,
            norm_ffn: LayerNorm::new(store, &join(prefix, "norm_ffn"), dims.dim)?,
            ffn: FeedForward::new(store, &join(prefix, "ffn"), dims.dim, dims.ffn_dim)?,
            conv,
        })
    }

    pub fn forward(
        &self,
        x: &Tensor,
        mask: Option<&Tensor>,
        valid: Option<&Tensor>,
    ) -> Result<Tensor> {
        self.forward_with(x, mask, valid, None)
    }

    /// As [`forward`](Self::forward), with dropout on each residual branch.
    pub fn forward_with(
        &self,
        x: &Tensor,
        mask: Option<&Tensor>,
        valid: Option<&Tensor>,
        drop: Option<&Dropout>,
    ) -> Result<Tensor> {
        let x = (x + maybe_drop(self.attn.forward(&self.norm_attn.forward(x)?, mask)?, drop)?)?;
        let x = match (&self.conv, valid) {
            (Some((norm, conv)), Some(valid)) => {
                (&x + maybe_drop(conv.forward(&norm.forward(&x)?, valid)?, drop)?)?
            }
            (Some((norm, conv)), None) => {
                let ones = Tensor::ones((x.dim(0)?, x.dim(1)?, 1), x.dtype(), x.device())?;
                (&x + maybe_drop(conv.forward(&norm.forward(&x)?, &ones)?, drop)?)?
            }
            (None, _) => x,
        };
        Ok((&x + maybe_drop(self.ffn.forward(&self.norm_ffn.forward(&x)?)?, drop)?)?)
    }
}

/// Gated recurrent unit (reset gate applied to the projected hidden state).
#[derive(Debug, Clone)]
pub struct Gru {
    input: Linear,
    hidden: Linear,
    size: usize,
}

impl Gru {
    pub fn new(store: &mut ParamStore, prefix: &str, input: usize, size: usize) -> Result<Self> {
        Ok(Self {
            input: Linear::new(store, &join(prefix, "input"), input, 3 * size)?,
            hidden: Linear::new(store, &join(prefix, "hidden"), size, 3 * size)?,
            size,
        })
    }

    pub fn hidden_size(&self) -> usize {
        self.size
    }

    /// Runs over `(B, T, In)` starting from a zero state and returns the final
    /// state `(B, H)` of each sequence, honoring per-sequence `lengths`.
    pub fn final_state(&self, x: &Tensor, lengths: &[usize]) -> Result<Tensor> {
        let (b, t, _) = x.dims3()?;
        if lengths.len() != b {
            return Err(Error::invalid_argument("gru: lengths/batch mismatch"));
        }
        let h0 = Tensor::zeros((b, self.size), x.dtype(), x.device())?;
        if t == 0 {
            return Ok(h0);
        }
        let xp = self.input.forward(x)?;
        let hs = self.size;
        let mut h = h0;
        for step in 0..t {
            let active = lengths.iter().filter(|&&l| l > step).count();
            if active == 0 {
                break;
            }
            let xt = xp.narrow(1, step, 1)?.squeeze(1)?;
            let hp = self.hidden.forward(&h)?;
            let rz = sigmoid(&(xt.narrow(1, 0, 2 * hs)? + hp.narrow(1, 0, 2 * hs)?)?)?;
            let r = rz.narrow(1, 0, hs)?;
            let z = rz.narrow(1, hs, hs)?;
            let n = (xt.narrow(1, 2 * hs, hs)? + (r * hp.narrow(1, 2 * hs, hs)?)?)?.tanh()?;
            let h_new = (&n + (z * (&h - &n)?)?)?;
            h = if active == b {
                h_new
            } else {
                let m: Vec<f64> = lengths
                    .iter()
                    .map(|&l| if l > step { 1.0 } else { 0.0 })
                    .collect();
                let m = from_f64(m, &[b, 1], x.dtype())?;
                (&h + (h_new - &h)?.broadcast_mul(&m)?)?
            };
        }
        Ok(h)
    }
}

// ---------------------------------------------------------------------------
// Fused CPU kernels

macro_rules! gelu_fns {
    ($value:ident, $slope:ident, $t:ty) => {
        /// `tanh(sqrt(2/pi) * (x + 0.044715 x^3))` via `exp`, which is much cheaper than libm's `tanh`.
        fn $value(x: $t) -> $t {
            0.5 * x * (1.0 + gelu_tanh!(x, $t))
        }

        fn $slope(x: $t) -> $t {
            const C: $t = SQRT_2_OVER_PI as $t;
            let t = gelu_tanh!(x, $t);
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044_715 * x * x)
        }
    };
}

const SQRT_2_OVER_PI: f64 = std::f64::consts::FRAC_2_SQRT_PI * std::f64::consts::FRAC_1_SQRT_2;

macro_rules! gelu_tanh {
    ($x:expr, $t:ty) => {{
        const C: $t = SQRT_2_OVER_PI as $t;
        let u = C * ($x + 0.044_715 * $x * $x * $x);
        // saturate before exp overflows
        if u > 20.0 {
            1.0
        } else if u < -20.0 {
            -1.0
        } else {
            1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
        }
    }};
}

gelu_fns!(gelu_value_f32, gelu_slope_f32, f32);
gelu_fns!(gelu_value_f64, gelu_slope_f64, f64);

fn contiguous_slice<'a, T>(v: &'a [T], layout: &Layout, op: &str) -> candle_core::Result<&'a [T]> {
    let (start, end) = layout
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg(format!("{op} expects a contiguous input")))?;
    Ok(&v[start..end])
}

fn map_elementwise(
    storage: &CpuStorage,
    layout: &Layout,
    op: &str,
    f32_fn: fn(f32) -> f32,
    f64_fn: fn(f64) -> f64,
) -> candle_core::Result<(CpuStorage, Shape)> {
    let out = match storage {
        CpuStorage::F32(v) => CpuStorage::F32(
            contiguous_slice(v, layout, op)?
                .iter()
                .map(|&x| f32_fn(x))
                .collect(),
        ),
        CpuStorage::F64(v) => CpuStorage::F64(
            contiguous_slice(v, layout, op)?
                .iter()
                .map(|&x| f64_fn(x))
                .collect(),
        ),
        _ => candle_core::bail!("{op} supports f32 and f64 only"),
    };
    Ok((out, layout.shape().clone()))
}

struct Gelu;

impl CustomOp1 for Gelu {
    fn name(&self) -> &'static str {
        "gelu-tanh"
    }

    fn cpu_fwd(
        &self,
        storage: &CpuStorage,
        layout: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        map_elementwise(storage, layout, self.name(), gelu_value_f32, gelu_value_f64)
    }

    fn bwd(
        &self,
        arg: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        let slope = arg.contiguous()?.apply_op1_no_bwd(&GeluSlope)?;
        Ok(Some(grad_res.mul(&slope)?))
    }
}

struct GeluSlope;

impl CustomOp1 for GeluSlope {
    fn name(&self) -> &'static str {
        "gelu-tanh-slope"
    }

    fn cpu_fwd(
        &self,
        storage: &CpuStorage,
        layout: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        map_elementwise(storage, layout, self.name(), gelu_slope_f32, gelu_slope_f64)
    }
}

macro_rules! softmax_rows {
    ($x:expr, $n:expr, $t:ty) => {{
        let mut out: Vec<$t> = Vec::with_capacity($x.len());
        for row in $x.chunks($n) {
            let max = row.iter().copied().fold(<$t>::NEG_INFINITY, <$t>::max);
            let start = out.len();
            let mut sum = 0.0;
            for &v in row {
                let e = (v - max).exp();
                sum += e;
                out.push(e);
            }
            for e in &mut out[start..] {
                *e /= sum;
            }
        }
        out
    }};
}

macro_rules! softmax_grad_rows {
    ($y:expr, $g:expr, $n:expr, $t:ty) => {{
        let mut out: Vec<$t> = Vec::with_capacity($y.len());
        for (y, g) in $y.chunks($n).zip($g.chunks($n)) {
            let dot: $t = y.iter().zip(g).map(|(a, b)| a * b).sum();
            out.extend(y.iter().zip(g).map(|(a, b)| a * (b - dot)));
        }
        out
    }};
}

fn last_dim(layout: &Layout) -> candle_core::Result<usize> {
    let n = layout.shape().dims().last().copied().unwrap_or(1);
    if n == 0 {
        candle_core::bail!("softmax over an empty axis");
    }
    Ok(n)
}

struct SoftmaxLast;

impl CustomOp1 for SoftmaxLast {
    fn name(&self) -> &'static str {
        "softmax-last"
    }

    fn cpu_fwd(
        &self,
        storage: &CpuStorage,
        layout: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let n = last_dim(layout)?;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(softmax_rows!(
                contiguous_slice(v, layout, self.name())?,
                n,
                f32
            )),
            CpuStorage::F64(v) => CpuStorage::F64(softmax_rows!(
                contiguous_slice(v, layout, self.name())?,
                n,
                f64
            )),
            _ => candle_core::bail!("softmax supports f32 and f64 only"),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(
        &self,
        _arg: &Tensor,
        res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(
            res.apply_op2_no_bwd(&grad_res.contiguous()?, &SoftmaxGrad)?,
        ))
    }
}

/// `y * (g - <y, g>)` row by row, for softmax output `y` and upstream gradient `g`.
struct SoftmaxGrad;

impl CustomOp2 for SoftmaxGrad {
    fn name(&self) -> &'static str {
        "softmax-last-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let n = last_dim(l1)?;
        let out = match (s1, s2) {
            (CpuStorage::F32(y), CpuStorage::F32(g)) => CpuStorage::F32(softmax_grad_rows!(
                contiguous_slice(y, l1, self.name())?,
                contiguous_slice(g, l2, self.name())?,
                n,
                f32
            )),
            (CpuStorage::F64(y), CpuStorage::F64(g)) => CpuStorage::F64(softmax_grad_rows!(
                contiguous_slice(y, l1, self.name())?,
                contiguous_slice(g, l2, self.name())?,
                n,
                f64
            )),
            _ => candle_core::bail!("softmax gradient needs matching f32 or f64 inputs"),
        };
        Ok((out, l1.shape().clone()))
    }
}

/// Adds a `(N,)` bias to every row of a contiguous `(M, N)` matrix.
struct BiasAdd;

macro_rules! add_rows {
    ($y:expr, $b:expr, $t:ty) => {{
        let mut out: Vec<$t> = $y.to_vec();
        for row in out.chunks_mut($b.len()) {
            for (o, b) in row.iter_mut().zip($b) {
                *o += b;
            }
        }
        out
    }};
}

macro_rules! sum_rows {
    ($g:expr, $n:expr, $t:ty) => {{
        let mut out: Vec<$t> = vec![0.0; $n];
        for row in $g.chunks($n) {
            for (o, g) in out.iter_mut().zip(row) {
                *o += g;
            }
        }
        out
    }};
}

impl CustomOp2 for BiasAdd {
    fn name(&self) -> &'static str {
        "bias-add"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (_, n) = l1.shape().dims2()?;
        if l2.shape().dims() != [n] {
            candle_core::bail!("bias of shape {:?} does not match {n} columns", l2.shape());
        }
        let out = match (s1, s2) {
            (CpuStorage::F32(y), CpuStorage::F32(b)) => CpuStorage::F32(add_rows!(
                contiguous_slice(y, l1, self.name())?,
                contiguous_slice(b, l2, self.name())?,
                f32
            )),
            (CpuStorage::F64(y), CpuStorage::F64(b)) => CpuStorage::F64(add_rows!(
                contiguous_slice(y, l1, self.name())?,
                contiguous_slice(b, l2, self.name())?,
                f64
            )),
            _ => candle_core::bail!("bias add needs matching f32 or f64 inputs"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        _y: &Tensor,
        b: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        Ok((
            Some(grad_res.clone()),
            Some(
                grad_res
                    .contiguous()?
                    .apply_op1_no_bwd(&SumRows(b.dim(0)?))?,
            ),
        ))
    }
}

struct SumRows(usize);

impl CustomOp1 for SumRows {
    fn name(&self) -> &'static str {
        "sum-rows"
    }

    fn cpu_fwd(
        &self,
        storage: &CpuStorage,
        layout: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let n = self.0;
        let out = match storage {
            CpuStorage::F32(g) => {
                CpuStorage::F32(sum_rows!(contiguous_slice(g, layout, self.name())?, n, f32))
            }
            CpuStorage::F64(g) => {
                CpuStorage::F64(sum_rows!(contiguous_slice(g, layout, self.name())?, n, f64))
            }
            _ => candle_core::bail!("row sum supports f32 and f64 only"),
        };
        Ok((out, Shape::from(n)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_order_independent() {
        let mut a = ParamStore::new(3, DType::F64);
        let mut b = ParamStore::new(3, DType::F64);
        let x1 = a.get("x", &[4], Init::Normal(1.0)).unwrap();
        let _ = a.get("y", &[4], Init::Normal(1.0)).unwrap();
        let _ = b.get("y", &[4], Init::Normal(1.0)).unwrap();
        let x2 = b.get("x", &[4], Init::Normal(1.0)).unwrap();
        assert_eq!(x1.to_vec1::<f64>().unwrap(), x2.to_vec1::<f64>().unwrap());
    }

    #[test]
    fn dropout_is_seeded_and_keeps_the_mean() {
        let x = Tensor::ones((200, 50), DType::F64, &Device::Cpu).unwrap();
        let a = Dropout::new(0.2, 9).unwrap().apply(&x).unwrap();
        let b = Dropout::new(0.2, 9).unwrap().apply(&x).unwrap();
        let va = a.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(va, b.flatten_all().unwrap().to_vec1::<f64>().unwrap());
        let mean = va.iter().sum::<f64>() / va.len() as f64;
        assert!((mean - 1.0).abs() < 0.03, "{mean}");
        assert!(va.iter().all(|&v| v == 0.0 || (v - 1.25).abs() < 1e-12));
        let same = Dropout::new(0.0, 9).unwrap().apply(&x).unwrap();
        assert_eq!(
            same.sum_all().unwrap().to_scalar::<f64>().unwrap(),
            10_000.0
        );
        assert!(Dropout::new(1.0, 9).is_err());
    }

    #[test]
    fn fused_kernels_match_composed_ops() {
        let mut store = ParamStore::new(5, DType::F64);
        let x = store.get("x", &[3, 7], Init::Normal(2.0)).unwrap();
        let g = gelu(&x)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let c = SQRT_2_OVER_PI;
        let cube = (x.sqr().unwrap() * &x).unwrap();
        let t = ((&x + cube.affine(0.044_715, 0.0).unwrap())
            .unwrap()
            .affine(c, 0.0)
            .unwrap())
        .tanh()
        .unwrap();
        let want = ((t + 1.0).unwrap() * &x).unwrap().affine(0.5, 0.0).unwrap();
        for (a, b) in g
            .iter()
            .zip(want.flatten_all().unwrap().to_vec1::<f64>().unwrap())
        {
            assert!((a - b).abs() < 1e-12);
        }
        let e = x.exp().unwrap();
        let want = e.broadcast_div(&e.sum_keepdim(1).unwrap()).unwrap();
        let got = softmax_last(&x).unwrap();
        let diff = (got - want)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!(diff < 1e-12);
        let lin = Linear::new(&mut store, "l", 7, 4).unwrap();
        let y = lin.forward(&x).unwrap();
        let want = x
            .matmul(lin.weight())
            .unwrap()
            .broadcast_add(store.var("l.bias").unwrap().as_tensor())
            .unwrap();
        let diff = (y - want)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!(diff < 1e-12);
    }

    #[test]
    fn fused_kernel_gradients_match_finite_differences() {
        let mut store = ParamStore::new(6, DType::F64);
        let x = store.get("x", &[2, 5], Init::Normal(1.5)).unwrap();
        let w = store.get("w", &[2, 5], Init::Normal(1.0)).unwrap();
        let lin = Linear::new(&mut store, "l", 5, 3).unwrap();
        let f = |x: &Tensor| -> f64 {
            let h = (softmax_last(x).unwrap() * &w).unwrap();
            let y = lin.forward(&gelu(&h).unwrap()).unwrap();
            y.sqr()
                .unwrap()
                .sum_all()
                .unwrap()
                .to_scalar::<f64>()
                .unwrap()
        };
        let loss = {
            let h = (softmax_last(&x).unwrap() * &w).unwrap();
            lin.forward(&gelu(&h).unwrap())
                .unwrap()
                .sqr()
                .unwrap()
                .sum_all()
                .unwrap()
        };
        let grads = loss.backward().unwrap();
        let analytic = grads
            .get(&x)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let base = x.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let eps = 1e-6;
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += eps;
            let mut m = base.clone();
            m[i] -= eps;
            let t = |v: Vec<f64>| Tensor::from_vec(v, (2, 5), &Device::Cpu).unwrap();
            let numeric = (f(&t(p)) - f(&t(m))) / (2.0 * eps);
            assert!(
                (numeric - analytic[i]).abs() < 1e-7 * (1.0 + numeric.abs()),
                "{i}: {numeric} vs {}",
                analytic[i]
            );
        }
        assert!(grads
            .get(store.var("l.bias").unwrap().as_tensor())
            .is_some());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0], [1000.0, 1000.0, -5.0]], &Device::Cpu).unwrap();
        let s = softmax_last(&x)
            .unwrap()
            .sum(1)
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        for v in s {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gru_zero_params_keep_zero_state() {
        let mut store = ParamStore::new(0, DType::F64);
        let gru = Gru::new(&mut store, "g", 3, 5).unwrap();
        store.zero_all().unwrap();
        let x = Tensor::zeros((2, 4, 3), DType::F64, &Device::Cpu).unwrap();
        let h = gru.final_state(&x, &[4, 0]).unwrap();
        let v = h.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gru_respects_lengths() {
        let mut store = ParamStore::new(1, DType::F64);
        let gru = Gru::new(&mut store, "g", 2, 3).unwrap();
        let x = Tensor::randn(0f64, 1.0, (1, 5, 2), &Device::Cpu).unwrap();
        let short = gru.final_state(&x.narrow(1, 0, 3).unwrap(), &[3]).unwrap();
        let padded = gru.final_state(&x, &[3]).unwrap();
        let d = (short - padded).unwrap().abs().unwrap().max_all().unwrap();
        assert!(d.to_scalar::<f64>().unwrap() < 1e-12);
    }

    #[test]
    fn causal_attention_ignores_future() {
        let mut store = ParamStore::new(2, DType::F64);
        let mha = MultiHeadAttention::new(&mut store, "a", 8, 2, true).unwrap();
        let x = Tensor::randn(0f64, 1.0, (1, 5, 8), &Device::Cpu).unwrap();
        let mask = causal_mask(5, DType::F64).unwrap();
        let full = mha.forward(&x, Some(&mask)).unwrap();
        let prefix = mha
            .forward(
                &x.narrow(1, 0, 3).unwrap(),
                Some(&causal_mask(3, DType::F64).unwrap()),
            )
            .unwrap();
        let d = (full.narrow(1, 0, 3).unwrap() - prefix)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!(d < 1e-10, "{d}");
    }
}
