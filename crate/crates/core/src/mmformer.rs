//! Multimodal transformer with joint image/text attention.
//!
//! Two token streams share every attention layer:
//!
//! * the image stream holds patch embeddings of the noisy HR image followed
//!   by patch embeddings of the LR conditioning image (tagged with a learned
//!   stream-type vector, or replaced by a learned null vector when the
//!   conditioning is dropped);
//! * the text stream holds embeddings of the (partially masked) token ids.
//!
//! Each stream has its own LayerNorm modulation, QKV projection, output
//! projection and MLP. Queries, keys and values of both streams are
//! concatenated along the token axis and pass through one softmax attention,
//! then split back. The two timesteps `(t_img, t_txt)` are embedded
//! sinusoidally, mixed by an MLP and drive adaptive LayerNorm shift / scale /
//! gate in every block. Heads: a linear patch decoder for the velocity and a
//! linear classifier over the `N` real token ids (never MASK).

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageflow::ImageGrid;
use crate::rng;

const LN_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;
const MASKED_SCORE: f64 = -1e30;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub patch_size: usize,
    /// HR / LR size ratio.
    pub lr_scale: usize,
    pub lr_patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// N: real token ids including PAD. MASK is id N.
    pub vocab_size: usize,
    pub seq_len: usize,
    /// Sinusoidal features per timestep.
    pub time_freq_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_height: 32,
            image_width: 128,
            channels: 3,
            patch_size: 4,
            lr_scale: 4,
            lr_patch_size: 2,
            embed_dim: 256,
            depth: 6,
            heads: 4,
            mlp_ratio: 4,
            vocab_size: 27,
            seq_len: 8,
            time_freq_dim: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.patch_size == 0 || self.lr_patch_size == 0 || self.lr_scale == 0 {
            return bad("patch sizes and lr_scale must be positive".into());
        }
        if self.image_height % self.patch_size != 0 || self.image_width % self.patch_size != 0 {
            return bad(format!(
                "image {}x{} not divisible by patch_size {}",
                self.image_height, self.image_width, self.patch_size
            ));
        }
        if self.image_height % self.lr_scale != 0 || self.image_width % self.lr_scale != 0 {
            return bad(format!(
                "image {}x{} not divisible by lr_scale {}",
                self.image_height, self.image_width, self.lr_scale
            ));
        }
        let (lh, lw) = self.lr_size();
        if lh % self.lr_patch_size != 0 || lw % self.lr_patch_size != 0 {
            return bad(format!(
                "LR image {lh}x{lw} not divisible by lr_patch_size {}",
                self.lr_patch_size
            ));
        }
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.time_freq_dim == 0 || self.time_freq_dim % 2 != 0 {
            return bad(format!("time_freq_dim {} must be even", self.time_freq_dim));
        }
        if self.vocab_size < 2 || self.seq_len == 0 || self.channels == 0 || self.mlp_ratio == 0 {
            return bad("vocab_size >= 2, seq_len, channels and mlp_ratio > 0 required".into());
        }
        Ok(())
    }

    pub fn mask_id(&self) -> u32 {
        self.vocab_size as u32
    }

    pub fn lr_size(&self) -> (usize, usize) {
        (
            self.image_height / self.lr_scale,
            self.image_width / self.lr_scale,
        )
    }

    pub fn image_tokens(&self) -> usize {
        (self.image_height / self.patch_size) * (self.image_width / self.patch_size)
    }

    pub fn lr_tokens(&self) -> usize {
        let (lh, lw) = self.lr_size();
        (lh / self.lr_patch_size) * (lw / self.lr_patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn lr_patch_dim(&self) -> usize {
        self.lr_patch_size * self.lr_patch_size * self.channels
    }

    /// Closed-form parameter count.
    ///
    /// With `d = embed_dim`, `r = mlp_ratio`, `F = time_freq_dim`:
    /// embeddings `(P + 1) d + n_img d + (P_lr + 1) d + n_lr d + 2 d + (N + 1) d + L d`,
    /// time MLP `2 F d + d + d^2 + d`,
    /// each block `2 [6 d^2 + 6 d + 3 d^2 + 3 d + d^2 + d + 2 r d^2 + r d + d]`,
    /// heads `2 (2 d^2 + 2 d) + d P + P + d N + N`.
    pub fn param_count(&self) -> usize {
        let d = self.embed_dim;
        let r = self.mlp_ratio;
        let p = self.patch_dim();
        let pl = self.lr_patch_dim();
        let n = self.vocab_size;
        let embeddings = (p + 1) * d
            + self.image_tokens() * d
            + (pl + 1) * d
            + self.lr_tokens() * d
            + 2 * d
            + (n + 1) * d
            + self.seq_len * d;
        let time = 2 * self.time_freq_dim * d + d + d * d + d;
        let stream = 6 * d * d + 6 * d + 3 * d * d + 3 * d + d * d + d + 2 * r * d * d + r * d + d;
        let heads = 2 * (2 * d * d + 2 * d) + d * p + p + d * n + n;
        embeddings + time + self.depth * 2 * stream + heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    /// Normal with the given std, resampled outside two standard deviations.
    TruncNormal(f64),
}

/// Named trainable arrays, iterated in name order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: &Tensor) -> Result<()> {
        let t = tensor.to_dtype(self.dtype)?.to_device(&self.device)?;
        self.vars.insert(name.into(), Var::from_tensor(&t)?);
        Ok(())
    }

    /// Returns the existing array (shape-checked) or creates it with a
    /// seeded initializer derived from `(seed, name)`.
    fn get_or_init(&mut self, name: &str, shape: &[usize], init: Init, seed: u64) -> Result<Tensor> {
        if let Some(v) = self.vars.get(name) {
            if v.dims() != shape {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, config expects {shape:?}",
                    v.dims()
                )));
            }
            return Ok(v.as_tensor().clone());
        }
        let count: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; count],
            Init::TruncNormal(std) => {
                let mut r = rng::stream(seed, &format!("init/{name}"), 0);
                (0..count)
                    .map(|_| loop {
                        let z: f64 = r.sample(StandardNormal);
                        if z.abs() <= 2.0 {
                            break z * std;
                        }
                    })
                    .collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    /// Overwrites every array with the same-named array of `other`.
    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        for (name, var) in &self.vars {
            let src = other
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            var.set(src.as_tensor())?;
        }
        Ok(())
    }

    /// Independent copy with fresh storage.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (name, var) in &self.vars {
            vars.insert(name.clone(), Var::from_tensor(&var.as_tensor().copy()?)?);
        }
        Ok(Self {
            vars,
            dtype: self.dtype,
            device: self.device.clone(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    /// `(in, out)`.
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn build(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        init: Init,
        seed: u64,
    ) -> Result<Self> {
        let weight = store.get_or_init(&format!("{name}.weight"), &[input, output], init, seed)?;
        let bias = store.get_or_init(&format!("{name}.bias"), &[output], Init::Zeros, seed)?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let input = *dims.last().expect("linear input has rank >= 1");
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let y = x
            .reshape((rows, input))?
            .matmul(&self.weight)?
            .broadcast_add(&self.bias)?;
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.weight.dim(1)?;
        Ok(y.reshape(out_dims)?)
    }
}

/// LayerNorm over the last axis without affine parameters.
pub fn layer_norm(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(centered.broadcast_div(&(var + LN_EPS)?.sqrt()?)?)
}

/// `x (1 + scale) + shift` with per-item `(B, 1, d)` modulation.
pub fn modulate(x: &Tensor, shift: &Tensor, scale: &Tensor) -> Result<Tensor> {
    Ok(x.broadcast_mul(&(scale + 1.0)?)?.broadcast_add(shift)?)
}

pub fn softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Multi-head softmax attention over `(B, n, d)` inputs. `mask` is an
/// additive `(n, n)` score bias.
pub fn attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    mask: Option<&Tensor>,
) -> Result<Tensor> {
    let (b, n, d) = q.dims3()?;
    let dh = d / heads;
    let split = |x: &Tensor| -> Result<Tensor> {
        Ok(x.reshape((b, n, heads, dh))?.transpose(1, 2)?.contiguous()?)
    };
    let (q, k, v) = (split(q)?, split(k)?, split(v)?);
    let mut scores = (q.matmul(&k.t()?)? * (1.0 / (dh as f64).sqrt()))?;
    if let Some(mask) = mask {
        scores = scores.broadcast_add(mask)?;
    }
    let out = softmax_last_dim(&scores)?.matmul(&v)?;
    Ok(out.transpose(1, 2)?.reshape((b, n, d))?)
}

/// Additive mask that blocks attention between the first `n_img` tokens and
/// the following `n_txt` tokens.
pub fn cross_modality_mask(n_img: usize, n_txt: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let n = n_img + n_txt;
    let values: Vec<f64> = (0..n * n)
        .map(|idx| {
            let (i, j) = (idx / n, idx % n);
            if (i < n_img) == (j < n_img) {
                0.0
            } else {
                MASKED_SCORE
            }
        })
        .collect();
    Ok(Tensor::from_vec(values, (n, n), device)?.to_dtype(dtype)?)
}

/// Adaptive-LayerNorm modulation for one stream of one block.
#[derive(Debug, Clone)]
pub struct Modulation {
    pub shift_attn: Tensor,
    pub scale_attn: Tensor,
    pub gate_attn: Tensor,
    pub shift_mlp: Tensor,
    pub scale_mlp: Tensor,
    pub gate_mlp: Tensor,
}

/// Per-stream weights of a joint block.
#[derive(Debug, Clone)]
pub struct StreamWeights {
    pub modulation: Linear,
    pub qkv: Linear,
    pub proj: Linear,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl StreamWeights {
    fn build(store: &mut ParamStore, prefix: &str, d: usize, ratio: usize, seed: u64) -> Result<Self> {
        let tn = Init::TruncNormal(INIT_STD);
        Ok(Self {
            modulation: Linear::build(store, &format!("{prefix}.mod"), d, 6 * d, Init::Zeros, seed)?,
            qkv: Linear::build(store, &format!("{prefix}.qkv"), d, 3 * d, tn, seed)?,
            proj: Linear::build(store, &format!("{prefix}.proj"), d, d, tn, seed)?,
            fc1: Linear::build(store, &format!("{prefix}.fc1"), d, ratio * d, tn, seed)?,
            fc2: Linear::build(store, &format!("{prefix}.fc2"), ratio * d, d, tn, seed)?,
        })
    }

    /// `silu_c` is `(B, d)`.
    pub fn modulation(&self, silu_c: &Tensor) -> Result<Modulation> {
        let m = self.modulation.forward(silu_c)?.unsqueeze(1)?;
        let chunks = m.chunk(6, D::Minus1)?;
        Ok(Modulation {
            shift_attn: chunks[0].clone(),
            scale_attn: chunks[1].clone(),
            gate_attn: chunks[2].clone(),
            shift_mlp: chunks[3].clone(),
            scale_mlp: chunks[4].clone(),
            gate_mlp: chunks[5].clone(),
        })
    }

    /// Projects `x` to `(q, k, v)`.
    pub fn pre_attention(&self, x: &Tensor, m: &Modulation) -> Result<(Tensor, Tensor, Tensor)> {
        let h = modulate(&layer_norm(x)?, &m.shift_attn, &m.scale_attn)?;
        let qkv = self.qkv.forward(&h)?;
        let parts = qkv.chunk(3, D::Minus1)?;
        Ok((parts[0].clone(), parts[1].clone(), parts[2].clone()))
    }

    /// Gated residual updates after attention produced `attn` for this stream.
    pub fn post_attention(&self, x: &Tensor, attn: &Tensor, m: &Modulation) -> Result<Tensor> {
        let x = (x + self.proj.forward(attn)?.broadcast_mul(&m.gate_attn)?)?;
        let h = modulate(&layer_norm(&x)?, &m.shift_mlp, &m.scale_mlp)?;
        let h = self.fc2.forward(&self.fc1.forward(&h)?.gelu()?)?;
        Ok((x + h.broadcast_mul(&m.gate_mlp)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct JointBlock {
    pub img: StreamWeights,
    pub txt: StreamWeights,
    pub heads: usize,
}

impl JointBlock {
    /// Joint attention over `img (B, n_img, d)` and `txt (B, n_txt, d)`.
    /// Output shapes equal input shapes per stream.
    pub fn forward(
        &self,
        img: &Tensor,
        txt: &Tensor,
        silu_c: &Tensor,
        mask: Option<&Tensor>,
    ) -> Result<(Tensor, Tensor)> {
        let (b, n_img, d) = img.dims3()?;
        let (bt, n_txt, dt) = txt.dims3()?;
        if d != dt || b != bt {
            return Err(Error::Shape(format!(
                "stream shapes disagree: image {:?}, text {:?}",
                img.dims(),
                txt.dims()
            )));
        }
        let mi = self.img.modulation(silu_c)?;
        let (qi, ki, vi) = self.img.pre_attention(img, &mi)?;
        if n_txt == 0 {
            let a = attention(&qi, &ki, &vi, self.heads, mask)?;
            return Ok((self.img.post_attention(img, &a, &mi)?, txt.clone()));
        }
        let mt = self.txt.modulation(silu_c)?;
        let (qt, kt, vt) = self.txt.pre_attention(txt, &mt)?;
        let q = Tensor::cat(&[&qi, &qt], 1)?;
        let k = Tensor::cat(&[&ki, &kt], 1)?;
        let v = Tensor::cat(&[&vi, &vt], 1)?;
        let a = attention(&q, &k, &v, self.heads, mask)?;
        let ai = a.narrow(1, 0, n_img)?;
        let at = a.narrow(1, n_img, n_txt)?;
        Ok((
            self.img.post_attention(img, &ai, &mi)?,
            self.txt.post_attention(txt, &at, &mt)?,
        ))
    }
}

/// Batched model inputs.
#[derive(Debug, Clone)]
pub struct ModelInputs {
    /// `(B, H, W, C)`.
    pub x_img: Tensor,
    pub t_img: Vec<f64>,
    /// `(B, L)` u32 ids, MASK allowed.
    pub x_txt: Tensor,
    pub t_txt: Vec<f64>,
    /// `(B, H / s, W / s, C)`.
    pub lr: Tensor,
    /// `false` replaces the item's LR conditioning by the null embedding.
    pub lr_keep: Vec<bool>,
}

impl ModelInputs {
    /// Builds inputs from host values. `lr = None` marks an item unconditional.
    pub fn from_grids(
        x_img: &[&ImageGrid],
        t_img: &[f64],
        x_txt: &[&[u32]],
        t_txt: &[f64],
        lr: &[Option<&ImageGrid>],
        config: &ModelConfig,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let b = x_img.len();
        if t_img.len() != b || x_txt.len() != b || t_txt.len() != b || lr.len() != b {
            return Err(Error::Shape("batch fields have different lengths".into()));
        }
        let (h, w, c) = (config.image_height, config.image_width, config.channels);
        let (lh, lw) = config.lr_size();
        let mut img = Vec::with_capacity(b * h * w * c);
        for g in x_img {
            if g.shape() != (h, w, c) {
                return Err(Error::Shape(format!(
                    "image grid {:?} does not match config {:?}",
                    g.shape(),
                    (h, w, c)
                )));
            }
            img.extend_from_slice(g.data());
        }
        let mut lr_data = Vec::with_capacity(b * lh * lw * c);
        let mut keep = Vec::with_capacity(b);
        for item in lr {
            match item {
                Some(g) => {
                    if g.shape() != (lh, lw, c) {
                        return Err(Error::Shape(format!(
                            "LR grid {:?} does not match config {:?}",
                            g.shape(),
                            (lh, lw, c)
                        )));
                    }
                    lr_data.extend_from_slice(g.data());
                    keep.push(true);
                }
                None => {
                    lr_data.extend(std::iter::repeat_n(0.0, lh * lw * c));
                    keep.push(false);
                }
            }
        }
        let mut ids = Vec::with_capacity(b * config.seq_len);
        for seq in x_txt {
            if seq.len() != config.seq_len {
                return Err(Error::Shape(format!(
                    "text length {} does not match seq_len {}",
                    seq.len(),
                    config.seq_len
                )));
            }
            ids.extend_from_slice(seq);
        }
        Ok(Self {
            x_img: Tensor::from_vec(img, (b, h, w, c), device)?.to_dtype(dtype)?,
            t_img: t_img.to_vec(),
            x_txt: Tensor::from_vec(ids, (b, config.seq_len), device)?,
            t_txt: t_txt.to_vec(),
            lr: Tensor::from_vec(lr_data, (b, lh, lw, c), device)?.to_dtype(dtype)?,
            lr_keep: keep,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.t_img.len()
    }
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// `(B, H, W, C)`.
    pub velocity: Tensor,
    /// `(B, L, N)`; the MASK id has no column.
    pub text_logits: Tensor,
}

/// Anything that maps batched inputs to both heads. Implemented by
/// [`MmFormer`] and by hand-built stand-ins in tests.
pub trait TensorModel {
    fn config(&self) -> &ModelConfig;
    fn dtype(&self) -> DType;
    fn device(&self) -> &Device;
    fn forward(&self, inputs: &ModelInputs) -> Result<ModelOutput>;
}

/// `(B, H, W, C) -> (B, (H/p)(W/p), p p C)`.
pub fn patchify(x: &Tensor, p: usize) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    Ok(x
        .reshape(vec![b, h / p, p, w / p, p, c])?
        .permute(vec![0, 1, 3, 2, 4, 5])?
        .reshape((b, (h / p) * (w / p), p * p * c))?)
}

/// Inverse of [`patchify`].
pub fn unpatchify(x: &Tensor, p: usize, h: usize, w: usize, c: usize) -> Result<Tensor> {
    let b = x.dim(0)?;
    Ok(x
        .reshape(vec![b, h / p, w / p, p, p, c])?
        .permute(vec![0, 1, 3, 2, 4, 5])?
        .reshape((b, h, w, c))?)
}

/// Sinusoidal features `[cos(1000 t f_i), sin(1000 t f_i)]`.
fn timestep_features(ts: &[f64], dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let scaled = 1000.0 * t;
        let freqs = (0..half).map(|i| (-(10_000f64.ln()) * i as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| scaled * f).collect();
        out.extend(args.iter().map(|a| a.cos()));
        out.extend(args.iter().map(|a| a.sin()));
    }
    out
}

#[derive(Debug, Clone)]
pub struct MmFormer {
    config: ModelConfig,
    store: ParamStore,
    img_in: Linear,
    img_pos: Tensor,
    lr_in: Linear,
    lr_pos: Tensor,
    lr_type: Tensor,
    lr_null: Tensor,
    txt_embed: Tensor,
    txt_pos: Tensor,
    time_in: Linear,
    time_out: Linear,
    blocks: Vec<JointBlock>,
    final_img_mod: Linear,
    final_img_out: Linear,
    final_txt_mod: Linear,
    final_txt_out: Linear,
}

impl MmFormer {
    /// Freshly initialized model; every array is seeded from `(seed, name)`.
    pub fn new(config: ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        Self::build(config, ParamStore::new(dtype, device.clone()), seed)
    }

    /// Wraps existing arrays; fails if any name or shape disagrees with `config`.
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        let expected = config.param_count();
        let names = store.len();
        let model = Self::build(config, store, 0)?;
        if model.store.len() != names || model.store.num_params() != expected {
            return Err(Error::Checkpoint(format!(
                "stored arrays ({names} named) do not match the config ({} named, {expected} values)",
                model.store.len()
            )));
        }
        Ok(model)
    }

    fn build(config: ModelConfig, mut store: ParamStore, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let tn = Init::TruncNormal(INIT_STD);
        let s = &mut store;
        let img_in = Linear::build(s, "img_in", config.patch_dim(), d, tn, seed)?;
        let img_pos = s.get_or_init("img_pos", &[config.image_tokens(), d], tn, seed)?;
        let lr_in = Linear::build(s, "lr_in", config.lr_patch_dim(), d, tn, seed)?;
        let lr_pos = s.get_or_init("lr_pos", &[config.lr_tokens(), d], tn, seed)?;
        let lr_type = s.get_or_init("lr_type", &[d], tn, seed)?;
        let lr_null = s.get_or_init("lr_null", &[d], tn, seed)?;
        let txt_embed = s.get_or_init("txt_embed", &[config.vocab_size + 1, d], tn, seed)?;
        let txt_pos = s.get_or_init("txt_pos", &[config.seq_len, d], tn, seed)?;
        let time_in = Linear::build(s, "time_mlp.0", 2 * config.time_freq_dim, d, tn, seed)?;
        let time_out = Linear::build(s, "time_mlp.2", d, d, tn, seed)?;
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            blocks.push(JointBlock {
                img: StreamWeights::build(s, &format!("blocks.{i}.img"), d, config.mlp_ratio, seed)?,
                txt: StreamWeights::build(s, &format!("blocks.{i}.txt"), d, config.mlp_ratio, seed)?,
                heads: config.heads,
            });
        }
        let final_img_mod = Linear::build(s, "final.img.mod", d, 2 * d, Init::Zeros, seed)?;
        let final_img_out = Linear::build(s, "final.img.out", d, config.patch_dim(), tn, seed)?;
        let final_txt_mod = Linear::build(s, "final.txt.mod", d, 2 * d, Init::Zeros, seed)?;
        let final_txt_out = Linear::build(s, "final.txt.out", d, config.vocab_size, tn, seed)?;
        Ok(Self {
            config,
            store,
            img_in,
            img_pos,
            lr_in,
            lr_pos,
            lr_type,
            lr_null,
            txt_embed,
            txt_pos,
            time_in,
            time_out,
            blocks,
            final_img_mod,
            final_img_out,
            final_txt_mod,
            final_txt_out,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn blocks(&self) -> &[JointBlock] {
        &self.blocks
    }

    /// A second model with its own copy of every array.
    pub fn deep_clone(&self) -> Result<Self> {
        Self::from_store(self.config.clone(), self.store.deep_clone()?)
    }

    /// `(B, d)` conditioning vector, already passed through SiLU.
    pub fn time_conditioning(&self, t_img: &[f64], t_txt: &[f64]) -> Result<Tensor> {
        let f = self.config.time_freq_dim;
        let b = t_img.len();
        let mut feats = Vec::with_capacity(b * 2 * f);
        let fi = timestep_features(t_img, f);
        let ft = timestep_features(t_txt, f);
        for i in 0..b {
            feats.extend_from_slice(&fi[i * f..(i + 1) * f]);
            feats.extend_from_slice(&ft[i * f..(i + 1) * f]);
        }
        let feats = Tensor::from_vec(feats, (b, 2 * f), self.store.device())?
            .to_dtype(self.store.dtype())?;
        let c = self.time_out.forward(&self.time_in.forward(&feats)?.silu()?)?;
        Ok(c.silu()?)
    }

    fn check_inputs(&self, inputs: &ModelInputs) -> Result<usize> {
        let cfg = &self.config;
        let b = inputs.batch_size();
        let (lh, lw) = cfg.lr_size();
        let expect = |name: &str, got: &[usize], want: &[usize]| {
            if got == want {
                Ok(())
            } else {
                Err(Error::Shape(format!("{name} has shape {got:?}, config expects {want:?}")))
            }
        };
        expect(
            "x_img",
            inputs.x_img.dims(),
            &[b, cfg.image_height, cfg.image_width, cfg.channels],
        )?;
        expect("lr", inputs.lr.dims(), &[b, lh, lw, cfg.channels])?;
        expect("x_txt", inputs.x_txt.dims(), &[b, cfg.seq_len])?;
        if inputs.t_txt.len() != b || inputs.lr_keep.len() != b {
            return Err(Error::Shape("batch fields have different lengths".into()));
        }
        Ok(b)
    }

    /// Image stream (HR patches then LR patches) and text stream embeddings.
    fn embed(&self, inputs: &ModelInputs) -> Result<(Tensor, Tensor)> {
        let cfg = &self.config;
        let b = inputs.batch_size();
        let img = self
            .img_in
            .forward(&patchify(&inputs.x_img, cfg.patch_size)?)?
            .broadcast_add(&self.img_pos)?;
        let lr = self.lr_in.forward(&patchify(&inputs.lr, cfg.lr_patch_size)?)?;
        let keep: Vec<f64> = inputs.lr_keep.iter().map(|&k| f64::from(u8::from(k))).collect();
        let keep = Tensor::from_vec(keep, (b, 1, 1), self.store.device())?.to_dtype(self.store.dtype())?;
        let drop = (1.0 - &keep)?;
        let lr = lr
            .broadcast_mul(&keep)?
            .broadcast_add(&drop.broadcast_mul(&self.lr_null.reshape((1, 1, cfg.embed_dim))?)?)?
            .broadcast_add(&self.lr_pos)?
            .broadcast_add(&self.lr_type)?;
        let stream = Tensor::cat(&[&img, &lr], 1)?;
        let ids = inputs.x_txt.flatten_all()?;
        let txt = self
            .txt_embed
            .embedding(&ids)?
            .reshape((b, cfg.seq_len, cfg.embed_dim))?
            .broadcast_add(&self.txt_pos)?;
        Ok((stream, txt))
    }

    fn final_layer(mod_layer: &Linear, out: &Linear, x: &Tensor, silu_c: &Tensor) -> Result<Tensor> {
        let m = mod_layer.forward(silu_c)?.unsqueeze(1)?;
        let parts = m.chunk(2, D::Minus1)?;
        out.forward(&modulate(&layer_norm(x)?, &parts[0], &parts[1])?)
    }
}

impl TensorModel for MmFormer {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn dtype(&self) -> DType {
        self.store.dtype()
    }

    fn device(&self) -> &Device {
        self.store.device()
    }

    fn forward(&self, inputs: &ModelInputs) -> Result<ModelOutput> {
        self.check_inputs(inputs)?;
        let cfg = &self.config;
        let max_id = inputs.x_txt.flatten_all()?.max(0)?.to_scalar::<u32>()?;
        if max_id > cfg.mask_id() {
            return Err(Error::Domain(format!("token id {max_id} exceeds MASK id {}", cfg.mask_id())));
        }
        let silu_c = self.time_conditioning(&inputs.t_img, &inputs.t_txt)?;
        let (mut img, mut txt) = self.embed(inputs)?;
        for block in &self.blocks {
            (img, txt) = block.forward(&img, &txt, &silu_c, None)?;
        }
        let img = img.narrow(1, 0, cfg.image_tokens())?;
        let patches = Self::final_layer(&self.final_img_mod, &self.final_img_out, &img, &silu_c)?;
        let velocity = unpatchify(
            &patches,
            cfg.patch_size,
            cfg.image_height,
            cfg.image_width,
            cfg.channels,
        )?;
        let text_logits = Self::final_layer(&self.final_txt_mod, &self.final_txt_out, &txt, &silu_c)?;
        Ok(ModelOutput {
            velocity,
            text_logits,
        })
    }
}
