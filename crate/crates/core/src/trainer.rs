//! Joint training: guided image loss, stratified text NELBO, joint loss,
//! AdamW with warmup + cosine decay, and the EMA teacher.
//!
//! Per step and per batch item one Gaussian noise draw is shared by the image
//! and joint terms. The teacher only ever appears behind `detach`, so no
//! gradient reaches its arrays.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageflow::{GuidanceConfig, ImageGrid};
use crate::mmformer::{MmFormer, ModelInputs, ModelOutput, TensorModel};
use crate::rng::{self, StreamRng};
use crate::schedule::{nelbo_weight, sample_stratified_timesteps, LogLinear};
use crate::textdiff::{forward_mask, TokenSequence};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainTriple {
    pub hr: ImageGrid,
    pub lr: ImageGrid,
    pub text: TokenSequence,
}

/// Optimizer and schedule settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    /// Global-norm gradient clip; 0 disables.
    pub grad_clip: f64,
    /// Text timesteps per item.
    pub text_k: usize,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 500,
            total_steps: 20_000,
            grad_clip: 1.0,
            text_k: 8,
        }
    }
}

impl TrainHyper {
    /// Linear warmup to `lr`, then cosine decay to zero at `total_steps`.
    pub fn learning_rate(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// A training batch moved to the model's device.
#[derive(Debug, Clone)]
pub struct BatchTensors {
    pub hr: Tensor,
    pub lr: Tensor,
    pub text: Vec<TokenSequence>,
}

impl BatchTensors {
    pub fn new(items: &[TrainTriple], dtype: DType, device: &Device) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Domain("empty training batch".into()))?;
        let (h, w, c) = first.hr.shape();
        let (lh, lw, lc) = first.lr.shape();
        let mut hr = Vec::with_capacity(items.len() * h * w * c);
        let mut lr = Vec::with_capacity(items.len() * lh * lw * lc);
        for it in items {
            if it.hr.shape() != (h, w, c) || it.lr.shape() != (lh, lw, lc) {
                return Err(Error::Shape("batch items differ in image shape".into()));
            }
            if it.text.masked_count() > 0 {
                return Err(Error::Contract("training text contains MASK".into()));
            }
            hr.extend_from_slice(it.hr.data());
            lr.extend_from_slice(it.lr.data());
        }
        let b = items.len();
        Ok(Self {
            hr: Tensor::from_vec(hr, (b, h, w, c), device)?.to_dtype(dtype)?,
            lr: Tensor::from_vec(lr, (b, lh, lw, lc), device)?.to_dtype(dtype)?,
            text: items.iter().map(|it| it.text.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.text.len()
    }

    pub fn is_empty(&self) -> bool {
        self.text.is_empty()
    }
}

/// Random quantities of one guided image term.
#[derive(Debug, Clone)]
pub struct FlowDraws {
    pub t: Vec<f64>,
    /// `(B, H, W, C)` standard normal.
    pub noise: Tensor,
    /// `true` drops the student's conditioning to the null encoding.
    pub drop: Vec<bool>,
}

/// Random quantities of the joint term.
#[derive(Debug, Clone)]
pub struct JointDraws {
    pub flow: FlowDraws,
    pub masked_text: Vec<TokenSequence>,
}

/// Random quantities of the text term: `K` timesteps and corruptions per item.
#[derive(Debug, Clone)]
pub struct TextDraws {
    pub t: Vec<Vec<f64>>,
    pub masked_text: Vec<Vec<TokenSequence>>,
    pub delta: f64,
}

pub fn draw_noise<R: Rng + ?Sized>(shape: &[usize], dtype: DType, device: &Device, rng: &mut R) -> Result<Tensor> {
    let count: usize = shape.iter().product();
    let values: Vec<f64> = (0..count)
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    Ok(Tensor::from_vec(values, shape, device)?.to_dtype(dtype)?)
}

pub fn draw_dropout<R: Rng + ?Sized>(n: usize, psi: f64, rng: &mut R) -> Vec<bool> {
    (0..n).map(|_| rng.random::<f64>() < psi).collect()
}

pub fn draw_text<R: Rng + ?Sized>(
    text: &[TokenSequence],
    k: usize,
    delta: f64,
    rng: &mut R,
) -> Result<TextDraws> {
    let mut ts = Vec::with_capacity(text.len());
    let mut masked = Vec::with_capacity(text.len());
    for seq in text {
        let batch = sample_stratified_timesteps(k, delta, rng)?;
        let mut row = Vec::with_capacity(k);
        for &t in batch.values() {
            row.push(forward_mask(seq, t, &LogLinear, rng)?);
        }
        ts.push(batch.values().to_vec());
        masked.push(row);
    }
    Ok(TextDraws {
        t: ts,
        masked_text: masked,
        delta,
    })
}

fn ids_tensor(seqs: &[&TokenSequence], device: &Device) -> Result<Tensor> {
    let l = seqs.first().map_or(0, |s| s.len());
    let ids: Vec<u32> = seqs.iter().flat_map(|s| s.ids().iter().copied()).collect();
    Ok(Tensor::from_vec(ids, (seqs.len(), l), device)?)
}

fn column(values: &[f64], dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(values.to_vec(), (values.len(), 1, 1, 1), device)?.to_dtype(dtype)?)
}

/// `x_t = (1 - t) x_0 + t x_1` for a batch, `t` per item.
fn interpolate_batch(x0: &Tensor, x1: &Tensor, t: &[f64]) -> Result<Tensor> {
    let tt = column(t, x0.dtype(), x0.device())?;
    Ok((x0.broadcast_mul(&(1.0 - &tt)?)? + x1.broadcast_mul(&tt)?)?)
}

/// Null text conditioning: all MASK, text time 1.
fn null_text(seq: &TokenSequence) -> TokenSequence {
    TokenSequence::all_masked(seq.len(), seq.vocab_size())
}

/// Conditional and unconditional teacher velocities, detached.
fn teacher_velocities(
    teacher: &dyn TensorModel,
    x_t: &Tensor,
    t: &[f64],
    cond_text: &[&TokenSequence],
    cond_t_txt: &[f64],
    lr: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let b = t.len();
    let device = x_t.device();
    let cond = teacher.forward(&ModelInputs {
        x_img: x_t.detach(),
        t_img: t.to_vec(),
        x_txt: ids_tensor(cond_text, device)?,
        t_txt: cond_t_txt.to_vec(),
        lr: lr.clone(),
        lr_keep: vec![true; b],
    })?;
    let nulls: Vec<TokenSequence> = cond_text.iter().map(|s| null_text(s)).collect();
    let null_refs: Vec<&TokenSequence> = nulls.iter().collect();
    let uncond = teacher.forward(&ModelInputs {
        x_img: x_t.detach(),
        t_img: t.to_vec(),
        x_txt: ids_tensor(&null_refs, device)?,
        t_txt: vec![1.0; b],
        lr: lr.clone(),
        lr_keep: vec![false; b],
    })?;
    Ok((cond.velocity.detach(), uncond.velocity.detach()))
}

/// `u + w (v_cond - v_uncond)` on tensors; `w = 0` returns `u` untouched.
pub fn rectified_target_tensor(u: &Tensor, v_cond: &Tensor, v_uncond: &Tensor, w: f64) -> Result<Tensor> {
    if w == 0.0 {
        return Ok(u.clone());
    }
    Ok((u + ((v_cond - v_uncond)? * w)?)?)
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.sqr()?.mean_all()?)
}

/// Log-softmax over the last axis.
pub fn log_softmax(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Per-row mean cross-entropy of `clean` over the positions where `corrupted`
/// is MASK (0 for rows with nothing masked), scaled by `row_weights`, then
/// averaged over rows. `logits` is `(R, L, N)`.
pub fn masked_text_loss(
    logits: &Tensor,
    clean: &[&TokenSequence],
    corrupted: &[&TokenSequence],
    row_weights: &[f64],
) -> Result<Tensor> {
    let (rows, l, n) = logits.dims3()?;
    let mut onehot = vec![0f64; rows * l * n];
    let mut scale = vec![0f64; rows * l];
    for r in 0..rows {
        let masked = corrupted[r].masked_count();
        for pos in 0..l {
            let id = clean[r].ids()[pos] as usize;
            if id >= n {
                return Err(Error::Contract(format!("clean token {id} outside [0, {n})")));
            }
            onehot[(r * l + pos) * n + id] = 1.0;
            if corrupted[r].is_masked(pos) {
                scale[r * l + pos] = row_weights[r] / masked as f64;
            }
        }
    }
    let device = logits.device();
    let dtype = logits.dtype();
    let onehot = Tensor::from_vec(onehot, (rows, l, n), device)?.to_dtype(dtype)?;
    let scale = Tensor::from_vec(scale, (rows, l), device)?.to_dtype(dtype)?;
    let nll = (log_softmax(logits)? * onehot)?.sum(D::Minus1)?.neg()?;
    Ok(((nll * scale)?.sum_all()? / rows as f64)?)
}

/// Student inputs for a guided image term: conditional items see `text` at
/// `t_txt` and the LR image; dropped items see the null encoding.
fn student_inputs(
    x_t: &Tensor,
    t: &[f64],
    text: &[&TokenSequence],
    t_txt: &[f64],
    lr: &Tensor,
    drop: &[bool],
) -> Result<(ModelInputs, Vec<TokenSequence>)> {
    let fed: Vec<TokenSequence> = text
        .iter()
        .zip(drop)
        .map(|(s, &d)| if d { null_text(s) } else { (*s).clone() })
        .collect();
    let refs: Vec<&TokenSequence> = fed.iter().collect();
    let t_txt_fed: Vec<f64> = t_txt
        .iter()
        .zip(drop)
        .map(|(&tt, &d)| if d { 1.0 } else { tt })
        .collect();
    let inputs = ModelInputs {
        x_img: x_t.clone(),
        t_img: t.to_vec(),
        x_txt: ids_tensor(&refs, x_t.device())?,
        t_txt: t_txt_fed,
        lr: lr.clone(),
        lr_keep: drop.iter().map(|&d| !d).collect(),
    };
    Ok((inputs, fed))
}

/// Guided image loss conditioned on the LR image and the clean text
/// (text time 0).
pub fn loss_img_mg_with(
    student: &dyn TensorModel,
    teacher: &dyn TensorModel,
    batch: &BatchTensors,
    draws: &FlowDraws,
    w: f64,
) -> Result<Tensor> {
    let b = batch.len();
    let x_t = interpolate_batch(&batch.hr, &draws.noise, &draws.t)?;
    let u = (&draws.noise - &batch.hr)?;
    let clean: Vec<&TokenSequence> = batch.text.iter().collect();
    let zeros = vec![0.0; b];
    let target = if w == 0.0 {
        u
    } else {
        let (vc, vu) = teacher_velocities(teacher, &x_t, &draws.t, &clean, &zeros, &batch.lr)?;
        rectified_target_tensor(&u, &vc, &vu, w)?
    };
    let (inputs, _) = student_inputs(&x_t, &draws.t, &clean, &zeros, &batch.lr, &draws.drop)?;
    let out = student.forward(&inputs)?;
    mse(&out.velocity, &target)
}

pub fn loss_img_mg<R: Rng + ?Sized>(
    student: &dyn TensorModel,
    teacher: &dyn TensorModel,
    batch: &BatchTensors,
    cfg: &GuidanceConfig,
    rng: &mut R,
) -> Result<Tensor> {
    let draws = FlowDraws {
        t: (0..batch.len()).map(|_| rng.random::<f64>()).collect(),
        noise: draw_noise(batch.hr.dims(), batch.hr.dtype(), batch.hr.device(), rng)?,
        drop: draw_dropout(batch.len(), cfg.psi, rng),
    };
    loss_img_mg_with(student, teacher, batch, &draws, cfg.w)
}

/// Stratified text NELBO conditioned on the clean HR image (image time 0)
/// and the LR image. Every item contributes `K` rows.
pub fn loss_txt_with(student: &dyn TensorModel, batch: &BatchTensors, draws: &TextDraws) -> Result<Tensor> {
    let b = batch.len();
    let k = draws.t.first().map_or(0, |r| r.len());
    if k == 0 {
        return Err(Error::Domain("K must be at least 1".into()));
    }
    let rows: Vec<u32> = (0..b as u32).flat_map(|i| std::iter::repeat_n(i, k)).collect();
    let idx = Tensor::from_vec(rows, b * k, batch.hr.device())?;
    let hr = batch.hr.index_select(&idx, 0)?;
    let lr = batch.lr.index_select(&idx, 0)?;
    let t_flat: Vec<f64> = draws.t.iter().flatten().copied().collect();
    let corrupted: Vec<&TokenSequence> = draws.masked_text.iter().flatten().collect();
    let clean: Vec<&TokenSequence> = batch
        .text
        .iter()
        .flat_map(|s| std::iter::repeat_n(s, k))
        .collect();
    let weights = t_flat
        .iter()
        .map(|&t| nelbo_weight(&LogLinear, t, draws.delta))
        .collect::<Result<Vec<f64>>>()?;
    let out = student.forward(&ModelInputs {
        x_img: hr,
        t_img: vec![0.0; b * k],
        x_txt: ids_tensor(&corrupted, batch.hr.device())?,
        t_txt: t_flat,
        lr,
        lr_keep: vec![true; b * k],
    })?;
    masked_text_loss(&out.text_logits, &clean, &corrupted, &weights)
}

pub fn loss_txt<R: Rng + ?Sized>(
    student: &dyn TensorModel,
    batch: &BatchTensors,
    k: usize,
    delta: f64,
    rng: &mut R,
) -> Result<Tensor> {
    let draws = draw_text(&batch.text, k, delta, rng)?;
    loss_txt_with(student, batch, &draws)
}

/// The two parts of the joint term.
#[derive(Debug, Clone)]
pub struct JointLoss {
    pub image: Tensor,
    pub text: Tensor,
}

impl JointLoss {
    pub fn total(&self) -> Result<Tensor> {
        Ok((&self.image + &self.text)?)
    }
}

/// Both modalities corrupted at one shared time per item. The image term
/// uses the guided target with conditioning `{LR, x_txt_t}`; the text term
/// is the unweighted masked cross-entropy of the same forward pass, whose
/// image input is `x_hr_t`.
pub fn loss_joint_mg_with(
    student: &dyn TensorModel,
    teacher: &dyn TensorModel,
    batch: &BatchTensors,
    draws: &JointDraws,
    w: f64,
) -> Result<JointLoss> {
    let f = &draws.flow;
    let x_t = interpolate_batch(&batch.hr, &f.noise, &f.t)?;
    let u = (&f.noise - &batch.hr)?;
    let masked: Vec<&TokenSequence> = draws.masked_text.iter().collect();
    let target = if w == 0.0 {
        u
    } else {
        let (vc, vu) = teacher_velocities(teacher, &x_t, &f.t, &masked, &f.t, &batch.lr)?;
        rectified_target_tensor(&u, &vc, &vu, w)?
    };
    let (inputs, fed) = student_inputs(&x_t, &f.t, &masked, &f.t, &batch.lr, &f.drop)?;
    let out: ModelOutput = student.forward(&inputs)?;
    let clean: Vec<&TokenSequence> = batch.text.iter().collect();
    let fed_refs: Vec<&TokenSequence> = fed.iter().collect();
    Ok(JointLoss {
        image: mse(&out.velocity, &target)?,
        text: masked_text_loss(&out.text_logits, &clean, &fed_refs, &vec![1.0; batch.len()])?,
    })
}

pub fn loss_joint_mg<R: Rng + ?Sized>(
    student: &dyn TensorModel,
    teacher: &dyn TensorModel,
    batch: &BatchTensors,
    cfg: &GuidanceConfig,
    noise: &Tensor,
    rng: &mut R,
) -> Result<JointLoss> {
    let t: Vec<f64> = (0..batch.len()).map(|_| rng.random::<f64>()).collect();
    let masked_text = batch
        .text
        .iter()
        .zip(&t)
        .map(|(s, &tt)| forward_mask(s, tt, &LogLinear, rng))
        .collect::<Result<Vec<_>>>()?;
    let draws = JointDraws {
        flow: FlowDraws {
            t,
            noise: noise.clone(),
            drop: draw_dropout(batch.len(), cfg.psi, rng),
        },
        masked_text,
    };
    loss_joint_mg_with(student, teacher, batch, &draws, cfg.w)
}

/// AdamW with decoupled weight decay on arrays of rank >= 2.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub first: BTreeMap<String, Tensor>,
    pub second: BTreeMap<String, Tensor>,
    /// Number of updates applied so far.
    pub updates: u64,
}

impl AdamW {
    pub fn new() -> Self {
        Self {
            first: BTreeMap::new(),
            second: BTreeMap::new(),
            updates: 0,
        }
    }

    fn step(&mut self, params: &[(&String, &Var)], grads: &[Tensor], lr: f64, hp: &TrainHyper) -> Result<()> {
        self.updates += 1;
        let bc1 = 1.0 - hp.beta1.powi(self.updates as i32);
        let bc2 = 1.0 - hp.beta2.powi(self.updates as i32);
        for ((name, var), g) in params.iter().zip(grads) {
            let m_prev = match self.first.get(*name) {
                Some(m) => m.clone(),
                None => g.zeros_like()?,
            };
            let v_prev = match self.second.get(*name) {
                Some(v) => v.clone(),
                None => g.zeros_like()?,
            };
            let m = ((m_prev * hp.beta1)? + (g * (1.0 - hp.beta1))?)?;
            let v = ((v_prev * hp.beta2)? + (g.sqr()? * (1.0 - hp.beta2))?)?;
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + hp.eps)?)?;
            let p = var.as_tensor();
            let mut next = (p - (update * lr)?)?;
            if p.rank() >= 2 && hp.weight_decay > 0.0 {
                next = (next - (p * (lr * hp.weight_decay))?)?;
            }
            var.set(&next.detach())?;
            self.first.insert((*name).clone(), m);
            self.second.insert((*name).clone(), v);
        }
        Ok(())
    }
}

impl Default for AdamW {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss_img: f64,
    pub loss_txt: f64,
    pub loss_joint: f64,
    pub total: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Student, EMA teacher, optimizer moments and step counter. Per-step
/// randomness is derived from `(seed, step)`.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub student: MmFormer,
    pub teacher: MmFormer,
    pub optimizer: AdamW,
    pub step: u64,
    pub seed: u64,
}

impl TrainState {
    pub fn new(student: MmFormer, seed: u64) -> Result<Self> {
        let teacher = student.deep_clone()?;
        Ok(Self {
            student,
            teacher,
            optimizer: AdamW::new(),
            step: 0,
            seed,
        })
    }

    pub fn step_rng(&self) -> StreamRng {
        rng::stream(self.seed, "train", self.step)
    }
}

/// `ema <- decay * ema + (1 - decay) * params` for every array.
pub fn update_ema(teacher: &MmFormer, student: &MmFormer, decay: f64) -> Result<()> {
    for (name, ema) in teacher.store().iter() {
        let p = student
            .store()
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("student lacks parameter {name}")))?;
        let next = ((ema.as_tensor() * decay)? + (p.as_tensor() * (1.0 - decay))?)?;
        ema.set(&next.detach())?;
    }
    Ok(())
}

/// The three loss terms of one step, still attached to the student graph.
pub struct StepLosses {
    pub img: Tensor,
    pub txt: Tensor,
    pub joint: Tensor,
}

impl StepLosses {
    pub fn total(&self) -> Result<Tensor> {
        Ok(((&self.img + &self.txt)? + &self.joint)?)
    }
}

pub fn compute_losses(
    state: &TrainState,
    batch: &BatchTensors,
    cfg: &GuidanceConfig,
    hp: &TrainHyper,
) -> Result<StepLosses> {
    let mut rng = state.step_rng();
    let noise = draw_noise(batch.hr.dims(), batch.hr.dtype(), batch.hr.device(), &mut rng)?;
    let img_draws = FlowDraws {
        t: (0..batch.len()).map(|_| rng.random::<f64>()).collect(),
        noise: noise.clone(),
        drop: draw_dropout(batch.len(), cfg.psi, &mut rng),
    };
    let img = loss_img_mg_with(&state.student, &state.teacher, batch, &img_draws, cfg.w)?;
    let txt = loss_txt(&state.student, batch, hp.text_k, cfg.delta, &mut rng)?;
    let joint = loss_joint_mg(&state.student, &state.teacher, batch, cfg, &noise, &mut rng)?.total()?;
    Ok(StepLosses { img, txt, joint })
}

/// Sums the three losses, takes one clipped AdamW step and updates the EMA
/// teacher. Fails without touching the parameters if any loss is non-finite.
pub fn train_step(
    state: &mut TrainState,
    items: &[TrainTriple],
    cfg: &GuidanceConfig,
    hp: &TrainHyper,
) -> Result<StepMetrics> {
    let store = state.student.store();
    let batch = BatchTensors::new(items, store.dtype(), store.device())?;
    let losses = compute_losses(state, &batch, cfg, hp)?;
    let scalar = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
    let (li, lt, lj) = (scalar(&losses.img)?, scalar(&losses.txt)?, scalar(&losses.joint)?);
    if !(li.is_finite() && lt.is_finite() && lj.is_finite()) {
        return Err(Error::NonFiniteLoss {
            step: state.step,
            loss_img: li,
            loss_txt: lt,
            loss_joint: lj,
        });
    }
    let total = losses.total()?;
    let grads = total.backward()?;
    let params: Vec<(&String, &Var)> = store.iter().collect();
    let mut gs = Vec::with_capacity(params.len());
    let mut sq = 0.0;
    for (_, var) in &params {
        let g = match grads.get(var.as_tensor()) {
            // Backward results stay attached to the step graph; the moments
            // built from them would otherwise keep every step alive.
            Some(g) => g.detach(),
            None => var.as_tensor().zeros_like()?,
        };
        sq += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
        gs.push(g);
    }
    let grad_norm = sq.sqrt();
    if !grad_norm.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: state.step,
            loss_img: li,
            loss_txt: lt,
            loss_joint: lj,
        });
    }
    if hp.grad_clip > 0.0 && grad_norm > hp.grad_clip {
        let factor = hp.grad_clip / grad_norm;
        gs = gs.into_iter().map(|g| g * factor).collect::<candle_core::Result<_>>()?;
    }
    let lr = hp.learning_rate(state.step);
    state.optimizer.step(&params, &gs, lr, hp)?;
    update_ema(&state.teacher, &state.student, cfg.ema_decay)?;
    let metrics = StepMetrics {
        step: state.step,
        loss_img: li,
        loss_txt: lt,
        loss_joint: lj,
        total: li + lt + lj,
        lr,
        grad_norm,
    };
    state.step += 1;
    Ok(metrics)
}
