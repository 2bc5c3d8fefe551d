//! Synchronized joint inference.
//!
//! The image starts as Gaussian noise and the text as all MASK at `t = 1`.
//! Each step from `t` to `s` asks the model once for a velocity and a text
//! posterior, moves the image with an Euler step and reveals a random subset
//! of the masked positions. The last step reveals whatever is still masked
//! by posterior argmax.

use candle_core::DType;
use rand::Rng;

use crate::error::{Error, Result};
use crate::imageflow::{euler_step, ImageGrid};
use crate::mmformer::{ModelInputs, TensorModel};
use crate::rng::{self, StreamRng};
use crate::schedule::{LogLinear, NoiseSchedule};
use crate::textdiff::{reveal_remaining, reverse_text_step, TextPosterior, TokenSequence};

/// One item of a batched prediction request. `lr = None` is the
/// unconditional query.
#[derive(Debug, Clone, Copy)]
pub struct DenoiserQuery<'a> {
    pub x_img: &'a ImageGrid,
    pub t_img: f64,
    pub x_txt: &'a TokenSequence,
    pub t_txt: f64,
    pub lr: Option<&'a ImageGrid>,
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub velocity: ImageGrid,
    pub posterior: TextPosterior,
}

/// Host-side view of a joint model, used by the sampler.
pub trait JointDenoiser {
    fn predict(&self, queries: &[DenoiserQuery<'_>]) -> Result<Vec<Prediction>>;
}

impl<T: JointDenoiser + ?Sized> JointDenoiser for &T {
    fn predict(&self, queries: &[DenoiserQuery<'_>]) -> Result<Vec<Prediction>> {
        (**self).predict(queries)
    }
}

/// Adapts a [`TensorModel`] to the sampler.
pub struct ModelDenoiser<'m, M: TensorModel> {
    model: &'m M,
}

impl<'m, M: TensorModel> ModelDenoiser<'m, M> {
    pub fn new(model: &'m M) -> Self {
        Self { model }
    }
}

impl<M: TensorModel> JointDenoiser for ModelDenoiser<'_, M> {
    fn predict(&self, queries: &[DenoiserQuery<'_>]) -> Result<Vec<Prediction>> {
        let cfg = self.model.config();
        let imgs: Vec<&ImageGrid> = queries.iter().map(|q| q.x_img).collect();
        let t_img: Vec<f64> = queries.iter().map(|q| q.t_img).collect();
        let txt: Vec<&[u32]> = queries.iter().map(|q| q.x_txt.ids()).collect();
        let t_txt: Vec<f64> = queries.iter().map(|q| q.t_txt).collect();
        let lr: Vec<Option<&ImageGrid>> = queries.iter().map(|q| q.lr).collect();
        let inputs = ModelInputs::from_grids(
            &imgs,
            &t_img,
            &txt,
            &t_txt,
            &lr,
            cfg,
            self.model.dtype(),
            self.model.device(),
        )?;
        let out = self.model.forward(&inputs)?;
        let vel: Vec<f64> = out.velocity.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        let logits: Vec<f64> = out.text_logits.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        let per_img = cfg.image_height * cfg.image_width * cfg.channels;
        let per_txt = cfg.seq_len * cfg.vocab_size;
        queries
            .iter()
            .enumerate()
            .map(|(i, _)| {
                Ok(Prediction {
                    velocity: ImageGrid::new(
                        cfg.image_height,
                        cfg.image_width,
                        cfg.channels,
                        vel[i * per_img..(i + 1) * per_img].to_vec(),
                    )?,
                    posterior: TextPosterior::from_logits(
                        cfg.seq_len,
                        cfg.vocab_size,
                        &logits[i * per_txt..(i + 1) * per_txt],
                    )?,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerState {
    pub x_img: ImageGrid,
    pub x_txt: TokenSequence,
    pub t: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleConfig {
    pub steps: usize,
    /// Sampling-time CFG scale; 1 means a single conditional forward per step.
    pub w: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { steps: 4, w: 1.0 }
    }
}

/// `1, 1 - 1/steps, ..., 0`; both endpoints exact.
pub fn time_grid(steps: usize) -> Vec<f64> {
    (0..=steps)
        .map(|k| (steps - k) as f64 / steps as f64)
        .collect()
}

/// Pure noise image of `hr_shape` and an all-MASK sequence at `t = 1`.
pub fn init_state<R: Rng + ?Sized>(
    hr_shape: (usize, usize, usize),
    seq_len: usize,
    vocab_size: usize,
    rng: &mut R,
) -> SamplerState {
    let (h, w, c) = hr_shape;
    SamplerState {
        x_img: ImageGrid::standard_normal(h, w, c, rng),
        x_txt: TokenSequence::all_masked(seq_len, vocab_size),
        t: 1.0,
    }
}

/// Advances every state from `t` to `s`. `step` only labels errors.
/// When `final_step` is set, remaining MASK positions are filled by argmax.
#[allow(clippy::too_many_arguments)]
pub fn joint_step<D: JointDenoiser + ?Sized>(
    states: &[SamplerState],
    denoiser: &D,
    lrs: &[ImageGrid],
    t: f64,
    s: f64,
    w: f64,
    final_step: bool,
    step: usize,
    rngs: &mut [StreamRng],
) -> Result<Vec<SamplerState>> {
    if s >= t {
        return Err(Error::Ordering { t, s });
    }
    if states.len() != lrs.len() || states.len() != rngs.len() {
        return Err(Error::Shape("states, LR images and rngs differ in count".into()));
    }
    if let Some(st) = states.iter().find(|st| st.t != t) {
        return Err(Error::Contract(format!(
            "state is at t = {}, step expects t = {t}",
            st.t
        )));
    }
    let queries: Vec<DenoiserQuery<'_>> = states
        .iter()
        .zip(lrs)
        .map(|(st, lr)| DenoiserQuery {
            x_img: &st.x_img,
            t_img: t,
            x_txt: &st.x_txt,
            t_txt: t,
            lr: Some(lr),
        })
        .collect();
    let cond = denoiser.predict(&queries)?;
    check_finite(&cond, step)?;

    let velocities: Vec<ImageGrid> = if w == 1.0 {
        cond.iter().map(|p| p.velocity.clone()).collect()
    } else {
        let masked: Vec<TokenSequence> = states
            .iter()
            .map(|st| TokenSequence::all_masked(st.x_txt.len(), st.x_txt.vocab_size()))
            .collect();
        let uncond_queries: Vec<DenoiserQuery<'_>> = states
            .iter()
            .zip(&masked)
            .map(|(st, m)| DenoiserQuery {
                x_img: &st.x_img,
                t_img: t,
                x_txt: m,
                t_txt: 1.0,
                lr: None,
            })
            .collect();
        let uncond = denoiser.predict(&uncond_queries)?;
        check_finite(&uncond, step)?;
        cond.iter()
            .zip(&uncond)
            .map(|(c, u)| {
                u.velocity
                    .zip_map(&c.velocity, |vu, vc| vu + w * (vc - vu))
            })
            .collect::<Result<_>>()?
    };

    let schedule = LogLinear;
    states
        .iter()
        .zip(cond.iter().zip(&velocities))
        .zip(rngs.iter_mut())
        .map(|((st, (pred, v)), rng)| {
            let x_img = euler_step(&st.x_img, v, t, s)?;
            let mut x_txt = reverse_text_step(&st.x_txt, &pred.posterior, t, s, &schedule, rng)?;
            if final_step {
                x_txt = reveal_remaining(&x_txt, &pred.posterior);
            }
            Ok(SamplerState { x_img, x_txt, t: s })
        })
        .collect()
}

fn check_finite(preds: &[Prediction], step: usize) -> Result<()> {
    if preds.iter().all(|p| p.velocity.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteOutput { step })
    }
}

/// Output of a batched sampler run.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    /// Clamped to `[-1, 1]`.
    pub image: ImageGrid,
    pub text: TokenSequence,
}

/// Runs the full trajectory for a batch. Item `i` draws its noise and text
/// samples from its own stream seeded by `seeds[i]`. `on_step` sees the
/// states after every step (step index counts from 1).
#[allow(clippy::too_many_arguments)]
pub fn sample_batch<D: JointDenoiser + ?Sized>(
    denoiser: &D,
    lrs: &[ImageGrid],
    hr_shape: (usize, usize, usize),
    seq_len: usize,
    vocab_size: usize,
    cfg: SampleConfig,
    seeds: &[u64],
    mut on_step: impl FnMut(usize, &[SamplerState]) -> Result<()>,
) -> Result<Vec<SampleOutput>> {
    if cfg.steps == 0 {
        return Err(Error::Domain("steps must be at least 1".into()));
    }
    if seeds.len() != lrs.len() {
        return Err(Error::Shape("one seed per LR image required".into()));
    }
    let mut rngs: Vec<StreamRng> = seeds.iter().map(|&s| rng::stream(s, "sample", 0)).collect();
    let mut states: Vec<SamplerState> = rngs
        .iter_mut()
        .map(|r| init_state(hr_shape, seq_len, vocab_size, r))
        .collect();
    let grid = time_grid(cfg.steps);
    for (k, pair) in grid.windows(2).enumerate() {
        let last = k + 1 == cfg.steps;
        states = joint_step(&states, denoiser, lrs, pair[0], pair[1], cfg.w, last, k + 1, &mut rngs)?;
        on_step(k + 1, &states)?;
    }
    Ok(states
        .into_iter()
        .map(|st| SampleOutput {
            image: st.x_img.clamp(-1.0, 1.0),
            text: st.x_txt,
        })
        .collect())
}

/// Single-image convenience wrapper around [`sample_batch`].
#[allow(clippy::too_many_arguments)]
pub fn sample<D: JointDenoiser + ?Sized>(
    denoiser: &D,
    lr: &ImageGrid,
    hr_shape: (usize, usize, usize),
    seq_len: usize,
    vocab_size: usize,
    cfg: SampleConfig,
    seed: u64,
) -> Result<(ImageGrid, TokenSequence)> {
    let mut out = sample_batch(
        denoiser,
        std::slice::from_ref(lr),
        hr_shape,
        seq_len,
        vocab_size,
        cfg,
        &[seed],
        |_, _| Ok(()),
    )?;
    let o = out.pop().expect("one output per input");
    Ok((o.image, o.text))
}

/// Expected fraction of positions revealed after `k` of `steps` uniform steps.
pub fn expected_revealed_fraction(steps: usize, k: usize) -> f64 {
    1.0 - LogLinear.alpha(time_grid(steps)[k])
}
