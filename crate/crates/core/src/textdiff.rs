//! Absorbing-state discrete diffusion over fixed-length token sequences.
//!
//! Tokens are ids in `[0, N)` plus one absorbing MASK id equal to `N`. The
//! forward process replaces each token by MASK independently with probability
//! `1 - alpha(t)`. The reverse step reveals each masked position with
//! probability `(alpha(s) - alpha(t)) / (1 - alpha(t))` by sampling from the
//! predicted posterior, and never touches revealed tokens.

use rand::Rng;

use crate::error::{Error, Result};
use crate::schedule::{nelbo_weight, NoiseSchedule, TimestepBatch};

/// Stabilizer in the denominator of the unmask probability.
pub const UNMASK_EPS: f64 = 1e-8;

/// Tolerance on posterior row sums.
pub const ROW_SUM_TOL: f64 = 1e-5;

/// Glyph charset plus a trailing PAD id; MASK sits one past PAD.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    glyphs: Vec<char>,
}

impl Vocab {
    pub fn new(charset: &str) -> Result<Self> {
        let glyphs: Vec<char> = charset.chars().collect();
        if glyphs.is_empty() {
            return Err(Error::Config("charset is empty".into()));
        }
        let mut sorted = glyphs.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != glyphs.len() {
            return Err(Error::Config(format!("charset {charset:?} has duplicates")));
        }
        Ok(Self { glyphs })
    }

    pub fn glyphs(&self) -> &[char] {
        &self.glyphs
    }

    /// N: real glyphs plus PAD.
    pub fn size(&self) -> usize {
        self.glyphs.len() + 1
    }

    pub fn pad_id(&self) -> u32 {
        self.glyphs.len() as u32
    }

    pub fn mask_id(&self) -> u32 {
        self.size() as u32
    }

    pub fn glyph_id(&self, c: char) -> Option<u32> {
        self.glyphs.iter().position(|&g| g == c).map(|i| i as u32)
    }

    /// Encodes `text` right-padded with PAD to `seq_len`.
    pub fn encode(&self, text: &str, seq_len: usize) -> Result<TokenSequence> {
        let mut ids = Vec::with_capacity(seq_len);
        for c in text.chars() {
            let id = self
                .glyph_id(c)
                .ok_or_else(|| Error::Domain(format!("character {c:?} not in charset")))?;
            ids.push(id);
        }
        if ids.len() > seq_len {
            return Err(Error::Domain(format!(
                "text {text:?} longer than sequence length {seq_len}"
            )));
        }
        ids.resize(seq_len, self.pad_id());
        TokenSequence::new(ids, self.size())
    }

    /// Decodes glyph ids, dropping PAD. MASK decodes to `'?'`.
    pub fn decode(&self, seq: &TokenSequence) -> String {
        seq.ids()
            .iter()
            .filter(|&&id| id != self.pad_id())
            .map(|&id| self.glyphs.get(id as usize).copied().unwrap_or('?'))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    ids: Vec<u32>,
    vocab_size: usize,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>, vocab_size: usize) -> Result<Self> {
        if let Some(&bad) = ids.iter().find(|&&id| id as usize > vocab_size) {
            return Err(Error::Domain(format!(
                "token id {bad} outside [0, {vocab_size}]"
            )));
        }
        Ok(Self { ids, vocab_size })
    }

    pub fn all_masked(len: usize, vocab_size: usize) -> Self {
        Self {
            ids: vec![vocab_size as u32; len],
            vocab_size,
        }
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn mask_id(&self) -> u32 {
        self.vocab_size as u32
    }

    pub fn is_masked(&self, pos: usize) -> bool {
        self.ids[pos] == self.mask_id()
    }

    pub fn masked_count(&self) -> usize {
        self.ids.iter().filter(|&&id| id == self.mask_id()).count()
    }
}

/// Row-stochastic `L x N` matrix; column `j` is the probability of id `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct TextPosterior {
    seq_len: usize,
    vocab_size: usize,
    probs: Vec<f64>,
}

impl TextPosterior {
    pub fn new(seq_len: usize, vocab_size: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != seq_len * vocab_size {
            return Err(Error::Shape(format!(
                "posterior has {} entries, expected {seq_len} x {vocab_size}",
                probs.len()
            )));
        }
        let p = Self {
            seq_len,
            vocab_size,
            probs,
        };
        p.validate()?;
        Ok(p)
    }

    /// Row-wise softmax of `L x N` logits.
    pub fn from_logits(seq_len: usize, vocab_size: usize, logits: &[f64]) -> Result<Self> {
        if logits.len() != seq_len * vocab_size {
            return Err(Error::Shape(format!(
                "logits have {} entries, expected {seq_len} x {vocab_size}",
                logits.len()
            )));
        }
        let mut probs = Vec::with_capacity(logits.len());
        for row in logits.chunks(vocab_size) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            probs.extend(exps.into_iter().map(|e| e / z));
        }
        Self::new(seq_len, vocab_size, probs)
    }

    /// Same distribution at every position.
    pub fn repeated(seq_len: usize, row: &[f64]) -> Result<Self> {
        let probs = row.iter().copied().cycle().take(seq_len * row.len()).collect();
        Self::new(seq_len, row.len(), probs)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, row) in self.probs.chunks(self.vocab_size).enumerate() {
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(Error::Contract(format!(
                    "posterior row {i} has a negative or non-finite entry"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::Contract(format!(
                    "posterior row {i} sums to {sum}, not 1"
                )));
            }
        }
        Ok(())
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn row(&self, pos: usize) -> &[f64] {
        &self.probs[pos * self.vocab_size..(pos + 1) * self.vocab_size]
    }

    pub fn argmax(&self, pos: usize) -> u32 {
        let row = self.row(pos);
        let mut best = 0;
        for (j, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = j;
            }
        }
        best as u32
    }

    /// Inverse-CDF draw from row `pos` given a uniform `v` in `[0, 1)`.
    pub fn sample_row(&self, pos: usize, v: f64) -> u32 {
        let row = self.row(pos);
        let mut cum = 0.0;
        let mut last_positive = 0;
        for (j, &p) in row.iter().enumerate() {
            if p > 0.0 {
                last_positive = j;
            }
            cum += p;
            if v < cum {
                return j as u32;
            }
        }
        last_positive as u32
    }
}

/// Draws `x_t ~ q(x_t | x)`: each token survives with probability `alpha(t)`.
pub fn forward_mask<R: Rng + ?Sized>(
    x: &TokenSequence,
    t: f64,
    schedule: &dyn NoiseSchedule,
    rng: &mut R,
) -> Result<TokenSequence> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("t = {t} outside [0, 1]")));
    }
    if x.masked_count() > 0 {
        return Err(Error::Contract("clean text contains MASK".into()));
    }
    let keep = schedule.alpha(t);
    let mask = x.mask_id();
    let ids = x
        .ids
        .iter()
        .map(|&id| if rng.random::<f64>() < keep { id } else { mask })
        .collect();
    Ok(TokenSequence {
        ids,
        vocab_size: x.vocab_size,
    })
}

/// Mean cross-entropy of the clean tokens over the masked positions of `x_t`.
/// Zero when nothing is masked.
pub fn masked_cross_entropy(
    clean: &TokenSequence,
    x_t: &TokenSequence,
    posterior: &TextPosterior,
) -> Result<f64> {
    if clean.len() != x_t.len() || posterior.seq_len() != clean.len() {
        return Err(Error::Shape(format!(
            "sequence lengths differ: clean {}, corrupted {}, posterior {}",
            clean.len(),
            x_t.len(),
            posterior.seq_len()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for pos in 0..clean.len() {
        if x_t.is_masked(pos) {
            let target = clean.ids[pos] as usize;
            let p = posterior.row(pos).get(target).copied().ok_or_else(|| {
                Error::Shape(format!("token id {target} outside posterior columns"))
            })?;
            sum -= p.ln();
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Monte-Carlo NELBO over the given timesteps: the mean over `t_i` of
/// `nelbo_weight(t_i)` times the masked cross-entropy at a fresh corruption
/// `x_{t_i}`.
pub fn text_nelbo_loss<F, R>(
    mut posterior_fn: F,
    x: &TokenSequence,
    timesteps: &TimestepBatch,
    schedule: &dyn NoiseSchedule,
    rng: &mut R,
) -> Result<f64>
where
    F: FnMut(&TokenSequence, f64) -> Result<TextPosterior>,
    R: Rng + ?Sized,
{
    let mut total = 0.0;
    for &t in timesteps.values() {
        let x_t = forward_mask(x, t, schedule, rng)?;
        let posterior = posterior_fn(&x_t, t)?;
        posterior.validate()?;
        let weight = nelbo_weight(schedule, t, timesteps.delta())?;
        total += weight * masked_cross_entropy(x, &x_t, &posterior)?;
    }
    Ok(total / timesteps.len() as f64)
}

/// Probability that a still-masked position is revealed on the step `t -> s`.
pub fn unmask_probability(schedule: &dyn NoiseSchedule, t: f64, s: f64) -> f64 {
    let (alpha_t, alpha_s) = (schedule.alpha(t), schedule.alpha(s));
    (alpha_s - alpha_t) / (1.0 - alpha_t + UNMASK_EPS)
}

/// One reverse absorbing transition from `t` to `s < t`.
///
/// Every masked position consumes two uniforms (reveal decision, then the
/// inverse-CDF draw) whether or not it is revealed.
pub fn reverse_text_step<R: Rng + ?Sized>(
    x_t: &TokenSequence,
    posterior: &TextPosterior,
    t: f64,
    s: f64,
    schedule: &dyn NoiseSchedule,
    rng: &mut R,
) -> Result<TokenSequence> {
    if !(0.0..=1.0).contains(&t) || !(0.0..=1.0).contains(&s) {
        return Err(Error::Domain(format!("times t = {t}, s = {s} outside [0, 1]")));
    }
    if s >= t {
        return Err(Error::Ordering { t, s });
    }
    if posterior.seq_len() != x_t.len() {
        return Err(Error::Shape(format!(
            "posterior covers {} positions, sequence has {}",
            posterior.seq_len(),
            x_t.len()
        )));
    }
    let p_unmask = unmask_probability(schedule, t, s);
    let mut ids = x_t.ids.clone();
    for (pos, id) in ids.iter_mut().enumerate() {
        if *id != x_t.mask_id() {
            continue;
        }
        let reveal = rng.random::<f64>() < p_unmask;
        let candidate = posterior.sample_row(pos, rng.random::<f64>());
        if reveal {
            *id = candidate;
        }
    }
    Ok(TokenSequence {
        ids,
        vocab_size: x_t.vocab_size,
    })
}

/// Replaces every remaining MASK by the posterior argmax.
pub fn reveal_remaining(x_t: &TokenSequence, posterior: &TextPosterior) -> TokenSequence {
    let ids = x_t
        .ids
        .iter()
        .enumerate()
        .map(|(pos, &id)| {
            if id == x_t.mask_id() {
                posterior.argmax(pos)
            } else {
                id
            }
        })
        .collect();
    TokenSequence {
        ids,
        vocab_size: x_t.vocab_size,
    }
}
