//! Conditional flow matching on the linear noise path.
//!
//! `x_t = (1 - t) x_0 + t x_1` with `x_0` data and `x_1 ~ N(0, I)`. The
//! velocity along the path is the constant `x_1 - x_0`; sampling integrates it
//! backwards from `t = 1` with explicit Euler steps.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Real-valued `H x W x C` array stored row-major, channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{} values do not fill a {height}x{width}x{channels} grid",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    /// I.i.d. standard normal entries.
    pub fn standard_normal<R: Rng + ?Sized>(
        height: usize,
        width: usize,
        channels: usize,
        rng: &mut R,
    ) -> Self {
        let data = (0..height * width * channels)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Self {
        self.map(|v| v.clamp(lo, hi))
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() == other.shape() {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "grid shapes differ: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )))
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            ..*self
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    /// Guidance scale of the rectified target.
    pub w: f64,
    /// Probability of dropping the student's conditioning to the null encoding.
    pub psi: f64,
    pub ema_decay: f64,
    /// Floor on text timesteps.
    pub delta: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            w: 1.0,
            psi: 0.1,
            ema_decay: 0.999,
            delta: crate::schedule::DEFAULT_DELTA,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w >= 0.0 && self.w.is_finite()) {
            return Err(Error::Config(format!("guidance.w = {} must be >= 0", self.w)));
        }
        if !(0.0..=1.0).contains(&self.psi) {
            return Err(Error::Config(format!("guidance.psi = {} outside [0, 1]", self.psi)));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::Config(format!(
                "ema decay {} outside (0, 1)",
                self.ema_decay
            )));
        }
        if !(0.0..1.0).contains(&self.delta) {
            return Err(Error::Config(format!("delta = {} outside [0, 1)", self.delta)));
        }
        Ok(())
    }
}

pub fn interpolate(x0: &ImageGrid, x1: &ImageGrid, t: f64) -> Result<ImageGrid> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("t = {t} outside [0, 1]")));
    }
    x0.zip_map(x1, |a, b| (1.0 - t) * a + t * b)
}

pub fn velocity_target(x0: &ImageGrid, x1: &ImageGrid) -> Result<ImageGrid> {
    x0.zip_map(x1, |a, b| b - a)
}

/// Mean squared error over all entries.
pub fn cfm_loss(v_pred: &ImageGrid, u_target: &ImageGrid) -> Result<f64> {
    v_pred.check_same_shape(u_target)?;
    let sse: f64 = v_pred
        .data
        .iter()
        .zip(&u_target.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sse / v_pred.len() as f64)
}

/// `u_t + w (v_cond - v_uncond)`. Both teacher outputs are constants here;
/// keeping gradients out of them is the caller's job.
pub fn rectified_target(
    u_t: &ImageGrid,
    v_ema_cond: &ImageGrid,
    v_ema_uncond: &ImageGrid,
    w: f64,
) -> Result<ImageGrid> {
    u_t.check_same_shape(v_ema_cond)?;
    u_t.check_same_shape(v_ema_uncond)?;
    if w == 0.0 {
        return Ok(u_t.clone());
    }
    let data = u_t
        .data
        .iter()
        .zip(&v_ema_cond.data)
        .zip(&v_ema_uncond.data)
        .map(|((&u, &c), &n)| if c == n { u } else { u + w * (c - n) })
        .collect();
    Ok(ImageGrid { data, ..*u_t })
}

/// `x_s = x_t - (t - s) v_hat`.
pub fn euler_step(x_t: &ImageGrid, v_hat: &ImageGrid, t: f64, s: f64) -> Result<ImageGrid> {
    if s >= t {
        return Err(Error::Ordering { t, s });
    }
    if !(0.0..=1.0).contains(&t) || !(0.0..=1.0).contains(&s) {
        return Err(Error::Domain(format!("times t = {t}, s = {s} outside [0, 1]")));
    }
    let dt = t - s;
    x_t.zip_map(v_hat, |x, v| x - dt * v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn grid(values: &[f64]) -> ImageGrid {
        ImageGrid::new(1, values.len(), 1, values.to_vec()).unwrap()
    }

    #[test]
    fn interpolate_examples() {
        let mut rng = seeded(1);
        let x0 = ImageGrid::standard_normal(2, 3, 2, &mut rng);
        let x1 = ImageGrid::standard_normal(2, 3, 2, &mut rng);
        assert_eq!(interpolate(&x0, &x1, 0.0).unwrap(), x0);
        assert_eq!(interpolate(&x0, &x1, 1.0).unwrap(), x1);
        let z = ImageGrid::zeros(2, 2, 1);
        let o = ImageGrid::filled(2, 2, 1, 1.0);
        let mid = interpolate(&z, &o, 0.3).unwrap();
        assert!(mid.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
        assert!(interpolate(&z, &ImageGrid::zeros(1, 2, 1), 0.5).is_err());
    }

    #[test]
    fn velocity_is_path_derivative() {
        let mut rng = seeded(2);
        let x0 = ImageGrid::standard_normal(3, 4, 3, &mut rng);
        let x1 = ImageGrid::standard_normal(3, 4, 3, &mut rng);
        let u = velocity_target(&x0, &x1).unwrap();
        let h = 1e-4;
        for &t in &[0.2, 0.5, 0.8] {
            let a = interpolate(&x0, &x1, t + h).unwrap();
            let b = interpolate(&x0, &x1, t - h).unwrap();
            let fd = a.zip_map(&b, |p, q| (p - q) / (2.0 * h)).unwrap();
            for (f, v) in fd.data().iter().zip(u.data()) {
                assert!((f - v).abs() < 1e-6);
            }
        }
        assert_eq!(velocity_target(&x0, &x0).unwrap(), ImageGrid::zeros(3, 4, 3));
    }

    #[test]
    fn cfm_loss_examples() {
        let u = grid(&[1.0, 1.0, 1.0]);
        assert_eq!(cfm_loss(&u, &u).unwrap(), 0.0);
        assert_eq!(cfm_loss(&grid(&[0.0; 3]), &u).unwrap(), 1.0);
        assert_eq!(cfm_loss(&grid(&[0.5; 3]), &grid(&[-0.5; 3])).unwrap(), 1.0);
    }

    #[test]
    fn cfm_loss_gradient_matches_finite_differences() {
        // d/dv mean((v - u)^2) = 2 (v - u) / n
        let mut rng = seeded(5);
        let v = ImageGrid::standard_normal(4, 4, 2, &mut rng);
        let u = ImageGrid::standard_normal(4, 4, 2, &mut rng);
        let n = v.len() as f64;
        let h = 1e-5;
        for k in 0..10 {
            let i = (k * 7) % v.len();
            let analytic = 2.0 * (v.data()[i] - u.data()[i]) / n;
            let mut plus = v.clone();
            plus.data_mut()[i] += h;
            let mut minus = v.clone();
            minus.data_mut()[i] -= h;
            let fd = (cfm_loss(&plus, &u).unwrap() - cfm_loss(&minus, &u).unwrap()) / (2.0 * h);
            assert!(((fd - analytic) / analytic).abs() < 1e-4);
        }
    }

    #[test]
    fn rectified_target_examples() {
        let u = grid(&[1.0, 0.0]);
        let c = grid(&[2.0, 1.0]);
        let n = grid(&[1.5, 1.5]);
        assert_eq!(rectified_target(&u, &c, &n, 0.0).unwrap(), u);
        assert_eq!(rectified_target(&u, &c, &c, 3.0).unwrap(), u);
        assert_eq!(
            rectified_target(&u, &c, &n, 1.0).unwrap(),
            grid(&[1.5, -0.5])
        );
        // linear in w
        let r1 = rectified_target(&u, &c, &n, 1.0).unwrap();
        let r3 = rectified_target(&u, &c, &n, 3.0).unwrap();
        for ((a, b), base) in r1.data().iter().zip(r3.data()).zip(u.data()) {
            assert!(((b - base) - 3.0 * (a - base)).abs() < 1e-12);
        }
    }

    #[test]
    fn euler_examples() {
        let mut rng = seeded(3);
        let x0 = ImageGrid::standard_normal(2, 2, 3, &mut rng);
        let x1 = ImageGrid::standard_normal(2, 2, 3, &mut rng);
        let zero = ImageGrid::zeros(2, 2, 3);
        assert_eq!(euler_step(&x1, &zero, 0.7, 0.2).unwrap(), x1);
        let v = velocity_target(&x0, &x1).unwrap();
        let back = euler_step(&x1, &v, 1.0, 0.0).unwrap();
        for (a, b) in back.data().iter().zip(x0.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let mut x = x1.clone();
        for k in 0..4 {
            let t = 1.0 - 0.25 * k as f64;
            x = euler_step(&x, &v, t, t - 0.25).unwrap();
        }
        for (a, b) in x.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(matches!(
            euler_step(&x1, &v, 0.3, 0.5),
            Err(Error::Ordering { .. })
        ));
    }

    #[test]
    fn guidance_defaults() {
        let g = GuidanceConfig::default();
        assert_eq!((g.w, g.psi), (1.0, 0.1));
        g.validate().unwrap();
        let s = serde_json::to_string(&g).unwrap();
        assert_eq!(serde_json::from_str::<GuidanceConfig>(&s).unwrap(), g);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn interpolate_is_affine(a in 0.0f64..=1.0, b in 0.0f64..=1.0, seed in any::<u64>()) {
                let mut rng = seeded(seed);
                let x0 = ImageGrid::standard_normal(2, 3, 1, &mut rng);
                let x1 = ImageGrid::standard_normal(2, 3, 1, &mut rng);
                let mid = interpolate(&x0, &x1, (a + b) / 2.0).unwrap();
                let pa = interpolate(&x0, &x1, a).unwrap();
                let pb = interpolate(&x0, &x1, b).unwrap();
                for ((m, p), q) in mid.data().iter().zip(pa.data()).zip(pb.data()) {
                    prop_assert!((m - (p + q) / 2.0).abs() < 1e-12);
                }
            }

            #[test]
            fn euler_path_independent_for_constant_fields(cuts in prop::collection::vec(0.0f64..1.0, 0..8), seed in any::<u64>()) {
                let mut rng = seeded(seed);
                let x = ImageGrid::standard_normal(2, 2, 2, &mut rng);
                let v = ImageGrid::standard_normal(2, 2, 2, &mut rng);
                let mut times: Vec<f64> = cuts.into_iter().map(|c| 0.1 + 0.8 * c).collect();
                times.push(0.9);
                times.push(0.1);
                times.sort_by(|a, b| b.partial_cmp(a).unwrap());
                times.dedup();
                let mut y = x.clone();
                for pair in times.windows(2) {
                    y = euler_step(&y, &v, pair[0], pair[1]).unwrap();
                }
                let direct = euler_step(&x, &v, 0.9, 0.1).unwrap();
                for (a, b) in y.data().iter().zip(direct.data()) {
                    prop_assert!((a - b).abs() < 1e-6);
                }
            }
        }
    }
}
