//! Noise schedules and variance-reduced timestep sampling.

use rand::Rng;

use crate::error::{Error, Result};

/// Default stability floor for text timesteps. Caps the NELBO weight of the
/// log-linear schedule at 1000.
pub const DEFAULT_DELTA: f64 = 1e-3;

/// Keep-probability `alpha(t)` of the absorbing text process and its derivative.
pub trait NoiseSchedule: Send + Sync {
    fn alpha(&self, t: f64) -> f64;
    fn alpha_prime(&self, t: f64) -> f64;
}

/// `alpha(t) = 1 - t`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LogLinear;

impl NoiseSchedule for LogLinear {
    fn alpha(&self, t: f64) -> f64 {
        1.0 - t
    }

    fn alpha_prime(&self, _t: f64) -> f64 {
        -1.0
    }
}

fn check_unit(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::Domain(format!("t = {t} outside [0, 1]")))
    }
}

pub fn log_linear_alpha(t: f64) -> Result<f64> {
    check_unit(t)?;
    Ok(LogLinear.alpha(t))
}

pub fn log_linear_alpha_prime(t: f64) -> Result<f64> {
    check_unit(t)?;
    Ok(LogLinear.alpha_prime(t))
}

/// Integrand weight `-alpha'(t) / (1 - alpha(t))` of the text NELBO.
///
/// Unbounded as `t -> 0`, so anything below `delta` is rejected.
pub fn nelbo_weight(schedule: &dyn NoiseSchedule, t: f64, delta: f64) -> Result<f64> {
    check_unit(t)?;
    if t < delta || t <= 0.0 {
        return Err(Error::Stability { t, delta });
    }
    Ok(-schedule.alpha_prime(t) / (1.0 - schedule.alpha(t)))
}

/// K timesteps, one per equal-width stratum of `(delta, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimestepBatch {
    values: Vec<f64>,
    delta: f64,
}

impl TimestepBatch {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Lower and upper edge of stratum `i`.
    pub fn stratum(&self, i: usize) -> (f64, f64) {
        let k = self.values.len() as f64;
        let width = 1.0 - self.delta;
        (
            self.delta + width * i as f64 / k,
            self.delta + width * (i + 1) as f64 / k,
        )
    }

    /// A batch holding exactly the given times. Used to pin timesteps in tests
    /// and when replaying a fixed schedule.
    pub fn from_values(values: Vec<f64>, delta: f64) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Domain("empty timestep batch".into()));
        }
        for &t in &values {
            check_unit(t)?;
            if t < delta {
                return Err(Error::Stability { t, delta });
            }
        }
        Ok(Self { values, delta })
    }
}

/// `t_i = delta + (1 - delta) (i + u) / K` with one offset `u` shared by all strata.
pub fn stratified_timesteps(k: usize, delta: f64, u: f64) -> Result<TimestepBatch> {
    if k == 0 {
        return Err(Error::Domain("K must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&delta) {
        return Err(Error::Domain(format!("delta = {delta} outside [0, 1)")));
    }
    if !(0.0..1.0).contains(&u) {
        return Err(Error::Domain(format!("offset u = {u} outside [0, 1)")));
    }
    let width = 1.0 - delta;
    let values = (0..k)
        .map(|i| (delta + width * (i as f64 + u) / k as f64).max(delta))
        .collect();
    Ok(TimestepBatch { values, delta })
}

pub fn sample_stratified_timesteps<R: Rng + ?Sized>(
    k: usize,
    delta: f64,
    rng: &mut R,
) -> Result<TimestepBatch> {
    stratified_timesteps(k, delta, rng.random::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn log_linear_boundaries() {
        assert_eq!(log_linear_alpha(0.0).unwrap(), 1.0);
        assert_eq!(log_linear_alpha(1.0).unwrap(), 0.0);
        assert_eq!(log_linear_alpha(0.25).unwrap(), 0.75);
        assert_eq!(log_linear_alpha_prime(0.4).unwrap(), -1.0);
        assert!(matches!(log_linear_alpha(1.5), Err(Error::Domain(_))));
        assert!(matches!(log_linear_alpha(-0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn alpha_prime_matches_central_difference() {
        let h = 1e-6;
        for i in 0..100 {
            let t = 0.01 + 0.98 * i as f64 / 99.0;
            let fd = (LogLinear.alpha(t + h) - LogLinear.alpha(t - h)) / (2.0 * h);
            assert!((fd - LogLinear.alpha_prime(t)).abs() < 1e-5);
        }
    }

    #[test]
    fn alpha_is_monotone() {
        let mut prev = LogLinear.alpha(0.0);
        for i in 1..=1000 {
            let a = LogLinear.alpha(i as f64 / 1000.0);
            assert!(a <= prev);
            prev = a;
        }
    }

    #[test]
    fn nelbo_weight_examples() {
        let d = DEFAULT_DELTA;
        assert_eq!(nelbo_weight(&LogLinear, 1.0, d).unwrap(), 1.0);
        assert_eq!(nelbo_weight(&LogLinear, 0.5, d).unwrap(), 2.0);
        let w = nelbo_weight(&LogLinear, 0.01, d).unwrap();
        assert!((w - 100.0).abs() < 1e-9 && w.is_finite());
        assert!(matches!(
            nelbo_weight(&LogLinear, 1e-4, d),
            Err(Error::Stability { .. })
        ));
    }

    #[test]
    fn stratified_examples() {
        assert_eq!(stratified_timesteps(1, 0.0, 0.5).unwrap().values(), &[0.5]);
        assert_eq!(
            stratified_timesteps(4, 0.0, 0.0).unwrap().values(),
            &[0.0, 0.25, 0.5, 0.75]
        );
        let b = stratified_timesteps(2, 0.1, 0.5).unwrap();
        assert!((b.values()[0] - 0.325).abs() < 1e-12);
        assert!((b.values()[1] - 0.775).abs() < 1e-12);
        assert!(stratified_timesteps(0, 0.1, 0.5).is_err());
    }

    #[test]
    fn weighted_average_converges_to_integral() {
        // f(t) = t^2, weight 1/t: E = (1/(1-d)) * int_d^1 t dt = (1 + d) / 2.
        let delta = DEFAULT_DELTA;
        let mut rng = seeded(11);
        let draws = 100_000;
        let mut acc = 0.0;
        for _ in 0..draws {
            let b = sample_stratified_timesteps(4, delta, &mut rng).unwrap();
            let mean: f64 = b
                .values()
                .iter()
                .map(|&t| nelbo_weight(&LogLinear, t, delta).unwrap() * t * t)
                .sum::<f64>()
                / 4.0;
            acc += mean;
        }
        let est = acc / draws as f64;
        let exact = (1.0 + delta) / 2.0;
        assert!((est - exact).abs() / exact < 0.01, "{est} vs {exact}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn one_value_per_stratum(k in 1usize..64, delta in 0.0f64..0.5, u in 0.0f64..1.0) {
                let b = stratified_timesteps(k, delta, u).unwrap();
                prop_assert_eq!(b.len(), k);
                for (i, &t) in b.values().iter().enumerate() {
                    let (lo, hi) = b.stratum(i);
                    prop_assert!(t >= lo - 1e-12 && t < hi + 1e-12);
                    prop_assert!(t >= delta && t <= 1.0);
                }
            }

            #[test]
            fn alpha_plus_t_is_one(t in 0.0f64..=1.0) {
                prop_assert_eq!(log_linear_alpha(t).unwrap() + t, 1.0);
            }
        }
    }
}
