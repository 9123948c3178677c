use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Variance schedule `β_1..β_T` with derived `α_t = 1 − β_t` and
/// `ᾱ_t = ∏_{s≤t} α_s`. Timesteps are 1-based; `ᾱ_0 = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleRecord", into = "ScheduleRecord")]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ScheduleRecord {
    steps: usize,
    beta: Vec<f64>,
}

impl TryFrom<ScheduleRecord> for NoiseSchedule {
    type Error = Error;
    fn try_from(r: ScheduleRecord) -> Result<Self> {
        if r.steps != r.beta.len() {
            return Err(Error::InvalidArgument(format!(
                "schedule declares {} steps but lists {} betas",
                r.steps,
                r.beta.len()
            )));
        }
        NoiseSchedule::from_betas(r.beta)
    }
}

impl From<NoiseSchedule> for ScheduleRecord {
    fn from(s: NoiseSchedule) -> Self {
        Self {
            steps: s.steps(),
            beta: s.beta,
        }
    }
}

impl NoiseSchedule {
    /// `β_t = β_start + (t−1)/(T−1)·(β_end − β_start)`; `β_1 = β_start` when `T = 1`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 1 {
            return Err(Error::InvalidArgument("schedule needs T >= 1".into()));
        }
        let in_range = |b: f64| b > 0.0 && b < 1.0;
        if !in_range(beta_start) || !in_range(beta_end) || beta_start > beta_end {
            return Err(Error::InvalidArgument(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let beta = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + i as f64 / (steps - 1) as f64 * (beta_end - beta_start)
                }
            })
            .collect();
        Self::from_betas(beta)
    }

    /// Defaults: `β_1 = 1e-4`, `β_T = 0.02`.
    pub fn default_linear(steps: usize) -> Result<Self> {
        Self::linear(steps, 1e-4, 0.02)
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::InvalidArgument("schedule needs T >= 1".into()));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidArgument(format!("beta {b} outside (0, 1)")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(Self { beta, alpha, alpha_bar })
    }

    /// Number of steps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.steps() {
            return Err(Error::TimestepOutOfRange {
                t,
                min: 1,
                max: self.steps(),
            });
        }
        Ok(())
    }

    /// `β_t` for `1 ≤ t ≤ T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `ᾱ_t` for `0 ≤ t ≤ T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// Posterior variance `σ_t² = (1 − ᾱ_{t−1}) / (1 − ᾱ_t) · β_t`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t)) * self.beta(t)
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_interpolation_value() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let expected = 1e-4 + 499.0 / 999.0 * 0.0199;
        assert!((s.beta(500) - expected).abs() < 1e-15);
        assert!((s.beta(500) - 0.0100395).abs() < 1e-6);
        assert_eq!(s.beta(1), 1e-4);
        assert!((s.beta(1000) - 0.02).abs() < 1e-15);
    }

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::linear(1, 1e-4, 0.02).unwrap();
        assert_eq!(s.betas(), &[1e-4]);
        assert!((s.alpha_bar(1) - 0.9999).abs() < 1e-15);
        assert_eq!(s.posterior_variance(1), 0.0);
    }

    #[test]
    fn four_step_product() {
        let s = NoiseSchedule::linear(4, 0.1, 0.4).unwrap();
        assert!((s.alpha_bar(4) - 0.9 * 0.8 * 0.7 * 0.6).abs() < 1e-12);
        assert!((s.alpha_bar(4) - 0.3024).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 1e-4, 1.0).is_err());
        assert!(NoiseSchedule::linear(10, 0.03, 0.02).is_err());
    }

    #[test]
    fn invariants_hold() {
        let s = NoiseSchedule::default_linear(200).unwrap();
        for t in 1..=200 {
            assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
            assert!((s.alpha_bar(t) - s.alpha_bar(t - 1) * s.alpha(t)).abs() < 1e-12);
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.posterior_variance(t) <= s.beta(t));
            if t > 1 {
                assert!(s.beta(t) >= s.beta(t - 1));
            }
        }
        assert!(s.alpha_bar(200) < s.alpha_bar(1) && s.alpha_bar(1) < 1.0);
    }

    #[test]
    fn serde_round_trip_and_validation() {
        let s = NoiseSchedule::default_linear(7).unwrap();
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<NoiseSchedule>(&json).unwrap(), s);
        assert!(serde_json::from_str::<NoiseSchedule>(r#"{"steps":2,"beta":[0.1]}"#).is_err());
        assert!(serde_json::from_str::<NoiseSchedule>(r#"{"steps":1,"beta":[1.5]}"#).is_err());
    }
}
