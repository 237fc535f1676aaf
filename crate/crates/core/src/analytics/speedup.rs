//! Closed-form speedup estimates from latencies or parameter counts.

use serde::{Deserialize, Serialize};

use super::{AnalyticsError, Result};

/// Latencies in milliseconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    /// Target, one token.
    pub l_t: f64,
    /// Target, one parallel verification pass over many tokens.
    pub l_t_prime: f64,
    /// Draft, one step.
    pub l_d: f64,
}

impl LatencyModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.l_t > 0.0 && self.l_t_prime > 0.0 && self.l_d >= 0.0) || !self.l_t.is_finite()
            || !self.l_t_prime.is_finite() || !self.l_d.is_finite()
        {
            return Err(AnalyticsError::Parameter(format!("latencies must be positive, got {self:?}")));
        }
        Ok(())
    }
}

fn check_tau_gamma(tau: f64, gamma: usize) -> Result<()> {
    if !(tau >= 1.0) || !tau.is_finite() || gamma == 0 {
        return Err(AnalyticsError::Parameter(format!("need tau >= 1 and gamma >= 1, got {tau} and {gamma}")));
    }
    Ok(())
}

/// `SR = tau * L_t / (gamma * L_d + L_t')`: a cycle costs `gamma` draft
/// steps plus one verification pass and emits `tau` tokens, whereas vanilla
/// decoding pays `L_t` per token.
pub fn speedup_from_latency(tau: f64, gamma: usize, model: &LatencyModel) -> Result<f64> {
    check_tau_gamma(tau, gamma)?;
    model.validate()?;
    Ok(tau / ((gamma as f64 * model.l_d + model.l_t_prime) / model.l_t))
}

/// Draft-to-target latency estimated from non-embedding parameter counts.
pub fn latency_ratio_estimate(w_d: f64, w_t: f64) -> Result<f64> {
    if !(w_t > 0.0) || !(w_d >= 0.0) {
        return Err(AnalyticsError::Parameter(format!("need W_t > 0 and W_d >= 0, got {w_d} and {w_t}")));
    }
    Ok(w_d / w_t)
}

/// `SR = tau * W_t / (gamma * W_d + W_t)`.
pub fn speedup_from_params(tau: f64, gamma: usize, w_d: f64, w_t: f64) -> Result<f64> {
    check_tau_gamma(tau, gamma)?;
    latency_ratio_estimate(w_d, w_t)?;
    Ok(tau / (gamma as f64 * (w_d / w_t) + 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn free_drafter_gives_tau() {
        let m = LatencyModel { l_t: 26.0, l_t_prime: 26.0, l_d: 0.0 };
        assert_eq!(speedup_from_latency(4.9, 6, &m).unwrap(), 4.9);
        assert_eq!(speedup_from_params(3.5, 6, 0.0, 7.0).unwrap(), 3.5);
    }

    #[test]
    fn verification_inflation_raises_the_ratio() {
        let even = LatencyModel { l_t: 1.0, l_t_prime: 1.0, l_d: 0.104 };
        let sr = speedup_from_latency(4.9, 6, &even).unwrap();
        assert!((4.9 / sr - 1.624).abs() < 1e-12);
        let inflated = LatencyModel { l_t_prime: 1.19, ..even };
        let r = 4.9 / speedup_from_latency(4.9, 6, &inflated).unwrap();
        assert!((r - 1.814).abs() < 1e-3, "{r}");
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = LatencyModel { l_t: 0.0, l_t_prime: 1.0, l_d: 0.1 };
        assert!(speedup_from_latency(2.0, 6, &m).is_err());
        assert!(speedup_from_params(2.0, 6, 1.0, 0.0).is_err());
        assert!(speedup_from_params(2.0, 0, 1.0, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn latency_and_parameter_models_agree(tau in 1.0f64..8.0, gamma in 1usize..10, wd in 0.0f64..2e9, wt in 1e8f64..1e10, lt in 0.1f64..100.0) {
            let m = LatencyModel { l_t: lt, l_t_prime: lt, l_d: wd / wt * lt };
            let a = speedup_from_latency(tau, gamma, &m).unwrap();
            let b = speedup_from_params(tau, gamma, wd, wt).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * b.abs());
        }

        #[test]
        fn zero_draft_params_give_tau(tau in 1.0f64..8.0, gamma in 1usize..10, wt in 1.0f64..1e10) {
            prop_assert_eq!(speedup_from_params(tau, gamma, 0.0, wt).unwrap(), tau);
        }
    }
}
