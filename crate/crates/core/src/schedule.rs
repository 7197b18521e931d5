//! Step-size and inverse-temperature schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Step-size sequence gamma_t in [0, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StepSchedule {
    Constant { value: f64 },
    /// `warmup_value` for t <= warmup_len, then `value`.
    Piecewise {
        warmup_len: u64,
        warmup_value: f64,
        value: f64,
    },
    /// `scale / t^exponent` with exponent in (0.5, 1], so the sequence
    /// satisfies the usual divergent-sum / summable-squares conditions.
    RobbinsMonro { scale: f64, exponent: f64 },
}

impl StepSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok01 = |v: f64| (0.0..=1.0).contains(&v);
        match *self {
            StepSchedule::Constant { value } => {
                if !ok01(value) {
                    return Err(Error::validation(format!("constant step {value} outside [0, 1]")));
                }
            }
            StepSchedule::Piecewise { warmup_value, value, .. } => {
                if !ok01(warmup_value) || !ok01(value) {
                    return Err(Error::validation("piecewise step values must lie in [0, 1]"));
                }
            }
            StepSchedule::RobbinsMonro { scale, exponent } => {
                if !(scale > 0.0 && scale <= 1.0) {
                    return Err(Error::validation(format!("robbins-monro scale {scale} outside (0, 1]")));
                }
                if !(exponent > 0.5 && exponent <= 1.0) {
                    return Err(Error::validation(format!(
                        "robbins-monro exponent {exponent} outside (0.5, 1]"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn eval(&self, t: u64) -> Result<f64> {
        if t == 0 {
            return Err(Error::validation("schedules are defined for t >= 1"));
        }
        Ok(match *self {
            StepSchedule::Constant { value } => value,
            StepSchedule::Piecewise { warmup_len, warmup_value, value } => {
                if t <= warmup_len {
                    warmup_value
                } else {
                    value
                }
            }
            StepSchedule::RobbinsMonro { scale, exponent } => scale / (t as f64).powf(exponent),
        })
    }
}

/// Inverse-temperature sequence beta_t > 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AnnealSchedule {
    /// beta == 1 throughout.
    None,
    /// Piecewise-linear: beta_1 = beta_min, beta at ceil(tau_fraction * T)
    /// = beta_max, beta_T = 1; values at the knots are returned exactly.
    AntiAnneal {
        beta_min: f64,
        beta_max: f64,
        tau_fraction: f64,
    },
}

impl AnnealSchedule {
    pub fn validate(&self, total: u64) -> Result<()> {
        match *self {
            AnnealSchedule::None => Ok(()),
            AnnealSchedule::AntiAnneal { beta_min, beta_max, tau_fraction } => {
                if !(beta_min > 0.0 && beta_min.is_finite()) {
                    return Err(Error::validation("beta_min must be positive"));
                }
                if !(beta_max > 0.0 && beta_max.is_finite()) {
                    return Err(Error::validation("beta_max must be positive"));
                }
                if !(tau_fraction > 0.0 && tau_fraction < 1.0) {
                    return Err(Error::validation("tau_fraction must lie in (0, 1)"));
                }
                if total < 3 {
                    return Err(Error::validation("anti-annealing needs at least 3 iterations"));
                }
                Ok(())
            }
        }
    }

    pub fn eval(&self, t: u64, total: u64) -> Result<f64> {
        if t == 0 || t > total {
            return Err(Error::validation(format!("iteration {t} outside 1..={total}")));
        }
        Ok(match *self {
            AnnealSchedule::None => 1.0,
            AnnealSchedule::AntiAnneal { beta_min, beta_max, tau_fraction } => {
                let tau = ((tau_fraction * total as f64).ceil() as u64).clamp(2, total - 1);
                if t == total {
                    1.0
                } else if t == tau {
                    beta_max
                } else if t < tau {
                    if t == 1 {
                        beta_min
                    } else {
                        let frac = (t - 1) as f64 / (tau - 1) as f64;
                        beta_min + frac * (beta_max - beta_min)
                    }
                } else {
                    let frac = (t - tau) as f64 / (total - tau) as f64;
                    beta_max + frac * (1.0 - beta_max)
                }
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_schedule_knots() {
        let s = StepSchedule::Piecewise { warmup_len: 50, warmup_value: 1.0, value: 0.05 };
        assert_eq!(s.eval(50).unwrap(), 1.0);
        assert_eq!(s.eval(51).unwrap(), 0.05);
        assert_eq!(s.eval(1).unwrap(), 1.0);
        assert!(s.eval(0).is_err());
    }

    #[test]
    fn constant_schedule() {
        let s = StepSchedule::Constant { value: 0.01 };
        for t in [1u64, 10, 4000] {
            assert_eq!(s.eval(t).unwrap(), 0.01);
        }
    }

    #[test]
    fn robbins_monro_bounds_and_validation() {
        let s = StepSchedule::RobbinsMonro { scale: 1.0, exponent: 0.7 };
        s.validate().unwrap();
        for t in 1..100u64 {
            let g = s.eval(t).unwrap();
            assert!((0.0..=1.0).contains(&g));
        }
        assert!(StepSchedule::RobbinsMonro { scale: 1.0, exponent: 0.5 }.validate().is_err());
        assert!(StepSchedule::RobbinsMonro { scale: 1.0, exponent: 1.2 }.validate().is_err());
        assert!(StepSchedule::Constant { value: 1.4 }.validate().is_err());
    }

    #[test]
    fn anneal_knots_are_exact() {
        let a = AnnealSchedule::AntiAnneal { beta_min: 0.1, beta_max: 1.2, tau_fraction: 2.0 / 3.0 };
        let total = 3000;
        assert_eq!(a.eval(1, total).unwrap(), 0.1);
        assert_eq!(a.eval(2000, total).unwrap(), 1.2);
        assert_eq!(a.eval(3000, total).unwrap(), 1.0);
        for t in 1..=total {
            let b = a.eval(t, total).unwrap();
            assert!(b > 0.0);
        }
        assert!(a.eval(0, total).is_err());
        assert!(a.eval(total + 1, total).is_err());
    }
}
