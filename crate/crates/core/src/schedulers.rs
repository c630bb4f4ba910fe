//! Per-epoch hyperparameter schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleSpec {
    Constant {
        base: f64,
    },
    /// `base * factor^floor(epoch / period_epochs)`.
    ExponentialStep {
        base: f64,
        factor: f64,
        period_epochs: u64,
    },
    /// `(base - end) * (1 - epoch / total_epochs)^power + end`, held at `end`
    /// past `total_epochs`.
    Polynomial {
        base: f64,
        end: f64,
        total_epochs: u64,
        power: f64,
    },
}

impl ScheduleSpec {
    pub fn constant(base: f64) -> Self {
        ScheduleSpec::Constant { base }
    }

    pub fn base(&self) -> f64 {
        match *self {
            ScheduleSpec::Constant { base }
            | ScheduleSpec::ExponentialStep { base, .. }
            | ScheduleSpec::Polynomial { base, .. } => base,
        }
    }

    /// Collects every violated constraint, prefixed with `name`.
    pub fn violations(&self, name: &str) -> Vec<String> {
        let mut out = Vec::new();
        let base = self.base();
        if !(base > 0.0 && base.is_finite()) {
            out.push(format!("{name}: base must be positive, got {base}"));
        }
        match *self {
            ScheduleSpec::Constant { .. } => {}
            ScheduleSpec::ExponentialStep {
                factor,
                period_epochs,
                ..
            } => {
                if !(factor > 0.0 && factor.is_finite()) {
                    out.push(format!("{name}: factor must be positive, got {factor}"));
                }
                if period_epochs == 0 {
                    out.push(format!("{name}: period_epochs must be at least 1"));
                }
            }
            ScheduleSpec::Polynomial {
                end,
                total_epochs,
                power,
                ..
            } => {
                if !(end > 0.0 && end.is_finite()) {
                    out.push(format!("{name}: end must be positive, got {end}"));
                }
                if total_epochs == 0 {
                    out.push(format!("{name}: total_epochs must be at least 1"));
                }
                if !(power > 0.0 && power.is_finite()) {
                    out.push(format!("{name}: power must be positive, got {power}"));
                }
            }
        }
        out
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        let v = self.violations(name);
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    /// Value in effect for the whole of `epoch`.
    pub fn value(&self, epoch: u64) -> f64 {
        match *self {
            ScheduleSpec::Constant { base } => base,
            ScheduleSpec::ExponentialStep {
                base,
                factor,
                period_epochs,
            } => {
                let steps = (epoch / period_epochs) as i32;
                if steps == 0 {
                    return base;
                }
                // Factors like 0.1 are not representable; dividing by the
                // integral reciprocal keeps base/10, base/100 exact.
                let inv = 1.0 / factor;
                if factor < 1.0 && inv.round() == inv {
                    base / inv.powi(steps)
                } else {
                    base * factor.powi(steps)
                }
            }
            ScheduleSpec::Polynomial {
                base,
                end,
                total_epochs,
                power,
            } => {
                if epoch == 0 {
                    return base;
                }
                if epoch >= total_epochs {
                    return end;
                }
                let frac = 1.0 - epoch as f64 / total_epochs as f64;
                let value = (base - end) * frac.powf(power) + end;
                value.clamp(base.min(end), base.max(end))
            }
        }
    }
}

pub fn schedule_value(spec: &ScheduleSpec, epoch: u64) -> f64 {
    spec.value(epoch)
}
