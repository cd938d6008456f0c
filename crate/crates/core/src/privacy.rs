//! Range calibration for per-round (epsilon, 0)-DP of the one-bit channel,
//! plus an exact privacy-loss auditor for that channel.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{ProbitError, Result};
use crate::quantizer::plus_probability;
use crate::vector::{l1_norm, ModelVector};

/// Per-round privacy budget and l1-sensitivity of a client update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacySpec {
    pub enabled: bool,
    pub epsilon: f64,
    pub delta1: f64,
}

impl Default for PrivacySpec {
    fn default() -> Self {
        Self {
            enabled: false,
            epsilon: 0.1,
            delta1: 0.0002,
        }
    }
}

impl PrivacySpec {
    pub fn new(epsilon: f64, delta1: f64) -> Result<Self> {
        let spec = Self {
            enabled: true,
            epsilon,
            delta1,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn disabled() -> Self {
        Self::default()
    }

    /// Sensitivity convention used when none is measured: `0.02 * lr`.
    pub fn sensitivity_for_lr(lr: f64) -> f64 {
        0.02 * lr
    }

    pub fn validate(&self) -> Result<()> {
        if self.enabled {
            if self.epsilon.is_nan() || self.epsilon <= 0.0 {
                return Err(ProbitError::Config(format!(
                    "epsilon must be positive, got {}",
                    self.epsilon
                )));
            }
            if !(self.delta1 > 0.0 && self.delta1.is_finite()) {
                return Err(ProbitError::Config(format!(
                    "delta1 must be positive, got {}",
                    self.delta1
                )));
            }
        }
        Ok(())
    }

    /// `(1 + 1/epsilon) * delta1`, or zero when privacy is off.
    pub fn margin(&self) -> f64 {
        if self.enabled {
            (1.0 + 1.0 / self.epsilon) * self.delta1
        } else {
            0.0
        }
    }
}

/// Smallest range that certifies the budget for updates bounded by
/// `max_abs_delta`.
pub fn required_b(max_abs_delta: f64, spec: &PrivacySpec) -> f64 {
    max_abs_delta + spec.margin()
}

/// Worst-case (over the two outputs) absolute log-likelihood ratio of one
/// coordinate of the channel under inputs `delta` and `delta + v`.
///
/// Returns `+inf` when exactly one of the two inputs makes an output
/// impossible.
pub fn audit_privacy_loss(b: f64, delta: f64, v: f64) -> Result<f64> {
    let shifted = delta + v;
    let p0 = plus_probability(delta, b)?;
    let p1 = plus_probability(shifted, b)?;
    let branch = |a: f64, c: f64| -> f64 {
        if a == c {
            0.0
        } else if a == 0.0 || c == 0.0 {
            f64::INFINITY
        } else {
            (a.ln() - c.ln()).abs()
        }
    };
    Ok(branch(p1, p0).max(branch(1.0 - p1, 1.0 - p0)))
}

fn check_sensitivity(v: &ModelVector, delta1: f64) -> Result<()> {
    let l1 = l1_norm(v);
    if l1 > delta1 * (1.0 + 1e-12) {
        return Err(ProbitError::Precondition(format!(
            "adjacent difference has l1 norm {l1} above the sensitivity {delta1}"
        )));
    }
    Ok(())
}

/// Total worst-case privacy loss of a `d`-coordinate message: the sum of the
/// per-coordinate worst cases, since an output vector may pick the worst
/// bit independently on every coordinate.
pub fn audit_vector(b: &[f64], delta: &ModelVector, v: &ModelVector, delta1: f64) -> Result<f64> {
    if b.len() != delta.dim() {
        return Err(ProbitError::DimensionMismatch {
            expected: b.len(),
            got: delta.dim(),
        });
    }
    delta.check_dim(v)?;
    check_sensitivity(v, delta1)?;
    let mut total = 0.0;
    for i in 0..b.len() {
        total += audit_privacy_loss(b[i], delta[i], v[i])?;
    }
    Ok(total)
}

/// One line of a per-coordinate audit.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditRow {
    pub coordinate: usize,
    pub delta: f64,
    pub v: f64,
    pub loss: f64,
    /// This coordinate's share `epsilon * |v_i| / delta1` of the budget.
    pub bound: f64,
    pub pass: bool,
}

pub fn audit_report(
    b: &[f64],
    delta: &ModelVector,
    v: &ModelVector,
    spec: &PrivacySpec,
) -> Result<Vec<AuditRow>> {
    spec.validate()?;
    if b.len() != delta.dim() {
        return Err(ProbitError::DimensionMismatch {
            expected: b.len(),
            got: delta.dim(),
        });
    }
    delta.check_dim(v)?;
    check_sensitivity(v, spec.delta1)?;
    (0..b.len())
        .map(|i| {
            let loss = audit_privacy_loss(b[i], delta[i], v[i])?;
            let bound = spec.epsilon * v[i].abs() / spec.delta1;
            Ok(AuditRow {
                coordinate: i,
                delta: delta[i],
                v: v[i],
                loss,
                bound,
                pass: loss <= bound * (1.0 + 1e-12),
            })
        })
        .collect()
}

pub fn write_audit_csv<W: Write>(rows: &[AuditRow], mut out: W) -> Result<()> {
    writeln!(out, "coordinate,delta,v,loss,bound,pass")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.coordinate, r.delta, r.v, r.loss, r.bound, r.pass
        )?;
    }
    Ok(())
}
