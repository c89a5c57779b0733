//! Empirical check of the blind-spot property.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::bsn::Bsn;
use super::tensor::{Activations, Real};
use crate::error::{Error, Result};

/// Perturbation sizes tried at the probed pixel.
pub const AUDIT_DELTAS: [f64; 4] = [0.25, -0.25, 1.0, -1.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditTrial {
    pub row: usize,
    pub col: usize,
    pub channel: usize,
    pub delta: f64,
    pub deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub trials: usize,
    pub max_deviation: f64,
    /// The trial with the largest deviation.
    pub worst: Option<AuditTrial>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.max_deviation == 0.0
    }

    /// Converts a failed audit into [`Error::AuditFailed`].
    pub fn into_result(self) -> Result<Self> {
        match self.worst {
            Some(w) if !self.passed() => Err(Error::AuditFailed {
                row: w.row,
                col: w.col,
                channel: w.channel,
                delta: w.delta,
                deviation: w.deviation,
            }),
            _ => Ok(self),
        }
    }
}

/// Runs `trials` perturbation trials on random `size x size` inputs.
///
/// Each trial draws a uniform input, a pixel `p`, an input channel and a
/// delta from [`AUDIT_DELTAS`], adds the delta at `p` and records the largest
/// change of any output channel at `p`. A blind-spot network reports exactly 0.
pub fn blind_spot_audit<T: Real>(
    model: &Bsn<T>,
    trials: usize,
    size: usize,
    rng: &mut impl Rng,
) -> Result<AuditReport> {
    if trials == 0 {
        return Err(Error::Config("audit needs at least one trial".into()));
    }
    let c = model.config().in_channels;
    let mut report = AuditReport {
        trials,
        max_deviation: 0.0,
        worst: None,
    };
    for _ in 0..trials {
        let mut x = Activations::<T>::zeros(c, 1, size, size);
        for v in &mut x.data {
            *v = T::lit(rng.random::<f64>());
        }
        let (row, col) = (rng.random_range(0..size), rng.random_range(0..size));
        let channel = rng.random_range(0..c);
        let delta = AUDIT_DELTAS[rng.random_range(0..AUDIT_DELTAS.len())];
        let before = model.forward(&x)?;
        let i = x.index(channel, 0, row, col);
        x.data[i] = x.data[i] + T::lit(delta);
        let after = model.forward(&x)?;
        let deviation = (0..before.channels)
            .map(|oc| {
                let j = before.index(oc, 0, row, col);
                (after.data[j] - before.data[j]).abs().to_f64().unwrap_or(f64::INFINITY)
            })
            .fold(0.0, f64::max);
        if report.worst.is_none() || deviation > report.max_deviation {
            report.max_deviation = deviation;
            report.worst = Some(AuditTrial {
                row,
                col,
                channel,
                delta,
                deviation,
            });
        }
    }
    Ok(report)
}
