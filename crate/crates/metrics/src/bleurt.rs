//! Weighted multi-task pre-training loss.

use crate::error::{MetricError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Squared error summed over the signal's coordinates.
    L2,
    /// The signal is a target distribution, the prediction a vector of
    /// logits.
    CrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainTask {
    pub gamma: f64,
    pub kind: LossKind,
}

/// `signals[m][k]` and `predictions[m][k]` hold example `m`, task `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainLossSpec {
    pub tasks: Vec<PretrainTask>,
    pub signals: Vec<Vec<Vec<f64>>>,
    pub predictions: Vec<Vec<Vec<f64>>>,
}

fn l2(t: &[f64], p: &[f64]) -> f64 {
    t.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn cross_entropy(target: &[f64], logits: &[f64]) -> f64 {
    let mx = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = mx + logits.iter().map(|z| (z - mx).exp()).sum::<f64>().ln();
    target
        .iter()
        .zip(logits)
        .filter(|(&t, _)| t > 0.0)
        .map(|(t, z)| -t * (z - lse))
        .sum()
}

impl PretrainLossSpec {
    pub fn validate(&self) -> Result<()> {
        let k = self.tasks.len();
        if k == 0 {
            return Err(MetricError::LossSpec("no tasks".into()));
        }
        if let Some(t) = self.tasks.iter().find(|t| !(t.gamma >= 0.0) || !t.gamma.is_finite()) {
            return Err(MetricError::LossSpec(format!("task weight {} is not a finite value ≥ 0", t.gamma)));
        }
        if self.signals.is_empty() {
            return Err(MetricError::LossSpec("no examples".into()));
        }
        if self.signals.len() != self.predictions.len() {
            return Err(MetricError::LossSpec(format!(
                "{} signal rows but {} prediction rows",
                self.signals.len(),
                self.predictions.len()
            )));
        }
        for (m, (s, p)) in self.signals.iter().zip(&self.predictions).enumerate() {
            if s.len() != k || p.len() != k {
                return Err(MetricError::LossSpec(format!("example {m} does not have {k} tasks")));
            }
            for (ki, ((tau, hat), task)) in s.iter().zip(p).zip(&self.tasks).enumerate() {
                if tau.is_empty() || tau.len() != hat.len() {
                    return Err(MetricError::LossSpec(format!(
                        "example {m}, task {ki}: signal width {} vs prediction width {}",
                        tau.len(),
                        hat.len()
                    )));
                }
                if tau.iter().chain(hat).any(|x| !x.is_finite()) {
                    return Err(MetricError::LossSpec(format!("example {m}, task {ki}: non-finite value")));
                }
                if task.kind == LossKind::CrossEntropy {
                    let sum: f64 = tau.iter().sum();
                    if tau.iter().any(|&t| t < 0.0) || (sum - 1.0).abs() > 1e-9 {
                        return Err(MetricError::LossSpec(format!(
                            "example {m}, task {ki}: cross-entropy target is not a distribution"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// `(1/M)·Σ_m Σ_k γ_k·ℓ_k(τ_k^m, τ̂_k^m)`.
pub fn bleurt_pretrain_loss(spec: &PretrainLossSpec) -> Result<f64> {
    spec.validate()?;
    let total: f64 = spec
        .signals
        .iter()
        .zip(&spec.predictions)
        .map(|(s, p)| {
            spec.tasks
                .iter()
                .zip(s.iter().zip(p))
                .map(|(task, (tau, hat))| {
                    let loss = match task.kind {
                        LossKind::L2 => l2(tau, hat),
                        LossKind::CrossEntropy => cross_entropy(tau, hat),
                    };
                    task.gamma * loss
                })
                .sum::<f64>()
        })
        .sum();
    Ok(total / spec.signals.len() as f64)
}
