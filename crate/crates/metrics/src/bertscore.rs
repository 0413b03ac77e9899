//! Greedy cosine matching between two embedded texts.

use crate::embedding::EmbeddedText;
use crate::error::{MetricError, Result};
use crate::idf::IdfTable;
use crate::rouge::Score;

/// Per-score baselines for `s' = (s − b) / (1 − b)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Baseline {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

/// The only layer when `L = 1`, else `⌈0.75·L⌉` (layer 9 of 12).
pub fn default_layer(num_layers: usize) -> usize {
    if num_layers <= 1 {
        1
    } else {
        (3 * num_layers).div_ceil(4)
    }
}

fn unit_rows(text: &EmbeddedText, layer: usize) -> Result<Vec<Vec<f64>>> {
    text.layer(layer)?
        .into_iter()
        .zip(&text.tokens)
        .map(|(v, tok)| {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(MetricError::Embedding(format!("zero vector for token {tok:?}")));
            }
            Ok(v.iter().map(|x| x / norm).collect())
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Weighted mean over `from` of the best cosine against `to`.
fn greedy(from: &[Vec<f64>], to: &[Vec<f64>], weights: &[f64]) -> Result<f64> {
    let total: f64 = weights.iter().sum();
    if total == 0.0 {
        return Err(MetricError::DegenerateWeights);
    }
    let hit: f64 = from
        .iter()
        .zip(weights)
        .map(|(x, w)| w * to.iter().map(|y| dot(x, y)).fold(f64::NEG_INFINITY, f64::max))
        .sum();
    Ok(hit / total)
}

fn rescale(s: f64, b: f64) -> f64 {
    (s - b) / (1.0 - b)
}

/// BERTScore. `layer` is 1-based and defaults to [`default_layer`]. Recall
/// averages over reference tokens, precision over candidate tokens, each
/// weighted by idf when a table is given.
pub fn bertscore(
    cand: &EmbeddedText,
    refr: &EmbeddedText,
    layer: Option<usize>,
    idf: Option<&IdfTable>,
    baseline: Option<Baseline>,
) -> Result<Score> {
    cand.validate()?;
    refr.validate()?;
    if cand.is_empty() || refr.is_empty() {
        return Err(MetricError::Input("bertscore needs nonempty candidate and reference".into()));
    }
    if cand.width() != refr.width() {
        return Err(MetricError::Embedding(format!(
            "candidate width {} differs from reference width {}",
            cand.width(),
            refr.width()
        )));
    }
    let layer = layer.unwrap_or_else(|| default_layer(cand.num_layers().min(refr.num_layers())));
    let (x, y) = (unit_rows(refr, layer)?, unit_rows(cand, layer)?);
    let weights = |t: &EmbeddedText| -> Vec<f64> {
        match idf {
            Some(table) => t.tokens.iter().map(|w| table.get(w)).collect(),
            None => vec![1.0; t.len()],
        }
    };
    let recall = greedy(&x, &y, &weights(refr))?;
    let precision = greedy(&y, &x, &weights(cand))?;
    let f = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    let mut s = Score { precision, recall, f };
    if let Some(b) = baseline {
        if [b.precision, b.recall, b.f].iter().any(|&v| !(v < 1.0)) {
            return Err(MetricError::Input("baselines must be < 1".into()));
        }
        s = Score {
            precision: rescale(s.precision, b.precision),
            recall: rescale(s.recall, b.recall),
            f: rescale(s.f, b.f),
        };
    }
    Ok(s)
}
