//! MoverScore and the WMD/SMD variants.
//!
//! Token vectors are aggregated over layers with a power mean, summed over
//! each n-gram with idf weights, and the two n-gram clouds are compared by
//! the exact transport cost under Euclidean ground distance.

use crate::embedding::EmbeddedText;
use crate::error::{MetricError, Result};
use crate::idf::IdfTable;
use crate::transport::{emd_exact, euclidean, TransportProblem};

/// Coordinatewise `(1/L)·Σ_l z_l^p`, with no outer root. Integer `p` uses
/// repeated multiplication and accepts any sign.
pub fn power_mean(layers: &[&[f64]], p: f64) -> Result<Vec<f64>> {
    let Some(first) = layers.first() else {
        return Err(MetricError::Input("power mean over zero layers".into()));
    };
    if layers.iter().any(|l| l.len() != first.len()) {
        return Err(MetricError::Embedding("layers differ in width".into()));
    }
    if !p.is_finite() {
        return Err(MetricError::Domain(format!("power {p} is not finite")));
    }
    let integral = p.fract() == 0.0 && p.abs() <= i32::MAX as f64;
    if !integral && layers.iter().any(|l| l.iter().any(|&x| x < 0.0)) {
        return Err(MetricError::Domain(format!(
            "non-integer power {p} of a negative coordinate"
        )));
    }
    let pow = |x: f64| if integral { x.powi(p as i32) } else { x.powf(p) };
    let l = layers.len() as f64;
    let out: Vec<f64> = (0..first.len())
        .map(|d| layers.iter().map(|layer| pow(layer[d])).sum::<f64>() / l)
        .collect();
    if out.iter().any(|x| !x.is_finite()) {
        return Err(MetricError::Domain(format!("power {p} of a zero coordinate")));
    }
    Ok(out)
}

/// Layer-aggregated vector of every token.
fn token_vectors(text: &EmbeddedText, p: f64) -> Result<Vec<Vec<f64>>> {
    text.validate()?;
    text.layers
        .iter()
        .map(|t| power_mean(&t.iter().map(Vec::as_slice).collect::<Vec<_>>(), p))
        .collect()
}

fn idf_weights(text: &EmbeddedText, idf: Option<&IdfTable>) -> Vec<f64> {
    match idf {
        Some(t) => text.tokens.iter().map(|w| t.get(w)).collect(),
        None => vec![1.0; text.len()],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NgramEmbedding {
    pub vectors: Vec<Vec<f64>>,
    /// Normalized to sum to 1.
    pub weights: Vec<f64>,
}

/// `E_i = Σ_{t=i}^{i+n−1} idf(x_t)·φ(z_t)` and `f_i ∝ Σ_t idf(x_t)`. Without
/// a table every idf is 1.
pub fn ngram_embed(text: &EmbeddedText, idf: Option<&IdfTable>, n: usize, p: f64) -> Result<NgramEmbedding> {
    if n == 0 {
        return Err(MetricError::Input("n must be ≥ 1".into()));
    }
    if text.len() < n {
        return Err(MetricError::Input(format!(
            "{} tokens cannot form a {n}-gram",
            text.len()
        )));
    }
    let phi = token_vectors(text, p)?;
    let w = idf_weights(text, idf);
    let e = text.width();
    let count = text.len() - n + 1;
    let mut vectors = Vec::with_capacity(count);
    let mut raw = Vec::with_capacity(count);
    for i in 0..count {
        let mut v = vec![0.0; e];
        for t in i..i + n {
            for (acc, x) in v.iter_mut().zip(&phi[t]) {
                *acc += w[t] * x;
            }
        }
        vectors.push(v);
        raw.push(w[i..i + n].iter().sum::<f64>());
    }
    let z: f64 = raw.iter().sum();
    if z == 0.0 {
        return Err(MetricError::DegenerateWeights);
    }
    Ok(NgramEmbedding {
        vectors,
        weights: raw.into_iter().map(|r| r / z).collect(),
    })
}

/// The transport problem between the n-gram clouds of two texts.
pub fn mover_problem(
    cand: &EmbeddedText,
    refr: &EmbeddedText,
    idf_cand: Option<&IdfTable>,
    idf_ref: Option<&IdfTable>,
    n: usize,
    p: f64,
) -> Result<TransportProblem> {
    if cand.width() != refr.width() {
        return Err(MetricError::Embedding(format!(
            "candidate width {} differs from reference width {}",
            cand.width(),
            refr.width()
        )));
    }
    let x = ngram_embed(cand, idf_cand, n, p)?;
    let y = ngram_embed(refr, idf_ref, n, p)?;
    TransportProblem::euclidean(x.weights, y.weights, &x.vectors, &y.vectors)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MoverScore {
    /// Minimal transport cost, a distance.
    pub cost: f64,
    /// `1 / (1 + cost)`, higher is better.
    pub score: f64,
}

pub fn score_from_cost(cost: f64) -> f64 {
    1.0 / (1.0 + cost)
}

pub fn moverscore(
    cand: &EmbeddedText,
    refr: &EmbeddedText,
    idf_cand: Option<&IdfTable>,
    idf_ref: Option<&IdfTable>,
    n: usize,
    p: f64,
) -> Result<MoverScore> {
    let prob = mover_problem(cand, refr, idf_cand, idf_ref, n, p)?;
    let cost = emd_exact(&prob)?.cost;
    Ok(MoverScore {
        cost,
        score: score_from_cost(cost),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WmdVariant {
    Word,
    Bigram,
    /// Distance between whole-sequence aggregates (SMD).
    Sentence,
}

/// `Σ_t idf(x_t)·φ(z_t)` over the whole text.
pub fn sentence_embedding(text: &EmbeddedText, idf: Option<&IdfTable>, p: f64) -> Result<Vec<f64>> {
    if text.is_empty() {
        return Err(MetricError::Input("empty text".into()));
    }
    Ok(ngram_embed(text, idf, text.len(), p)?.vectors.remove(0))
}

/// Transport cost for the word and bigram variants, SMD for the sentence
/// variant. All are distances.
pub fn wmd_variant(
    cand: &EmbeddedText,
    refr: &EmbeddedText,
    variant: WmdVariant,
    idf_cand: Option<&IdfTable>,
    idf_ref: Option<&IdfTable>,
    p: f64,
) -> Result<f64> {
    match variant {
        WmdVariant::Word => Ok(moverscore(cand, refr, idf_cand, idf_ref, 1, p)?.cost),
        WmdVariant::Bigram => Ok(moverscore(cand, refr, idf_cand, idf_ref, 2, p)?.cost),
        WmdVariant::Sentence => {
            if cand.width() != refr.width() {
                return Err(MetricError::Embedding("candidate and reference widths differ".into()));
            }
            Ok(euclidean(
                &sentence_embedding(cand, idf_cand, p)?,
                &sentence_embedding(refr, idf_ref, p)?,
            ))
        }
    }
}
