//! Context ordering for the similarity and MMR settings.

use crate::error::{EvalError, Result};

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity; a zero vector is similar to nothing.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

fn check(query: &[f64], contexts: &[Vec<f64>]) -> Result<()> {
    if norm(query) == 0.0 {
        return Err(EvalError::DegenerateQuery);
    }
    if let Some(i) = contexts.iter().position(|c| c.len() != query.len()) {
        return Err(EvalError::Input(format!(
            "context {i} has width {}, query has {}",
            contexts[i].len(),
            query.len()
        )));
    }
    Ok(())
}

/// Context indices by descending cosine similarity to the query, ties in
/// original order.
pub fn rank_sim(query: &[f64], contexts: &[Vec<f64>]) -> Result<Vec<usize>> {
    check(query, contexts)?;
    let sims: Vec<f64> = contexts.iter().map(|c| cosine(query, c)).collect();
    let mut order: Vec<usize> = (0..contexts.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]));
    Ok(order)
}

/// Greedy maximal marginal relevance: each pick maximizes
/// `λ·sim(q, d) − (1 − λ)·max_{s picked} sim(d, s)`, ties to the lower index.
pub fn rank_mmr(query: &[f64], contexts: &[Vec<f64>], lambda: f64, k: usize) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(EvalError::Config(format!("mmr lambda must lie in [0, 1], got {lambda}")));
    }
    if k > contexts.len() {
        return Err(EvalError::Config(format!(
            "cannot select {k} of {} contexts",
            contexts.len()
        )));
    }
    check(query, contexts)?;
    let relevance: Vec<f64> = contexts.iter().map(|c| cosine(query, c)).collect();
    let mut picked: Vec<usize> = Vec::with_capacity(k);
    let mut left: Vec<usize> = (0..contexts.len()).collect();
    while picked.len() < k {
        let mut best: Option<(usize, f64)> = None;
        for (pos, &d) in left.iter().enumerate() {
            let redundancy = picked
                .iter()
                .map(|&s| cosine(&contexts[d], &contexts[s]))
                .fold(None, |m: Option<f64>, x| Some(m.map_or(x, |m| m.max(x))))
                .unwrap_or(0.0);
            let score = lambda * relevance[d] - (1.0 - lambda) * redundancy;
            if best.map_or(true, |(_, b)| score > b) {
                best = Some((pos, score));
            }
        }
        let (pos, _) = best.expect("k ≤ remaining contexts");
        picked.push(left.remove(pos));
    }
    Ok(picked)
}
