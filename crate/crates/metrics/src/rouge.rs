//! ROUGE-N, -L, -W, -S and -SU over token sequences.
//!
//! Every function is generic over the token type so the kernels can be
//! checked against enumeration on small alphabets.

use std::collections::HashMap;
use std::hash::Hash;

use crate::error::{MetricError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Score {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

impl Score {
    const ZERO: Score = Score {
        precision: 0.0,
        recall: 0.0,
        f: 0.0,
    };

    fn from_pr(precision: f64, recall: f64, beta: f64) -> Self {
        Self {
            precision,
            recall,
            f: f_measure(recall, precision, beta),
        }
    }
}

/// `(1+β²)RP / (R+β²P)`, zero when both are zero. An infinite β gives R.
pub fn f_measure(recall: f64, precision: f64, beta: f64) -> f64 {
    if beta.is_infinite() {
        return recall;
    }
    let b2 = beta * beta;
    let denom = recall + b2 * precision;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + b2) * recall * precision / denom
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if beta.is_nan() || beta < 0.0 {
        return Err(MetricError::Input(format!("beta must be ≥ 0, got {beta}")));
    }
    Ok(())
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

fn clipped_matches<K: Eq + Hash>(a: &HashMap<K, usize>, b: &HashMap<K, usize>) -> usize {
    a.iter().map(|(g, &c)| c.min(b.get(g).copied().unwrap_or(0))).sum()
}

/// Multi-reference ROUGE-N. Recall sums clipped matches and reference
/// n-gram counts over all references. Precision divides the same matches
/// by the candidate n-gram count once per reference, and is 0 when the
/// candidate has no n-grams.
pub fn rouge_n<T: Eq + Hash>(cand: &[T], refs: &[&[T]], n: usize) -> Result<Score> {
    if n == 0 {
        return Err(MetricError::Input("n must be ≥ 1".into()));
    }
    if refs.is_empty() {
        return Err(MetricError::Input("at least one reference is required".into()));
    }
    let cand_counts = ngram_counts(cand, n);
    let cand_total = cand.len().saturating_sub(n - 1);
    let (mut matched, mut ref_total) = (0usize, 0usize);
    for r in refs {
        let rc = ngram_counts(r, n);
        matched += clipped_matches(&rc, &cand_counts);
        ref_total += r.len().saturating_sub(n - 1);
    }
    if ref_total == 0 {
        return Err(MetricError::UndefinedDenominator(format!(
            "every reference is shorter than n = {n}"
        )));
    }
    let recall = matched as f64 / ref_total as f64;
    let precision = if cand_total == 0 {
        0.0
    } else {
        matched as f64 / (cand_total * refs.len()) as f64
    };
    Ok(Score::from_pr(precision, recall, 1.0))
}

/// Length of the longest common subsequence, O(mn) time, O(n) memory.
pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn check_pair<T>(cand: &[T], refr: &[T]) -> Result<bool> {
    if refr.is_empty() {
        return Err(MetricError::Input("empty reference".into()));
    }
    Ok(!cand.is_empty())
}

/// ROUGE-L. An empty candidate scores 0.
pub fn rouge_l<T: Eq>(cand: &[T], refr: &[T], beta: f64) -> Result<Score> {
    check_beta(beta)?;
    if !check_pair(cand, refr)? {
        return Ok(Score::ZERO);
    }
    let lcs = lcs_len(cand, refr) as f64;
    Ok(Score::from_pr(lcs / cand.len() as f64, lcs / refr.len() as f64, beta))
}

/// Run weight `k^α`.
pub fn run_weight(k: usize, alpha: f64) -> f64 {
    (k as f64).powf(alpha)
}

/// Weighted LCS: the largest total run weight `Σ f(run length)` over all
/// alignments of `a` against `b`, where a run is a maximal stretch of
/// matches that are consecutive in both sequences.
///
/// Cell `(i, j)` keeps one state per length `k` of the run ending at the
/// match `(i, j)`, valued by the weight of the runs before it. A new run
/// may follow any earlier match except the diagonal neighbour, which would
/// extend the run instead. Sums are formed left to right, so the result is
/// reproducible by enumeration bit for bit.
pub fn wlcs<T: Eq>(a: &[T], b: &[T], alpha: f64) -> f64 {
    let (n, m) = (a.len(), b.len());
    // best[i][j]: largest alignment weight using a[..i], b[..j].
    let mut best = vec![vec![0.0f64; m + 1]; n + 1];
    let mut runs: Vec<Vec<Vec<(usize, f64)>>> = vec![vec![Vec::new(); m + 1]; n + 1];
    for i in 1..=n {
        for j in 1..=m {
            if a[i - 1] == b[j - 1] {
                let before = |ii: usize, jj: usize| best[ii][jj];
                let mut fresh = 0.0f64;
                if i >= 2 {
                    fresh = fresh.max(before(i - 2, j - 1));
                }
                if j >= 2 {
                    fresh = fresh.max(before(i - 1, j - 2));
                }
                let mut states = vec![(1, fresh)];
                states.extend(runs[i - 1][j - 1].iter().map(|&(k, base)| (k + 1, base)));
                runs[i][j] = states;
            }
            let here = runs[i][j]
                .iter()
                .map(|&(k, base)| base + run_weight(k, alpha))
                .fold(0.0f64, f64::max);
            best[i][j] = here.max(best[i - 1][j]).max(best[i][j - 1]);
        }
    }
    best[n][m]
}

/// ROUGE-W with run weight `k^α`, α ≥ 1.
pub fn rouge_w<T: Eq>(cand: &[T], refr: &[T], alpha: f64, beta: f64) -> Result<Score> {
    check_beta(beta)?;
    if !(alpha >= 1.0) || !alpha.is_finite() {
        return Err(MetricError::Input(format!("alpha_w must be a finite value ≥ 1, got {alpha}")));
    }
    if !check_pair(cand, refr)? {
        return Ok(Score::ZERO);
    }
    let w = wlcs(cand, refr, alpha);
    let inv = |x: f64| if alpha == 1.0 { x } else { x.powf(1.0 / alpha) };
    let recall = inv(w / run_weight(refr.len(), alpha));
    let precision = inv(w / run_weight(cand.len(), alpha));
    Ok(Score::from_pr(precision, recall, beta))
}

/// Ordered token pairs `(x_i, x_j)`, `i < j`, with at most `max_gap`
/// tokens between them when set.
pub fn skip_pairs<T: Eq + Hash>(x: &[T], max_gap: Option<usize>) -> HashMap<(&T, &T), usize> {
    let mut out = HashMap::new();
    for i in 0..x.len() {
        let last = match max_gap {
            Some(g) => (i + g + 1).min(x.len() - 1),
            None => x.len() - 1,
        };
        for j in i + 1..=last {
            *out.entry((&x[i], &x[j])).or_insert(0) += 1;
        }
    }
    out
}

/// Number of admissible index pairs in a sequence of `len` tokens.
pub fn skip_pair_total(len: usize, max_gap: Option<usize>) -> usize {
    match max_gap {
        None => len * len.saturating_sub(1) / 2,
        Some(g) => (0..len).map(|i| (len - 1 - i).min(g + 1)).sum(),
    }
}

/// Common skip-bigrams with clipped counts.
pub fn skip2<T: Eq + Hash>(a: &[T], b: &[T], max_gap: Option<usize>) -> usize {
    clipped_matches(&skip_pairs(a, max_gap), &skip_pairs(b, max_gap))
}

fn check_skip<T>(cand: &[T], refr: &[T]) -> Result<()> {
    if cand.len() < 2 || refr.len() < 2 {
        return Err(MetricError::UndefinedDenominator(format!(
            "skip-bigrams need two tokens per side, got {} and {}",
            cand.len(),
            refr.len()
        )));
    }
    Ok(())
}

/// ROUGE-S. With `max_gap` the denominators count only pairs within the
/// gap, so identical strings still score 1.
pub fn rouge_s<T: Eq + Hash>(cand: &[T], refr: &[T], beta: f64, max_gap: Option<usize>) -> Result<Score> {
    check_beta(beta)?;
    check_skip(cand, refr)?;
    let hits = skip2(cand, refr, max_gap) as f64;
    Ok(Score::from_pr(
        hits / skip_pair_total(cand.len(), max_gap) as f64,
        hits / skip_pair_total(refr.len(), max_gap) as f64,
        beta,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SuVariant {
    /// ROUGE-S F plus unigram F1; lies in [0, 2].
    #[default]
    Sum,
    /// Skip-bigrams and unigrams counted in one pool; lies in [0, 1].
    Pooled,
}

pub fn rouge_su<T: Eq + Hash>(cand: &[T], refr: &[T], beta: f64, variant: SuVariant) -> Result<f64> {
    check_beta(beta)?;
    check_skip(cand, refr)?;
    match variant {
        SuVariant::Sum => Ok(rouge_s(cand, refr, beta, None)?.f + rouge_n(cand, &[refr], 1)?.f),
        SuVariant::Pooled => {
            let uni = clipped_matches(&ngram_counts(cand, 1), &ngram_counts(refr, 1));
            let hits = (skip2(cand, refr, None) + uni) as f64;
            let pool = |len: usize| (skip_pair_total(len, None) + len) as f64;
            Ok(f_measure(hits / pool(refr.len()), hits / pool(cand.len()), beta))
        }
    }
}
