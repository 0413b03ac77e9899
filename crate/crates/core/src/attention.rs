//! Chunked softmax attention.
//!
//! The sequence is cut into consecutive chunks of `chunk` tokens and every
//! query attends only to keys of its own chunk (and, when causal, only to
//! positions up to itself). Scores are raw dot products: the queries and keys
//! come from an l2-normalized representation, so no `1/√z` scale is applied.

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{dot, softmax_in_place, Tensor};

/// Multiply-accumulate counts measured inside the attention loops.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AttentionStats {
    /// `q·k` products, one per (query, key, feature).
    pub score_macs: u64,
    /// `p·v` products, one per (query, key, value feature).
    pub value_macs: u64,
}

impl AttentionStats {
    pub fn total(&self) -> u64 {
        self.score_macs + self.value_macs
    }
}

/// Softmax weights of every query row, packed row after row. Row `i`
/// covers keys `span(i).0 ..= span(i).1`.
#[derive(Debug, Clone)]
pub(crate) struct AttentionProbs<T> {
    pub chunk: usize,
    pub causal: bool,
    pub n: usize,
    pub offsets: Vec<usize>,
    pub probs: Vec<T>,
}

impl<T> AttentionProbs<T> {
    pub fn span(&self, i: usize) -> (usize, usize) {
        span(i, self.n, self.chunk, self.causal)
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.probs[self.offsets[i]..self.offsets[i + 1]]
    }
}

#[inline]
fn span(i: usize, n: usize, chunk: usize, causal: bool) -> (usize, usize) {
    let start = (i / chunk) * chunk;
    let end = if causal { i } else { (start + chunk).min(n) - 1 };
    (start, end)
}

fn check(q: &Tensor<impl Scalar>, k: &Tensor<impl Scalar>, v: &Tensor<impl Scalar>, chunk: usize) -> Result<()> {
    if chunk == 0 {
        return Err(Error::Parameter("chunk length must be at least 1".into()));
    }
    if q.shape() != k.shape() || q.shape().len() != 2 {
        return Err(shape_err("attention q/k", q.shape(), k.shape()));
    }
    if v.rows() != q.rows() {
        return Err(shape_err("attention v", q.shape(), v.shape()));
    }
    Ok(())
}

pub(crate) fn attention_forward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    chunk: usize,
    causal: bool,
    stats: &mut AttentionStats,
) -> Result<(Tensor<T>, AttentionProbs<T>)> {
    check(q, k, v, chunk)?;
    let (n, z, w) = (q.rows(), q.cols(), v.cols());
    let mut out = vec![T::zero(); n * w];
    let mut probs = AttentionProbs {
        chunk,
        causal,
        n,
        offsets: Vec::with_capacity(n + 1),
        probs: Vec::new(),
    };
    probs.offsets.push(0);
    let mut scores = Vec::with_capacity(chunk);
    for i in 0..n {
        let (start, end) = span(i, n, chunk, causal);
        scores.clear();
        let qi = q.row(i);
        for j in start..=end {
            scores.push(dot(qi, k.row(j)));
        }
        stats.score_macs += ((end + 1 - start) * z) as u64;
        softmax_in_place(&mut scores);
        let o = &mut out[i * w..(i + 1) * w];
        for (p, j) in scores.iter().zip(start..=end) {
            for (ov, &vv) in o.iter_mut().zip(v.row(j)) {
                *ov = *ov + *p * vv;
            }
        }
        stats.value_macs += ((end + 1 - start) * w) as u64;
        probs.probs.extend_from_slice(&scores);
        probs.offsets.push(probs.probs.len());
    }
    Ok((Tensor::new(&[n, w], out)?, probs))
}

/// `softmax(mask(QKᵀ))V` restricted to chunks of length `chunk`.
pub fn chunked_causal_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    chunk: usize,
    causal: bool,
) -> Result<Tensor<T>> {
    Ok(attention_forward(q, k, v, chunk, causal, &mut AttentionStats::default())?.0)
}

/// Same as [`chunked_causal_attention`], also returning measured work.
pub fn chunked_causal_attention_counted<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    chunk: usize,
    causal: bool,
) -> Result<(Tensor<T>, AttentionStats)> {
    let mut stats = AttentionStats::default();
    let (o, _) = attention_forward(q, k, v, chunk, causal, &mut stats)?;
    Ok((o, stats))
}

/// Dense `[n×n]` attention matrix (zero outside each query's window).
pub fn attention_weights<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    chunk: usize,
    causal: bool,
) -> Result<Tensor<T>> {
    let n = q.rows();
    let dummy = Tensor::zeros(&[n, 1]);
    let (_, probs) = attention_forward(q, k, &dummy, chunk, causal, &mut AttentionStats::default())?;
    let mut dense = vec![T::zero(); n * n];
    for i in 0..n {
        let (start, _) = probs.span(i);
        for (off, &p) in probs.row(i).iter().enumerate() {
            dense[i * n + start + off] = p;
        }
    }
    Tensor::new(&[n, n], dense)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn single_token_returns_value() {
        let q = Tensor::<f64>::from_rows(&[vec![0.3, -0.2]]).unwrap();
        let v = Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let o = chunked_causal_attention(&q, &q, &v, 4, true).unwrap();
        assert_eq!(o, v);
    }

    #[test]
    fn zero_scores_average_values() {
        let mut rng = Rng::new(3);
        let q = Tensor::<f64>::zeros(&[4, 2]);
        let v = Tensor::random_normal(&[4, 3], 1.0, &mut rng);
        let o = chunked_causal_attention(&q, &q, &v, 8, false).unwrap();
        for f in 0..3 {
            let mean = (0..4).map(|t| v.at(t, f)).sum::<f64>() / 4.0;
            for t in 0..4 {
                assert!((o.at(t, f) - mean).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn chunks_do_not_interact() {
        let mut rng = Rng::new(4);
        let q = Tensor::<f64>::random_normal(&[4, 3], 1.0, &mut rng);
        let k = Tensor::random_normal(&[4, 3], 1.0, &mut rng);
        let v = Tensor::random_normal(&[4, 2], 1.0, &mut rng);
        let base = chunked_causal_attention(&q, &k, &v, 2, false).unwrap();
        let bump = |t: &Tensor<f64>| {
            let mut data = t.data().to_vec();
            for x in &mut data[..2 * t.cols()] {
                *x += 0.7;
            }
            Tensor::new(t.shape(), data).unwrap()
        };
        let o = chunked_causal_attention(&bump(&q), &bump(&k), &bump(&v), 2, false).unwrap();
        assert_eq!(&o.data()[4..], &base.data()[4..]);
        assert_ne!(&o.data()[..4], &base.data()[..4]);
    }

    #[test]
    fn weights_rows_sum_to_one_and_respect_mask() {
        let mut rng = Rng::new(5);
        let q = Tensor::<f64>::random_normal(&[7, 3], 2.0, &mut rng);
        let k = Tensor::random_normal(&[7, 3], 2.0, &mut rng);
        let w = attention_weights(&q, &k, 3, true).unwrap();
        for i in 0..7 {
            let s: f64 = w.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            for j in 0..7 {
                let allowed = j <= i && j / 3 == i / 3;
                if !allowed {
                    assert_eq!(w.at(i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn stats_count_exact_work() {
        let q = Tensor::<f64>::zeros(&[8, 2]);
        let v = Tensor::<f64>::zeros(&[8, 3]);
        let (_, s) = chunked_causal_attention_counted(&q, &q, &v, 4, true).unwrap();
        // Each chunk of 4 has 1+2+3+4 = 10 query-key pairs.
        assert_eq!(s.score_macs, 2 * 10 * 2);
        assert_eq!(s.value_macs, 2 * 10 * 3);
        let (_, s) = chunked_causal_attention_counted(&q, &q, &v, 4, false).unwrap();
        assert_eq!(s.score_macs, 2 * 16 * 2);
    }
}
