use emagate_core::attention::{attention_weights, chunked_causal_attention, chunked_causal_attention_counted};
use emagate_core::{Rng, Tensor};
use proptest::prelude::*;

/// Dense masked attention written out directly.
fn dense_oracle(q: &Tensor, k: &Tensor, v: &Tensor, chunk: usize, causal: bool) -> Tensor {
    let n = q.rows();
    let mut out = vec![0.0; n * v.cols()];
    for i in 0..n {
        let allowed: Vec<usize> = (0..n).filter(|&j| j / chunk == i / chunk && (!causal || j <= i)).collect();
        let s: Vec<f64> = allowed.iter().map(|&j| q.row(i).iter().zip(k.row(j)).map(|(a, b)| a * b).sum()).collect();
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for (w, &j) in e.iter().zip(&allowed) {
            for c in 0..v.cols() {
                out[i * v.cols() + c] += w / z * v.at(j, c);
            }
        }
    }
    Tensor::new(&[n, v.cols()], out).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matches_dense_oracle(seed in any::<u64>(), n in 1usize..20, chunk in 1usize..9, causal in any::<bool>()) {
        let mut rng = Rng::new(seed);
        let q = Tensor::random_normal(&[n, 3], 1.0, &mut rng);
        let k = Tensor::random_normal(&[n, 3], 1.0, &mut rng);
        let v = Tensor::random_normal(&[n, 2], 1.0, &mut rng);
        let o = chunked_causal_attention(&q, &k, &v, chunk, causal).unwrap();
        prop_assert!(o.sub(&dense_oracle(&q, &k, &v, chunk, causal)).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn weight_rows_sum_to_one(seed in any::<u64>(), n in 1usize..30, chunk in 1usize..9) {
        let mut rng = Rng::new(seed);
        let q = Tensor::random_normal(&[n, 4], 3.0, &mut rng);
        let k = Tensor::random_normal(&[n, 4], 3.0, &mut rng);
        let w = attention_weights(&q, &k, chunk, true).unwrap();
        for i in 0..n {
            prop_assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}

#[test]
fn work_grows_linearly_at_fixed_chunk() {
    let (c, z) = (16, 8);
    let mut rng = Rng::new(1);
    let mut per_token = Vec::new();
    for n in [64, 128, 256] {
        let q = Tensor::random_normal(&[n, z], 1.0, &mut rng);
        let v = Tensor::random_normal(&[n, z], 1.0, &mut rng);
        let (_, s) = chunked_causal_attention_counted(&q, &q, &v, c, true).unwrap();
        per_token.push(s.total() as f64 / n as f64);
    }
    for r in &per_token[1..] {
        assert!((r / per_token[0] - 1.0).abs() <= 0.10);
    }
}
