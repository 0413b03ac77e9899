//! Exact transport against vertex enumeration; Sinkhorn against exact.

use emagate_core::Rng;
use emagate_metrics::transport::{certify, emd_exact, emd_sinkhorn, TransportProblem};
use proptest::prelude::*;

/// Minimum cost over all basic feasible solutions. A basis is a spanning
/// tree of the m + k nodes; its flows follow from peeling leaves.
fn vertex_enumeration(p: &TransportProblem) -> f64 {
    let (m, k) = (p.rows(), p.cols());
    let cells: Vec<(usize, usize)> = (0..m).flat_map(|i| (0..k).map(move |j| (i, j))).collect();
    let mut best = f64::INFINITY;
    for mask in 0u32..1 << cells.len() {
        if mask.count_ones() as usize != m + k - 1 {
            continue;
        }
        let tree: Vec<(usize, usize)> = (0..cells.len()).filter(|b| mask >> b & 1 == 1).map(|b| cells[b]).collect();
        let mut parent: Vec<usize> = (0..m + k).collect();
        fn find(p: &mut Vec<usize>, x: usize) -> usize {
            if p[x] != x {
                let r = find(p, p[x]);
                p[x] = r;
            }
            p[x]
        }
        let acyclic = tree.iter().all(|&(i, j)| {
            let (a, b) = (find(&mut parent, i), find(&mut parent, m + j));
            parent[a] = b;
            a != b
        });
        if !acyclic {
            continue;
        }
        let mut left: Vec<f64> = p.fx.iter().chain(&p.fy).copied().collect();
        let mut flow = vec![None; tree.len()];
        for _ in 0..tree.len() {
            let leaf = (0..m + k).find_map(|node| {
                let open: Vec<usize> = (0..tree.len())
                    .filter(|&e| flow[e].is_none() && (tree[e].0 == node || m + tree[e].1 == node))
                    .collect();
                (open.len() == 1).then(|| (node, open[0]))
            });
            let (node, e) = leaf.expect("a forest always has a leaf");
            let (i, j) = tree[e];
            let other = if node == i { m + j } else { i };
            let f = left[node];
            flow[e] = Some(f);
            left[node] = 0.0;
            left[other] -= f;
        }
        if flow.iter().any(|f| f.unwrap() < -1e-12) {
            continue;
        }
        let cost: f64 = tree.iter().zip(&flow).map(|(&(i, j), f)| p.cost[i][j] * f.unwrap()).sum();
        best = best.min(cost);
    }
    best
}

fn simplex(rng: &mut Rng, n: usize, grid: bool) -> Vec<f64> {
    let raw: Vec<f64> = (0..n)
        .map(|_| if grid { rng.below(4) as f64 } else { rng.uniform() + 0.05 })
        .collect();
    let s: f64 = raw.iter().sum();
    if s == 0.0 {
        return vec![1.0 / n as f64; n];
    }
    raw.iter().map(|x| x / s).collect()
}

fn random_problem(rng: &mut Rng, m: usize, k: usize, grid: bool) -> TransportProblem {
    let cost = (0..m)
        .map(|_| {
            (0..k)
                .map(|_| if grid { rng.below(4) as f64 } else { 3.0 * rng.uniform() })
                .collect()
        })
        .collect();
    TransportProblem::new(simplex(rng, m, grid), simplex(rng, k, grid), cost).unwrap()
}

#[test]
fn small_problems_match_vertex_enumeration() {
    let mut rng = Rng::new(31);
    for m in 1..=3 {
        for k in 1..=3 {
            for trial in 0..60 {
                let p = random_problem(&mut rng, m, k, trial % 2 == 0);
                let plan = emd_exact(&p).unwrap();
                let oracle = vertex_enumeration(&p);
                assert!((plan.cost - oracle).abs() <= 1e-9, "{m}×{k}: {} vs {oracle}", plan.cost);
                assert!(plan.marginal_residual(&p) <= 1e-9);
                assert!(plan.flow.iter().flatten().all(|&f| f >= 0.0));
                let cert = certify(&p, &plan).unwrap();
                assert!(cert.holds(1e-9), "{cert:?}");
            }
        }
    }
}

#[test]
fn larger_problems_certify() {
    let mut rng = Rng::new(8);
    for n in [8, 32, 128] {
        let xs: Vec<Vec<f64>> = (0..n).map(|_| (0..4).map(|_| rng.normal()).collect()).collect();
        let ys: Vec<Vec<f64>> = (0..n).map(|_| (0..4).map(|_| rng.normal()).collect()).collect();
        let p = TransportProblem::euclidean(simplex(&mut rng, n, false), simplex(&mut rng, n, false), &xs, &ys).unwrap();
        let plan = emd_exact(&p).unwrap();
        assert!(plan.marginal_residual(&p) <= 1e-9);
        assert!(certify(&p, &plan).unwrap().holds(1e-9));
    }
}

#[test]
fn sinkhorn_tracks_exact_on_8x8() {
    let mut rng = Rng::new(77);
    for _ in 0..10 {
        let xs: Vec<Vec<f64>> = (0..8).map(|_| (0..3).map(|_| rng.normal()).collect()).collect();
        let ys: Vec<Vec<f64>> = (0..8).map(|_| (0..3).map(|_| rng.normal()).collect()).collect();
        let p = TransportProblem::euclidean(simplex(&mut rng, 8, false), simplex(&mut rng, 8, false), &xs, &ys).unwrap();
        let exact = emd_exact(&p).unwrap().cost;
        let s = emd_sinkhorn(&p, 1e-3, 1_000_000).unwrap();
        assert!((s.plan.cost - exact).abs() < 1e-3, "{} vs {exact}", s.plan.cost);
        assert!(s.residual <= 1e-9);
    }
}

#[test]
fn transposed_problem_has_same_cost() {
    let mut rng = Rng::new(4);
    for _ in 0..50 {
        let p = random_problem(&mut rng, 3, 2, false);
        let a = emd_exact(&p).unwrap().cost;
        let b = emd_exact(&p.transpose()).unwrap().cost;
        assert!((a - b).abs() <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exact_never_beats_regularized(seed in any::<u64>(), m in 1usize..5, k in 1usize..5, eps in 0.05f64..1.0) {
        let mut rng = Rng::new(seed);
        let p = random_problem(&mut rng, m, k, false);
        let exact = emd_exact(&p).unwrap().cost;
        let s = emd_sinkhorn(&p, eps, 1_000_000).unwrap();
        prop_assert!(exact <= s.plan.cost + 1e-12, "{} > {}", exact, s.plan.cost);
        prop_assert!(s.plan.marginal_residual(&p) <= s.residual);
    }
}
