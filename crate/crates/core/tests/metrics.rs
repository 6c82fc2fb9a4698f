use mpatch_core::eval::*;
use mpatch_core::rng::Rng;
use mpatch_core::train::TrainConfig;
use mpatch_core::Tensor;
use proptest::prelude::*;

/// Pairwise AP: rank of each positive counted directly against every other
/// sample, precision from the positives at or above it.
fn brute_ap(scores: &[f32], pos: &[bool]) -> Option<f64> {
    let n = scores.len();
    let above = |j: usize, i: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j < i);
    let mut ranked: Vec<(usize, f64)> = (0..n)
        .filter(|&i| pos[i])
        .map(|i| {
            let rank = 1 + (0..n).filter(|&j| j != i && above(j, i)).count();
            let hits = 1 + (0..n).filter(|&j| j != i && pos[j] && above(j, i)).count();
            (rank, hits as f64 / rank as f64)
        })
        .collect();
    if ranked.is_empty() {
        return None;
    }
    ranked.sort_by_key(|r| r.0);
    Some(ranked.iter().map(|r| r.1).sum::<f64>() / ranked.len() as f64)
}

#[test]
fn map_matches_brute_force_on_200_instances() {
    let mut rng = Rng::new(11);
    let mut checked = 0;
    while checked < 200 {
        let n = 1 + rng.below(10);
        let c = 1 + rng.below(4);
        // Few distinct score levels so ties are common.
        let scores: Vec<f32> = (0..n * c).map(|_| rng.below(5) as f32 * 0.25).collect();
        let labels: Vec<f32> = (0..n * c).map(|_| if rng.bernoulli(0.4) { 1.0 } else { 0.0 }).collect();
        let (s, l) = (Tensor::new(vec![n, c], scores.clone()).unwrap(), Tensor::new(vec![n, c], labels.clone()).unwrap());
        let oracle: Vec<f64> = (0..c)
            .filter_map(|ci| {
                let col: Vec<f32> = (0..n).map(|r| scores[r * c + ci]).collect();
                let pos: Vec<bool> = (0..n).map(|r| labels[r * c + ci] > 0.5).collect();
                brute_ap(&col, &pos)
            })
            .collect();
        match mean_average_precision(&s, &l) {
            Ok(v) => {
                assert_eq!(v, oracle.iter().sum::<f64>() / oracle.len() as f64);
                checked += 1;
            }
            Err(_) => assert!(oracle.is_empty()),
        }
    }
}

#[test]
fn map_hand_examples() {
    let ap = average_precision(&[0.9, 0.8, 0.1], &[true, false, true]).unwrap();
    assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    let s = Tensor::new(vec![3, 2], vec![0.9, 0.1, 0.2, 0.8, 0.1, 0.7]).unwrap();
    let l = Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
    assert_eq!(mean_average_precision(&s, &l).unwrap(), 1.0);
    // A class without positives is left out of the mean.
    let l = Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
    assert_eq!(mean_average_precision(&s, &l).unwrap(), 1.0);
    let none = Tensor::zeros(&[3, 2]);
    assert!(mean_average_precision(&s, &none).is_err());
}

#[test]
fn accuracy_examples() {
    assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
    assert_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
    assert_eq!(accuracy(&[0, 1, 2, 3], &[0, 1, 2, 0]).unwrap(), 0.75);
    assert!(accuracy(&[], &[]).is_err());
}

fn set(rows: Vec<Vec<f32>>) -> EmbeddingSet {
    let n = rows.len();
    EmbeddingSet::new(Tensor::from_rows(&rows).unwrap(), (0..n).collect()).unwrap()
}

#[test]
fn cyclic_shift_recall() {
    let q = set(vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
    let g = vec![vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]];
    let sim = similarity_matrix(&q, &set(g)).unwrap();
    let pairing = [0, 1, 2];
    assert_eq!(recall_at_k_from_similarity(&sim, &pairing, 1).unwrap(), 0.0);
    // Rows are [0,1,0], [0,0,1], [1,0,0]; every pair scores 0.
    // Query 0: one higher score, no earlier tie -> rank 2.
    // Query 1: one higher, index 0 ties earlier -> rank 3.
    // Query 2: one higher, index 1 ties earlier -> rank 3.
    assert!((recall_at_k_from_similarity(&sim, &pairing, 2).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    assert_eq!(recall_at_k_from_similarity(&sim, &pairing, 3).unwrap(), 1.0);
}

#[test]
fn identical_sets_recall_one() {
    let mut rng = Rng::new(5);
    let rows: Vec<Vec<f32>> = (0..20).map(|_| rng.normal_vec(6, 1.0)).collect();
    let a = set(rows.clone());
    assert_eq!(recall_at_k(&a, &set(rows), 1).unwrap(), 1.0);
    assert!(recall_at_k(&a, &a, 21).is_err());
}

#[test]
fn transpose_gives_reverse_direction() {
    let mut rng = Rng::new(6);
    for _ in 0..20 {
        let n = 5 + rng.below(20);
        let a = set((0..n).map(|_| rng.normal_vec(5, 1.0)).collect());
        let b = set((0..n).map(|_| rng.normal_vec(5, 1.0)).collect());
        let ks = [1, 2, 5];
        let report = retrieval(&a, &b, &ks).unwrap();
        for (i, &k) in ks.iter().enumerate() {
            assert_eq!(report.a_to_b[i], (k, recall_at_k(&a, &b, k).unwrap()));
            assert_eq!(report.b_to_a[i], (k, recall_at_k(&b, &a, k).unwrap()));
        }
    }
}

#[test]
fn cosine_stats_examples() {
    let mut rng = Rng::new(7);
    let rows: Vec<Vec<f32>> = (0..10).map(|_| rng.normal_vec(4, 1.0)).collect();
    let a = set(rows.clone());
    let same = cosine_similarity_stats(&a, &set(rows.clone())).unwrap();
    assert!((same.mean - 1.0).abs() < 1e-6 && (same.median - 1.0).abs() < 1e-6);
    assert_eq!(same.histogram.len(), 20);
    let neg = set(rows.iter().map(|r| r.iter().map(|v| -v).collect()).collect());
    assert!((cosine_similarity_stats(&a, &neg).unwrap().mean + 1.0).abs() < 1e-6);
    let e = set(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    let f = set(vec![vec![0.0, 1.0], vec![-1.0, 0.0]]);
    assert!(cosine_similarity_stats(&e, &f).unwrap().mean.abs() < 1e-9);
    let shuffled = EmbeddingSet::new(Tensor::from_rows(&rows[..2]).unwrap(), vec![1, 0]).unwrap();
    let short = EmbeddingSet::new(Tensor::from_rows(&rows[..2]).unwrap(), vec![0, 1]).unwrap();
    assert!(cosine_similarity_stats(&short, &shuffled).is_err());
}

fn separable(rng: &mut Rng, n: usize) -> (Tensor, Tensor) {
    let mut x = Vec::new();
    let mut y = Vec::new();
    for i in 0..n {
        let c = i % 2;
        let sign = if c == 0 { 1.0 } else { -1.0 };
        // First coordinate at +-(0.5 + u) keeps a margin of at least 0.5
        // after normalization, since the others stay small.
        x.push(vec![sign * (0.5 + rng.uniform() as f32), 0.1 * rng.normal() as f32, 0.1 * rng.normal() as f32]);
        y.push(if c == 0 { vec![1.0, 0.0] } else { vec![0.0, 1.0] });
    }
    (Tensor::from_rows(&x).unwrap(), Tensor::from_rows(&y).unwrap())
}

#[test]
fn probe_separates_separable_classes() {
    let mut rng = Rng::new(8);
    let (xtr, ytr) = separable(&mut rng, 200);
    let (xte, yte) = separable(&mut rng, 100);
    let res = linear_probe(&xtr, &ytr, &xte, &yte, false, &TrainConfig::probe(0)).unwrap();
    assert_eq!(res.report.value, 1.0);
    assert!(res.losses.last().unwrap() < res.losses.first().unwrap());
}

#[test]
fn probe_with_zero_epochs_scores_its_initialization() {
    let mut rng = Rng::new(9);
    let (xtr, ytr) = separable(&mut rng, 64);
    let (xte, yte) = separable(&mut rng, 64);
    let cfg = TrainConfig { epochs: 0, ..TrainConfig::probe(3) };
    let a = linear_probe(&xtr, &ytr, &xte, &yte, false, &cfg).unwrap();
    let b = linear_probe(&xtr, &ytr, &xte, &yte, false, &cfg).unwrap();
    assert!(a.losses.is_empty());
    assert!(a.weights.tensors_bit_eq(&b.weights));
    // Score of the untrained weights, recomputed by hand.
    let w = a.weights.require("probe.w").unwrap();
    let bias = a.weights.require("probe.b").unwrap();
    let xn = l2_rows(&xte);
    let (d, c) = (xn.row_len(), 2);
    let preds: Vec<usize> = (0..xn.rows())
        .map(|r| {
            let logit = |k: usize| {
                (0..d).map(|j| xn.row(r)[j] as f64 * w.data()[j * c + k] as f64).sum::<f64>() + bias.data()[k] as f64
            };
            if logit(1) > logit(0) { 1 } else { 0 }
        })
        .collect();
    assert_eq!(a.report.value, accuracy(&preds, &class_ids(&yte)).unwrap());
}

#[test]
fn probe_rejects_single_class() {
    let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.9, 0.1]]).unwrap();
    let y = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
    assert!(linear_probe(&x, &y, &x, &y, false, &TrainConfig::probe(0)).is_err());
}

proptest! {
    #[test]
    fn recall_is_monotone_in_k(seed in 0u64..1000, n in 2usize..15) {
        let mut rng = Rng::new(seed);
        let a = set((0..n).map(|_| rng.normal_vec(4, 1.0)).collect());
        let b = set((0..n).map(|_| rng.normal_vec(4, 1.0)).collect());
        let r: Vec<f64> = (1..=n).map(|k| recall_at_k(&a, &b, k).unwrap()).collect();
        prop_assert!(r.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(r[n - 1], 1.0);
    }

    #[test]
    fn metrics_ignore_positive_scaling(seed in 0u64..1000, k in 0.01f32..100.0) {
        let mut rng = Rng::new(seed);
        let rows: Vec<Vec<f32>> = (0..8).map(|_| rng.normal_vec(4, 1.0)).collect();
        let scaled: Vec<Vec<f32>> = rows.iter().map(|r| r.iter().map(|v| v * k).collect()).collect();
        let g = set((0..8).map(|_| rng.normal_vec(4, 1.0)).collect());
        for kk in [1, 3] {
            prop_assert_eq!(recall_at_k(&set(rows.clone()), &g, kk).unwrap(), recall_at_k(&set(scaled.clone()), &g, kk).unwrap());
        }
    }

    #[test]
    fn map_lies_in_unit_interval(seed in 0u64..1000) {
        let mut rng = Rng::new(seed);
        let s = Tensor::new(vec![6, 3], rng.normal_vec(18, 1.0)).unwrap();
        let mut l = vec![0.0f32; 18];
        l[0] = 1.0;
        for v in l.iter_mut().skip(1) { if rng.bernoulli(0.3) { *v = 1.0; } }
        let m = mean_average_precision(&s, &Tensor::new(vec![6, 3], l).unwrap()).unwrap();
        prop_assert!((0.0..=1.0).contains(&m));
    }
}
