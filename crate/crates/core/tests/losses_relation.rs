use approx::assert_abs_diff_eq;
use proptest::prelude::*;

use crckd::dataio::DatasetStats;
use crckd::losses::{ccd_loss, class_weights, kl_loss, wce_loss, CcdParams, ClassWeights};
use crckd::relation::{
    crp_loss, rd_statistic, relation_graph, relation_graphs, relation_matrix, CentroidSource,
    Centroids,
};
use crckd::{Tape, Tensor};

fn t(shape: &[usize], v: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
}

fn centroids(k: usize, d: usize, c: &[f64]) -> Centroids {
    Centroids {
        c: c.to_vec(),
        k,
        d,
        source: CentroidSource::Student,
    }
}

#[test]
fn wce_hand_values() {
    let w = class_weights(&DatasetStats::from_labels(&[0, 0, 1], 2).unwrap());
    assert_eq!(w.w, vec![0.75, 1.5]);
    let tape = Tape::new();
    // equal logits give p = (0.5, 0.5)
    let v = wce_loss(tape.constant(t(&[1, 2], &[0.3, 0.3])), &[0], &w).unwrap().item();
    assert_abs_diff_eq!(v, 0.75 * 2f64.ln(), epsilon = 1e-12);
    assert_abs_diff_eq!(v, 0.5199, epsilon = 1e-4);

    let uniform = wce_loss(tape.constant(t(&[2, 3], &[0.0; 6])), &[1, 2], &ClassWeights::uniform(3))
        .unwrap()
        .item();
    assert_abs_diff_eq!(uniform, 3f64.ln(), epsilon = 1e-12);
}

#[test]
fn class_weights_are_inverse_to_counts() {
    let labels: Vec<usize> = (0..600).map(|i| if i < 400 { 0 } else if i < 550 { 1 } else { 2 }).collect();
    let stats = DatasetStats::from_labels(&labels, 3).unwrap();
    let w = class_weights(&stats);
    let products: Vec<f64> = w.w.iter().zip(&stats.class_counts).map(|(w, &n)| w * n as f64).collect();
    assert!(products.iter().all(|p| (p - products[0]).abs() < 1e-9));
    let balanced = class_weights(&DatasetStats::from_labels(&[0, 1, 2, 0, 1, 2], 3).unwrap());
    assert_eq!(balanced.w, vec![1.0; 3]);
}

#[test]
fn kl_hand_values() {
    let tape = Tape::new();
    let v = kl_loss(tape.constant(t(&[1, 2], &[0.5, 0.5])), &t(&[1, 2], &[1.0, 0.0])).unwrap();
    assert_abs_diff_eq!(v.item(), 2f64.ln(), epsilon = 1e-12);
    let p = t(&[2, 3], &[0.2, 0.3, 0.5, 0.6, 0.3, 0.1]);
    let same = kl_loss(tape.constant(p.clone()), &p).unwrap().item();
    assert!(same.abs() < 1e-10);
}

#[test]
fn ccd_hand_value_and_monotonicity() {
    let params = CcdParams::new(1.0, 1, 1, 2).unwrap();
    let tape = Tape::new();
    let q = tape.constant(t(&[1, 2], &[1.0, 0.0]));
    let v = ccd_loss(q, &t(&[1, 1, 2], &[1.0, 0.0]), &t(&[1, 1, 2], &[0.0, 1.0]), &params)
        .unwrap()
        .item();
    assert_abs_diff_eq!(v, 1.2675, epsilon = 1e-4);

    // rotating the positive toward the query lowers the loss
    let mut last = f64::INFINITY;
    for step in 0..=10 {
        let a = std::f64::consts::PI * (1.0 - step as f64 / 10.0);
        let pos = t(&[1, 1, 2], &[a.cos(), a.sin()]);
        let v = ccd_loss(q, &pos, &t(&[1, 1, 2], &[0.0, 1.0]), &params).unwrap().item();
        assert!(v < last && v > 0.0);
        last = v;
    }
}

#[test]
fn ccd_rejects_non_unit_rows() {
    let params = CcdParams::new(0.5, 1, 1, 4).unwrap();
    let tape = Tape::new();
    let q = tape.constant(t(&[1, 2], &[2.0, 0.0]));
    assert!(ccd_loss(q, &t(&[1, 1, 2], &[1.0, 0.0]), &t(&[1, 1, 2], &[0.0, 1.0]), &params).is_err());
    assert!(CcdParams::new(0.0, 1, 1, 4).is_err());
}

#[test]
fn relation_graph_hand_values() {
    let c = centroids(2, 2, &[1.0, 0.0, 0.0, 1.0]);
    let r = relation_graph(&[1.0, 0.0], &c);
    assert_abs_diff_eq!(r[0], 0.7311, epsilon = 1e-4);
    assert_abs_diff_eq!(r[1], 0.2689, epsilon = 1e-4);

    let c3 = centroids(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    let r = relation_graph(&[0.0, 0.0, 1.0], &c3);
    assert!(r.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
}

#[test]
fn relation_graph_is_shift_invariant() {
    // both centroids have the same projection on e3, so moving g along it
    // adds the same constant to every logit
    let c = centroids(2, 3, &[0.8, 0.1, 0.5, -0.3, 0.6, 0.5]);
    let g = [0.6, 0.8, 0.0];
    let moved = [0.6, 0.8, 0.7];
    let a = relation_graph(&g, &c);
    let b = relation_graph(&moved, &c);
    for (x, y) in a.iter().zip(&b) {
        assert_abs_diff_eq!(x, y, epsilon = 1e-12);
    }
}

#[test]
fn batched_relation_graphs_match_single() {
    let c = centroids(3, 2, &[0.5, 0.1, -0.2, 0.7, 0.0, -0.4]);
    let g = [0.6, 0.8, -1.0, 0.0];
    let tape = Tape::new();
    let batched = relation_graphs(tape.constant(t(&[2, 2], &g)), &c).unwrap().data();
    assert_eq!(batched.len(), 6);
    for (b, row) in g.chunks(2).enumerate() {
        let single = relation_graph(row, &c);
        for i in 0..3 {
            assert_abs_diff_eq!(batched[b * 3 + i], single[i], epsilon = 1e-14);
        }
    }
}

#[test]
fn crp_sums_over_the_batch() {
    let tape = Tape::new();
    let one = crp_loss(tape.constant(t(&[1, 2], &[0.6, 0.4])), &t(&[1, 2], &[0.8, 0.2]))
        .unwrap()
        .item();
    assert_abs_diff_eq!(one, 0.09151, epsilon = 1e-5);
    let two = crp_loss(
        tape.constant(t(&[2, 2], &[0.6, 0.4, 0.6, 0.4])),
        &t(&[2, 2], &[0.8, 0.2, 0.8, 0.2]),
    )
    .unwrap()
    .item();
    assert_abs_diff_eq!(two, 2.0 * one, epsilon = 1e-15);
}

#[test]
fn rd_hand_values() {
    // two classes of two identical members; cross-class cosine 0.5
    let s = 3f64.sqrt() / 2.0;
    let emb = [1.0, 0.0, 1.0, 0.0, 0.5, s, 0.5, s];
    let m = relation_matrix(&emb, 2, &[0, 0, 1, 1]).unwrap();
    let rd = rd_statistic(&m).unwrap();
    assert_abs_diff_eq!(rd.intra, 1.0, epsilon = 1e-12);
    assert_abs_diff_eq!(rd.inter, 0.5, epsilon = 1e-12);
    assert_abs_diff_eq!(rd.ratio, 2.0, epsilon = 1e-12);
    for i in 0..4 {
        assert_abs_diff_eq!(m.get(i, i), 1.0, epsilon = 1e-10);
        for j in 0..4 {
            assert_eq!(m.get(i, j), m.get(j, i));
        }
    }

    let same = relation_matrix(&[0.6, 0.8, 0.6, 0.8, 0.6, 0.8], 2, &[0, 1, 1]).unwrap();
    assert_abs_diff_eq!(rd_statistic(&same).unwrap().ratio, 1.0, epsilon = 1e-12);
}

#[test]
fn rd_flags_nonpositive_inter_similarity() {
    let m = relation_matrix(&[1.0, 0.0, 1.0, 0.0, -1.0, 0.0, -1.0, 0.0], 2, &[0, 0, 1, 1]).unwrap();
    let rd = rd_statistic(&m).unwrap();
    assert!(rd.nonpositive_inter);
    assert_abs_diff_eq!(rd.ratio, -1.0, epsilon = 1e-12);
}

fn simplex(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, k).prop_map(|v| {
        let z: f64 = v.iter().sum();
        v.iter().map(|x| x / z).collect()
    })
}

proptest! {
    #[test]
    fn divergences_are_nonnegative(p in simplex(4), q in simplex(4)) {
        let tape = Tape::new();
        let kl = kl_loss(tape.constant(t(&[1, 4], &p)), &t(&[1, 4], &q)).unwrap().item();
        let crp = crp_loss(tape.constant(t(&[1, 4], &p)), &t(&[1, 4], &q)).unwrap().item();
        prop_assert!(kl >= -1e-12);
        prop_assert!(crp >= -1e-12);
    }

    #[test]
    fn relation_graphs_are_distributions(
        g in prop::collection::vec(-1.0f64..1.0, 3),
        c in prop::collection::vec(-1.0f64..1.0, 12),
    ) {
        let r = relation_graph(&g, &centroids(4, 3, &c));
        prop_assert!(r.iter().all(|&v| v > 0.0));
        prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ccd_ignores_order_of_samples(seed in 0u64..1000) {
        use rand::{seq::SliceRandom, Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut unit = || {
            let v: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
            v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
        };
        let q = unit();
        let pos: Vec<Vec<f64>> = (0..4).map(|_| unit()).collect();
        let neg: Vec<Vec<f64>> = (0..6).map(|_| unit()).collect();
        let params = CcdParams::new(0.2, 4, 6, 50).unwrap();
        let eval = |p: &[Vec<f64>], n: &[Vec<f64>]| {
            let tape = Tape::new();
            ccd_loss(tape.constant(t(&[1, 3], &q)), &t(&[1, 4, 3], &p.concat()), &t(&[1, 6, 3], &n.concat()), &params)
                .unwrap()
                .item()
        };
        let base = eval(&pos, &neg);
        let mut rng2 = rand_chacha::ChaCha8Rng::seed_from_u64(seed + 1);
        let (mut p2, mut n2) = (pos.clone(), neg.clone());
        p2.shuffle(&mut rng2);
        n2.shuffle(&mut rng2);
        prop_assert!((eval(&p2, &n2) - base).abs() < 1e-12);
        prop_assert!(base > 0.0);
    }
}
