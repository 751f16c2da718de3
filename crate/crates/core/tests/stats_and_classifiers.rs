mod common;

use ndarray::{concatenate, Array2, Axis};
use proptest::prelude::*;
use rand::Rng;

use common::rng;
use urbanprof::classify::{decision_tree_fit, knn_classify, Dataset, TreeParams};
use urbanprof::spectral::adjusted_rand_index;
use urbanprof::stats::{cca, cca_by_cluster, distance_correlation, Ridge};

fn noise(n: usize, q: usize, r: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_fn((n, q), |_| r.random_range(-1.0..1.0))
}

#[test]
fn per_cluster_rho_ranks_with_noise() {
    let mut r = rng(3);
    let levels = [0.05, 0.4, 1.5];
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut labels = Vec::new();
    for (c, &s) in levels.iter().enumerate() {
        let x = noise(150, 3, &mut r);
        let b = noise(3, 3, &mut r);
        let y = x.dot(&b) + noise(150, 3, &mut r) * s;
        xs.push(x);
        ys.push(y);
        labels.extend(std::iter::repeat_n(c, 150));
    }
    let x = concatenate(Axis(0), &xs.iter().map(|a| a.view()).collect::<Vec<_>>()).unwrap();
    let y = concatenate(Axis(0), &ys.iter().map(|a| a.view()).collect::<Vec<_>>()).unwrap();
    let per = cca_by_cluster(x.view(), y.view(), &labels, Ridge::Auto).unwrap();
    let rho: Vec<f64> = (0..3).map(|c| per[&c].correlations[0]).collect();
    assert!(rho[0] > rho[1] && rho[1] > rho[2], "{rho:?}");
}

#[test]
fn duplicated_rows_give_unit_rho_in_that_cluster() {
    let mut r = rng(4);
    let x = noise(80, 2, &mut r);
    let mut y = noise(80, 2, &mut r);
    let labels: Vec<usize> = (0..80).map(|i| i / 40).collect();
    for i in 0..40 {
        y.row_mut(i).assign(&x.row(i));
    }
    let per = cca_by_cluster(x.view(), y.view(), &labels, Ridge::Fixed(0.0)).unwrap();
    assert!((per[&0].correlations[0] - 1.0).abs() < 1e-9);
    assert!(per[&1].correlations[0] < 0.9);
    let whole = cca(x.view(), y.view(), Ridge::Fixed(0.0)).unwrap();
    assert!(whole.correlations[0] < 1.0 - 1e-6);
}

#[test]
fn distance_correlation_identity_and_unrelated() {
    let mut r = rng(5);
    let labels: Vec<usize> = (0..60).map(|i| i % 6).collect();
    let a = noise(60, 4, &mut r);
    assert!((distance_correlation(a.view(), a.view(), &labels).unwrap() - 1.0).abs() < 1e-12);
    // Unrelated vectors attached to the clusters: |r| small on average.
    let mut total = 0.0;
    let trials = 200;
    for _ in 0..trials {
        let b = noise(60, 4, &mut r);
        total += distance_correlation(a.view(), b.view(), &labels)
            .unwrap()
            .abs();
    }
    assert!(total / (trials as f64) < 0.35, "{}", total / trials as f64);
}

fn dataset(rows: &[(f64, f64, usize)], k: usize) -> Dataset {
    let x = Array2::from_shape_fn(
        (rows.len(), 2),
        |(i, j)| if j == 0 { rows[i].0 } else { rows[i].1 },
    );
    Dataset::new(
        x,
        rows.iter().map(|r| r.2).collect(),
        (0..k).map(|c| format!("c{c}")).collect(),
    )
    .unwrap()
}

fn doubled(d: &Dataset) -> Dataset {
    let x = concatenate(Axis(0), &[d.x.view(), d.x.view()]).unwrap();
    let y = d.y.iter().chain(&d.y).copied().collect();
    Dataset::new(x, y, d.class_names.clone()).unwrap()
}

fn arb_rows() -> impl Strategy<Value = Vec<(f64, f64, usize)>> {
    proptest::collection::vec((0u8..20, 0u8..20, 0usize..3), 6..30).prop_map(|v| {
        let mut rows: Vec<(f64, f64, usize)> = v
            .into_iter()
            .map(|(a, b, c)| (a as f64, b as f64, c))
            .collect();
        for c in 0..3 {
            rows[c].2 = c;
        }
        rows
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn duplicating_training_keeps_knn(rows in arb_rows(), k in 1usize..4, qx in 0u8..20, qy in 0u8..20) {
        let d = dataset(&rows, 3);
        let dd = doubled(&d);
        let q = ndarray::array![qx as f64, qy as f64];
        let (a, sa) = knn_classify(&d, q.view(), k).unwrap();
        let (b, sb) = knn_classify(&dd, q.view(), 2 * k).unwrap();
        prop_assert_eq!(a, b);
        for (x, y) in sa.iter().zip(&sb) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicating_training_keeps_tree(rows in arb_rows(), qx in 0u8..20, qy in 0u8..20) {
        let d = dataset(&rows, 3);
        let t1 = decision_tree_fit(&d, TreeParams::default());
        let t2 = decision_tree_fit(&doubled(&d), TreeParams::default());
        let q = ndarray::array![qx as f64, qy as f64];
        prop_assert_eq!(t1.predict_dist(q.view()), t2.predict_dist(q.view()));
    }

    #[test]
    fn ari_ignores_label_names(labels in proptest::collection::vec(0usize..4, 2..60), shift in 1usize..4) {
        let renamed: Vec<usize> = labels.iter().map(|l| (l + shift) % 4 + 10).collect();
        prop_assert!((adjusted_rand_index(&labels, &renamed) - 1.0).abs() < 1e-12);
    }
}
