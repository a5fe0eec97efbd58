mod common;

use ndarray::Array2;
use proptest::prelude::*;

use corpus_atlas_core::cluster::{self, kmeanspp_init, KMeansParams};

fn small() -> impl Strategy<Value = (Array2<f64>, usize)> {
    (4usize..=9, 1usize..=3, 2usize..=3).prop_flat_map(|(n, d, k)| {
        prop::collection::vec(-5.0f64..5.0, n * d).prop_map(move |v| (Array2::from_shape_vec((n, d), v).unwrap(), k))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn toy_instances_reach_the_global_optimum((x, k) in small(), seed in any::<u64>()) {
        let params = KMeansParams::new(k).with_seed(seed).with_n_init(50);
        let (model, labels) = cluster::fit_with_labels(&x, &params).unwrap();
        let opt = common::brute_kmeans_optimum(&x, k);
        prop_assert!((model.wcss - opt).abs() <= 1e-9, "{} vs {opt}", model.wcss);
        for w in model.wcss_trace.windows(2) {
            prop_assert!(w[1] <= w[0]);
        }
        prop_assert_eq!(cluster::predict(&model, &x).unwrap(), labels);
        let again = cluster::fit(&x, &params).unwrap();
        prop_assert_eq!(again, model);
    }
}

#[test]
fn traces_never_rise_on_larger_data() {
    let mut r = common::rng(5);
    for trial in 0..20 {
        let x = common::gaussian_matrix(&mut r, 300, 4);
        for k in [2, 5, 12] {
            let init = kmeanspp_init(&x, k, trial).unwrap();
            let run = cluster::lloyd(&x, init, 300, 0.0);
            assert!(run.wcss_trace.windows(2).all(|w| w[1] <= w[0]), "{:?}", run.wcss_trace);
            assert_eq!(run.labels, cluster::assign(&x, &run.centroids).0);
        }
    }
}

/// The first k-means++ pick is uniform over rows: chi-square goodness of fit
/// over 10,000 seeds, 4 degrees of freedom, 1% critical value.
#[test]
fn first_seed_pick_is_uniform() {
    let n = 5;
    let x = Array2::from_shape_fn((n, 2), |(i, j)| (i * i + 3 * j) as f64);
    let draws = 10_000;
    let mut counts = vec![0usize; n];
    for seed in 0..draws {
        let c = kmeanspp_init(&x, 1, seed as u64).unwrap();
        let row = (0..n).find(|&i| x.row(i) == c.row(0)).unwrap();
        counts[row] += 1;
    }
    let expected = draws as f64 / n as f64;
    let chi2: f64 = counts.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
    assert!(chi2 < 13.277, "chi-square {chi2} for {counts:?}");
}

/// Later picks favour far points: with one far outlier the second centroid
/// lands on it almost always.
#[test]
fn second_pick_prefers_distant_rows() {
    let mut x = Array2::zeros((11, 1));
    for i in 0..10 {
        x[[i, 0]] = i as f64 * 0.01;
    }
    x[[10, 0]] = 100.0;
    let hits = (0..500u64)
        .filter(|&s| {
            let c = kmeanspp_init(&x, 2, s).unwrap();
            c[[0, 0]] == 100.0 || c[[1, 0]] == 100.0
        })
        .count();
    assert!(hits >= 495, "{hits}");
}

/// No pair of seed rows leads plain Lloyd to the optimum here (the best it
/// reaches is 60.775); the transfer refinement gets there from several.
#[test]
fn transfer_refinement_escapes_lloyd_fixed_point() {
    let x = ndarray::array![
        [3.004572575061561, -3.176177616591428, 4.275585867372525],
        [4.192597287157137, 1.1778275650973837, 2.2978730234056113],
        [-0.05460692633748385, -1.9990838047529538, -1.5693003887959316],
        [-3.0686642164017406, 2.8428728752177372, 2.3869079608319534],
        [0.22098089473161664, 0.402771866955348, 3.4577629291009018],
        [2.7039863292368973, 2.8302328007932562, 0.032373580367622556]
    ];
    let opt = common::brute_kmeans_optimum(&x, 2);
    let init = ndarray::array![
        [3.004572575061561, -3.176177616591428, 4.275585867372525],
        [-0.05460692633748385, -1.9990838047529538, -1.5693003887959316]
    ];
    let run = cluster::lloyd(&x, init, 300, 1e-4);
    assert!((run.wcss - opt).abs() < 1e-9, "{} vs {opt}", run.wcss);
    let model = cluster::fit(&x, &KMeansParams::new(2).with_n_init(50).with_seed(15233970255711173229)).unwrap();
    assert!((model.wcss - opt).abs() < 1e-9);
}
