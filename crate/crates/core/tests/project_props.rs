mod common;

use ndarray::{Array2, Axis};
use proptest::prelude::*;
use rand::seq::SliceRandom;

use corpus_atlas_core::project::{self, calibrate_affinities, kl_and_gradient, tsne_keyed, TsneConfig};

fn small_config(seed: u64) -> TsneConfig {
    TsneConfig {
        perplexity: 10.0,
        iterations: 500,
        seed,
        ..TsneConfig::default()
    }
}

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("row{i:03}")).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn gradient_matches_finite_differences(seed in any::<u64>(), perp in 2.0f64..6.0) {
        let mut r = common::rng(seed);
        let x = common::gaussian_matrix(&mut r, 20, 4);
        let p = calibrate_affinities(&x, perp).unwrap();
        let y = common::gaussian_matrix(&mut r, 20, 2);
        let (_, g) = kl_and_gradient(&p, &y).unwrap();
        let scale = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let h = 1e-5;
        for i in 0..20 {
            for c in 0..2 {
                let mut a = y.clone();
                a[[i, c]] += h;
                let mut b = y.clone();
                b[[i, c]] -= h;
                let fd = (kl_and_gradient(&p, &a).unwrap().0 - kl_and_gradient(&p, &b).unwrap().0) / (2.0 * h);
                let denom = g[[i, c]].abs().max(fd.abs()).max(1e-3 * scale);
                prop_assert!((g[[i, c]] - fd).abs() / denom < 1e-4, "row {i} col {c}: {} vs {fd}", g[[i, c]]);
            }
        }
    }

    #[test]
    fn row_entropies_hit_the_perplexity(seed in any::<u64>(), perp in 2.0f64..15.0) {
        let x = common::gaussian_matrix(&mut common::rng(seed), 40, 3);
        let cond = project::conditional_affinities(&x, perp).unwrap();
        for row in cond.outer_iter() {
            let row = row.to_vec();
            prop_assert!((project::entropy_bits(&row) - perp.log2()).abs() <= 1e-5);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}

#[test]
fn two_blobs_stay_apart() {
    let mut r = common::rng(31);
    let mut far = vec![0.0; 10];
    far[0] = 12.0;
    let (x, truth) = common::blobs(&mut r, &[vec![0.0; 10], far], 50, 1.0);
    let y = tsne_keyed(&x, &ids(100), &small_config(3)).unwrap().embedding;
    // Nearest 2D blob centroid recovers the blob.
    let c0 = y.slice(ndarray::s![..50, ..]).mean_axis(Axis(0)).unwrap();
    let c1 = y.slice(ndarray::s![50.., ..]).mean_axis(Axis(0)).unwrap();
    let correct = (0..100)
        .filter(|&i| {
            let d0 = (&y.row(i) - &c0).mapv(|v| v * v).sum();
            let d1 = (&y.row(i) - &c1).mapv(|v| v * v).sum();
            (d1 < d0) as usize == truth[i]
        })
        .count();
    assert!(correct >= 95, "{correct}/100");
}

#[test]
fn duplicate_rows_land_together() {
    let mut r = common::rng(32);
    let mut x = common::gaussian_matrix(&mut r, 60, 5);
    let copy = x.row(7).to_owned();
    x.row_mut(40).assign(&copy);
    let keyed = tsne_keyed(&x, &ids(60), &small_config(4)).unwrap().embedding;
    let plain = project::tsne(&x, &small_config(4)).unwrap();
    for y in [keyed, plain] {
        let gap = ((y[[7, 0]] - y[[40, 0]]).powi(2) + (y[[7, 1]] - y[[40, 1]]).powi(2)).sqrt();
        assert!(gap <= 1e-3, "duplicates {gap} apart");
    }
}

#[test]
fn kl_mostly_decreases_after_exaggeration() {
    for seed in 0..3 {
        let x = common::gaussian_matrix(&mut common::rng(40 + seed), 80, 6);
        let cfg = small_config(seed);
        let run = tsne_keyed(&x, &ids(80), &cfg).unwrap();
        let tail = &run.kl_trace[cfg.exaggeration_iters..];
        let steps = tail.len() - 1;
        let down = tail.windows(2).filter(|w| w[1] <= w[0]).count();
        assert!(down as f64 >= 0.9 * steps as f64, "seed {seed}: {down}/{steps}");
        let y = &run.embedding;
        let means = y.mean_axis(Axis(0)).unwrap();
        assert!(means.iter().all(|m| m.abs() < 1e-9));
    }
}

#[test]
fn keyed_layout_ignores_row_order() {
    let mut r = common::rng(33);
    let x = common::gaussian_matrix(&mut r, 50, 4);
    let keys = ids(50);
    let base = tsne_keyed(&x, &keys, &small_config(9)).unwrap().embedding;
    let mut order: Vec<usize> = (0..50).collect();
    order.shuffle(&mut r);
    let xp = x.select(Axis(0), &order);
    let kp: Vec<String> = order.iter().map(|&i| keys[i].clone()).collect();
    let moved = tsne_keyed(&xp, &kp, &small_config(9)).unwrap().embedding;
    for (pos, &i) in order.iter().enumerate() {
        assert_eq!(moved.row(pos), base.row(i));
    }
}

#[test]
fn layout_is_deterministic() {
    let x = common::gaussian_matrix(&mut common::rng(34), 30, 3);
    let cfg = TsneConfig {
        perplexity: 5.0,
        ..small_config(1)
    };
    let a: Array2<f64> = project::tsne(&x, &cfg).unwrap();
    let b = project::tsne(&x, &cfg).unwrap();
    assert_eq!(a, b);
}
