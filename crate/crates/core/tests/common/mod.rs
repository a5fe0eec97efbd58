//! Independent reference implementations used as test oracles, plus data
//! generators. Nothing here calls into the library's numeric kernels.
#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| rng.random_range(-scale..scale))
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| rng.sample::<f64, _>(StandardNormal))
}

/// `per` points around each center with isotropic noise `sigma`; rows are
/// grouped by blob.
pub fn blobs(rng: &mut ChaCha8Rng, centers: &[Vec<f64>], per: usize, sigma: f64) -> (Array2<f64>, Vec<usize>) {
    let d = centers[0].len();
    let mut x = Array2::zeros((centers.len() * per, d));
    let mut labels = Vec::new();
    for (c, center) in centers.iter().enumerate() {
        for p in 0..per {
            let i = c * per + p;
            for j in 0..d {
                let z: f64 = rng.sample(StandardNormal);
                x[[i, j]] = center[j] + sigma * z;
            }
            labels.push(c);
        }
    }
    (x, labels)
}

fn dist(x: &Array2<f64>, i: usize, j: usize) -> f64 {
    let mut s = 0.0;
    for c in 0..x.ncols() {
        let t = x[[i, c]] - x[[j, c]];
        s += t * t;
    }
    s.sqrt()
}

/// Textbook O(n^2) silhouette: per-sample values and their mean.
pub fn brute_silhouette(x: &Array2<f64>, labels: &[usize]) -> (f64, Vec<f64>) {
    let n = x.nrows();
    let mut clusters: Vec<usize> = labels.to_vec();
    clusters.sort_unstable();
    clusters.dedup();
    let mut s = vec![0.0; n];
    for i in 0..n {
        let own = labels[i];
        let own_size = labels.iter().filter(|&&l| l == own).count();
        if own_size == 1 {
            continue;
        }
        let mut a = 0.0;
        for (j, &l) in labels.iter().enumerate() {
            if j != i && l == own {
                a += dist(x, i, j);
            }
        }
        a /= (own_size - 1) as f64;
        let mut b = f64::INFINITY;
        for &c in clusters.iter().filter(|&&c| c != own) {
            let mut sum = 0.0;
            let mut cnt = 0;
            for (j, &l) in labels.iter().enumerate() {
                if l == c {
                    sum += dist(x, i, j);
                    cnt += 1;
                }
            }
            b = b.min(sum / cnt as f64);
        }
        let m = a.max(b);
        s[i] = if m > 0.0 { (b - a) / m } else { 0.0 };
    }
    (s.iter().sum::<f64>() / n as f64, s)
}

/// WCSS of a labeling using each cluster's own mean.
pub fn partition_wcss(x: &Array2<f64>, labels: &[usize], k: usize) -> f64 {
    let d = x.ncols();
    let mut total = 0.0;
    for c in 0..k {
        let members: Vec<usize> = (0..x.nrows()).filter(|&i| labels[i] == c).collect();
        if members.is_empty() {
            continue;
        }
        for j in 0..d {
            let mean = members.iter().map(|&i| x[[i, j]]).sum::<f64>() / members.len() as f64;
            total += members.iter().map(|&i| (x[[i, j]] - mean).powi(2)).sum::<f64>();
        }
    }
    total
}

/// Global minimum WCSS over every partition into exactly `k` non-empty
/// clusters, by exhaustive enumeration.
pub fn brute_kmeans_optimum(x: &Array2<f64>, k: usize) -> f64 {
    let n = x.nrows();
    let mut labels = vec![0usize; n];
    let mut best = f64::INFINITY;
    loop {
        let mut used = vec![false; k];
        for &l in &labels {
            used[l] = true;
        }
        if used.iter().all(|&u| u) {
            best = best.min(partition_wcss(x, &labels, k));
        }
        let mut pos = 0;
        loop {
            if pos == n {
                return best;
            }
            labels[pos] += 1;
            if labels[pos] < k {
                break;
            }
            labels[pos] = 0;
            pos += 1;
        }
    }
}

/// Cyclic Jacobi eigenvalues of a symmetric matrix, descending.
pub fn jacobi_eigenvalues(a: &Array2<f64>) -> Vec<f64> {
    let n = a.nrows();
    let mut m = a.clone();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[[i, j]] * m[[i, j]])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[[p, q]].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * m[[p, q]]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for r in 0..n {
                    let (mrp, mrq) = (m[[r, p]], m[[r, q]]);
                    m[[r, p]] = c * mrp - s * mrq;
                    m[[r, q]] = s * mrp + c * mrq;
                }
                for r in 0..n {
                    let (mpr, mqr) = (m[[p, r]], m[[q, r]]);
                    m[[p, r]] = c * mpr - s * mqr;
                    m[[q, r]] = s * mpr + c * mqr;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| m[[i, i]]).collect();
    ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
    ev
}

/// Sample covariance with an n-1 denominator.
pub fn covariance(x: &Array2<f64>) -> Array2<f64> {
    let (n, d) = x.dim();
    let means: Vec<f64> = (0..d).map(|j| (0..n).map(|i| x[[i, j]]).sum::<f64>() / n as f64).collect();
    Array2::from_shape_fn((d, d), |(a, b)| {
        (0..n).map(|i| (x[[i, a]] - means[a]) * (x[[i, b]] - means[b])).sum::<f64>() / (n - 1) as f64
    })
}

/// Cumulative explained-variance fractions from the eigenvalue oracle.
pub fn eigen_curve(x: &Array2<f64>) -> Vec<f64> {
    let ev: Vec<f64> = jacobi_eigenvalues(&covariance(x)).into_iter().map(|v| v.max(0.0)).collect();
    let total: f64 = ev.iter().sum();
    let mut acc = 0.0;
    ev.iter()
        .map(|v| {
            acc += v;
            acc / total
        })
        .collect()
}

/// Pair-counting Rand agreement for a contingency table, computed from
/// scratch (used to cross-check the library's ARI).
pub fn brute_ari(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len();
    let (mut both, mut sa, mut sb) = (0u64, 0u64, 0u64);
    for i in 0..n {
        for j in i + 1..n {
            let ea = a[i] == a[j];
            let eb = b[i] == b[j];
            both += (ea && eb) as u64;
            sa += ea as u64;
            sb += eb as u64;
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;
    let expected = sa as f64 * sb as f64 / pairs;
    let max = (sa + sb) as f64 / 2.0;
    if max == expected {
        return 1.0;
    }
    (both as f64 - expected) / (max - expected)
}
