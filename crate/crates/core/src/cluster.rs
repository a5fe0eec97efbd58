//! K-Means: k-means++ seeding, Lloyd iterations and seeded restarts.
//!
//! Assignment is computed row-parallel; centroid sums always accumulate in
//! row order, so a fit is bit-identical for a given seed regardless of the
//! thread count.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AtlasError, Result};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansParams {
    pub k: usize,
    pub seed: u64,
    pub n_init: usize,
    pub max_iter: usize,
    /// Stop once the relative WCSS improvement of a Lloyd step drops to this.
    pub rel_tol: f64,
}

impl KMeansParams {
    pub fn new(k: usize) -> Self {
        KMeansParams {
            k,
            seed: 0,
            n_init: 10,
            max_iter: 300,
            rel_tol: 1e-4,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_n_init(mut self, n_init: usize) -> Self {
        self.n_init = n_init;
        self
    }

    pub fn with_max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }

    pub fn with_rel_tol(mut self, rel_tol: f64) -> Self {
        self.rel_tol = rel_tol;
        self
    }

    fn validate(&self, n: usize) -> Result<()> {
        if self.k < 2 {
            return Err(AtlasError::InvalidArgument(format!("k must be at least 2, got {}", self.k)));
        }
        if self.k > n {
            return Err(AtlasError::InvalidArgument(format!("k={} exceeds the {n} available rows", self.k)));
        }
        if self.n_init == 0 || self.max_iter == 0 {
            return Err(AtlasError::InvalidArgument("n_init and max_iter must be positive".into()));
        }
        if self.rel_tol.is_nan() || self.rel_tol < 0.0 {
            return Err(AtlasError::InvalidArgument(format!("invalid rel_tol {}", self.rel_tol)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "RawModel", try_from = "RawModel")]
pub struct KMeansModel {
    pub centroids: Array2<f64>,
    pub k: usize,
    pub wcss: f64,
    pub iterations: usize,
    pub seed: u64,
    pub n_init: usize,
    /// WCSS after every assignment step of the winning restart.
    pub wcss_trace: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawModel {
    k: usize,
    dim: usize,
    wcss: f64,
    iterations: usize,
    seed: u64,
    n_init: usize,
    wcss_trace: Vec<f64>,
    centroids: Vec<Vec<f64>>,
}

impl From<KMeansModel> for RawModel {
    fn from(m: KMeansModel) -> Self {
        RawModel {
            k: m.k,
            dim: m.centroids.ncols(),
            wcss: m.wcss,
            iterations: m.iterations,
            seed: m.seed,
            n_init: m.n_init,
            wcss_trace: m.wcss_trace,
            centroids: m.centroids.outer_iter().map(|r| r.to_vec()).collect(),
        }
    }
}

impl TryFrom<RawModel> for KMeansModel {
    type Error = String;

    fn try_from(r: RawModel) -> std::result::Result<Self, String> {
        if r.centroids.len() != r.k || r.centroids.iter().any(|c| c.len() != r.dim) {
            return Err("centroid table does not match k x dim".into());
        }
        let centroids = Array2::from_shape_vec((r.k, r.dim), r.centroids.concat()).map_err(|e| e.to_string())?;
        Ok(KMeansModel {
            centroids,
            k: r.k,
            wcss: r.wcss,
            iterations: r.iterations,
            seed: r.seed,
            n_init: r.n_init,
            wcss_trace: r.wcss_trace,
        })
    }
}

impl KMeansModel {
    pub fn dim(&self) -> usize {
        self.centroids.ncols()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self).map_err(|e| AtlasError::format(path, e.to_string()))?;
        fs::write(path, text).map_err(|e| AtlasError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| AtlasError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| AtlasError::format(path, e.to_string()))
    }
}

#[inline]
pub fn squared_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid and its squared distance; ties go to the lower index.
#[inline]
fn nearest(row: ArrayView1<f64>, centroids: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.outer_iter().enumerate() {
        let d = squared_distance(row, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Labels and squared distances of every row to its nearest centroid.
pub fn assign(x: &Array2<f64>, centroids: &Array2<f64>) -> (Vec<usize>, Vec<f64>) {
    let pairs = par::map_range(x.nrows(), |i| nearest(x.row(i), centroids));
    pairs.into_iter().unzip()
}

fn check_finite(x: &Array2<f64>) -> Result<()> {
    let d = x.ncols().max(1);
    match x.iter().position(|v| !v.is_finite()) {
        Some(p) => Err(AtlasError::NonFinite { row: p / d, col: p % d }),
        None => Ok(()),
    }
}

fn restart_rng(seed: u64, restart: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(restart);
    rng
}

fn kmeanspp_with_rng<R: Rng>(x: &Array2<f64>, k: usize, rng: &mut R) -> Array2<f64> {
    let n = x.nrows();
    let mut chosen = Vec::with_capacity(k);
    chosen.push(rng.random_range(0..n));
    let mut d2: Vec<f64> = par::map_range(n, |i| squared_distance(x.row(i), x.row(chosen[0])));
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                acc += w;
                pick = Some(i);
                if acc > target {
                    break;
                }
            }
            pick.expect("positive total weight")
        } else {
            // Every remaining row duplicates a chosen one.
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
        let c = x.row(next);
        let fresh = par::map_range(n, |i| squared_distance(x.row(i), c));
        for (d, f) in d2.iter_mut().zip(fresh) {
            if f < *d {
                *d = f;
            }
        }
    }
    let mut out = Array2::zeros((k, x.ncols()));
    for (j, &i) in chosen.iter().enumerate() {
        out.row_mut(j).assign(&x.row(i));
    }
    out
}

/// k-means++ seeding: first centroid uniform, each further one drawn with
/// probability proportional to the squared distance to the closest chosen
/// centroid.
pub fn kmeanspp_init(x: &Array2<f64>, k: usize, seed: u64) -> Result<Array2<f64>> {
    if k == 0 || k > x.nrows() {
        return Err(AtlasError::InvalidArgument(format!(
            "cannot seed {k} centroids from {} rows",
            x.nrows()
        )));
    }
    check_finite(x)?;
    Ok(kmeanspp_with_rng(x, k, &mut restart_rng(seed, 0)))
}

/// Assignment means; empty clusters are moved onto the point farthest from
/// its own centroid.
fn update_centroids(x: &Array2<f64>, labels: &[usize], k: usize) -> Array2<f64> {
    let d = x.ncols();
    let mut sums = Array2::<f64>::zeros((k, d));
    let mut counts = vec![0usize; k];
    for (row, &l) in x.outer_iter().zip(labels) {
        let mut s = sums.row_mut(l);
        s += &row;
        counts[l] += 1;
    }
    for (j, &c) in counts.iter().enumerate() {
        if c > 0 {
            sums.row_mut(j).mapv_inplace(|v| v / c as f64);
        }
    }
    if counts.contains(&0) {
        let mut dist: Vec<f64> = par::map_range(x.nrows(), |i| squared_distance(x.row(i), sums.row(labels[i])));
        for j in (0..k).filter(|&j| counts[j] == 0) {
            let mut far = 0;
            for i in 1..dist.len() {
                if dist[i] > dist[far] {
                    far = i;
                }
            }
            sums.row_mut(j).assign(&x.row(far));
            dist[far] = f64::NEG_INFINITY;
        }
    }
    sums
}

/// Outcome of one Lloyd run from fixed initial centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct LloydRun {
    pub centroids: Array2<f64>,
    pub labels: Vec<usize>,
    pub wcss: f64,
    pub iterations: usize,
    pub wcss_trace: Vec<f64>,
}

struct Phase {
    centroids: Array2<f64>,
    labels: Vec<usize>,
    wcss: f64,
    steps: usize,
}

/// Plain Lloyd steps from `centroids`, appending every post-assignment WCSS
/// to `trace`.
fn lloyd_phase(x: &Array2<f64>, centroids: Array2<f64>, budget: usize, rel_tol: f64, trace: &mut Vec<f64>) -> Phase {
    let k = centroids.nrows();
    let mut centroids = centroids;
    let (mut labels, dist) = assign(x, &centroids);
    let mut wcss: f64 = dist.iter().sum();
    trace.push(wcss);
    let mut steps = 0;
    while steps < budget && wcss > 0.0 {
        let next = update_centroids(x, &labels, k);
        let (next_labels, dist) = assign(x, &next);
        let next_wcss: f64 = dist.iter().sum();
        steps += 1;
        trace.push(next_wcss);
        let stable = next_labels == labels;
        let improvement = wcss - next_wcss;
        let prev = wcss;
        centroids = next;
        labels = next_labels;
        wcss = next_wcss;
        if stable || improvement < rel_tol * prev {
            break;
        }
    }
    Phase {
        centroids,
        labels,
        wcss,
        steps,
    }
}

/// One sweep of single-point transfers in row order: a point moves to the
/// cluster that lowers the partition WCSS most, with centroids kept exact
/// after every move. Returns the new labels if anything moved.
fn transfer_pass(x: &Array2<f64>, labels: &[usize], k: usize) -> Option<Vec<usize>> {
    let d = x.ncols();
    let mut sums = Array2::<f64>::zeros((k, d));
    let mut counts = vec![0usize; k];
    for (row, &l) in x.outer_iter().zip(labels) {
        let mut s = sums.row_mut(l);
        s += &row;
        counts[l] += 1;
    }
    let mut labels = labels.to_vec();
    let mut moved = false;
    let sq_to_mean = |sums: &Array2<f64>, c: usize, n: usize, row: ArrayView1<f64>| -> f64 {
        row.iter()
            .zip(sums.row(c))
            .map(|(&v, &s)| {
                let t = v - s / n as f64;
                t * t
            })
            .sum()
    };
    for (i, row) in x.outer_iter().enumerate() {
        let a = labels[i];
        let na = counts[a];
        if na <= 1 {
            continue;
        }
        let cost_out = na as f64 / (na - 1) as f64 * sq_to_mean(&sums, a, na, row);
        let mut best: Option<(usize, f64)> = None;
        for b in (0..k).filter(|&b| b != a) {
            let nb = counts[b];
            let cost_in = if nb == 0 {
                0.0
            } else {
                nb as f64 / (nb + 1) as f64 * sq_to_mean(&sums, b, nb, row)
            };
            let gain = cost_out - cost_in;
            if gain > 1e-12 * cost_out && best.is_none_or(|(_, g)| gain > g) {
                best = Some((b, gain));
            }
        }
        if let Some((b, _)) = best {
            let mut sa = sums.row_mut(a);
            sa -= &row;
            let mut sb = sums.row_mut(b);
            sb += &row;
            counts[a] -= 1;
            counts[b] += 1;
            labels[i] = b;
            moved = true;
        }
    }
    moved.then_some(labels)
}

/// Lloyd iterations until the assignment is stable, the relative WCSS
/// improvement drops below `rel_tol`, or `max_iter` steps have run. Each
/// converged assignment is then polished with single-point transfers; if any
/// point moves, Lloyd resumes from the new means. Transfers only ever lower
/// the WCSS, and they reach partitions that Lloyd alone can get stuck short
/// of. Every transfer pass counts as one iteration.
pub fn lloyd(x: &Array2<f64>, init: Array2<f64>, max_iter: usize, rel_tol: f64) -> LloydRun {
    let k = init.nrows();
    let mut trace = Vec::new();
    let mut phase = lloyd_phase(x, init, max_iter, rel_tol, &mut trace);
    let mut iterations = phase.steps;
    while iterations < max_iter && phase.wcss > 0.0 {
        let Some(refined) = transfer_pass(x, &phase.labels, k) else {
            break;
        };
        iterations += 1;
        let centroids = update_centroids(x, &refined, k);
        phase = lloyd_phase(x, centroids, max_iter - iterations, rel_tol, &mut trace);
        iterations += phase.steps;
    }
    LloydRun {
        centroids: phase.centroids,
        labels: phase.labels,
        wcss: phase.wcss,
        iterations,
        wcss_trace: trace,
    }
}

/// Runs `n_init` seeded restarts and keeps the lowest final WCSS (earliest
/// restart on ties). Also returns the winning run's training labels.
pub fn fit_with_labels(x: &Array2<f64>, params: &KMeansParams) -> Result<(KMeansModel, Vec<usize>)> {
    params.validate(x.nrows())?;
    check_finite(x)?;
    let runs = par::map_range(params.n_init, |r| {
        let init = kmeanspp_with_rng(x, params.k, &mut restart_rng(params.seed, r as u64));
        lloyd(x, init, params.max_iter, params.rel_tol)
    });
    let mut best = 0;
    for (i, run) in runs.iter().enumerate() {
        if run.wcss < runs[best].wcss {
            best = i;
        }
    }
    let run = runs.into_iter().nth(best).expect("n_init >= 1");
    let model = KMeansModel {
        centroids: run.centroids,
        k: params.k,
        wcss: run.wcss,
        iterations: run.iterations,
        seed: params.seed,
        n_init: params.n_init,
        wcss_trace: run.wcss_trace,
    };
    Ok((model, run.labels))
}

pub fn fit(x: &Array2<f64>, params: &KMeansParams) -> Result<KMeansModel> {
    fit_with_labels(x, params).map(|(m, _)| m)
}

fn check_dim(model: &KMeansModel, x: &Array2<f64>) -> Result<()> {
    if x.ncols() != model.dim() {
        return Err(AtlasError::DimensionMismatch {
            expected: model.dim(),
            actual: x.ncols(),
        });
    }
    Ok(())
}

/// Nearest-centroid labels, ties to the lower index.
pub fn predict(model: &KMeansModel, x: &Array2<f64>) -> Result<Vec<usize>> {
    check_dim(model, x)?;
    Ok(assign(x, &model.centroids).0)
}

/// Sum of squared distances of each row to its nearest centroid.
pub fn wcss(model: &KMeansModel, x: &Array2<f64>) -> Result<f64> {
    check_dim(model, x)?;
    Ok(assign(x, &model.centroids).1.iter().sum())
}
