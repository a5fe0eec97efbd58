//! Exact t-SNE projection to two dimensions.
//!
//! Affinities use per-point Gaussian bandwidths calibrated by bisection to a
//! target perplexity; the embedding minimizes KL(P || Q) under a Student-t
//! kernel with early exaggeration, momentum and per-coordinate gains. Cost is
//! O(n^2) per iteration; the pairwise force pass is row-parallel.

use std::collections::HashMap;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::cluster::squared_distance;
use crate::error::{AtlasError, Result};
use crate::par;

/// Bisection stops once the row entropy is this close to the target, in bits.
pub const ENTROPY_TOL: f64 = 1e-8;
pub const MAX_BISECTION_STEPS: usize = 50;
pub const P_FLOOR: f64 = 1e-12;
const INIT_SCALE: f64 = 1e-4;
const MIN_GAIN: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    /// Iterations run with exaggerated affinities and the initial momentum.
    pub exaggeration_iters: usize,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            seed: 0,
        }
    }
}

impl TsneConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if n < 4 {
            return Err(AtlasError::InvalidArgument(format!("t-SNE needs at least 4 points, got {n}")));
        }
        let max_perp = (n - 1) as f64 / 3.0;
        if !(self.perplexity > 0.0 && self.perplexity < max_perp) {
            return Err(AtlasError::InvalidArgument(format!(
                "perplexity {} must lie in (0, {max_perp:.3}) for {n} points",
                self.perplexity
            )));
        }
        if self.iterations < 250 {
            return Err(AtlasError::InvalidArgument(format!(
                "at least 250 iterations required, got {}",
                self.iterations
            )));
        }
        let positive = [
            self.learning_rate,
            self.early_exaggeration,
            self.initial_momentum,
            self.final_momentum,
        ];
        if positive.iter().any(|v| v.is_nan() || *v <= 0.0) {
            return Err(AtlasError::InvalidArgument("t-SNE rates must be positive".into()));
        }
        Ok(())
    }
}

fn pairwise_sq(x: &Array2<f64>) -> Vec<Vec<f64>> {
    par::map_range(x.nrows(), |i| {
        let xi = x.row(i);
        x.outer_iter().map(|xj| squared_distance(xi, xj)).collect()
    })
}

/// Shannon entropy of a discrete distribution, in bits.
pub fn entropy_bits(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.log2()).sum::<f64>()
}

/// Conditional distribution of one row for precision `beta`, plus its
/// entropy in bits. `d` holds squared distances with the self entry removed.
fn conditional_row(d: &[f64], beta: f64) -> (Vec<f64>, f64) {
    let dmin = d.iter().copied().fold(f64::INFINITY, f64::min);
    let mut p: Vec<f64> = d.iter().map(|&v| (-(v - dmin) * beta).exp()).collect();
    let z: f64 = p.iter().sum();
    let mut weighted = 0.0;
    for (pv, &dv) in p.iter_mut().zip(d) {
        *pv /= z;
        weighted += *pv * (dv - dmin);
    }
    let h_nats = z.ln() + beta * weighted;
    (p, h_nats / std::f64::consts::LN_2)
}

fn calibrate_row(d: &[f64], target_bits: f64) -> Vec<f64> {
    let dmin = d.iter().copied().fold(f64::INFINITY, f64::min);
    let spread = d.iter().map(|v| v - dmin).sum::<f64>() / d.len() as f64;
    let mut beta = if spread > 0.0 { 1.0 / spread } else { 1.0 };
    let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
    let (mut p, mut h) = conditional_row(d, beta);
    for _ in 0..MAX_BISECTION_STEPS {
        let diff = h - target_bits;
        if diff.abs() < ENTROPY_TOL {
            break;
        }
        if diff > 0.0 {
            lo = beta;
            beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = (beta + lo) / 2.0;
        }
        (p, h) = conditional_row(d, beta);
    }
    p
}

/// Row-conditional affinities `P(j|i)` (zero diagonal), each row calibrated
/// so its entropy is `log2(perplexity)`.
pub fn conditional_affinities(x: &Array2<f64>, perplexity: f64) -> Result<Array2<f64>> {
    let n = x.nrows();
    if n < 4 {
        return Err(AtlasError::InvalidArgument(format!("need at least 4 points, got {n}")));
    }
    if !(perplexity >= 1.0 && perplexity <= (n - 1) as f64) {
        return Err(AtlasError::InvalidArgument(format!(
            "perplexity {perplexity} outside [1, {}]",
            n - 1
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(AtlasError::InvalidArgument("non-finite input to t-SNE".into()));
    }
    let d = pairwise_sq(x);
    if d.iter().all(|row| row.iter().all(|&v| v == 0.0)) {
        return Err(AtlasError::Degenerate("all rows are identical".into()));
    }
    let target = perplexity.log2();
    let rep = first_occurrences(x);
    let rows = par::map_range(n, |i| {
        if rep[i] != i {
            return Vec::new();
        }
        let others: Vec<f64> = d[i].iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &v)| v).collect();
        calibrate_row(&others, target)
    });
    let mut cond = Array2::zeros((n, n));
    for (i, row) in rows.iter().enumerate().filter(|&(i, _)| rep[i] == i) {
        let mut it = row.iter();
        for j in (0..n).filter(|&j| j != i) {
            cond[[i, j]] = *it.next().expect("n-1 entries");
        }
    }
    // A repeated row reuses its first occurrence's distribution with the two
    // self slots exchanged, so both rows agree bit for bit.
    for i in (0..n).filter(|&i| rep[i] != i) {
        let r = rep[i];
        let src = cond.row(r).to_owned();
        let mut dst = cond.row_mut(i);
        dst.assign(&src);
        dst.swap(r, i);
    }
    Ok(cond)
}

/// Index of the first row bit-identical to each row (`-0.0` equals `0.0`).
fn first_occurrences(x: &Array2<f64>) -> Vec<usize> {
    let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
    x.outer_iter()
        .enumerate()
        .map(|(i, row)| {
            let key: Vec<u64> = row.iter().map(|v| (v + 0.0).to_bits()).collect();
            *seen.entry(key).or_insert(i)
        })
        .collect()
}

/// Symmetric joint affinities `(P(j|i) + P(i|j)) / 2n`, off-diagonal entries
/// floored at [`P_FLOOR`] and renormalized to sum to one.
pub fn calibrate_affinities(x: &Array2<f64>, perplexity: f64) -> Result<Array2<f64>> {
    let cond = conditional_affinities(x, perplexity)?;
    let n = cond.nrows();
    let mut p = (&cond + &cond.t()) / (2.0 * n as f64);
    for i in 0..n {
        for j in 0..n {
            if i != j && p[[i, j]] < P_FLOOR {
                p[[i, j]] = P_FLOOR;
            }
        }
    }
    let total = p.sum();
    p.mapv_inplace(|v| v / total);
    Ok(p)
}

fn kl_grad_scaled(p: &Array2<f64>, y: &Array2<f64>, exaggeration: f64) -> (f64, Array2<f64>) {
    let n = y.nrows();
    let kernel = |i: usize, j: usize| {
        let dx = y[[i, 0]] - y[[j, 0]];
        let dy = y[[i, 1]] - y[[j, 1]];
        1.0 / (1.0 + dx * dx + dy * dy)
    };
    let row_sums = par::map_range(n, |i| (0..n).filter(|&j| j != i).map(|j| kernel(i, j)).sum::<f64>());
    let z: f64 = row_sums.iter().sum();

    let rows = par::map_range(n, |i| {
        let (mut gx, mut gy, mut kl) = (0.0, 0.0, 0.0);
        for j in (0..n).filter(|&j| j != i) {
            let w = kernel(i, j);
            let q = w / z;
            let pij = p[[i, j]];
            if pij > 0.0 {
                kl += pij * (pij / q.max(f64::MIN_POSITIVE)).ln();
            }
            let f = (exaggeration * pij - q) * w;
            gx += f * (y[[i, 0]] - y[[j, 0]]);
            gy += f * (y[[i, 1]] - y[[j, 1]]);
        }
        (kl, 4.0 * gx, 4.0 * gy)
    });
    let mut grad = Array2::zeros((n, 2));
    let mut kl = 0.0;
    for (i, (k, gx, gy)) in rows.into_iter().enumerate() {
        kl += k;
        grad[[i, 0]] = gx;
        grad[[i, 1]] = gy;
    }
    (kl, grad)
}

/// KL(P || Q) of a 2D layout and its analytic gradient.
pub fn kl_and_gradient(p: &Array2<f64>, y: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    let n = y.nrows();
    if p.dim() != (n, n) || y.ncols() != 2 {
        return Err(AtlasError::InvalidArgument(format!(
            "affinity matrix {:?} does not match layout {:?}",
            p.dim(),
            y.dim()
        )));
    }
    Ok(kl_grad_scaled(p, y, 1.0))
}

/// Student-t joint affinities of a layout.
pub fn layout_affinities(y: &Array2<f64>) -> Array2<f64> {
    let n = y.nrows();
    let mut q = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            if i != j {
                q[[i, j]] = 1.0 / (1.0 + squared_distance(y.row(i), y.row(j)));
            }
        }
    }
    let z = q.sum();
    q / z
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsneRun {
    pub embedding: Array2<f64>,
    /// Unexaggerated KL after every iteration.
    pub kl_trace: Vec<f64>,
}

fn initial_layout(n: usize, seed: u64) -> Array2<f64> {
    let mut y = Array2::zeros((n, 2));
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let a: f64 = rng.sample(StandardNormal);
        let b: f64 = rng.sample(StandardNormal);
        y[[i, 0]] = a * INIT_SCALE;
        y[[i, 1]] = b * INIT_SCALE;
    }
    y
}

fn center(y: &mut Array2<f64>) {
    let mean = y.mean_axis(Axis(0)).expect("non-empty");
    *y -= &mean;
}

fn descend(x: &Array2<f64>, config: &TsneConfig) -> Result<TsneRun> {
    let n = x.nrows();
    config.validate(n)?;
    let p = calibrate_affinities(x, config.perplexity)?;
    let mut y = initial_layout(n, config.seed);
    // Repeated rows start where their first occurrence starts; with equal
    // affinities they then receive identical gradients throughout.
    for (i, r) in first_occurrences(x).into_iter().enumerate() {
        if r != i {
            let start = y.row(r).to_owned();
            y.row_mut(i).assign(&start);
        }
    }
    let mut update = Array2::<f64>::zeros((n, 2));
    let mut gains = Array2::<f64>::ones((n, 2));
    let mut trace = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let early = it < config.exaggeration_iters;
        let (exaggeration, momentum) = if early {
            (config.early_exaggeration, config.initial_momentum)
        } else {
            (1.0, config.final_momentum)
        };
        let (_, grad) = kl_grad_scaled(&p, &y, exaggeration);
        ndarray::Zip::from(&mut gains)
            .and(&grad)
            .and(&update)
            .for_each(|g, &dg, &u| {
                *g = if (dg > 0.0) != (u > 0.0) { *g + 0.2 } else { *g * 0.8 };
                if *g < MIN_GAIN {
                    *g = MIN_GAIN;
                }
            });
        ndarray::Zip::from(&mut update)
            .and(&gains)
            .and(&grad)
            .for_each(|u, &g, &dg| *u = momentum * *u - config.learning_rate * g * dg);
        y += &update;
        center(&mut y);
        trace.push(kl_grad_scaled(&p, &y, 1.0).0);
    }
    Ok(TsneRun {
        embedding: y,
        kl_trace: trace,
    })
}

/// Projects rows to 2D; initialization is keyed by row position.
pub fn tsne(x: &Array2<f64>, config: &TsneConfig) -> Result<Array2<f64>> {
    descend(x, config).map(|r| r.embedding)
}

/// Like [`tsne`], but rows are processed in the order of `keys` (which must
/// be unique), making the result independent of the input row order.
/// Also returns the per-iteration KL trace.
pub fn tsne_keyed<K: Ord>(x: &Array2<f64>, keys: &[K], config: &TsneConfig) -> Result<TsneRun> {
    if keys.len() != x.nrows() {
        return Err(AtlasError::InvalidArgument(format!("{} keys for {} rows", keys.len(), x.nrows())));
    }
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by(|&a, &b| keys[a].cmp(&keys[b]));
    if order.windows(2).any(|w| keys[w[0]] == keys[w[1]]) {
        return Err(AtlasError::InvalidArgument("t-SNE row keys must be unique".into()));
    }
    let canonical = x.select(Axis(0), &order);
    let run = descend(&canonical, config)?;
    let mut embedding = Array2::zeros((x.nrows(), 2));
    for (rank, &row) in order.iter().enumerate() {
        embedding.row_mut(row).assign(&run.embedding.row(rank));
    }
    Ok(TsneRun {
        embedding,
        kl_trace: run.kl_trace,
    })
}
