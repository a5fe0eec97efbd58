//! Silhouette scoring and the silhouette-driven choice of the cluster count.
//!
//! Models are fitted on the training rows and scored on validation rows
//! labeled by their nearest centroid. Training WCSS is kept per k as an
//! elbow diagnostic only; it never influences the selection.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cluster::{self, KMeansModel, KMeansParams};
use crate::error::{AtlasError, Result};
use crate::par;

pub const DEFAULT_SUBSAMPLE_CAP: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Silhouette {
    pub mean: f64,
    pub samples: Vec<f64>,
}

/// Mean and per-sample silhouette with Euclidean distance. Samples in
/// singleton clusters score 0.
pub fn silhouette(x: &Array2<f64>, labels: &[usize]) -> Result<Silhouette> {
    let n = x.nrows();
    if labels.len() != n {
        return Err(AtlasError::InvalidArgument(format!("{} labels for {n} rows", labels.len())));
    }
    if n < 3 {
        return Err(AtlasError::InvalidArgument(format!("silhouette needs at least 3 samples, got {n}")));
    }
    let mut dense: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        let next = dense.len();
        dense.entry(l).or_insert(next);
    }
    if dense.len() < 2 {
        return Err(AtlasError::Degenerate("silhouette needs at least 2 clusters".into()));
    }
    let k = dense.len();
    let ids: Vec<usize> = labels.iter().map(|l| dense[l]).collect();
    let mut sizes = vec![0usize; k];
    for &c in &ids {
        sizes[c] += 1;
    }

    let samples = par::map_range(n, |i| {
        let own = ids[i];
        if sizes[own] == 1 {
            return 0.0;
        }
        let xi = x.row(i);
        let mut sums = vec![0.0f64; k];
        for (j, xj) in x.outer_iter().enumerate() {
            if j != i {
                sums[ids[j]] += cluster::squared_distance(xi, xj).sqrt();
            }
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            (b - a) / denom
        } else {
            0.0
        }
    });
    let mean = samples.iter().sum::<f64>() / n as f64;
    Ok(Silhouette { mean, samples })
}

/// Silhouette on at most `cap` rows drawn without replacement under `seed`;
/// the full set is used below the cap.
pub fn silhouette_capped(x: &Array2<f64>, labels: &[usize], cap: usize, seed: u64) -> Result<Silhouette> {
    match subsample_indices(x.nrows(), cap, seed) {
        None => silhouette(x, labels),
        Some(idx) => {
            let sub = x.select(Axis(0), &idx);
            let sub_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            silhouette(&sub, &sub_labels)
        }
    }
}

/// Sorted row subset of size `cap`, or `None` when `n <= cap`.
pub fn subsample_indices(n: usize, cap: usize, seed: u64) -> Option<Vec<usize>> {
    if n <= cap {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = index::sample(&mut rng, n, cap).into_vec();
    idx.sort_unstable();
    Some(idx)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub k_values: Vec<usize>,
    pub kmeans: KMeansParams,
    pub subsample_cap: usize,
    pub keep_models: bool,
}

impl SweepConfig {
    pub fn new(k_values: impl IntoIterator<Item = usize>, seed: u64) -> Self {
        SweepConfig {
            k_values: k_values.into_iter().collect(),
            kmeans: KMeansParams::new(2).with_seed(seed),
            subsample_cap: DEFAULT_SUBSAMPLE_CAP,
            keep_models: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkippedK {
    pub k: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub k_values: Vec<usize>,
    pub silhouette_val: Vec<f64>,
    pub wcss_train: Vec<f64>,
    pub best_k: usize,
    pub per_k_models: Option<Vec<KMeansModel>>,
    pub skipped: Vec<SkippedK>,
}

enum Outcome {
    Scored(f64, KMeansModel),
    Skipped(String),
}

/// Fits every candidate k on `x_train` and scores it on `x_val`.
pub fn sweep(x_train: &Array2<f64>, x_val: &Array2<f64>, config: &SweepConfig) -> Result<SweepResult> {
    if x_train.ncols() != x_val.ncols() {
        return Err(AtlasError::DimensionMismatch {
            expected: x_train.ncols(),
            actual: x_val.ncols(),
        });
    }
    if config.k_values.is_empty() {
        return Err(AtlasError::Empty("no candidate k values".into()));
    }
    let seed = config.kmeans.seed;
    let sub = subsample_indices(x_val.nrows(), config.subsample_cap, seed);
    let x_score = match &sub {
        Some(idx) => x_val.select(Axis(0), idx),
        None => x_val.clone(),
    };

    let outcomes = par::map_slice(&config.k_values, |&k| -> Result<Outcome> {
        if k < 2 {
            return Ok(Outcome::Skipped("k below 2".into()));
        }
        if k > x_train.nrows() {
            return Ok(Outcome::Skipped(format!("k exceeds the {} training rows", x_train.nrows())));
        }
        let params = KMeansParams { k, ..config.kmeans };
        let model = cluster::fit(x_train, &params)?;
        let labels = cluster::predict(&model, &x_score)?;
        match silhouette(&x_score, &labels) {
            Ok(s) => Ok(Outcome::Scored(s.mean, model)),
            Err(AtlasError::Degenerate(msg)) | Err(AtlasError::InvalidArgument(msg)) => {
                Ok(Outcome::Skipped(format!("validation silhouette undefined: {msg}")))
            }
            Err(e) => Err(e),
        }
    });

    let mut k_values = Vec::new();
    let mut silhouette_val = Vec::new();
    let mut wcss_train = Vec::new();
    let mut models = Vec::new();
    let mut skipped = Vec::new();
    for (&k, outcome) in config.k_values.iter().zip(outcomes) {
        match outcome? {
            Outcome::Scored(s, model) => {
                k_values.push(k);
                silhouette_val.push(s);
                wcss_train.push(model.wcss);
                models.push(model);
            }
            Outcome::Skipped(reason) => {
                log::warn!("sweep: skipping k={k}: {reason}");
                skipped.push(SkippedK { k, reason });
            }
        }
    }
    let best_k = best_of(&k_values, &silhouette_val)?;
    Ok(SweepResult {
        k_values,
        silhouette_val,
        wcss_train,
        best_k,
        per_k_models: config.keep_models.then_some(models),
        skipped,
    })
}

fn best_of(k_values: &[usize], scores: &[f64]) -> Result<usize> {
    if k_values.is_empty() || k_values.len() != scores.len() {
        return Err(AtlasError::Empty("sweep produced no scored k".into()));
    }
    let mut best = 0;
    for i in 1..scores.len() {
        let better = scores[i] > scores[best] || (scores[i] == scores[best] && k_values[i] < k_values[best]);
        if better {
            best = i;
        }
    }
    Ok(k_values[best])
}

/// Highest validation silhouette, smaller k on ties.
pub fn select_best(sweep: &SweepResult) -> Result<usize> {
    best_of(&sweep.k_values, &sweep.silhouette_val)
}

impl SweepResult {
    /// `k,silhouette_val,wcss_train` rows in k order.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("k,silhouette_val,wcss_train\n");
        for ((k, sil), w) in self.k_values.iter().zip(&self.silhouette_val).zip(&self.wcss_train) {
            let _ = writeln!(s, "{k},{sil},{w}");
        }
        s
    }

    /// Plot data for the silhouette curve: one `curve` row per k and a final
    /// `best` marker row.
    pub fn plot_csv(&self) -> String {
        let mut s = String::from("series,k,silhouette_val\n");
        for (k, sil) in self.k_values.iter().zip(&self.silhouette_val) {
            let _ = writeln!(s, "curve,{k},{sil}");
        }
        if let Some(i) = self.k_values.iter().position(|&k| k == self.best_k) {
            let _ = writeln!(s, "best,{},{}", self.best_k, self.silhouette_val[i]);
        }
        s
    }

    pub fn write(&self, csv_path: impl AsRef<Path>, plot_path: impl AsRef<Path>) -> Result<()> {
        let (c, p) = (csv_path.as_ref(), plot_path.as_ref());
        fs::write(c, self.to_csv()).map_err(|e| AtlasError::io(c, e))?;
        fs::write(p, self.plot_csv()).map_err(|e| AtlasError::io(p, e))
    }
}
