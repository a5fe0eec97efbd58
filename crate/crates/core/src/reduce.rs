//! PCA with a variance-retention target.
//!
//! Principal axes come from a symmetric eigen-decomposition of the scatter
//! matrix of the column-centered data. nalgebra's bidiagonal SVD lost about
//! 1e-7 relative accuracy on some small rank-deficient inputs; the
//! eigen-solver does not. Each
//! component's sign is fixed so that its largest-magnitude coordinate is
//! positive, which makes fitted models reproducible bit for bit.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, Axis};
use serde::Deserialize;

use crate::error::{AtlasError, Result};

/// Slack allowed when comparing a cumulative ratio against the target.
const TARGET_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Array1<f64>,
    /// `m x d`, orthonormal rows ordered by decreasing explained variance.
    pub components: Array2<f64>,
    pub explained_ratio: Vec<f64>,
    /// Sample variance (n-1 denominator) along each retained component.
    pub explained_variance: Vec<f64>,
    pub variance_target: f64,
    pub n_fit: usize,
}

impl PcaModel {
    pub fn n_components(&self) -> usize {
        self.components.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.mean.len()
    }

    /// Maps reduced coordinates back to the original space.
    pub fn inverse_transform(&self, z: &Array2<f64>) -> Result<Array2<f64>> {
        if z.ncols() != self.n_components() {
            return Err(AtlasError::DimensionMismatch {
                expected: self.n_components(),
                actual: z.ncols(),
            });
        }
        Ok(z.dot(&self.components) + &self.mean)
    }

    /// JSON with every number written to 17 significant digits.
    pub fn to_json(&self) -> String {
        fn num(v: f64) -> String {
            format!("{v:.16e}")
        }
        fn list(v: impl IntoIterator<Item = f64>) -> String {
            let items: Vec<String> = v.into_iter().map(num).collect();
            format!("[{}]", items.join(","))
        }
        let mut s = String::new();
        let _ = write!(
            s,
            "{{\"d\":{},\"m\":{},\"n_fit\":{},\"variance_target\":{},",
            self.n_features(),
            self.n_components(),
            self.n_fit,
            num(self.variance_target)
        );
        let _ = write!(s, "\"mean\":{},", list(self.mean.iter().copied()));
        let _ = write!(s, "\"explained_ratio\":{},", list(self.explained_ratio.iter().copied()));
        let _ = write!(s, "\"explained_variance\":{},", list(self.explained_variance.iter().copied()));
        let rows: Vec<String> = self
            .components
            .outer_iter()
            .map(|r| list(r.iter().copied()))
            .collect();
        let _ = write!(s, "\"components\":[{}]}}", rows.join(","));
        s
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, String> {
        #[derive(Deserialize)]
        struct Raw {
            d: usize,
            m: usize,
            n_fit: usize,
            variance_target: f64,
            mean: Vec<f64>,
            explained_ratio: Vec<f64>,
            explained_variance: Vec<f64>,
            components: Vec<Vec<f64>>,
        }
        let raw: Raw = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if raw.mean.len() != raw.d
            || raw.components.len() != raw.m
            || raw.explained_ratio.len() != raw.m
            || raw.explained_variance.len() != raw.m
            || raw.components.iter().any(|r| r.len() != raw.d)
        {
            return Err("inconsistent PCA model shapes".into());
        }
        let components = Array2::from_shape_vec((raw.m, raw.d), raw.components.concat()).map_err(|e| e.to_string())?;
        Ok(PcaModel {
            mean: Array1::from(raw.mean),
            components,
            explained_ratio: raw.explained_ratio,
            explained_variance: raw.explained_variance,
            variance_target: raw.variance_target,
            n_fit: raw.n_fit,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| AtlasError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| AtlasError::io(path, e))?;
        Self::from_json(&text).map_err(|e| AtlasError::format(path, e))
    }
}

/// Full spectrum of the centered data: scatter eigenvalues (squared
/// singular values) in descending order and the matching axes as rows,
/// sign-normalized.
struct Spectrum {
    mean: Array1<f64>,
    scatter: Vec<f64>,
    axes: Array2<f64>,
}

fn spectrum(x: &Array2<f64>) -> Result<Spectrum> {
    let (n, d) = x.dim();
    if n < 2 {
        return Err(AtlasError::InvalidArgument(format!("PCA needs at least 2 rows, got {n}")));
    }
    if d == 0 {
        return Err(AtlasError::InvalidArgument("PCA needs at least 1 column".into()));
    }
    if let Some(p) = x.iter().position(|v| !v.is_finite()) {
        return Err(AtlasError::NonFinite { row: p / d, col: p % d });
    }
    let mean = x.mean_axis(Axis(0)).expect("n >= 2");
    let centered = x - &mean;
    if centered.iter().all(|&v| v == 0.0) {
        return Err(AtlasError::Degenerate("all rows are identical (zero variance)".into()));
    }
    let g = centered.t().dot(&centered);
    let eig = SymmetricEigen::try_new(DMatrix::from_fn(d, d, |i, j| g[[i, j]]), f64::EPSILON, 0)
        .ok_or_else(|| AtlasError::Degenerate("eigen-decomposition failed to converge".into()))?;
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    // Rank is at most n - 1; the rest is rounding noise.
    order.truncate(d.min(n - 1));
    let mut axes = Array2::zeros((order.len(), d));
    for (i, &c) in order.iter().enumerate() {
        let mut row: Vec<f64> = (0..d).map(|j| eig.eigenvectors[(j, c)]).collect();
        // Largest |coordinate| (first on ties) made positive.
        let mut best = 0;
        for j in 1..d {
            if row[j].abs() > row[best].abs() {
                best = j;
            }
        }
        if row[best] < 0.0 {
            row.iter_mut().for_each(|v| *v = -*v);
        }
        axes.row_mut(i).assign(&Array1::from(row));
    }
    Ok(Spectrum {
        mean,
        scatter: order.iter().map(|&c| eig.eigenvalues[c].max(0.0)).collect(),
        axes,
    })
}

/// Fits PCA keeping the fewest components whose cumulative explained
/// variance ratio reaches `variance_target`.
pub fn fit(x: &Array2<f64>, variance_target: f64) -> Result<PcaModel> {
    if !(variance_target > 0.0 && variance_target <= 1.0) {
        return Err(AtlasError::InvalidArgument(format!(
            "variance target {variance_target} outside (0, 1]"
        )));
    }
    let spec = spectrum(x)?;
    let n = x.nrows();
    let sq = spec.scatter;
    let total: f64 = sq.iter().sum();
    if total <= 0.0 {
        return Err(AtlasError::Degenerate("zero total variance".into()));
    }
    let ratios: Vec<f64> = sq.iter().map(|v| v / total).collect();
    let positive = ratios.iter().take_while(|&&r| r > 0.0).count();

    let mut m = 0;
    let mut cum = 0.0;
    for &r in &ratios[..positive] {
        cum += r;
        m += 1;
        if cum >= variance_target - TARGET_SLACK {
            break;
        }
    }
    let denom = (n - 1) as f64;
    Ok(PcaModel {
        mean: spec.mean,
        components: spec.axes.slice(ndarray::s![..m, ..]).to_owned(),
        explained_ratio: ratios[..m].to_vec(),
        explained_variance: sq[..m].iter().map(|v| v / denom).collect(),
        variance_target,
        n_fit: n,
    })
}

/// Projects centered rows onto the retained components.
pub fn transform(model: &PcaModel, x: &Array2<f64>) -> Result<Array2<f64>> {
    if x.ncols() != model.n_features() {
        return Err(AtlasError::DimensionMismatch {
            expected: model.n_features(),
            actual: x.ncols(),
        });
    }
    let centered = x - &model.mean;
    Ok(centered.dot(&model.components.t()))
}

/// Running sum of the explained-variance ratios.
pub fn explained_curve(model: &PcaModel) -> Vec<f64> {
    model
        .explained_ratio
        .iter()
        .scan(0.0, |acc, r| {
            *acc += r;
            Some(*acc)
        })
        .collect()
}
