//! End-to-end orchestration driven by one TOML file.
//!
//! Every stage hands off through files in the output directory, so any stage
//! can be re-run on its own from the CLI. The run ends by writing
//! `manifest.json`, which lists each artifact with SHA-256 digests of its
//! files, the effective parameters and any warnings. A failing stage still
//! writes the manifest, naming the stage and flagging what it left behind as
//! partial.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cluster::{self, KMeansParams};
use crate::corpus::{self, Corpus, FilterPolicy, MacroAliases, SplitIndex};
use crate::embedstore::{self, EmbeddingMatrix};
use crate::error::{AtlasError, Result};
use crate::modelsel::{self, SweepConfig, DEFAULT_SUBSAMPLE_CAP};
use crate::project::{self, TsneConfig};
use crate::reduce;
use crate::report;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitOn {
    /// Fit on the training split, transform everything.
    #[default]
    Train,
    /// Fit on every aligned row.
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantInput {
    pub name: String,
    pub embeddings: PathBuf,
    /// Apply PCA before clustering.
    #[serde(default = "yes")]
    pub reduce: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputConfig {
    pub corpus: PathBuf,
    pub variant: Vec<VariantInput>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub min_abstract_words: usize,
    pub min_category_count: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        let p = FilterPolicy::default();
        FilterConfig {
            min_abstract_words: p.min_abstract_words,
            min_category_count: p.min_category_count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReduceConfig {
    pub variance_target: f64,
    pub fit_on: FitOn,
}

impl Default for ReduceConfig {
    fn default() -> Self {
        ReduceConfig {
            variance_target: 0.95,
            fit_on: FitOn::Train,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepRange {
    pub k_min: usize,
    pub k_max: usize,
    pub n_init: usize,
    pub max_iter: usize,
    pub rel_tol: f64,
    pub subsample_cap: usize,
}

impl Default for SweepRange {
    fn default() -> Self {
        let p = KMeansParams::new(2);
        SweepRange {
            k_min: 2,
            k_max: 50,
            n_init: p.n_init,
            max_iter: p.max_iter,
            rel_tol: p.rel_tol,
            subsample_cap: DEFAULT_SUBSAMPLE_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub split: u64,
    pub kmeans: u64,
    pub tsne: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    pub top_n: usize,
    pub min_count: usize,
    /// Optional `category,macro` override file.
    pub aliases: Option<PathBuf>,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            top_n: report::DEFAULT_TOP_N,
            min_count: report::DEFAULT_MIN_COUNT,
            aliases: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectConfig {
    pub enabled: bool,
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub max_points: usize,
}

impl Default for ProjectConfig {
    fn default() -> Self {
        let t = TsneConfig::default();
        ProjectConfig {
            enabled: false,
            perplexity: t.perplexity,
            iterations: t.iterations,
            learning_rate: t.learning_rate,
            max_points: 5000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub output_dir: PathBuf,
    pub input: InputConfig,
    pub filter: FilterConfig,
    pub reduce: ReduceConfig,
    pub sweep: SweepRange,
    pub seeds: Seeds,
    pub report: ReportConfig,
    pub project: ProjectConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            output_dir: PathBuf::from("out"),
            input: InputConfig::default(),
            filter: FilterConfig::default(),
            reduce: ReduceConfig::default(),
            sweep: SweepRange::default(),
            seeds: Seeds::default(),
            report: ReportConfig::default(),
            project: ProjectConfig::default(),
        }
    }
}

fn rebase(base: &Path, p: &mut PathBuf) {
    if p.is_relative() && !p.as_os_str().is_empty() {
        *p = base.join(&*p);
    }
}

impl PipelineConfig {
    /// Parses TOML; relative paths are resolved against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> std::result::Result<Self, String> {
        let mut cfg: PipelineConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        rebase(base_dir, &mut cfg.output_dir);
        rebase(base_dir, &mut cfg.input.corpus);
        for v in &mut cfg.input.variant {
            rebase(base_dir, &mut v.embeddings);
        }
        if let Some(a) = &mut cfg.report.aliases {
            rebase(base_dir, a);
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| AtlasError::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_toml_str(&text, base).map_err(|m| AtlasError::format(path, m))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn policy(&self) -> FilterPolicy {
        FilterPolicy {
            min_abstract_words: self.filter.min_abstract_words,
            min_category_count: self.filter.min_category_count,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AtlasError::InvalidArgument(m));
        if self.filter.min_abstract_words == 0 || self.filter.min_category_count == 0 {
            return bad("filter thresholds must be positive".into());
        }
        if !(self.reduce.variance_target > 0.0 && self.reduce.variance_target <= 1.0) {
            return bad(format!("variance target {} outside (0, 1]", self.reduce.variance_target));
        }
        if self.sweep.k_min > self.sweep.k_max {
            return bad(format!("empty sweep range {}..={}", self.sweep.k_min, self.sweep.k_max));
        }
        if self.sweep.k_max < 2 {
            return bad("sweep range must include some k >= 2".into());
        }
        if self.sweep.n_init == 0 || self.sweep.max_iter == 0 || self.sweep.subsample_cap < 3 {
            return bad("n_init and max_iter must be positive and subsample_cap at least 3".into());
        }
        if self.report.top_n == 0 {
            return bad("report top_n must be positive".into());
        }
        if self.project.enabled && self.project.max_points < 4 {
            return bad("projection max_points must be at least 4".into());
        }
        if self.input.variant.is_empty() {
            return bad("no embedding variants configured".into());
        }
        let mut seen = HashSet::new();
        for v in &self.input.variant {
            let safe = !v.name.is_empty()
                && v.name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
                && v.name != "."
                && v.name != ".."
                && v.name != "report";
            if !safe {
                return bad(format!("variant name {:?} is not usable as a directory name", v.name));
            }
            if !seen.insert(v.name.as_str()) {
                return bad(format!("duplicate variant name {}", v.name));
            }
        }
        let mut inputs = vec![&self.input.corpus];
        inputs.extend(self.input.variant.iter().map(|v| &v.embeddings));
        inputs.extend(self.report.aliases.iter());
        for p in inputs {
            if !p.is_file() {
                return bad(format!("input file {} does not exist", p.display()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    /// Relative to the output directory, `/`-separated.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArtifactStatus {
    Complete,
    Partial,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub name: String,
    pub stage: String,
    pub status: ArtifactStatus,
    pub files: Vec<FileDigest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameters {
    pub min_abstract_words: usize,
    pub min_category_count: usize,
    pub variance_target: f64,
    pub fit_on: FitOn,
    pub k_min: usize,
    pub k_max: usize,
    pub n_init: usize,
    pub max_iter: usize,
    pub rel_tol: f64,
    pub subsample_cap: usize,
    pub seeds: Seeds,
    pub top_n: usize,
    pub min_count: usize,
    pub project: bool,
    pub variants: Vec<String>,
}

impl From<&PipelineConfig> for Parameters {
    fn from(c: &PipelineConfig) -> Self {
        Parameters {
            min_abstract_words: c.filter.min_abstract_words,
            min_category_count: c.filter.min_category_count,
            variance_target: c.reduce.variance_target,
            fit_on: c.reduce.fit_on,
            k_min: c.sweep.k_min,
            k_max: c.sweep.k_max,
            n_init: c.sweep.n_init,
            max_iter: c.sweep.max_iter,
            rel_tol: c.sweep.rel_tol,
            subsample_cap: c.sweep.subsample_cap,
            seeds: c.seeds.clone(),
            top_n: c.report.top_n,
            min_count: c.report.min_count,
            project: c.project.enabled,
            variants: c.input.variant.iter().map(|v| v.name.clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct VariantSummary {
    pub name: String,
    pub components: Option<usize>,
    pub best_k: usize,
    pub best_silhouette: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Summary {
    pub records: Option<usize>,
    pub aligned: Option<usize>,
    pub train: Option<usize>,
    pub val: Option<usize>,
    pub test: Option<usize>,
    pub variants: Vec<VariantSummary>,
    pub selected_variant: Option<String>,
    pub best_k: Option<usize>,
    pub test_silhouette: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub complete: bool,
    pub failed_stage: Option<String>,
    pub error: Option<String>,
    pub parameters: Parameters,
    pub inputs: Vec<FileDigest>,
    pub summary: Summary,
    pub warnings: Vec<String>,
    pub artifacts: Vec<Artifact>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| AtlasError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| AtlasError::format(path, e.to_string()))
    }

    pub fn artifact(&self, name: &str) -> Option<&Artifact> {
        self.artifacts.iter().find(|a| a.name == name)
    }

    /// Every artifact file with its digest, in manifest order.
    pub fn digests(&self) -> Vec<(&str, &str)> {
        self.artifacts
            .iter()
            .flat_map(|a| a.files.iter().map(|f| (f.path.as_str(), f.sha256.as_str())))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub manifest: Manifest,
    pub manifest_path: PathBuf,
}

pub fn sha256_file(path: &Path) -> Result<(u64, String)> {
    let bytes = fs::read(path).map_err(|e| AtlasError::io(path, e))?;
    Ok((bytes.len() as u64, hex::encode(Sha256::digest(&bytes))))
}

fn files_under(root: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if root.is_file() {
        out.push(root.to_owned());
    } else if root.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(root)
            .map_err(|e| AtlasError::io(root, e))?
            .map(|e| e.map(|e| e.path()).map_err(|e| AtlasError::io(root, e)))
            .collect::<Result<_>>()?;
        entries.sort();
        for e in entries {
            files_under(&e, out)?;
        }
    }
    Ok(())
}

struct Run {
    out: PathBuf,
    manifest: Manifest,
}

impl Run {
    fn rel(&self, p: &Path) -> String {
        let r = p.strip_prefix(&self.out).unwrap_or(p);
        r.components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/")
    }

    fn digest_roots(&self, roots: &[PathBuf]) -> Result<Vec<FileDigest>> {
        let mut files = Vec::new();
        for r in roots {
            files_under(r, &mut files)?;
        }
        files
            .iter()
            .map(|f| {
                let (bytes, sha256) = sha256_file(f)?;
                Ok(FileDigest {
                    path: self.rel(f),
                    bytes,
                    sha256,
                })
            })
            .collect()
    }

    /// Runs one stage. `artifacts` names each output and the files or
    /// directories that make it up; stale copies are removed first so a
    /// failure can only leave behind what this run wrote.
    fn stage<T>(
        &mut self,
        stage: &str,
        artifacts: &[(String, Vec<PathBuf>)],
        body: impl FnOnce(&mut Vec<String>) -> Result<T>,
    ) -> Result<T> {
        log::info!("stage {stage}");
        for (_, roots) in artifacts {
            for r in roots {
                let removed = if r.is_dir() {
                    fs::remove_dir_all(r)
                } else if r.exists() {
                    fs::remove_file(r)
                } else {
                    Ok(())
                };
                removed.map_err(|e| AtlasError::io(r, e))?;
            }
        }
        let mut warnings = Vec::new();
        let result = body(&mut warnings);
        self.manifest
            .warnings
            .extend(warnings.into_iter().map(|w| format!("{stage}: {w}")));
        let status = if result.is_ok() {
            ArtifactStatus::Complete
        } else {
            ArtifactStatus::Partial
        };
        for (name, roots) in artifacts {
            let files = self.digest_roots(roots)?;
            if status == ArtifactStatus::Complete || !files.is_empty() {
                self.manifest.artifacts.push(Artifact {
                    name: name.clone(),
                    stage: stage.to_owned(),
                    status,
                    files,
                });
            }
        }
        result.map_err(|e| {
            self.manifest.failed_stage = Some(stage.to_owned());
            self.manifest.error = Some(e.to_string());
            AtlasError::Stage {
                stage: stage.to_owned(),
                source: Box::new(e),
            }
        })
    }

    fn write_manifest(&self) -> Result<PathBuf> {
        let path = self.out.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        text.push('\n');
        fs::write(&path, text).map_err(|e| AtlasError::io(&path, e))?;
        Ok(path)
    }
}

fn rows_of(x: &Array2<f64>, all_ids: &[String], wanted: &[String]) -> Result<Array2<f64>> {
    let pos: std::collections::HashMap<&str, usize> =
        all_ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let idx = wanted
        .iter()
        .map(|id| pos.get(id.as_str()).copied().ok_or_else(|| AtlasError::UnknownId(id.clone())))
        .collect::<Result<Vec<_>>>()?;
    Ok(x.select(Axis(0), &idx))
}

struct VariantState {
    name: String,
    /// Analysis rows in corpus order, possibly PCA-reduced.
    x: Array2<f64>,
    best_k: usize,
    best_silhouette: f64,
    model: cluster::KMeansModel,
}

/// Runs every stage and writes the manifest. On failure the manifest is
/// still written and the returned error names the stage.
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineOutcome> {
    let out = config.output_dir.clone();
    let mut run = Run {
        out: out.clone(),
        manifest: Manifest {
            complete: false,
            failed_stage: None,
            error: None,
            parameters: Parameters::from(config),
            inputs: Vec::new(),
            summary: Summary::default(),
            warnings: Vec::new(),
            artifacts: Vec::new(),
        },
    };
    let result = (|| -> Result<()> {
        run.stage("config", &[], |_| {
            config.validate()?;
            fs::create_dir_all(&out).map_err(|e| AtlasError::io(&out, e))
        })?;
        run_stages(config, &mut run)
    })();
    if let Err(e) = &result {
        if run.manifest.failed_stage.is_none() {
            run.manifest.error = Some(e.to_string());
        }
    } else {
        run.manifest.complete = true;
    }
    let manifest_path = if out.is_dir() { Some(run.write_manifest()?) } else { None };
    result?;
    Ok(PipelineOutcome {
        manifest: run.manifest,
        manifest_path: manifest_path.expect("output directory exists after a successful run"),
    })
}

fn run_stages(config: &PipelineConfig, run: &mut Run) -> Result<()> {
    let out = run.out.clone();
    let mut inputs = vec![config.input.corpus.clone()];
    inputs.extend(config.input.variant.iter().map(|v| v.embeddings.clone()));
    inputs.extend(config.report.aliases.iter().cloned());
    for p in &inputs {
        let (bytes, sha256) = sha256_file(p)?;
        run.manifest.inputs.push(FileDigest {
            path: p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            bytes,
            sha256,
        });
    }

    let corpus_path = out.join("corpus.atlas");
    let stats_path = out.join("stats.txt");
    let corpus = run.stage(
        "ingest",
        &[("corpus".into(), vec![corpus_path.clone(), stats_path.clone()])],
        |warn| {
            let c = corpus::load_corpus(&config.input.corpus, config.policy())?;
            let log = &c.provenance;
            if !log.malformed.is_empty() {
                warn.push(format!("{} malformed lines skipped", log.malformed.len()));
            }
            c.save(&corpus_path)?;
            let stats = corpus::length_stats(&c)?;
            let hist = corpus::category_histograms(&c);
            fs::write(&stats_path, corpus::format_stats(&stats, &hist)).map_err(|e| AtlasError::io(&stats_path, e))?;
            Ok(c)
        },
    )?;
    run.manifest.summary.records = Some(corpus.len());

    // Alignment keeps the ids that have a row in every variant.
    let aligned = run.stage("align", &[], |warn| {
        let mut common: Option<BTreeSet<String>> = None;
        let mut mats = Vec::new();
        for v in &config.input.variant {
            let m = embedstore::read_embeddings(&v.embeddings)?;
            m.check_finite()?;
            let (m, rep) = embedstore::align(&corpus, &m)?;
            if !rep.missing_embedding.is_empty() {
                warn.push(format!("{}: {} records have no embedding", v.name, rep.missing_embedding.len()));
            }
            if !rep.missing_record.is_empty() {
                warn.push(format!("{}: {} embeddings have no record", v.name, rep.missing_record.len()));
            }
            let ids: BTreeSet<String> = m.ids().iter().cloned().collect();
            common = Some(match common {
                None => ids,
                Some(c) => c.intersection(&ids).cloned().collect(),
            });
            mats.push(m);
        }
        let common = common.unwrap_or_default();
        let keep: Vec<String> = corpus.ids().filter(|id| common.contains(*id)).map(str::to_owned).collect();
        if keep.is_empty() {
            return Err(AtlasError::Empty("no record has an embedding in every variant".into()));
        }
        mats.iter().map(|m| m.select(&keep)).collect::<Result<Vec<EmbeddingMatrix>>>()
    })?;
    let ids: Vec<String> = aligned[0].ids().to_vec();
    run.manifest.summary.aligned = Some(ids.len());

    let split_path = out.join("split.json");
    let split = run.stage("split", &[("split".into(), vec![split_path.clone()])], |_| {
        let keep: HashSet<&str> = ids.iter().map(String::as_str).collect();
        let sub = Corpus {
            records: corpus.records.iter().filter(|r| keep.contains(r.id.as_str())).cloned().collect(),
            ..corpus.clone()
        };
        let s = corpus::split(&sub, config.seeds.split)?;
        s.save(&split_path)?;
        Ok(s)
    })?;
    run.manifest.summary.train = Some(split.train_ids.len());
    run.manifest.summary.val = Some(split.val_ids.len());
    run.manifest.summary.test = Some(split.test_ids.len());

    let mut states = Vec::new();
    for (v, m) in config.input.variant.iter().zip(&aligned) {
        states.push(run_variant(config, run, v, m, &split)?);
    }

    // Highest best-k silhouette wins; earlier variant on ties.
    let mut sel = 0;
    for (i, s) in states.iter().enumerate() {
        if s.best_silhouette > states[sel].best_silhouette {
            sel = i;
        }
    }
    let chosen = &states[sel];
    run.manifest.summary.selected_variant = Some(chosen.name.clone());
    run.manifest.summary.best_k = Some(chosen.best_k);

    let model_path = out.join("model.kmeans");
    let labels_path = out.join("labels.csv");
    let x_test = rows_of(&chosen.x, &ids, &split.test_ids)?;
    let labels = run.stage(
        "cluster",
        &[
            ("model".into(), vec![model_path.clone()]),
            ("labels".into(), vec![labels_path.clone()]),
        ],
        |warn| {
            chosen.model.save(&model_path)?;
            let pred = cluster::predict(&chosen.model, &x_test)?;
            let labels: Vec<(String, usize)> = split.test_ids.iter().cloned().zip(pred.iter().copied()).collect();
            report::write_labels(&labels, &labels_path)?;
            let sil = match modelsel::silhouette_capped(&x_test, &pred, config.sweep.subsample_cap, config.seeds.kmeans) {
                Ok(s) => Some(s.mean),
                Err(AtlasError::Degenerate(m)) | Err(AtlasError::InvalidArgument(m)) => {
                    warn.push(format!("test silhouette undefined: {m}"));
                    None
                }
                Err(e) => return Err(e),
            };
            Ok((labels, sil))
        },
    )?;
    let (labels, test_sil) = labels;
    run.manifest.summary.test_silhouette = test_sil;

    let report_dir = out.join("report");
    run.stage("report", &[("report".into(), vec![report_dir.clone()])], |_| {
        let aliases = match &config.report.aliases {
            Some(p) => MacroAliases::from_file(p)?,
            None => MacroAliases::new(),
        };
        let rep = report::build_report(&labels, &corpus, config.report.top_n, config.report.min_count, &aliases)?;
        report::emit_report(&rep, &report_dir)?;
        Ok(())
    })?;

    if config.project.enabled {
        let proj_path = out.join("proj.csv");
        run.stage("project", &[("projection".into(), vec![proj_path.clone()])], |warn| {
            let chosen_rows: Vec<usize> = match modelsel::subsample_indices(x_test.nrows(), config.project.max_points, config.seeds.tsne) {
                Some(idx) => {
                    warn.push(format!("projecting {} of {} test rows", idx.len(), x_test.nrows()));
                    idx
                }
                None => (0..x_test.nrows()).collect(),
            };
            let x = x_test.select(Axis(0), &chosen_rows);
            let keys: Vec<&str> = chosen_rows.iter().map(|&i| labels[i].0.as_str()).collect();
            let cfg = TsneConfig {
                perplexity: config.project.perplexity,
                iterations: config.project.iterations,
                learning_rate: config.project.learning_rate,
                seed: config.seeds.tsne,
                ..TsneConfig::default()
            };
            let runres = project::tsne_keyed(&x, &keys, &cfg)?;
            let joins: Vec<(usize, String)> = chosen_rows
                .iter()
                .map(|&i| {
                    let (id, c) = &labels[i];
                    let cat = corpus.get(id).and_then(|r| r.categories.first()).cloned().unwrap_or_default();
                    (*c, cat)
                })
                .collect();
            let text = projection_csv(&keys, &runres.embedding, Some(&joins));
            fs::write(&proj_path, text).map_err(|e| AtlasError::io(&proj_path, e))
        })?;
    }
    Ok(())
}

fn run_variant(
    config: &PipelineConfig,
    run: &mut Run,
    v: &VariantInput,
    m: &EmbeddingMatrix,
    split: &SplitIndex,
) -> Result<VariantState> {
    let dir = run.out.join(&v.name);
    fs::create_dir_all(&dir).map_err(|e| AtlasError::io(&dir, e))?;
    let ids = m.ids().to_vec();
    let pca_path = dir.join("pca.json");
    let emb_path = dir.join("reduced.emb1");
    let mut artifacts = vec![(format!("embeddings:{}", v.name), vec![emb_path.clone()])];
    if v.reduce {
        artifacts.insert(0, (format!("pca:{}", v.name), vec![pca_path.clone()]));
    }
    let (x, components) = run.stage(&format!("reduce:{}", v.name), &artifacts, |_| {
        let raw = m.to_array();
        if !v.reduce {
            embedstore::write_embeddings(m, &emb_path)?;
            return Ok((raw, None));
        }
        let fit_rows = match config.reduce.fit_on {
            FitOn::Train => rows_of(&raw, &ids, &split.train_ids)?,
            FitOn::All => raw.clone(),
        };
        let model = reduce::fit(&fit_rows, config.reduce.variance_target)?;
        model.save(&pca_path)?;
        let z = reduce::transform(&model, &raw)?;
        let zm = EmbeddingMatrix::from_array(&z, ids.clone(), format!("{}+pca", m.variant()))?;
        embedstore::write_embeddings(&zm, &emb_path)?;
        Ok((z, Some(model.n_components())))
    })?;

    let sweep_path = dir.join("sweep.csv");
    let plot_path = dir.join("sweep_plot.csv");
    let x_train = rows_of(&x, &ids, &split.train_ids)?;
    let x_val = rows_of(&x, &ids, &split.val_ids)?;
    let result = run.stage(
        &format!("sweep:{}", v.name),
        &[(format!("sweep:{}", v.name), vec![sweep_path.clone(), plot_path.clone()])],
        |warn| {
            let mut sc = SweepConfig::new(config.sweep.k_min..=config.sweep.k_max, config.seeds.kmeans);
            sc.kmeans = sc
                .kmeans
                .with_n_init(config.sweep.n_init)
                .with_max_iter(config.sweep.max_iter)
                .with_rel_tol(config.sweep.rel_tol);
            sc.subsample_cap = config.sweep.subsample_cap;
            sc.keep_models = true;
            let r = modelsel::sweep(&x_train, &x_val, &sc)?;
            for s in &r.skipped {
                warn.push(format!("skipped k={}: {}", s.k, s.reason));
            }
            r.write(&sweep_path, &plot_path)?;
            Ok(r)
        },
    )?;
    let pos = result
        .k_values
        .iter()
        .position(|&k| k == result.best_k)
        .expect("best k is one of the scored k");
    let best_silhouette = result.silhouette_val[pos];
    let model = result
        .per_k_models
        .expect("sweep keeps models")
        .swap_remove(pos);
    run.manifest.summary.variants.push(VariantSummary {
        name: v.name.clone(),
        components,
        best_k: result.best_k,
        best_silhouette,
    });
    Ok(VariantState {
        name: v.name.clone(),
        x,
        best_k: result.best_k,
        best_silhouette,
        model,
    })
}

/// `id,x,y` rows, with `cluster,category` columns when joins are given.
pub fn projection_csv<S: AsRef<str>>(ids: &[S], y: &Array2<f64>, joins: Option<&[(usize, String)]>) -> String {
    let mut s = String::from(if joins.is_some() { "id,x,y,cluster,category\n" } else { "id,x,y\n" });
    for (i, id) in ids.iter().enumerate() {
        let _ = write!(s, "{},{},{}", id.as_ref(), y[[i, 0]], y[[i, 1]]);
        if let Some(j) = joins {
            let _ = write!(s, ",{},{}", j[i].0, j[i].1);
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_settings() {
        let c = PipelineConfig::default();
        assert_eq!(c.filter.min_abstract_words, 31);
        assert_eq!(c.filter.min_category_count, 250);
        assert_eq!(c.reduce.variance_target, 0.95);
        assert_eq!((c.sweep.k_min, c.sweep.k_max), (2, 50));
        assert_eq!(c.reduce.fit_on, FitOn::Train);
    }

    #[test]
    fn toml_round_trip_and_rebase() {
        let text = r#"
output_dir = "o"
[input]
corpus = "c.jsonl"
[[input.variant]]
name = "a"
embeddings = "a.emb1"
[sweep]
k_max = 7
"#;
        let c = PipelineConfig::from_toml_str(text, Path::new("/base")).unwrap();
        assert_eq!(c.output_dir, PathBuf::from("/base/o"));
        assert_eq!(c.input.corpus, PathBuf::from("/base/c.jsonl"));
        assert_eq!(c.input.variant[0].embeddings, PathBuf::from("/base/a.emb1"));
        assert!(c.input.variant[0].reduce);
        assert_eq!(c.sweep.k_max, 7);
        assert_eq!(c.sweep.k_min, 2);
        let again = PipelineConfig::from_toml_str(&c.to_toml_string(), Path::new("/elsewhere")).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(PipelineConfig::from_toml_str("[sweep]\nkmax = 3\n", Path::new(".")).is_err());
    }

    #[test]
    fn validation_catches_bad_ranges_and_names() {
        let mut c = PipelineConfig::default();
        c.sweep.k_min = 5;
        c.sweep.k_max = 4;
        assert!(matches!(c.validate(), Err(AtlasError::InvalidArgument(m)) if m.contains("empty sweep range")));
        let mut c = PipelineConfig::default();
        c.filter.min_category_count = 0;
        assert!(c.validate().is_err());
        let mut c = PipelineConfig::default();
        c.input.variant.push(VariantInput {
            name: "../x".into(),
            embeddings: "e".into(),
            reduce: true,
        });
        assert!(matches!(c.validate(), Err(AtlasError::InvalidArgument(m)) if m.contains("directory name")));
        let mut c = PipelineConfig::default();
        c.input.variant.push(VariantInput {
            name: "x".into(),
            embeddings: "/definitely/missing.emb1".into(),
            reduce: true,
        });
        assert!(matches!(c.validate(), Err(AtlasError::InvalidArgument(m)) if m.contains("does not exist")));
    }

    #[test]
    fn failed_stage_flags_what_it_wrote() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = Run {
            out: dir.path().to_owned(),
            manifest: Manifest {
                complete: false,
                failed_stage: None,
                error: None,
                parameters: Parameters::from(&PipelineConfig::default()),
                inputs: Vec::new(),
                summary: Summary::default(),
                warnings: Vec::new(),
                artifacts: Vec::new(),
            },
        };
        let a = dir.path().join("a.txt");
        let b = dir.path().join("b.txt");
        fs::write(&b, "stale").unwrap();
        let err = run
            .stage("demo", &[("pair".into(), vec![a.clone(), b.clone()])], |warn| -> Result<()> {
                warn.push("half done".into());
                fs::write(&a, "x").unwrap();
                Err(AtlasError::Degenerate("boom".into()))
            })
            .unwrap_err();
        assert!(matches!(&err, AtlasError::Stage { stage, .. } if stage == "demo"));
        assert!(!b.exists(), "stale output removed before the stage ran");
        let art = &run.manifest.artifacts[0];
        assert_eq!(art.status, ArtifactStatus::Partial);
        assert_eq!(art.files.len(), 1);
        assert_eq!(art.files[0].path, "a.txt");
        assert_eq!(run.manifest.failed_stage.as_deref(), Some("demo"));
        assert_eq!(run.manifest.warnings, vec!["demo: half done".to_string()]);
    }

    #[test]
    fn projection_csv_layout() {
        let y = ndarray::array![[1.0, -2.0], [0.5, 0.0]];
        assert_eq!(projection_csv(&["a", "b"], &y, None), "id,x,y\na,1,-2\nb,0.5,0\n");
        let joins = vec![(3, "cs.CV".to_string()), (0, "hep-ph".to_string())];
        assert_eq!(
            projection_csv(&["a", "b"], &y, Some(&joins)),
            "id,x,y,cluster,category\na,1,-2,3,cs.CV\nb,0.5,0,0,hep-ph\n"
        );
    }
}
