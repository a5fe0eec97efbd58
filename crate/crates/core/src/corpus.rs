//! Corpus ingestion: parsing arXiv metadata lines, quality filters,
//! macro-categories, descriptive statistics and train/validation/test splits.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{AtlasError, Result};
use crate::par;

pub const DEFAULT_MIN_ABSTRACT_WORDS: usize = 31;
pub const DEFAULT_MIN_CATEGORY_COUNT: usize = 250;

/// One article of the corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaperRecord {
    pub id: String,
    #[serde(rename = "abstract")]
    pub abstract_text: String,
    pub categories: Vec<String>,
    pub word_count: usize,
}

impl PaperRecord {
    pub fn new(id: impl Into<String>, abstract_text: impl Into<String>, categories: Vec<String>) -> Self {
        let abstract_text = abstract_text.into();
        let word_count = word_count(&abstract_text);
        PaperRecord {
            id: id.into(),
            abstract_text,
            categories: dedup_in_order(categories),
            word_count,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterPolicy {
    pub min_abstract_words: usize,
    pub min_category_count: usize,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        FilterPolicy {
            min_abstract_words: DEFAULT_MIN_ABSTRACT_WORDS,
            min_category_count: DEFAULT_MIN_CATEGORY_COUNT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MalformedLine {
    pub line: usize,
    pub message: String,
}

/// How many records each ingest rule removed.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterLog {
    pub lines_read: usize,
    pub malformed: Vec<MalformedLine>,
    pub duplicates_removed: usize,
    pub withdrawn_removed: usize,
    pub short_abstract_removed: usize,
    /// Categories stripped from every label set, with their pre-strip count.
    pub categories_removed: Vec<(String, usize)>,
    pub label_less_removed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub records: Vec<PaperRecord>,
    pub category_counts: BTreeMap<String, usize>,
    pub policy: FilterPolicy,
    pub provenance: FilterLog,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.id.as_str())
    }

    pub fn get(&self, id: &str) -> Option<&PaperRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Map from id to record position.
    pub fn index(&self) -> HashMap<&str, usize> {
        self.records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id.as_str(), i))
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)
            .map_err(|e| AtlasError::format(path, e.to_string()))?;
        fs::write(path, text).map_err(|e| AtlasError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| AtlasError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| AtlasError::format(path, e.to_string()))
    }
}

/// Whitespace-token count of an abstract.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

fn withdrawal_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)(^\s*withdrawn)|(this\s+(paper|article|submission)\s+(has\s+been|is)\s+withdrawn)")
            .expect("static regex")
    })
}

/// Textual heuristic for withdrawn submissions.
pub fn is_withdrawn(abstract_text: &str) -> bool {
    withdrawal_pattern().is_match(abstract_text)
}

fn dedup_in_order(categories: Vec<String>) -> Vec<String> {
    let mut seen = HashSet::new();
    categories
        .into_iter()
        .filter(|c| seen.insert(c.clone()))
        .collect()
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawCategories {
    Joined(String),
    List(Vec<String>),
}

#[derive(Deserialize)]
struct RawRecord {
    id: String,
    #[serde(rename = "abstract")]
    abstract_text: String,
    categories: RawCategories,
}

fn parse_line(line: &str) -> std::result::Result<PaperRecord, String> {
    let raw: RawRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let id = raw.id.trim();
    if id.is_empty() {
        return Err("empty id".into());
    }
    let categories: Vec<String> = match raw.categories {
        RawCategories::Joined(s) => s.split_whitespace().map(str::to_owned).collect(),
        RawCategories::List(v) => v
            .iter()
            .flat_map(|s| s.split_whitespace())
            .map(str::to_owned)
            .collect(),
    };
    if categories.is_empty() {
        return Err("no categories".into());
    }
    Ok(PaperRecord::new(id, raw.abstract_text, categories))
}

/// Parses a line-delimited JSON metadata file. Malformed lines are logged
/// and skipped; blank lines are ignored.
pub fn read_records(path: impl AsRef<Path>) -> Result<(Vec<PaperRecord>, FilterLog)> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| AtlasError::io(path, e))?;
    let lines: Vec<String> = BufReader::new(file)
        .lines()
        .collect::<std::io::Result<_>>()
        .map_err(|e| AtlasError::io(path, e))?;

    let parsed = par::map_slice(&lines, |l| {
        if l.trim().is_empty() {
            None
        } else {
            Some(parse_line(l))
        }
    });

    let mut log = FilterLog {
        lines_read: lines.len(),
        ..FilterLog::default()
    };
    let mut records = Vec::with_capacity(parsed.len());
    for (i, p) in parsed.into_iter().enumerate() {
        match p {
            None => {}
            Some(Ok(r)) => records.push(r),
            Some(Err(message)) => {
                log::warn!("{}:{}: skipping malformed record: {}", path.display(), i + 1, message);
                log.malformed.push(MalformedLine { line: i + 1, message });
            }
        }
    }
    Ok((records, log))
}

/// Applies dedup, withdrawal, length and category-frequency filters in that
/// order. `log` is extended with the per-rule removal counts.
pub fn filter_records(records: Vec<PaperRecord>, policy: FilterPolicy, mut log: FilterLog) -> Result<Corpus> {
    // Last occurrence of an id wins.
    let mut last: HashMap<&str, usize> = HashMap::new();
    for (i, r) in records.iter().enumerate() {
        last.insert(r.id.as_str(), i);
    }
    let keep: Vec<bool> = records
        .iter()
        .enumerate()
        .map(|(i, r)| last[r.id.as_str()] == i)
        .collect();
    let before = records.len();
    let mut records: Vec<PaperRecord> = records
        .into_iter()
        .zip(keep)
        .filter_map(|(r, k)| k.then_some(r))
        .collect();
    log.duplicates_removed += before - records.len();

    let before = records.len();
    records.retain(|r| !is_withdrawn(&r.abstract_text));
    log.withdrawn_removed += before - records.len();

    let before = records.len();
    records.retain(|r| r.word_count >= policy.min_abstract_words);
    log.short_abstract_removed += before - records.len();

    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for r in &records {
        for c in &r.categories {
            *counts.entry(c.clone()).or_default() += 1;
        }
    }
    let rare: HashSet<String> = counts
        .iter()
        .filter(|(_, &n)| n < policy.min_category_count)
        .map(|(c, _)| c.clone())
        .collect();
    log.categories_removed.extend(
        counts
            .iter()
            .filter(|(c, _)| rare.contains(*c))
            .map(|(c, &n)| (c.clone(), n)),
    );
    counts.retain(|c, _| !rare.contains(c));

    for r in &mut records {
        r.categories.retain(|c| !rare.contains(c));
    }
    let before = records.len();
    records.retain(|r| !r.categories.is_empty());
    log.label_less_removed += before - records.len();

    if records.is_empty() {
        return Err(AtlasError::Empty("no records survived the corpus filters".into()));
    }
    Ok(Corpus {
        records,
        category_counts: counts,
        policy,
        provenance: log,
    })
}

/// Reads and filters a metadata file.
pub fn load_corpus(path: impl AsRef<Path>, policy: FilterPolicy) -> Result<Corpus> {
    let (records, log) = read_records(path)?;
    filter_records(records, policy, log)
}

/// Archive-level prefix of a subject category, with the `math-ph` alias
/// folded into `math`.
pub fn macro_of(category: &str) -> &str {
    if category == "math-ph" {
        return "math";
    }
    match category.split_once('.') {
        Some((prefix, _)) => prefix,
        None => category,
    }
}

/// Category → macro-category mapping with optional overrides on top of
/// [`macro_of`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MacroAliases {
    overrides: BTreeMap<String, String>,
}

impl MacroAliases {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, category: impl Into<String>, macro_code: impl Into<String>) {
        self.overrides.insert(category.into(), macro_code.into());
    }

    /// Reads `category,macro` lines. `#` starts a comment.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| AtlasError::io(path, e))?;
        let mut aliases = MacroAliases::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (cat, mac) = line
                .split_once(',')
                .ok_or_else(|| AtlasError::format(path, format!("line {}: expected `category,macro`", i + 1)))?;
            let (cat, mac) = (cat.trim(), mac.trim());
            if cat.is_empty() || mac.is_empty() {
                return Err(AtlasError::format(path, format!("line {}: empty field", i + 1)));
            }
            aliases.insert(cat, mac);
        }
        Ok(aliases)
    }

    pub fn macro_of<'a>(&'a self, category: &'a str) -> &'a str {
        self.overrides
            .get(category)
            .map(String::as_str)
            .unwrap_or_else(|| macro_of(category))
    }
}

/// Abstract word-count summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
    pub max: f64,
}

/// Quantile of sorted data, linear interpolation between closest ranks.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

impl LengthStats {
    pub fn from_counts(counts: &[usize]) -> Result<Self> {
        if counts.is_empty() {
            return Err(AtlasError::Empty("no word counts".into()));
        }
        let mut v: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
        v.sort_by(f64::total_cmp);
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Ok(LengthStats {
            n: v.len(),
            mean,
            std: var.sqrt(),
            min: v[0],
            q25: quantile_sorted(&v, 0.25),
            q50: quantile_sorted(&v, 0.5),
            q75: quantile_sorted(&v, 0.75),
            max: v[v.len() - 1],
        })
    }
}

pub fn length_stats(corpus: &Corpus) -> Result<LengthStats> {
    let counts: Vec<usize> = corpus.records.iter().map(|r| r.word_count).collect();
    LengthStats::from_counts(&counts)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryHistograms {
    /// Category counts, descending, ties by code.
    pub ranked: Vec<(String, usize)>,
    /// Number of labels per paper → number of papers.
    pub multiplicity: BTreeMap<usize, usize>,
}

pub fn category_histograms(corpus: &Corpus) -> CategoryHistograms {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut multiplicity = BTreeMap::new();
    for r in &corpus.records {
        for c in &r.categories {
            *counts.entry(c.as_str()).or_default() += 1;
        }
        *multiplicity.entry(r.categories.len()).or_default() += 1;
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().map(|(c, n)| (c.to_owned(), n)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    CategoryHistograms { ranked, multiplicity }
}

/// Aligned-text rendering of the length statistics and both histograms.
pub fn format_stats(stats: &LengthStats, hist: &CategoryHistograms) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Abstract length statistics");
    let rows: [(&str, String); 8] = [
        ("N. samples", stats.n.to_string()),
        ("Mean", format!("{:.1}", stats.mean)),
        ("Std", format!("{:.1}", stats.std)),
        ("Min", format!("{}", stats.min)),
        ("25%", format!("{}", stats.q25)),
        ("50%", format!("{}", stats.q50)),
        ("75%", format!("{}", stats.q75)),
        ("Max", format!("{}", stats.max)),
    ];
    for (k, v) in rows {
        let _ = writeln!(out, "  {k:<12}{v:>10}");
    }
    let width = hist.ranked.iter().map(|(c, _)| c.len()).max().unwrap_or(8).max(8);
    let _ = writeln!(out, "\nCategories ({})", hist.ranked.len());
    for (c, n) in &hist.ranked {
        let _ = writeln!(out, "  {c:<width$}  {n:>8}");
    }
    let _ = writeln!(out, "\nLabels per paper");
    for (m, n) in &hist.multiplicity {
        let _ = writeln!(out, "  {m:<8}  {n:>8}");
    }
    out
}

/// CSV renderings: (length statistics, category counts, multiplicity).
pub fn stats_csv(stats: &LengthStats, hist: &CategoryHistograms) -> (String, String, String) {
    let mut s = String::from("statistic,value\n");
    for (k, v) in [
        ("n", stats.n as f64),
        ("mean", stats.mean),
        ("std", stats.std),
        ("min", stats.min),
        ("q25", stats.q25),
        ("q50", stats.q50),
        ("q75", stats.q75),
        ("max", stats.max),
    ] {
        let _ = writeln!(s, "{k},{v}");
    }
    let mut c = String::from("category,count\n");
    for (cat, n) in &hist.ranked {
        let _ = writeln!(c, "{cat},{n}");
    }
    let mut m = String::from("labels,papers\n");
    for (k, n) in &hist.multiplicity {
        let _ = writeln!(m, "{k},{n}");
    }
    (s, c, m)
}

/// Disjoint train/validation/test id lists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndex {
    pub seed: u64,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

impl SplitIndex {
    pub fn len(&self) -> usize {
        self.train_ids.len() + self.val_ids.len() + self.test_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| AtlasError::format(path, e.to_string()))?;
        fs::write(path, text).map_err(|e| AtlasError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| AtlasError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| AtlasError::format(path, e.to_string()))
    }
}

/// Split sizes for `n` records: 10% test and 18% validation, both rounded up.
/// `(train, val, test)` sizes: train rounds down from 72%, test rounds up
/// from 10%, validation takes the rest. Every part stays within one record
/// of its nominal share.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 72 / 100;
    let test = (n * 10).div_ceil(100);
    (train, n - train - test, test)
}

/// Seeded uniform shuffle, then 10% test, 18% validation, rest train.
pub fn split(corpus: &Corpus, seed: u64) -> Result<SplitIndex> {
    let n = corpus.len();
    if n < 10 {
        return Err(AtlasError::InvalidArgument(format!(
            "corpus of {n} records is too small to split (need at least 10)"
        )));
    }
    let mut ids: Vec<String> = corpus.ids().map(str::to_owned).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let (_, n_val, n_test) = split_sizes(n);
    let train_ids = ids.split_off(n_test + n_val);
    let val_ids = ids.split_off(n_test);
    Ok(SplitIndex {
        seed,
        train_ids,
        val_ids,
        test_ids: ids,
    })
}
