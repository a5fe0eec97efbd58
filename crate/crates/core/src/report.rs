//! Relating discovered clusters to the original subject categories.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, MacroAliases};
use crate::error::{AtlasError, Result};

pub const DEFAULT_TOP_N: usize = 3;
pub const DEFAULT_MIN_COUNT: usize = 10;
/// Number of largest clusters that get a bar-chart data file.
pub const BAR_CHART_CLUSTERS: usize = 4;

/// Cluster x category paper counts. A paper with m categories contributes
/// to m cells of its cluster's row.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Crosstab {
    pub counts: BTreeMap<usize, BTreeMap<String, usize>>,
    /// Papers per cluster.
    pub sizes: BTreeMap<usize, usize>,
}

impl Crosstab {
    pub fn categories(&self) -> BTreeSet<&str> {
        self.counts.values().flat_map(|row| row.keys().map(String::as_str)).collect()
    }

    pub fn get(&self, cluster: usize, category: &str) -> usize {
        self.counts
            .get(&cluster)
            .and_then(|r| r.get(category))
            .copied()
            .unwrap_or(0)
    }

    /// Wide CSV: `cluster,size,<category>...`, one row per cluster.
    pub fn to_csv(&self) -> String {
        let cats: Vec<&str> = self.categories().into_iter().collect();
        let mut s = String::from("cluster,size");
        for c in &cats {
            s.push(',');
            s.push_str(c);
        }
        s.push('\n');
        for (&cluster, &size) in &self.sizes {
            let _ = write!(s, "{cluster},{size}");
            for c in &cats {
                let _ = write!(s, ",{}", self.get(cluster, c));
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> std::result::Result<Self, String> {
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().ok_or("empty crosstab CSV")?.split(',').collect();
        if header.len() < 2 || header[0] != "cluster" || header[1] != "size" {
            return Err("crosstab CSV must start with `cluster,size`".into());
        }
        let mut out = Crosstab::default();
        for (ln, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != header.len() {
                return Err(format!("row {}: expected {} fields", ln + 2, header.len()));
            }
            let num = |s: &str| s.parse::<usize>().map_err(|e| format!("row {}: {e}", ln + 2));
            let cluster = num(fields[0])?;
            out.sizes.insert(cluster, num(fields[1])?);
            let row = out.counts.entry(cluster).or_default();
            for (cat, v) in header[2..].iter().zip(&fields[2..]) {
                let v = num(v)?;
                if v > 0 {
                    row.insert((*cat).to_owned(), v);
                }
            }
        }
        Ok(out)
    }
}

/// Counts categories per cluster for the labeled papers.
pub fn crosstab(labels: &[(String, usize)], corpus: &Corpus) -> Result<Crosstab> {
    let index = corpus.index();
    let mut out = Crosstab::default();
    for (id, cluster) in labels {
        let &pos = index.get(id.as_str()).ok_or_else(|| AtlasError::UnknownId(id.clone()))?;
        *out.sizes.entry(*cluster).or_default() += 1;
        let row = out.counts.entry(*cluster).or_default();
        for c in &corpus.records[pos].categories {
            *row.entry(c.clone()).or_default() += 1;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterTop {
    pub cluster: usize,
    pub size: usize,
    pub top: Vec<(String, usize)>,
}

/// Per-cluster categories with at least `min_count` papers, by count then
/// code, truncated to `top_n`. Clusters come largest first (lower id on
/// ties).
pub fn top_categories(tab: &Crosstab, top_n: usize, min_count: usize) -> Vec<ClusterTop> {
    let mut out: Vec<ClusterTop> = tab
        .sizes
        .iter()
        .map(|(&cluster, &size)| {
            let mut top: Vec<(String, usize)> = tab
                .counts
                .get(&cluster)
                .into_iter()
                .flatten()
                .filter(|(_, &n)| n >= min_count && n > 0)
                .map(|(c, &n)| (c.clone(), n))
                .collect();
            top.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            top.truncate(top_n);
            ClusterTop { cluster, size, top }
        })
        .collect();
    out.sort_by(|a, b| b.size.cmp(&a.size).then(a.cluster.cmp(&b.cluster)));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroPurity {
    /// Distinct macro-categories among each cluster's surviving top entries,
    /// in the order of the `top` list. Clusters with an empty list are absent.
    pub profile: Vec<(usize, Vec<String>)>,
    pub one: f64,
    pub two: f64,
    pub three_plus: f64,
}

impl MacroPurity {
    pub fn counted(&self) -> usize {
        self.profile.len()
    }
}

/// Fractions of clusters whose top categories span exactly one, exactly
/// two, or three or more macro-categories.
pub fn macro_purity(tops: &[ClusterTop], aliases: &MacroAliases) -> MacroPurity {
    let mut profile = Vec::new();
    let mut tally = [0usize; 3];
    for t in tops.iter().filter(|t| !t.top.is_empty()) {
        let macros: BTreeSet<String> = t.top.iter().map(|(c, _)| aliases.macro_of(c).to_owned()).collect();
        tally[macros.len().clamp(1, 3) - 1] += 1;
        profile.push((t.cluster, macros.into_iter().collect()));
    }
    let total = profile.len();
    let frac = |k: usize| if total == 0 { 0.0 } else { k as f64 / total as f64 };
    MacroPurity {
        profile,
        one: frac(tally[0]),
        two: frac(tally[1]),
        three_plus: frac(tally[2]),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub crosstab: Crosstab,
    pub top: Vec<ClusterTop>,
    pub purity: MacroPurity,
    pub top_n: usize,
    pub min_count: usize,
}

pub fn build_report(
    labels: &[(String, usize)],
    corpus: &Corpus,
    top_n: usize,
    min_count: usize,
    aliases: &MacroAliases,
) -> Result<ClusterReport> {
    let tab = crosstab(labels, corpus)?;
    let top = top_categories(&tab, top_n, min_count);
    let purity = macro_purity(&top, aliases);
    Ok(ClusterReport {
        crosstab: tab,
        top,
        purity,
        top_n,
        min_count,
    })
}

fn ordinal(i: usize) -> String {
    let suffix = match (i % 10, i % 100) {
        (1, r) if r != 11 => "st",
        (2, r) if r != 12 => "nd",
        (3, r) if r != 13 => "rd",
        _ => "th",
    };
    format!("{i}{suffix}")
}

/// Aligned text table: one row per cluster (largest first), one column per
/// rank, `-` where a cluster has fewer surviving categories.
pub fn format_table(report: &ClusterReport) -> String {
    let mut header = vec!["Cluster".to_owned()];
    header.extend((1..=report.top_n).map(|i| format!("{} most frequent", ordinal(i))));
    let mut rows = vec![header];
    for t in &report.top {
        let mut row = vec![t.cluster.to_string()];
        for r in 0..report.top_n {
            row.push(match t.top.get(r) {
                Some((c, n)) => format!("{c} ({n})"),
                None => "-".to_owned(),
            });
        }
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut s = String::new();
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(cell, &w)| format!("{cell:<w$}"))
            .collect();
        let _ = writeln!(s, "{}", cells.join(" | ").trim_end());
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
            let _ = writeln!(s, "{}", rule.join("-+-"));
        }
    }
    let p = &report.purity;
    let _ = writeln!(
        s,
        "\nmacro-categories per cluster over {} clusters (min count {}): 1: {:.1}%  2: {:.1}%  3+: {:.1}%",
        p.counted(),
        report.min_count,
        100.0 * p.one,
        100.0 * p.two,
        100.0 * p.three_plus
    );
    s
}

/// Writes `table.txt`, `crosstab.csv`, `top.csv`, `purity.csv` and one
/// `bars_cluster_<id>.csv` per largest cluster into `dir`. Returns the
/// written paths in a fixed order.
pub fn emit_report(report: &ClusterReport, dir: impl AsRef<Path>) -> Result<Vec<std::path::PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| AtlasError::io(dir, e))?;
    let mut files: Vec<(String, String)> = Vec::new();
    files.push(("table.txt".into(), format_table(report)));
    files.push(("crosstab.csv".into(), report.crosstab.to_csv()));

    let mut top = String::from("cluster,size,rank,category,count\n");
    for t in &report.top {
        for (r, (c, n)) in t.top.iter().enumerate() {
            let _ = writeln!(top, "{},{},{},{c},{n}", t.cluster, t.size, r + 1);
        }
    }
    files.push(("top.csv".into(), top));

    let p = &report.purity;
    let counted = p.counted() as f64;
    let mut purity = String::from("macros,clusters,fraction\n");
    for (label, f) in [("1", p.one), ("2", p.two), ("3+", p.three_plus)] {
        let _ = writeln!(purity, "{label},{},{f}", (f * counted).round() as usize);
    }
    files.push(("purity.csv".into(), purity));

    for t in report.top.iter().take(BAR_CHART_CLUSTERS) {
        let mut bars: Vec<(&String, &usize)> = report
            .crosstab
            .counts
            .get(&t.cluster)
            .into_iter()
            .flatten()
            .collect();
        bars.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
        let mut s = String::from("category,count\n");
        for (c, n) in bars {
            let _ = writeln!(s, "{c},{n}");
        }
        files.push((format!("bars_cluster_{}.csv", t.cluster), s));
    }

    let mut written = Vec::with_capacity(files.len());
    for (name, body) in files {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| AtlasError::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

/// `id,cluster` CSV.
pub fn labels_to_csv(labels: &[(String, usize)]) -> String {
    let mut s = String::from("id,cluster\n");
    for (id, c) in labels {
        let _ = writeln!(s, "{id},{c}");
    }
    s
}

pub fn write_labels(labels: &[(String, usize)], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, labels_to_csv(labels)).map_err(|e| AtlasError::io(path, e))
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<(String, usize)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| AtlasError::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == "id,cluster" => {}
        _ => return Err(AtlasError::format(path, "expected `id,cluster` header")),
    }
    let mut seen = HashMap::new();
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, c) = line
            .rsplit_once(',')
            .ok_or_else(|| AtlasError::format(path, format!("line {}: expected `id,cluster`", i + 2)))?;
        let c: usize = c
            .trim()
            .parse()
            .map_err(|e| AtlasError::format(path, format!("line {}: {e}", i + 2)))?;
        if seen.insert(id.to_owned(), c).is_some() {
            return Err(AtlasError::format(path, format!("line {}: duplicate id `{id}`", i + 2)));
        }
        out.push((id.to_owned(), c));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{filter_records, FilterLog, FilterPolicy, PaperRecord};

    fn corpus(recs: &[(&str, &[&str])]) -> Corpus {
        let words = vec!["w"; 40].join(" ");
        let records = recs
            .iter()
            .map(|(id, cats)| PaperRecord::new(*id, words.clone(), cats.iter().map(|s| s.to_string()).collect()))
            .collect();
        let policy = FilterPolicy {
            min_abstract_words: 1,
            min_category_count: 1,
        };
        filter_records(records, policy, FilterLog::default()).unwrap()
    }

    fn labels(v: &[(&str, usize)]) -> Vec<(String, usize)> {
        v.iter().map(|(i, c)| (i.to_string(), *c)).collect()
    }

    #[test]
    fn crosstab_counts_every_label() {
        let c = corpus(&[("p1", &["A"]), ("p2", &["A", "B"]), ("p3", &["B"])]);
        let t = crosstab(&labels(&[("p1", 0), ("p2", 0), ("p3", 1)]), &c).unwrap();
        assert_eq!(t.get(0, "A"), 2);
        assert_eq!(t.get(0, "B"), 1);
        assert_eq!(t.get(1, "B"), 1);
        assert_eq!(t.get(1, "A"), 0);
        assert_eq!(t.sizes, BTreeMap::from([(0, 2), (1, 1)]));

        let single = crosstab(&labels(&[("p1", 4)]), &c).unwrap();
        assert_eq!(single.counts.len(), 1);
        assert_eq!(single.get(4, "A"), 1);

        assert!(matches!(crosstab(&labels(&[("zz", 0)]), &c), Err(AtlasError::UnknownId(_))));
    }

    fn tab_of(rows: &[(usize, &[(&str, usize)])]) -> Crosstab {
        let mut t = Crosstab::default();
        for (cl, cells) in rows {
            let row: BTreeMap<String, usize> = cells.iter().map(|(c, n)| (c.to_string(), *n)).collect();
            t.sizes.insert(*cl, row.values().sum());
            t.counts.insert(*cl, row);
        }
        t
    }

    #[test]
    fn min_count_and_ties() {
        let t = tab_of(&[(0, &[("A", 9), ("B", 12), ("C", 15)])]);
        assert_eq!(top_categories(&t, 3, 10)[0].top, vec![("C".into(), 15), ("B".into(), 12)]);

        let t = tab_of(&[(0, &[("A", 3), ("B", 4)])]);
        assert!(top_categories(&t, 3, 10)[0].top.is_empty());

        let t = tab_of(&[(0, &[("B", 20), ("A", 20)])]);
        assert_eq!(top_categories(&t, 3, 10)[0].top, vec![("A".into(), 20), ("B".into(), 20)]);
    }

    #[test]
    fn clusters_ordered_by_size() {
        let t = tab_of(&[(0, &[("A", 10)]), (1, &[("B", 30)]), (2, &[("C", 10)])]);
        let order: Vec<usize> = top_categories(&t, 3, 1).iter().map(|c| c.cluster).collect();
        assert_eq!(order, vec![1, 0, 2]);
    }

    #[test]
    fn purity_examples() {
        let aliases = MacroAliases::new();
        let astro = ClusterTop {
            cluster: 8,
            size: 100,
            top: vec![("astro-ph.GA".into(), 54), ("astro-ph".into(), 39), ("astro-ph.CO".into(), 34)],
        };
        let stats = ClusterTop {
            cluster: 29,
            size: 40,
            top: vec![("stat.TH".into(), 31), ("math.ST".into(), 31)],
        };
        let p = macro_purity(std::slice::from_ref(&astro), &aliases);
        assert_eq!(p.profile, vec![(8, vec!["astro-ph".to_string()])]);
        let p = macro_purity(std::slice::from_ref(&stats), &aliases);
        assert_eq!(p.profile[0].1.len(), 2);

        let mut hep = astro.clone();
        hep.cluster = 1;
        hep.top = vec![("hep-th".into(), 20)];
        let empty = ClusterTop {
            cluster: 3,
            size: 5,
            top: vec![],
        };
        let p = macro_purity(&[astro, hep, stats, empty], &aliases);
        assert_eq!((p.one, p.two, p.three_plus), (2.0 / 3.0, 1.0 / 3.0, 0.0));
        assert_eq!(p.counted(), 3);
    }

    #[test]
    fn math_ph_alias_collapses() {
        let t = ClusterTop {
            cluster: 2,
            size: 90,
            top: vec![("hep-th".into(), 44), ("math-ph".into(), 37), ("math.MP".into(), 37)],
        };
        let p = macro_purity(&[t], &MacroAliases::new());
        assert_eq!(p.profile[0].1, vec!["hep-th".to_string(), "math".to_string()]);
        assert_eq!(p.two, 1.0);
    }

    #[test]
    fn crosstab_csv_round_trip() {
        let t = tab_of(&[(0, &[("A", 3), ("B", 1)]), (5, &[("C", 2)])]);
        assert_eq!(Crosstab::from_csv(&t.to_csv()).unwrap(), t);
        assert!(Crosstab::from_csv("x,y\n").is_err());
    }

    #[test]
    fn table_uses_dash_placeholders() {
        let c = corpus(&[("p1", &["A"]), ("p2", &["A", "B"]), ("p3", &["B"])]);
        let r = build_report(&labels(&[("p1", 0), ("p2", 0), ("p3", 1)]), &c, 3, 2, &MacroAliases::new()).unwrap();
        let table = format_table(&r);
        let lines: Vec<&str> = table.lines().collect();
        assert!(lines[0].starts_with("Cluster | 1st most frequent | 2nd most frequent | 3rd most frequent"));
        assert!(lines[2].starts_with("0 "));
        assert!(lines[2].contains("A (2)"));
        assert!(lines[3].starts_with("1 "));
        assert_eq!(lines[3].matches(" - ").count() + lines[3].ends_with(" -") as usize, 3);
    }

    #[test]
    fn emitted_files_are_byte_stable() {
        let c = corpus(&[("p1", &["A"]), ("p2", &["A", "B"]), ("p3", &["B"])]);
        let l = labels(&[("p1", 0), ("p2", 0), ("p3", 1)]);
        let r = build_report(&l, &c, 3, 1, &MacroAliases::new()).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let fa = emit_report(&r, a.path()).unwrap();
        let fb = emit_report(&r, b.path()).unwrap();
        assert_eq!(fa.len(), 4 + 2);
        for (x, y) in fa.iter().zip(&fb) {
            assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
        }
        let back = Crosstab::from_csv(&fs::read_to_string(a.path().join("crosstab.csv")).unwrap()).unwrap();
        assert_eq!(back, r.crosstab);
    }

    #[test]
    fn labels_csv_round_trip() {
        let l = labels(&[("2301.00001", 3), ("hep-th/9901001", 0)]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("labels.csv");
        write_labels(&l, &p).unwrap();
        assert_eq!(read_labels(&p).unwrap(), l);
        fs::write(&p, "id,cluster\na,1\na,2\n").unwrap();
        assert!(read_labels(&p).is_err());
    }

    #[test]
    fn ordinals() {
        let o: Vec<String> = [1, 2, 3, 4, 11, 12, 13, 21, 22].iter().map(|&i| ordinal(i)).collect();
        assert_eq!(o, ["1st", "2nd", "3rd", "4th", "11th", "12th", "13th", "21st", "22nd"]);
    }
}
