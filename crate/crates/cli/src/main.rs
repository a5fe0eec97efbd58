use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use corpus_atlas_core::cluster::{self, KMeansParams};
use corpus_atlas_core::corpus::{self, Corpus, FilterPolicy, MacroAliases, SplitIndex};
use corpus_atlas_core::embedstore::{read_embeddings, write_embeddings, EmbeddingMatrix};
use corpus_atlas_core::fixture::{self, FixtureSpec};
use corpus_atlas_core::modelsel::{self, SweepConfig};
use corpus_atlas_core::pipeline::{self, PipelineConfig};
use corpus_atlas_core::project::{self, TsneConfig};
use corpus_atlas_core::{reduce, report};

#[derive(Parser)]
#[command(name = "corpus-atlas", version, about = "Discover and describe categories in a corpus of paper abstracts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum FitOnArg {
    Train,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum Part {
    Train,
    Val,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Filter a JSONL metadata file into a corpus.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = corpus::DEFAULT_MIN_ABSTRACT_WORDS)]
        min_words: usize,
        #[arg(long, default_value_t = corpus::DEFAULT_MIN_CATEGORY_COUNT)]
        min_cat_count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print abstract length statistics and category histograms.
    Stats {
        corpus: PathBuf,
        /// Also write stats.csv, categories.csv and multiplicity.csv here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Seeded train/validation/test split of a corpus.
    Split {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Keep the rows of an embedding file that belong to one split part.
    Subset {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long, value_enum)]
        part: Part,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit PCA and write the reduced embeddings.
    Reduce {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 0.95)]
        target: f64,
        /// Split index; with it PCA is fit on the training rows by default.
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long, value_enum)]
        fit_on: Option<FitOnArg>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Fit K-Means and label every row.
    Cluster {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        n_init: usize,
        #[arg(long, default_value_t = 300)]
        max_iter: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Score a range of k by validation silhouette.
    Sweep {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long, default_value_t = 2)]
        kmin: usize,
        #[arg(long, default_value_t = 50)]
        kmax: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        n_init: usize,
        #[arg(long, default_value_t = modelsel::DEFAULT_SUBSAMPLE_CAP)]
        subsample_cap: usize,
        #[arg(long)]
        out: PathBuf,
        /// Plot data; defaults to `<out stem>_plot.csv` next to `--out`.
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Two-dimensional t-SNE layout.
    Project {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 30.0)]
        perplexity: f64,
        #[arg(long, default_value_t = 1000)]
        iterations: usize,
        #[arg(long, default_value_t = 200.0)]
        learning_rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5000)]
        max_points: usize,
        /// Adds a `cluster` column from an `id,cluster` file.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Adds a `category` column (first listed category).
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cluster-versus-category tables.
    Report {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = report::DEFAULT_MIN_COUNT)]
        min_count: usize,
        #[arg(long, default_value_t = report::DEFAULT_TOP_N)]
        top: usize,
        /// `category,macro` overrides.
        #[arg(long)]
        aliases: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every stage from a TOML configuration.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write the synthetic planted-topic fixture and its pipeline config.
    Fixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        records: usize,
        #[arg(long, default_value_t = 5)]
        topics: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 2023)]
        seed: u64,
    },
}

fn split_part(split: &SplitIndex, part: Part) -> &[String] {
    match part {
        Part::Train => &split.train_ids,
        Part::Val => &split.val_ids,
        Part::Test => &split.test_ids,
    }
}

fn plot_path_for(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "sweep".into());
    out.with_file_name(format!("{stem}_plot.csv"))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest {
            input,
            min_words,
            min_cat_count,
            out,
        } => {
            let policy = FilterPolicy {
                min_abstract_words: min_words,
                min_category_count: min_cat_count,
            };
            let c = corpus::load_corpus(&input, policy)?;
            let p = &c.provenance;
            for m in &p.malformed {
                log::warn!("line {}: {}", m.line, m.message);
            }
            println!(
                "{} records kept of {} lines ({} malformed, {} duplicates, {} withdrawn, {} short, {} without labels)",
                c.len(),
                p.lines_read,
                p.malformed.len(),
                p.duplicates_removed,
                p.withdrawn_removed,
                p.short_abstract_removed,
                p.label_less_removed
            );
            for (cat, n) in &p.categories_removed {
                println!("dropped category {cat} ({n} records)");
            }
            c.save(&out)?;
        }
        Command::Stats { corpus: path, csv } => {
            let c = Corpus::load(&path)?;
            let stats = corpus::length_stats(&c)?;
            let hist = corpus::category_histograms(&c);
            print!("{}", corpus::format_stats(&stats, &hist));
            if let Some(dir) = csv {
                fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
                let (s, cats, mult) = corpus::stats_csv(&stats, &hist);
                write(&dir.join("stats.csv"), &s)?;
                write(&dir.join("categories.csv"), &cats)?;
                write(&dir.join("multiplicity.csv"), &mult)?;
            }
        }
        Command::Split { corpus: path, seed, out } => {
            let c = Corpus::load(&path)?;
            let s = corpus::split(&c, seed)?;
            println!(
                "train {} / val {} / test {}",
                s.train_ids.len(),
                s.val_ids.len(),
                s.test_ids.len()
            );
            s.save(&out)?;
        }
        Command::Subset {
            input,
            split,
            part,
            out,
        } => {
            let m = read_embeddings(&input)?;
            let s = SplitIndex::load(&split)?;
            write_embeddings(&m.select(split_part(&s, part))?, &out)?;
        }
        Command::Reduce {
            input,
            target,
            split,
            fit_on,
            out,
            model,
        } => {
            let m = read_embeddings(&input)?;
            m.check_finite()?;
            let x = m.to_array();
            let fit_on = fit_on.unwrap_or(if split.is_some() { FitOnArg::Train } else { FitOnArg::All });
            let pca = match (fit_on, &split) {
                (FitOnArg::All, _) => reduce::fit(&x, target)?,
                (FitOnArg::Train, Some(sp)) => {
                    let s = SplitIndex::load(sp)?;
                    reduce::fit(&m.select(&s.train_ids)?.to_array(), target)?
                }
                (FitOnArg::Train, None) => bail!("--fit-on train needs --split"),
            };
            let z = reduce::transform(&pca, &x)?;
            println!(
                "{} components keep {:.4} of the variance",
                pca.n_components(),
                pca.explained_ratio.iter().sum::<f64>()
            );
            pca.save(&model)?;
            let zm = EmbeddingMatrix::from_array(&z, m.ids().to_vec(), format!("{}+pca", m.variant()))?;
            write_embeddings(&zm, &out)?;
        }
        Command::Cluster {
            input,
            k,
            seed,
            n_init,
            max_iter,
            out,
            labels,
        } => {
            let m = read_embeddings(&input)?;
            let x = m.to_array();
            let params = KMeansParams::new(k).with_seed(seed).with_n_init(n_init).with_max_iter(max_iter);
            let (model, assigned) = cluster::fit_with_labels(&x, &params)?;
            println!("k={k} wcss={} iterations={}", model.wcss, model.iterations);
            model.save(&out)?;
            if let Some(path) = labels {
                let rows: Vec<(String, usize)> = m.ids().iter().cloned().zip(assigned).collect();
                report::write_labels(&rows, &path)?;
            }
        }
        Command::Sweep {
            train,
            val,
            kmin,
            kmax,
            seed,
            n_init,
            subsample_cap,
            out,
            plot,
        } => {
            if kmin > kmax {
                bail!("empty k range {kmin}..={kmax}");
            }
            let xt = read_embeddings(&train)?.to_array();
            let xv = read_embeddings(&val)?.to_array();
            let mut cfg = SweepConfig::new(kmin..=kmax, seed);
            cfg.kmeans = cfg.kmeans.with_n_init(n_init);
            cfg.subsample_cap = subsample_cap;
            let r = modelsel::sweep(&xt, &xv, &cfg)?;
            for s in &r.skipped {
                log::warn!("skipped k={}: {}", s.k, s.reason);
            }
            let plot = plot.unwrap_or_else(|| plot_path_for(&out));
            r.write(&out, &plot)?;
            println!("best k = {}", r.best_k);
        }
        Command::Project {
            input,
            perplexity,
            iterations,
            learning_rate,
            seed,
            max_points,
            labels,
            corpus: corpus_path,
            out,
        } => {
            let m = read_embeddings(&input)?;
            let rows = modelsel::subsample_indices(m.nrows(), max_points, seed).unwrap_or_else(|| (0..m.nrows()).collect());
            if rows.len() < m.nrows() {
                log::info!("projecting a seeded subsample of {} of {} rows", rows.len(), m.nrows());
            }
            let ids: Vec<String> = rows.iter().map(|&i| m.ids()[i].clone()).collect();
            let m = m.select(&ids)?;
            let cfg = TsneConfig {
                perplexity,
                iterations,
                learning_rate,
                seed,
                ..TsneConfig::default()
            };
            let res = project::tsne_keyed(&m.to_array(), &ids, &cfg)?;
            let text = match (labels, corpus_path) {
                (None, None) => pipeline::projection_csv(&ids, &res.embedding, None),
                (lab, cor) => {
                    let lab = lab.map(|p| report::read_labels(&p)).transpose()?;
                    let lab: std::collections::HashMap<String, usize> = lab.unwrap_or_default().into_iter().collect();
                    let cor = cor.map(|p| Corpus::load(&p)).transpose()?;
                    let mut s = String::from("id,x,y,cluster,category\n");
                    for (i, id) in ids.iter().enumerate() {
                        let c = lab.get(id).map(|c| c.to_string()).unwrap_or_default();
                        let cat = cor
                            .as_ref()
                            .and_then(|c| c.get(id))
                            .and_then(|r| r.categories.first().cloned())
                            .unwrap_or_default();
                        s.push_str(&format!("{id},{},{},{c},{cat}\n", res.embedding[[i, 0]], res.embedding[[i, 1]]));
                    }
                    s
                }
            };
            write(&out, &text)?;
        }
        Command::Report {
            labels,
            corpus: path,
            min_count,
            top,
            aliases,
            out,
        } => {
            let lab = report::read_labels(&labels)?;
            let c = Corpus::load(&path)?;
            let aliases = match aliases {
                Some(p) => MacroAliases::from_file(&p)?,
                None => MacroAliases::new(),
            };
            let rep = report::build_report(&lab, &c, top, min_count, &aliases)?;
            report::emit_report(&rep, &out)?;
            print!("{}", report::format_table(&rep));
        }
        Command::Run { config } => {
            let cfg = PipelineConfig::load(&config)?;
            let outcome = pipeline::run_pipeline(&cfg).with_context(|| {
                format!("pipeline failed; see {}", cfg.output_dir.join(pipeline::MANIFEST_FILE).display())
            })?;
            let s = &outcome.manifest.summary;
            for w in &outcome.manifest.warnings {
                log::warn!("{w}");
            }
            println!(
                "variant {} best k {} ({} artifacts, manifest {})",
                s.selected_variant.as_deref().unwrap_or("-"),
                s.best_k.map(|k| k.to_string()).unwrap_or_else(|| "-".into()),
                outcome.manifest.artifacts.len(),
                outcome.manifest_path.display()
            );
        }
        Command::Fixture {
            out,
            records,
            topics,
            dim,
            seed,
        } => {
            let spec = FixtureSpec {
                n_records: records,
                n_topics: topics,
                dim,
                seed,
                ..FixtureSpec::default()
            };
            let paths = fixture::write_fixture(&spec, &out)?;
            println!("fixture written; run with: corpus-atlas run --config {}", paths.config.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
