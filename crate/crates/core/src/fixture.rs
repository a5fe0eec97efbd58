//! Deterministic synthetic corpus with planted topics.
//!
//! Each topic owns one subject category and a Gaussian blob in embedding
//! space. A minority of papers also carry a cross-listed category shared by
//! all topics. A handful of extra lines exercise the ingest filters: a
//! duplicate id, a withdrawn notice, a too-short abstract and a malformed
//! line.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::json;

use crate::embedstore::{write_embeddings, EmbeddingMatrix};
use crate::error::{AtlasError, Result};

/// Category owned by each planted topic, cycled if there are more topics.
pub const TOPIC_CATEGORIES: [&str; 8] = [
    "hep-ph",
    "astro-ph.GA",
    "cond-mat.mtrl-sci",
    "math.AG",
    "cs.CV",
    "q-bio.NC",
    "stat.ME",
    "physics.optics",
];
pub const CROSS_CATEGORIES: [&str; 3] = ["physics.gen-ph", "math-ph", "cs.LG"];

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSpec {
    pub n_records: usize,
    pub n_topics: usize,
    pub dim: usize,
    /// Standard deviation of topic centers per coordinate.
    pub center_scale: f64,
    /// Within-topic standard deviation per coordinate.
    pub noise: f64,
    /// Probability that a paper also gets a cross-listed category.
    pub cross_rate: f64,
    pub seed: u64,
    pub variant: String,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        FixtureSpec {
            n_records: 1000,
            n_topics: 5,
            dim: 64,
            center_scale: 4.0,
            noise: 1.0,
            cross_rate: 0.3,
            seed: 2023,
            variant: "synthetic".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Fixture {
    /// Metadata file contents, one JSON object per line.
    pub jsonl: String,
    pub embeddings: EmbeddingMatrix,
    /// Planted topic of every valid record.
    pub planted: BTreeMap<String, usize>,
}

const VOCAB: [&[&str]; 8] = [
    &["quark", "gluon", "collider", "higgs", "decay", "lepton", "boson", "parton", "cross", "section"],
    &["galaxy", "stellar", "halo", "redshift", "merger", "dwarf", "disk", "gas", "cluster", "survey"],
    &["crystal", "lattice", "alloy", "phonon", "defect", "thin", "film", "oxide", "band", "gap"],
    &["variety", "scheme", "sheaf", "curve", "divisor", "moduli", "cohomology", "surface", "ideal", "morphism"],
    &["image", "segmentation", "detection", "network", "pixel", "video", "object", "pose", "depth", "scene"],
    &["neuron", "spike", "cortex", "synapse", "circuit", "memory", "plasticity", "firing", "brain", "dendrite"],
    &["estimator", "regression", "bootstrap", "prior", "likelihood", "variance", "sample", "inference", "model", "bias"],
    &["laser", "photon", "cavity", "lens", "waveguide", "pulse", "beam", "mode", "fiber", "nonlinear"],
];
const FILLER: [&str; 12] = ["we", "study", "the", "of", "and", "results", "show", "new", "in", "a", "method", "this"];

fn abstract_text(rng: &mut ChaCha8Rng, topic: usize, words: usize) -> String {
    let vocab = VOCAB[topic % VOCAB.len()];
    (0..words)
        .map(|_| {
            if rng.random_bool(0.6) {
                vocab[rng.random_range(0..vocab.len())]
            } else {
                FILLER[rng.random_range(0..FILLER.len())]
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn generate(spec: &FixtureSpec) -> Result<Fixture> {
    if spec.n_topics < 2 || spec.n_records < spec.n_topics || spec.dim == 0 {
        return Err(AtlasError::InvalidArgument("fixture needs >= 2 topics, one record per topic and d >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centers = Normal::new(0.0, spec.center_scale).map_err(|e| AtlasError::InvalidArgument(e.to_string()))?;
    let noise = Normal::new(0.0, spec.noise).map_err(|e| AtlasError::InvalidArgument(e.to_string()))?;
    let center: Vec<Vec<f64>> = (0..spec.n_topics)
        .map(|_| (0..spec.dim).map(|_| centers.sample(&mut rng)).collect())
        .collect();

    let mut jsonl = String::new();
    let mut ids = Vec::new();
    let mut data: Vec<f32> = Vec::new();
    let mut planted = BTreeMap::new();
    let push_row = |ids: &mut Vec<String>, data: &mut Vec<f32>, rng: &mut ChaCha8Rng, id: &str, topic: usize| {
        ids.push(id.to_owned());
        data.extend(center[topic].iter().map(|c| (c + noise.sample(rng)) as f32));
    };

    for i in 0..spec.n_records {
        let topic = i % spec.n_topics;
        let id = format!("2301.{:05}", i + 1);
        let mut cats = vec![TOPIC_CATEGORIES[topic % TOPIC_CATEGORIES.len()].to_owned()];
        if rng.random_bool(spec.cross_rate) {
            cats.push(CROSS_CATEGORIES[rng.random_range(0..CROSS_CATEGORIES.len())].to_owned());
        }
        let words = rng.random_range(35..=180);
        let line = json!({
            "id": id,
            "title": format!("Synthetic paper {}", i + 1),
            "abstract": abstract_text(&mut rng, topic, words),
            "categories": cats.join(" "),
        });
        let _ = writeln!(jsonl, "{line}");
        push_row(&mut ids, &mut data, &mut rng, &id, topic);
        planted.insert(id, topic);
    }

    // Filter fodder: a repeated id (identical content), a withdrawal notice,
    // a short abstract and a broken line.
    let dup = jsonl.lines().next().expect("n_records >= 1").to_owned();
    let _ = writeln!(jsonl, "{dup}");
    let withdrawn = json!({
        "id": "2302.99001",
        "abstract": format!("This paper has been withdrawn by the authors. {}", abstract_text(&mut rng, 0, 40)),
        "categories": TOPIC_CATEGORIES[0],
    });
    let _ = writeln!(jsonl, "{withdrawn}");
    push_row(&mut ids, &mut data, &mut rng, "2302.99001", 0);
    let short = json!({
        "id": "2302.99002",
        "abstract": abstract_text(&mut rng, 1, 12),
        "categories": TOPIC_CATEGORIES[1],
    });
    let _ = writeln!(jsonl, "{short}");
    push_row(&mut ids, &mut data, &mut rng, "2302.99002", 1);
    let _ = writeln!(jsonl, "{{\"id\": \"2302.99003\", \"abstract\": ");

    let embeddings = EmbeddingMatrix::new(data, spec.dim, ids, spec.variant.clone())?;
    Ok(Fixture {
        jsonl,
        embeddings,
        planted,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixturePaths {
    pub corpus: PathBuf,
    pub embeddings: PathBuf,
    pub planted: PathBuf,
    pub config: PathBuf,
}

/// Pipeline configuration suited to the fixture: category threshold scaled
/// down to the corpus size, sweep over k = 2..=15.
pub fn fixture_config(spec: &FixtureSpec) -> String {
    format!(
        r#"# Synthetic fixture pipeline
output_dir = "out"

[input]
corpus = "corpus.jsonl"

[[input.variant]]
name = "{variant}"
embeddings = "embeddings.emb1"

[filter]
min_abstract_words = 31
min_category_count = 20

[reduce]
variance_target = 0.95
fit_on = "train"

[sweep]
k_min = 2
k_max = 15

[seeds]
split = 0
kmeans = 0
tsne = 0

[report]
top_n = 3
min_count = 10

[project]
enabled = false
"#,
        variant = spec.variant
    )
}

/// Writes the corpus, embeddings, planted labels and a pipeline config.
pub fn write_fixture(spec: &FixtureSpec, dir: impl AsRef<Path>) -> Result<FixturePaths> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| AtlasError::io(dir, e))?;
    let fx = generate(spec)?;
    let paths = FixturePaths {
        corpus: dir.join("corpus.jsonl"),
        embeddings: dir.join("embeddings.emb1"),
        planted: dir.join("planted.csv"),
        config: dir.join("pipeline.toml"),
    };
    fs::write(&paths.corpus, &fx.jsonl).map_err(|e| AtlasError::io(&paths.corpus, e))?;
    write_embeddings(&fx.embeddings, &paths.embeddings)?;
    let mut planted = String::from("id,topic\n");
    for (id, t) in &fx.planted {
        let _ = writeln!(planted, "{id},{t}");
    }
    fs::write(&paths.planted, planted).map_err(|e| AtlasError::io(&paths.planted, e))?;
    fs::write(&paths.config, fixture_config(spec)).map_err(|e| AtlasError::io(&paths.config, e))?;
    Ok(paths)
}
