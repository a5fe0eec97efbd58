use std::fs;
use std::path::Path;

use corpus_atlas_core::embedstore::{write_embeddings, EmbeddingMatrix};
use corpus_atlas_core::fixture::{self, FixtureSpec};
use corpus_atlas_core::pipeline::{run_pipeline, FitOn, Manifest, PipelineConfig, VariantInput, MANIFEST_FILE};
use corpus_atlas_core::AtlasError;

fn small_spec() -> FixtureSpec {
    FixtureSpec {
        n_records: 150,
        n_topics: 3,
        ..FixtureSpec::default()
    }
}

fn config_for(dir: &Path, spec: &FixtureSpec) -> PipelineConfig {
    let paths = fixture::write_fixture(spec, dir).unwrap();
    PipelineConfig::load(&paths.config).unwrap()
}

#[test]
fn oversized_k_range_is_trimmed_with_warnings() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config_for(dir.path(), &small_spec());
    cfg.sweep.k_max = 200;
    let out = run_pipeline(&cfg).unwrap();
    let m = out.manifest;
    assert!(m.complete);
    let train = m.summary.train.unwrap();
    let skipped: Vec<&String> = m.warnings.iter().filter(|w| w.contains("skipped k=")).collect();
    assert_eq!(skipped.len(), 200 - train);
    assert!(skipped[0].contains("exceeds"));
    assert_eq!(m.summary.best_k, Some(3));
    let sweep = fs::read_to_string(cfg.output_dir.join("synthetic/sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 1 + train - 1);
}

#[test]
fn default_parameters_are_echoed() {
    let dir = tempfile::tempdir().unwrap();
    let spec = FixtureSpec {
        n_records: 1500,
        ..FixtureSpec::default()
    };
    let fx = config_for(dir.path(), &spec);
    let cfg = PipelineConfig {
        output_dir: dir.path().join("defaults"),
        input: fx.input.clone(),
        ..PipelineConfig::default()
    };
    let out = run_pipeline(&cfg).unwrap();
    let p = &out.manifest.parameters;
    assert_eq!((p.min_abstract_words, p.min_category_count), (31, 250));
    assert_eq!(p.variance_target, 0.95);
    assert_eq!((p.k_min, p.k_max), (2, 50));
    assert_eq!(p.fit_on, FitOn::Train);
    let text = fs::read_to_string(&out.manifest_path).unwrap();
    assert_eq!(Manifest::load(&out.manifest_path).unwrap(), out.manifest);
    assert!(text.contains("\"min_category_count\": 250"));
    assert!(text.contains("\"k_max\": 50"));
    // Cross-listed categories fall below 250 and are stripped.
    assert!(out.manifest.summary.best_k.is_some());
}

#[test]
fn failing_stage_is_named_and_manifest_still_written() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_for(dir.path(), &small_spec());
    let emb = &cfg.input.variant[0].embeddings;
    let bytes = fs::read(emb).unwrap();
    fs::write(emb, &bytes[..bytes.len() - 3]).unwrap();
    let err = run_pipeline(&cfg).unwrap_err();
    match &err {
        AtlasError::Stage { stage, .. } => assert_eq!(stage, "align"),
        other => panic!("unexpected {other}"),
    }
    assert!(err.to_string().contains("align"));
    let m = Manifest::load(cfg.output_dir.join(MANIFEST_FILE)).unwrap();
    assert!(!m.complete);
    assert_eq!(m.failed_stage.as_deref(), Some("align"));
    assert!(m.error.unwrap().contains("payload length mismatch"));
    assert_eq!(m.artifacts.len(), 1);
    assert_eq!(m.artifacts[0].name, "corpus");
}

#[test]
fn invalid_config_fails_in_config_stage() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config_for(dir.path(), &small_spec());
    cfg.sweep.k_min = 9;
    cfg.sweep.k_max = 3;
    let err = run_pipeline(&cfg).unwrap_err();
    assert!(matches!(&err, AtlasError::Stage { stage, .. } if stage == "config"), "{err}");
}

#[test]
fn projection_and_extra_variants() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec();
    let mut cfg = config_for(dir.path(), &spec);

    // A structureless variant scored alongside the planted one.
    let planted = fixture::generate(&spec).unwrap().embeddings;
    let n = planted.nrows();
    let noise: Vec<f32> = (0..n * 8).map(|i| ((i * 7919 % 1013) as f32 / 1013.0) - 0.5).collect();
    let noisy = EmbeddingMatrix::new(noise, 8, planted.ids().to_vec(), "noise").unwrap();
    let noisy_path = dir.path().join("noise.emb1");
    write_embeddings(&noisy, &noisy_path).unwrap();
    cfg.input.variant.insert(
        0,
        VariantInput {
            name: "noise".into(),
            embeddings: noisy_path,
            reduce: false,
        },
    );
    cfg.reduce.fit_on = FitOn::All;
    cfg.project.enabled = true;
    cfg.project.perplexity = 4.0;
    cfg.project.iterations = 300;
    cfg.sweep.k_max = 6;

    let m = run_pipeline(&cfg).unwrap().manifest;
    assert_eq!(m.summary.selected_variant.as_deref(), Some("synthetic"));
    assert_eq!(m.summary.variants.len(), 2);
    assert_eq!(m.summary.variants[0].components, None);
    assert!(m.artifact("pca:noise").is_none());
    assert!(m.artifact("pca:synthetic").is_some());
    let proj = fs::read_to_string(cfg.output_dir.join("proj.csv")).unwrap();
    let mut lines = proj.lines();
    assert_eq!(lines.next(), Some("id,x,y,cluster,category"));
    assert_eq!(lines.count(), m.summary.test.unwrap());
    assert!(m.artifact("projection").is_some());
}

#[test]
fn reruns_into_a_fresh_directory_match() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_for(dir.path(), &small_spec());
    let a = run_pipeline(&cfg).unwrap().manifest;
    let other = PipelineConfig {
        output_dir: dir.path().join("elsewhere"),
        ..cfg.clone()
    };
    let b = run_pipeline(&other).unwrap().manifest;
    assert_eq!(a, b);
    for (path, _) in a.digests() {
        assert_eq!(
            fs::read(cfg.output_dir.join(path)).unwrap(),
            fs::read(other.output_dir.join(path)).unwrap(),
            "{path}"
        );
    }
}
