//! Subcommand implementations. Each returns a printable outcome and leaves
//! process-exit policy to main.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::sync::atomic::{AtomicUsize, Ordering};

use compass_core::cluster::{
    embed, kmeans, reduce, save_vectors, texts_by_cluster, top_keywords, EmbeddingProvider,
};
use compass_core::corpus::{
    inject_descriptor, load_personas, split_corpus, write_conditioned, write_personas, Condition,
    ConditionedPersona, Persona,
};
use compass_core::elicit::{
    base_corpus_digest, digest_bytes, run_study, RunManifest, RunOptions, RunSummary,
};
use compass_core::error::{Error, Result};
use compass_core::mocknet::{self, PlantConfig};
use compass_core::pct::{CompassPoint, ScoringMatrix};
use compass_core::report::{render_deviation, Overlays, TableBundle};
use compass_core::stats::{bin_points, deviation_map};

use crate::analysis::{
    analyze_runs, emit_outputs, load_run, read_bundle, table_rows, write_bundle, AnalysisBundle,
};
use crate::config::{PipelineConfig, ProviderKind};

fn load_corpus(cfg: &PipelineConfig) -> Result<Vec<Persona>> {
    load_personas(cfg.corpus_path()?, &cfg.corpus.field)
}

fn matrix_digest(matrix: &ScoringMatrix) -> String {
    digest_bytes(matrix.to_canonical_json().as_bytes())
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestSummary {
    pub n_personas: usize,
    pub corpus_digest: String,
    pub out_dir: PathBuf,
}

/// Normalizes a corpus into a working directory: the (optionally subsampled)
/// base corpus plus one rendered file per condition.
pub fn cmd_ingest(
    cfg: &PipelineConfig,
    out_dir: &Path,
    split: Option<f64>,
    seed: u64,
) -> Result<IngestSummary> {
    let mut personas = load_corpus(cfg)?;
    if let Some(fraction) = split {
        personas = split_corpus(&personas, fraction, seed)?;
        // Ids are positional in the written file, so reassign them to match
        // what a later load of that file will see.
        for (idx, p) in personas.iter_mut().enumerate() {
            p.id = idx as u32;
        }
    }
    std::fs::create_dir_all(out_dir)?;
    write_personas(&out_dir.join("personas.jsonl"), &personas, &cfg.corpus.field)?;
    for condition in Condition::ALL {
        let conditioned: Vec<ConditionedPersona> = personas
            .iter()
            .map(|p| inject_descriptor(p, condition))
            .collect();
        write_conditioned(
            &out_dir.join(format!("conditioned_{}.jsonl", condition.label())),
            &personas,
            &conditioned,
            &cfg.corpus.field,
        )?;
    }
    Ok(IngestSummary {
        n_personas: personas.len(),
        corpus_digest: base_corpus_digest(&personas),
        out_dir: out_dir.to_path_buf(),
    })
}

#[derive(Debug, Clone)]
pub struct RunArgs {
    pub condition: Condition,
    pub run_dir: PathBuf,
    pub run_id: Option<String>,
    /// Probe the bare model instead of the persona grid.
    pub base_probe: bool,
    pub max_new_records: Option<usize>,
    pub quiet: bool,
}

/// Builds the run manifest for a condition over the configured corpus.
pub fn build_manifest(
    cfg: &PipelineConfig,
    condition: Condition,
    run_id: &str,
    personas: &[Persona],
) -> Result<RunManifest> {
    Ok(RunManifest {
        run_id: run_id.to_string(),
        endpoint_url: cfg.endpoint.url.clone(),
        model_name: cfg.endpoint.model.clone(),
        condition,
        decoding: cfg.decoding(),
        retry_limit: cfg.endpoint.retry_limit,
        concurrency_limit: cfg.endpoint.concurrency,
        seed: cfg.run.seed,
        corpus_digest: base_corpus_digest(personas),
        matrix_digest: matrix_digest(&cfg.matrix()?),
    })
}

/// The synthetic single-row corpus a bare-model probe runs over: prompts omit
/// the persona, but records still need a persona id to key on.
pub fn base_probe_personas() -> Vec<Persona> {
    vec![Persona {
        id: 0,
        text: "(no persona)".to_string(),
    }]
}

pub async fn cmd_run(cfg: &PipelineConfig, args: &RunArgs) -> Result<RunSummary> {
    let personas = if args.base_probe {
        base_probe_personas()
    } else {
        load_corpus(cfg)?
    };
    let statements = cfg.statements()?;
    let run_id = args.run_id.clone().unwrap_or_else(|| {
        if args.base_probe {
            "base-probe".to_string()
        } else {
            format!("run-{}", args.condition.label())
        }
    });
    let manifest = build_manifest(cfg, args.condition, &run_id, &personas)?;
    let conditioned: Vec<ConditionedPersona> = personas
        .iter()
        .map(|p| inject_descriptor(p, args.condition))
        .collect();

    let endpoint = cfg.endpoint();
    endpoint.preflight().await?;

    let progress: Option<Arc<dyn Fn(usize, usize) + Send + Sync>> = if args.quiet {
        None
    } else {
        let last = AtomicUsize::new(0);
        Some(Arc::new(move |done, total| {
            // Stride the progress line; always print the final count.
            if done == total || done >= last.load(Ordering::Relaxed) + 500 {
                last.store(done, Ordering::Relaxed);
                eprintln!("records {done}/{total}");
            }
        }))
    };
    let options = RunOptions {
        base_probe: args.base_probe,
        max_new_records: args.max_new_records,
        progress,
    };
    run_study(
        &endpoint,
        &manifest,
        &args.run_dir,
        &conditioned,
        &statements,
        &options,
    )
    .await
}

#[derive(Debug, Clone)]
pub struct AnalyzeArgs {
    pub baseline_dir: PathBuf,
    pub right_auth_dir: Option<PathBuf>,
    pub left_lib_dir: Option<PathBuf>,
    pub base_probe_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
}

pub fn cmd_analyze(cfg: &PipelineConfig, args: &AnalyzeArgs) -> Result<AnalysisBundle> {
    let matrix = cfg.matrix()?;
    let mut condition_dirs: Vec<(Condition, &Path)> = Vec::new();
    if let Some(dir) = &args.right_auth_dir {
        condition_dirs.push((Condition::RightAuthoritarian, dir));
    }
    if let Some(dir) = &args.left_lib_dir {
        condition_dirs.push((Condition::LeftLibertarian, dir));
    }
    let bundle = analyze_runs(
        &matrix,
        &matrix_digest(&matrix),
        cfg.grid()?,
        cfg.analysis.quadrant_convention,
        cfg.analysis.m_tests,
        &args.baseline_dir,
        &condition_dirs,
        args.base_probe_dir.as_deref(),
    )?;
    write_bundle(&args.out_dir, &bundle)?;
    emit_outputs(&bundle, &args.out_dir)?;
    Ok(bundle)
}

#[derive(Debug, Clone)]
pub struct ClusterArgs {
    pub run_dir: PathBuf,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClusterOutcome {
    pub k: usize,
    pub seed: u64,
    pub reduced_dim: usize,
    pub explained_variance_ratio: f64,
    pub labels: Vec<String>,
    pub keywords: Vec<Vec<String>>,
    pub sizes: Vec<usize>,
    /// persona id → cluster index.
    pub assignments: BTreeMap<u32, usize>,
}

/// Clusters baseline personas in embedding space and renders one deviation
/// map per cluster: that cluster's scored points as foreground against the
/// whole run as background.
pub async fn cmd_cluster(cfg: &PipelineConfig, args: &ClusterArgs) -> Result<ClusterOutcome> {
    let matrix = cfg.matrix()?;
    let run = load_run(&args.run_dir, &matrix)?;

    let corpus = load_corpus(cfg)?;
    if base_corpus_digest(&corpus) != run.manifest.corpus_digest {
        return Err(Error::data(format!(
            "corpus digest mismatch: run {} was not elicited from corpus {}",
            args.run_dir.display(),
            cfg.corpus.path.display()
        )));
    }
    let by_id: BTreeMap<u32, &Persona> = corpus.iter().map(|p| (p.id, p)).collect();
    let mut personas: Vec<Persona> = Vec::with_capacity(run.points.len());
    for (id, _) in &run.points {
        match by_id.get(id) {
            Some(p) => personas.push((*p).clone()),
            None => {
                return Err(Error::data(format!(
                    "run references persona {id} absent from the corpus"
                )))
            }
        }
    }

    let provider = match cfg.cluster.provider {
        ProviderKind::VectorFile => {
            if cfg.cluster.vector_file.as_os_str().is_empty() {
                return Err(Error::data(
                    "cluster.provider is \"vector_file\" but cluster.vector_file is not set",
                ));
            }
            EmbeddingProvider::VectorFile(cfg.cluster.vector_file.clone())
        }
        ProviderKind::Endpoint => EmbeddingProvider::Endpoint {
            endpoint: cfg.endpoint(),
            model: cfg.cluster.embed_model.clone(),
            batch_size: cfg.cluster.batch_size.max(1),
            concurrency: cfg.cluster.concurrency.max(1),
            retry_limit: cfg.cluster.retry_limit.max(1),
        },
    };
    let embedded = embed(&personas, &provider).await?;
    std::fs::create_dir_all(&args.out_dir)?;
    save_vectors(&args.out_dir.join("vectors.jsonl"), &embedded)?;

    let out_dim = cfg.cluster.reduce_dim.clamp(1, embedded.dim);
    let (reduced, reduction) = reduce(&embedded, out_dim)?;
    let (_model, assignment) = kmeans(&reduced, cfg.cluster.k, cfg.cluster.seed)?;

    let grouped = texts_by_cluster(&personas, &assignment, cfg.cluster.k)?;
    let keywords = top_keywords(&grouped, cfg.cluster.n_keywords)?;

    let all_points: Vec<CompassPoint> = run.points.iter().map(|(_, p)| *p).collect();
    let grid = cfg.grid()?;
    let background = bin_points(&all_points, grid)?;
    let centroid = compass_core::stats::dispersion(&all_points)?.centroid;
    let overlays = Overlays {
        base_model_point: None,
        baseline_centroid: Some(centroid),
    };
    let point_of: BTreeMap<u32, CompassPoint> = run.points.iter().copied().collect();
    for cluster in 0..cfg.cluster.k {
        let members: Vec<CompassPoint> = assignment
            .iter()
            .filter(|(_, c)| *c == cluster)
            .filter_map(|(id, _)| point_of.get(&id).copied())
            .collect();
        if members.is_empty() {
            continue;
        }
        let foreground = bin_points(&members, grid)?;
        let map = deviation_map(&foreground, &background)?;
        let title = format!(
            "cluster {cluster} \"{}\" vs all personas",
            keywords.labels[cluster]
        );
        render_deviation(
            &map,
            &overlays,
            &title,
            &args.out_dir.join(format!("deviation_cluster_{cluster}.svg")),
        )?;
    }

    let outcome = ClusterOutcome {
        k: cfg.cluster.k,
        seed: cfg.cluster.seed,
        reduced_dim: reduction.out_dim,
        explained_variance_ratio: reduction.explained_variance_ratio,
        labels: keywords.labels.clone(),
        keywords: keywords.keywords.clone(),
        sizes: assignment.cluster_sizes(cfg.cluster.k),
        assignments: assignment.iter().collect(),
    };
    let mut raw =
        serde_json::to_string_pretty(&outcome).map_err(|e| Error::data(e.to_string()))?;
    raw.push('\n');
    std::fs::write(args.out_dir.join("clusters.json"), raw)?;
    Ok(outcome)
}

/// Re-renders tables and figures from a stored analysis bundle.
pub fn cmd_report(analysis_dir: &Path, out_dir: &Path) -> Result<AnalysisBundle> {
    let bundle = read_bundle(analysis_dir)?;
    emit_outputs(&bundle, out_dir)?;
    Ok(bundle)
}

pub fn load_plant_config(path: &Path) -> Result<PlantConfig> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| Error::data(format!("cannot read plant config {}: {e}", path.display())))?;
    let cfg: PlantConfig = toml::from_str(&raw)
        .map_err(|e| Error::data(format!("plant config {}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Serves the planted-ideology mock endpoint until interrupted.
pub async fn cmd_mock_serve(
    cfg: &PipelineConfig,
    plant_path: Option<&Path>,
    port: u16,
) -> Result<()> {
    let plant = match plant_path {
        Some(path) => load_plant_config(path)?,
        None => PlantConfig::default(),
    };
    let (addr, handle) = mocknet::spawn(plant, cfg.matrix()?, cfg.statements()?, port).await?;
    println!("mock endpoint listening on http://{addr}");
    tokio::signal::ctrl_c()
        .await
        .map_err(|e| Error::transport(format!("signal handler failed: {e}")))?;
    handle.abort();
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum ReplayOutcome {
    /// Dataset directory absent; nothing to do.
    Skipped { dataset_dir: PathBuf },
    Completed {
        models: Vec<String>,
        mismatches: Vec<String>,
    },
}

/// Expected values for replay comparison, one row per model. All fields
/// optional: absent fields are not checked.
#[derive(Debug, Clone, serde::Deserialize)]
struct ExpectedRow {
    model: String,
    baseline_mean_distance: Option<f64>,
    /// Fraction in [0,1], compared within 0.3 percentage points.
    coverage_total: Option<f64>,
    /// condition label → (econ Δμ, social Δμ), compared within 0.02.
    #[serde(default)]
    delta_mu: BTreeMap<String, (f64, f64)>,
}

/// Recomputes the published tables from an on-disk response dataset.
///
/// Layout: `<dataset>/matrix.json` (optional replay-calibrated matrix),
/// `<dataset>/models/<name>/<condition_label>/` run directories (an optional
/// `base_probe/` beside them), and an optional `<dataset>/expected.json`
/// with published values to verify against. A missing dataset directory is
/// a skip, not an error, so unattended pipelines degrade quietly.
pub fn cmd_replay(
    cfg: &PipelineConfig,
    dataset_dir: &Path,
    out_dir: &Path,
) -> Result<ReplayOutcome> {
    if !dataset_dir.exists() {
        return Ok(ReplayOutcome::Skipped {
            dataset_dir: dataset_dir.to_path_buf(),
        });
    }
    let matrix_path = dataset_dir.join("matrix.json");
    let matrix = if matrix_path.exists() {
        compass_core::pct::load_scoring_matrix(&matrix_path)?
    } else {
        cfg.matrix()?
    };
    let digest = matrix_digest(&matrix);

    let models_dir = dataset_dir.join("models");
    let mut model_names: Vec<String> = Vec::new();
    let entries = std::fs::read_dir(&models_dir).map_err(|e| {
        Error::data(format!(
            "dataset {} has no models directory: {e}",
            dataset_dir.display()
        ))
    })?;
    for entry in entries {
        let entry = entry?;
        if entry.path().is_dir() {
            model_names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    model_names.sort();
    if model_names.is_empty() {
        return Err(Error::data(format!(
            "dataset {} holds no model directories",
            models_dir.display()
        )));
    }

    let mut table1 = Vec::new();
    let mut table2 = Vec::new();
    let mut bundles: Vec<AnalysisBundle> = Vec::new();
    for name in &model_names {
        let model_dir = models_dir.join(name);
        let baseline_dir = model_dir.join(Condition::Baseline.label());
        if !baseline_dir.exists() {
            return Err(Error::data(format!(
                "model {name} has no baseline run in {}",
                model_dir.display()
            )));
        }
        let mut condition_dirs: Vec<(Condition, PathBuf)> = Vec::new();
        for condition in [Condition::RightAuthoritarian, Condition::LeftLibertarian] {
            let dir = model_dir.join(condition.label());
            if dir.exists() {
                condition_dirs.push((condition, dir));
            }
        }
        let borrowed: Vec<(Condition, &Path)> = condition_dirs
            .iter()
            .map(|(c, d)| (*c, d.as_path()))
            .collect();
        let probe_dir = model_dir.join("base_probe");
        let bundle = analyze_runs(
            &matrix,
            &digest,
            cfg.grid()?,
            cfg.analysis.quadrant_convention,
            cfg.analysis.m_tests,
            &baseline_dir,
            &borrowed,
            probe_dir.exists().then_some(probe_dir.as_path()),
        )?;
        let (t1, t2) = table_rows(&bundle);
        table1.push(t1);
        table2.extend(t2);
        write_bundle(&out_dir.join(name), &bundle)?;
        bundles.push(bundle);
    }
    std::fs::create_dir_all(out_dir)?;
    compass_core::report::emit_tables(&TableBundle { table1, table2 }, out_dir)?;

    let mut mismatches = Vec::new();
    let expected_path = dataset_dir.join("expected.json");
    if expected_path.exists() {
        let raw = std::fs::read_to_string(&expected_path)?;
        let expected: Vec<ExpectedRow> = serde_json::from_str(&raw)
            .map_err(|e| Error::data(format!("{}: {e}", expected_path.display())))?;
        for row in &expected {
            let Some(bundle) = bundles.iter().find(|b| b.model_name == row.model) else {
                mismatches.push(format!("expected model {} not in dataset", row.model));
                continue;
            };
            let baseline = bundle.baseline();
            if let Some(want) = row.baseline_mean_distance {
                let got = baseline.dispersion.mean_distance;
                if (got - want).abs() > 0.005 {
                    mismatches.push(format!(
                        "{}: baseline mean distance {got:.4} differs from published {want:.4}",
                        row.model
                    ));
                }
            }
            if let Some(want) = row.coverage_total {
                let got = baseline.coverage.total_fraction;
                if (got - want).abs() > 0.003 {
                    mismatches.push(format!(
                        "{}: total coverage {got:.4} differs from published {want:.4}",
                        row.model
                    ));
                }
            }
            for (label, (want_econ, want_social)) in &row.delta_mu {
                let found = bundle
                    .shifts
                    .iter()
                    .find(|s| s.condition.label() == label.as_str());
                let Some(shift) = found else {
                    mismatches.push(format!("{}: no {label} shift in dataset", row.model));
                    continue;
                };
                for (axis, got, want) in [
                    ("econ", shift.econ.delta_mu, *want_econ),
                    ("social", shift.social.delta_mu, *want_social),
                ] {
                    if (got - want).abs() > 0.02 {
                        mismatches.push(format!(
                            "{}: {label} {axis} delta-mu {got:.4} differs from published {want:.4}",
                            row.model
                        ));
                    }
                }
            }
        }
    }

    Ok(ReplayOutcome::Completed {
        models: model_names,
        mismatches,
    })
}
