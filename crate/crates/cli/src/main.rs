use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use compass_core::corpus::Condition;
use compass_core::error::{Error, Result};

use compass_cli::commands::{
    cmd_analyze, cmd_cluster, cmd_ingest, cmd_mock_serve, cmd_replay, cmd_report, cmd_run,
    AnalyzeArgs, ClusterArgs, ReplayOutcome, RunArgs,
};
use compass_cli::config::{load_config, PipelineConfig};
use compass_cli::{exit_code, USAGE_EXIT};

#[derive(Parser)]
#[command(
    name = "compass",
    version,
    about = "Persona-conditioned political compass pipeline: elicit, score, analyze, cluster, report"
)]
struct Cli {
    #[command(flatten)]
    config: ConfigArg,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Pipeline config file (TOML). Omit to run on defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

fn parse_condition(s: &str) -> std::result::Result<Condition, String> {
    Condition::from_label(s).ok_or_else(|| {
        format!("unknown condition {s:?} (expected baseline, right-authoritarian, or left-libertarian)")
    })
}

#[derive(Subcommand)]
enum Command {
    /// Normalize a persona corpus and render all three conditioned variants.
    Ingest {
        /// Output directory for the normalized corpus files.
        #[arg(long)]
        out: PathBuf,
        /// Keep only this fraction of personas (seeded subsample).
        #[arg(long)]
        split: Option<f64>,
        /// Subsample seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Elicit the full persona-by-statement grid into a run directory.
    Run {
        /// Elicitation condition.
        #[arg(long, value_parser = parse_condition, default_value = "baseline")]
        condition: Condition,
        /// Run directory (created if absent; resumes if it holds records).
        #[arg(long)]
        run_dir: PathBuf,
        /// Run identifier recorded in the manifest.
        #[arg(long)]
        run_id: Option<String>,
        /// Probe the bare model: no persona sentence in the prompt.
        #[arg(long)]
        base_probe: bool,
        /// Stop after this many new records (the run resumes later).
        #[arg(long)]
        max_new_records: Option<usize>,
        /// Suppress progress output.
        #[arg(long)]
        quiet: bool,
    },
    /// Score runs and compute dispersion, coverage, and shift statistics.
    Analyze {
        /// Baseline run directory.
        #[arg(long)]
        baseline: PathBuf,
        /// Right-authoritarian run directory.
        #[arg(long)]
        right_auth: Option<PathBuf>,
        /// Left-libertarian run directory.
        #[arg(long)]
        left_lib: Option<PathBuf>,
        /// Bare-model probe run directory (adds the overlay dot).
        #[arg(long)]
        base_probe: Option<PathBuf>,
        /// Output directory for the bundle, tables, and figures.
        #[arg(long)]
        out: PathBuf,
    },
    /// Cluster personas in embedding space; render per-cluster deviation maps.
    Cluster {
        /// Baseline run directory to cluster.
        #[arg(long)]
        run_dir: PathBuf,
        /// Output directory for assignments, vectors, and figures.
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-render tables and figures from a stored analysis bundle.
    Report {
        /// Directory holding analysis.json.
        #[arg(long)]
        analysis: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the planted-ideology mock endpoint until interrupted.
    MockServe {
        /// Plant configuration (TOML). Omit for the default fixed plant.
        #[arg(long)]
        plant: Option<PathBuf>,
        /// Port to bind on 127.0.0.1 (0 picks a free port).
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
    /// Recompute the published tables from an on-disk response dataset.
    Replay {
        /// Dataset directory; absent directory skips quietly.
        #[arg(long)]
        dataset: PathBuf,
        /// Output directory for recomputed tables.
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(config: &ConfigArg) -> Result<PipelineConfig> {
    match &config.config {
        Some(path) => load_config(path),
        None => Ok(PipelineConfig::default()),
    }
}

async fn dispatch(config: ConfigArg, command: Command) -> Result<()> {
    match command {
        Command::Ingest { out, split, seed } => {
            let cfg = load(&config)?;
            let summary = cmd_ingest(&cfg, &out, split, seed)?;
            println!(
                "ingested {} personas into {} (corpus digest {})",
                summary.n_personas,
                summary.out_dir.display(),
                &summary.corpus_digest[..12]
            );
            Ok(())
        }
        Command::Run {
            condition,
            run_dir,
            run_id,
            base_probe,
            max_new_records,
            quiet,
        } => {
            let cfg = load(&config)?;
            let args = RunArgs {
                condition,
                run_dir,
                run_id,
                base_probe,
                max_new_records,
                quiet,
            };
            let summary = cmd_run(&cfg, &args).await?;
            println!(
                "run {}: {} new records, {}/{} total{}{}",
                summary.run_id,
                summary.new_records,
                summary.total_records,
                summary.expected_records,
                if summary.complete { ", complete" } else { "" },
                if summary.n_missing > 0 {
                    format!(", {} unanswered after retries", summary.n_missing)
                } else {
                    String::new()
                },
            );
            Ok(())
        }
        Command::Analyze {
            baseline,
            right_auth,
            left_lib,
            base_probe,
            out,
        } => {
            let cfg = load(&config)?;
            let args = AnalyzeArgs {
                baseline_dir: baseline,
                right_auth_dir: right_auth,
                left_lib_dir: left_lib,
                base_probe_dir: base_probe,
                out_dir: out.clone(),
            };
            let bundle = cmd_analyze(&cfg, &args)?;
            for c in &bundle.conditions {
                println!(
                    "{}: {} personas, centroid ({:.2}, {:.2}), mean distance {:.3}, coverage {:.1}%",
                    c.condition.label(),
                    c.n_personas,
                    c.dispersion.centroid.econ,
                    c.dispersion.centroid.social,
                    c.dispersion.mean_distance,
                    100.0 * c.coverage.total_fraction,
                );
            }
            for s in &bundle.shifts {
                println!(
                    "{} shift: econ {:+.3} (p_bonf {:.2e}, d {:.2}), social {:+.3} (p_bonf {:.2e}, d {:.2})",
                    s.condition.label(),
                    s.econ.delta_mu,
                    s.econ.p_bonferroni,
                    s.econ.cohens_d,
                    s.social.delta_mu,
                    s.social.p_bonferroni,
                    s.social.cohens_d,
                );
            }
            println!("analysis written to {}", out.display());
            Ok(())
        }
        Command::Cluster { run_dir, out } => {
            let cfg = load(&config)?;
            let args = ClusterArgs {
                run_dir,
                out_dir: out.clone(),
            };
            let outcome = cmd_cluster(&cfg, &args).await?;
            for (i, label) in outcome.labels.iter().enumerate() {
                println!(
                    "cluster {i}: {} personas, label \"{label}\", keywords: {}",
                    outcome.sizes[i],
                    outcome.keywords[i].join(", "),
                );
            }
            println!(
                "k = {}, reduced to {} dims ({:.1}% variance kept), outputs in {}",
                outcome.k,
                outcome.reduced_dim,
                100.0 * outcome.explained_variance_ratio,
                out.display(),
            );
            Ok(())
        }
        Command::Report { analysis, out } => {
            cmd_report(&analysis, &out)?;
            println!("report written to {}", out.display());
            Ok(())
        }
        Command::MockServe { plant, port } => {
            let cfg = load(&config)?;
            cmd_mock_serve(&cfg, plant.as_deref(), port).await
        }
        Command::Replay { dataset, out } => {
            let cfg = load(&config)?;
            match cmd_replay(&cfg, &dataset, &out)? {
                ReplayOutcome::Skipped { dataset_dir } => {
                    println!(
                        "replay skipped: dataset not found at {}",
                        dataset_dir.display()
                    );
                    Ok(())
                }
                ReplayOutcome::Completed { models, mismatches } => {
                    println!(
                        "replayed {} models into {}: {}",
                        models.len(),
                        out.display(),
                        models.join(", ")
                    );
                    if mismatches.is_empty() {
                        Ok(())
                    } else {
                        for m in &mismatches {
                            eprintln!("mismatch: {m}");
                        }
                        Err(Error::data(format!(
                            "{} replay values differ from the published tables",
                            mismatches.len()
                        )))
                    }
                }
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => USAGE_EXIT,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("cannot start async runtime: {e}");
            return ExitCode::from(2);
        }
    };
    match runtime.block_on(dispatch(cli.config, cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
