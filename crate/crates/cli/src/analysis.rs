//! Run-directory analysis: scoring, per-condition summaries, shift reports,
//! and the self-contained bundle each analysis writes to disk.
//!
//! The bundle carries everything needed to re-render tables and figures
//! (grid counts, summaries, digests) with no access to the original record
//! logs, and it contains no timestamps, so re-analysis of the same runs is
//! byte-identical.

use std::collections::BTreeSet;
use std::path::Path;

use compass_core::corpus::Condition;
use compass_core::elicit::{
    collate_sheets, read_manifest, read_record_log, records_path, RunManifest,
};
use compass_core::error::{Error, Result};
use compass_core::pct::{score, CompassPoint, ScoringMatrix};
use compass_core::report::{
    render_density, Overlays, Table1Row, Table2Row, TableBundle,
};
use compass_core::stats::{
    bin_points, coverage, dispersion, shift_stats, Axis, CoverageSummary, DispersionSummary,
    GridHistogram, GridSpec, QuadrantConvention, ShiftReport,
};
use serde::{Deserialize, Serialize};

pub const ANALYSIS_FILE: &str = "analysis.json";

/// One run directory, loaded and scored.
pub struct RunData {
    pub manifest: RunManifest,
    /// (persona_id, scored point), ordered by persona id.
    pub points: Vec<(u32, CompassPoint)>,
}

/// Loads a run directory and scores every sheet. Incomplete sheets are an
/// error listing the missing keys: analysis over partial grids would silently
/// bias every downstream statistic.
pub fn load_run(run_dir: &Path, matrix: &ScoringMatrix) -> Result<RunData> {
    let manifest = read_manifest(run_dir)?;
    let records = read_record_log(&records_path(run_dir))?;
    let collated = collate_sheets(&records, manifest.condition)?;
    let mut missing: Vec<String> = Vec::new();
    for sheet in &collated.sheets {
        if !sheet.is_complete() {
            let ids = sheet.missing();
            missing.push(format!(
                "persona {} missing {} statements (first: {})",
                sheet.persona_id,
                ids.len(),
                ids.first().copied().unwrap_or(0)
            ));
        }
    }
    if !missing.is_empty() {
        let shown = missing.iter().take(10).cloned().collect::<Vec<_>>().join("; ");
        let suffix = if missing.len() > 10 {
            format!("; and {} more", missing.len() - 10)
        } else {
            String::new()
        };
        return Err(Error::data(format!(
            "run {} is incomplete: {shown}{suffix}",
            run_dir.display()
        )));
    }
    let mut points = Vec::with_capacity(collated.sheets.len());
    for sheet in &collated.sheets {
        points.push((sheet.persona_id, score(sheet, matrix)?));
    }
    Ok(RunData { manifest, points })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionAnalysis {
    pub condition: Condition,
    pub n_personas: usize,
    pub dispersion: DispersionSummary,
    pub coverage: CoverageSummary,
    /// Row-major histogram counts on the bundle's grid.
    pub grid_counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftPair {
    pub condition: Condition,
    pub econ: ShiftReport,
    pub social: ShiftReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisBundle {
    pub model_name: String,
    pub corpus_digest: String,
    pub matrix_digest: String,
    pub grid: GridSpec,
    pub convention: QuadrantConvention,
    pub m_tests: usize,
    /// The bare model's own scored position, when a base probe ran.
    pub base_model_point: Option<CompassPoint>,
    /// Baseline first, then any injected conditions in fixed order.
    pub conditions: Vec<ConditionAnalysis>,
    pub shifts: Vec<ShiftPair>,
}

impl AnalysisBundle {
    pub fn condition(&self, condition: Condition) -> Option<&ConditionAnalysis> {
        self.conditions.iter().find(|c| c.condition == condition)
    }

    pub fn baseline(&self) -> &ConditionAnalysis {
        self.condition(Condition::Baseline)
            .expect("bundles are built baseline-first")
    }
}

fn summarize(
    condition: Condition,
    points: &[(u32, CompassPoint)],
    grid: GridSpec,
    convention: QuadrantConvention,
) -> Result<ConditionAnalysis> {
    let bare: Vec<CompassPoint> = points.iter().map(|(_, p)| *p).collect();
    let histogram = bin_points(&bare, grid)?;
    Ok(ConditionAnalysis {
        condition,
        n_personas: points.len(),
        dispersion: dispersion(&bare)?,
        coverage: coverage(&histogram, convention),
        grid_counts: histogram.counts().to_vec(),
    })
}

fn axis_pairs(points: &[(u32, CompassPoint)], axis: Axis) -> Vec<(u32, f64)> {
    points.iter().map(|(id, p)| (*id, axis.of(p))).collect()
}

/// Analyzes one baseline run plus any injected-condition runs against it.
/// Every run must carry the same corpus and matrix digests, and the matrix
/// in hand must be the one the runs were elicited with.
pub fn analyze_runs(
    matrix: &ScoringMatrix,
    matrix_digest: &str,
    grid: GridSpec,
    convention: QuadrantConvention,
    m_tests: usize,
    baseline_dir: &Path,
    condition_dirs: &[(Condition, &Path)],
    base_probe_dir: Option<&Path>,
) -> Result<AnalysisBundle> {
    let baseline = load_run(baseline_dir, matrix)?;
    if baseline.manifest.condition != Condition::Baseline {
        return Err(Error::data(format!(
            "run {} was elicited under {:?}, not baseline",
            baseline_dir.display(),
            baseline.manifest.condition
        )));
    }
    if baseline.manifest.matrix_digest != matrix_digest {
        return Err(Error::data(format!(
            "matrix digest mismatch: run {} was elicited with a different scoring matrix",
            baseline_dir.display()
        )));
    }

    let mut conditions = vec![summarize(
        Condition::Baseline,
        &baseline.points,
        grid,
        convention,
    )?];
    let mut shifts = Vec::new();
    let mut seen: BTreeSet<Condition> = BTreeSet::new();

    for (condition, dir) in condition_dirs {
        if *condition == Condition::Baseline {
            return Err(Error::data(
                "baseline passed twice; injected-condition slots take non-baseline runs",
            ));
        }
        if !seen.insert(*condition) {
            return Err(Error::data(format!(
                "condition {} passed twice",
                condition.label()
            )));
        }
        let run = load_run(dir, matrix)?;
        if run.manifest.condition != *condition {
            return Err(Error::data(format!(
                "run {} was elicited under {}, expected {}",
                dir.display(),
                run.manifest.condition.label(),
                condition.label()
            )));
        }
        if run.manifest.corpus_digest != baseline.manifest.corpus_digest {
            return Err(Error::data(format!(
                "corpus digest mismatch: {} and {} were elicited from different corpora",
                baseline_dir.display(),
                dir.display()
            )));
        }
        if run.manifest.matrix_digest != matrix_digest {
            return Err(Error::data(format!(
                "matrix digest mismatch: run {} was elicited with a different scoring matrix",
                dir.display()
            )));
        }
        conditions.push(summarize(*condition, &run.points, grid, convention)?);
        shifts.push(ShiftPair {
            condition: *condition,
            econ: shift_stats(
                &axis_pairs(&baseline.points, Axis::Econ),
                &axis_pairs(&run.points, Axis::Econ),
                Axis::Econ,
                m_tests,
            )?,
            social: shift_stats(
                &axis_pairs(&baseline.points, Axis::Social),
                &axis_pairs(&run.points, Axis::Social),
                Axis::Social,
                m_tests,
            )?,
        });
    }

    let base_model_point = match base_probe_dir {
        None => None,
        Some(dir) => {
            let probe = load_run(dir, matrix)?;
            if probe.manifest.matrix_digest != matrix_digest {
                return Err(Error::data(format!(
                    "matrix digest mismatch: base probe {} used a different scoring matrix",
                    dir.display()
                )));
            }
            if probe.points.len() != 1 {
                return Err(Error::data(format!(
                    "base probe {} holds {} personas, expected exactly one",
                    dir.display(),
                    probe.points.len()
                )));
            }
            Some(probe.points[0].1)
        }
    };

    Ok(AnalysisBundle {
        model_name: baseline.manifest.model_name.clone(),
        corpus_digest: baseline.manifest.corpus_digest.clone(),
        matrix_digest: matrix_digest.to_string(),
        grid,
        convention,
        m_tests,
        base_model_point,
        conditions,
        shifts,
    })
}

pub fn write_bundle(out_dir: &Path, bundle: &AnalysisBundle) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let mut raw =
        serde_json::to_string_pretty(bundle).map_err(|e| Error::data(e.to_string()))?;
    raw.push('\n');
    std::fs::write(out_dir.join(ANALYSIS_FILE), raw)?;
    Ok(())
}

pub fn read_bundle(dir: &Path) -> Result<AnalysisBundle> {
    let path = dir.join(ANALYSIS_FILE);
    let raw = std::fs::read_to_string(&path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&raw).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

/// One model's table rows from its bundle.
pub fn table_rows(bundle: &AnalysisBundle) -> (Table1Row, Vec<Table2Row>) {
    let t1 = Table1Row::from_summaries(
        bundle.model_name.clone(),
        bundle.condition(Condition::Baseline).map(|c| &c.dispersion),
        bundle
            .condition(Condition::RightAuthoritarian)
            .map(|c| &c.dispersion),
        bundle
            .condition(Condition::LeftLibertarian)
            .map(|c| &c.dispersion),
        &bundle.baseline().coverage,
    );
    let t2 = bundle
        .shifts
        .iter()
        .map(|s| Table2Row {
            model: bundle.model_name.clone(),
            condition: s.condition.label().to_string(),
            econ: s.econ,
            social: s.social,
        })
        .collect();
    (t1, t2)
}

/// Renders every output the bundle supports into `out_dir`: tables plus one
/// density figure per condition.
pub fn emit_outputs(bundle: &AnalysisBundle, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let (t1, t2) = table_rows(bundle);
    compass_core::report::emit_tables(
        &TableBundle {
            table1: vec![t1],
            table2: t2,
        },
        out_dir,
    )?;
    let overlays = Overlays {
        base_model_point: bundle.base_model_point,
        baseline_centroid: Some(bundle.baseline().dispersion.centroid),
    };
    for condition in &bundle.conditions {
        let histogram = GridHistogram::from_counts(bundle.grid, condition.grid_counts.clone())?;
        let title = format!(
            "{} density ({})",
            bundle.model_name,
            condition.condition.label()
        );
        render_density(
            &histogram,
            &overlays,
            &title,
            &out_dir.join(format!("density_{}.svg", condition.condition.label())),
        )?;
    }
    Ok(())
}
