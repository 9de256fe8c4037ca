//! Deterministic figure and table rendering.
//!
//! Figures are hand-assembled SVG with fixed geometry and fixed two-decimal
//! coordinate formatting, so identical inputs always produce byte-identical
//! files. Density maps shade by log(1 + count) with marginal bars; deviation
//! maps use a diverging scale where only |Z| > 2 leaves the neutral band.
//! Tables land three ways: two CSV files shaped like the published layouts
//! and one JSON bundle that round-trips the exact values.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pct::CompassPoint;
use crate::stats::{CoverageSummary, DeviationMap, DispersionSummary, GridHistogram, ShiftReport};

const TITLE_H: f64 = 28.0;
const AXIS_LEFT: f64 = 48.0;
const AXIS_BOTTOM: f64 = 36.0;
const PLOT: f64 = 500.0;
const MARGINAL: f64 = 60.0;
const GAP: f64 = 8.0;
const PAD: f64 = 12.0;

const DENSITY_LOW: (u8, u8, u8) = (255, 255, 255);
const DENSITY_HIGH: (u8, u8, u8) = (8, 48, 107);
const RED_LOW: (u8, u8, u8) = (254, 224, 210);
const RED_HIGH: (u8, u8, u8) = (103, 0, 13);
const BLUE_LOW: (u8, u8, u8) = (222, 235, 247);
const BLUE_HIGH: (u8, u8, u8) = (8, 48, 107);
const NEUTRAL_FILL: &str = "#e8e8e8";

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Overlays {
    /// Rendered as a white dot: the bare model's own position.
    pub base_model_point: Option<CompassPoint>,
    /// Rendered as a white triangle: the baseline persona centroid.
    pub baseline_centroid: Option<CompassPoint>,
}

fn fmt2(x: f64) -> String {
    format!("{x:.2}")
}

fn lerp_color(low: (u8, u8, u8), high: (u8, u8, u8), t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let ch = |a: u8, b: u8| (a as f64 + t * (b as f64 - a as f64)).round() as u8;
    format!(
        "rgb({},{},{})",
        ch(low.0, high.0),
        ch(low.1, high.1),
        ch(low.2, high.2)
    )
}

fn escape_xml(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Compass x to pixel inside a plot whose left edge is `x0`.
fn px_x(x0: f64, econ: f64) -> f64 {
    x0 + (econ + 10.0) / 20.0 * PLOT
}

/// Compass y to pixel; social grows upward, SVG y grows downward.
fn px_y(y0: f64, social: f64) -> f64 {
    y0 + (10.0 - social) / 20.0 * PLOT
}

fn axes_svg(out: &mut String, x0: f64, y0: f64) {
    let _ = write!(
        out,
        "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#444444\" stroke-width=\"1\"/>",
        fmt2(x0),
        fmt2(y0),
        fmt2(PLOT),
        fmt2(PLOT)
    );
    for tick in [-10.0, -5.0, 0.0, 5.0, 10.0] {
        let tx = px_x(x0, tick);
        let ty = px_y(y0, tick);
        let _ = write!(
            out,
            "<line x1=\"{x}\" y1=\"{y1}\" x2=\"{x}\" y2=\"{y2}\" stroke=\"#444444\" stroke-width=\"1\"/>",
            x = fmt2(tx),
            y1 = fmt2(y0 + PLOT),
            y2 = fmt2(y0 + PLOT + 5.0)
        );
        let _ = write!(
            out,
            "<text x=\"{x}\" y=\"{y}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\" fill=\"#333333\">{t}</text>",
            x = fmt2(tx),
            y = fmt2(y0 + PLOT + 18.0),
            t = tick as i64
        );
        let _ = write!(
            out,
            "<line x1=\"{x1}\" y1=\"{y}\" x2=\"{x2}\" y2=\"{y}\" stroke=\"#444444\" stroke-width=\"1\"/>",
            x1 = fmt2(x0 - 5.0),
            x2 = fmt2(x0),
            y = fmt2(ty)
        );
        let _ = write!(
            out,
            "<text x=\"{x}\" y=\"{y}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\" fill=\"#333333\">{t}</text>",
            x = fmt2(x0 - 8.0),
            y = fmt2(ty + 4.0),
            t = tick as i64
        );
    }
    // Zero lines orient the quadrants.
    let _ = write!(
        out,
        "<line x1=\"{x}\" y1=\"{y1}\" x2=\"{x}\" y2=\"{y2}\" stroke=\"#999999\" stroke-width=\"0.5\" stroke-dasharray=\"4,3\"/>",
        x = fmt2(px_x(x0, 0.0)),
        y1 = fmt2(y0),
        y2 = fmt2(y0 + PLOT)
    );
    let _ = write!(
        out,
        "<line x1=\"{x1}\" y1=\"{y}\" x2=\"{x2}\" y2=\"{y}\" stroke=\"#999999\" stroke-width=\"0.5\" stroke-dasharray=\"4,3\"/>",
        x1 = fmt2(x0),
        x2 = fmt2(x0 + PLOT),
        y = fmt2(px_y(y0, 0.0))
    );
}

fn overlays_svg(out: &mut String, x0: f64, y0: f64, overlays: &Overlays) {
    if let Some(p) = overlays.base_model_point {
        let _ = write!(
            out,
            "<circle class=\"base-point\" cx=\"{}\" cy=\"{}\" r=\"6\" fill=\"#ffffff\" stroke=\"#222222\" stroke-width=\"1.5\"/>",
            fmt2(px_x(x0, p.econ)),
            fmt2(px_y(y0, p.social))
        );
    }
    if let Some(p) = overlays.baseline_centroid {
        let cx = px_x(x0, p.econ);
        let cy = px_y(y0, p.social);
        let _ = write!(
            out,
            "<polygon class=\"baseline-centroid\" points=\"{},{} {},{} {},{}\" fill=\"#ffffff\" stroke=\"#222222\" stroke-width=\"1.5\"/>",
            fmt2(cx),
            fmt2(cy - 7.0),
            fmt2(cx - 6.5),
            fmt2(cy + 5.0),
            fmt2(cx + 6.5),
            fmt2(cy + 5.0)
        );
    }
}

fn title_svg(out: &mut String, width: f64, title: &str) {
    let _ = write!(
        out,
        "<text x=\"{}\" y=\"19\" font-family=\"sans-serif\" font-size=\"14\" text-anchor=\"middle\" fill=\"#111111\">{}</text>",
        fmt2(width / 2.0),
        escape_xml(title)
    );
}

/// Density heatmap SVG: log(1 + count) shading, marginal bars along both
/// axes, optional overlays. Pure string assembly; `render_density` writes it.
pub fn density_svg(grid: &GridHistogram, overlays: &Overlays, title: &str) -> Result<String> {
    if grid.total == 0 {
        return Err(Error::data("cannot render an empty density grid"));
    }
    let n = grid.spec.bins_per_axis;
    let cell = PLOT / n as f64;
    let x0 = AXIS_LEFT;
    let y0 = TITLE_H + MARGINAL + GAP;
    let width = AXIS_LEFT + PLOT + GAP + MARGINAL + PAD;
    let height = TITLE_H + MARGINAL + GAP + PLOT + AXIS_BOTTOM + PAD;

    let max_count = grid.counts().iter().copied().max().unwrap_or(1).max(1);
    let log_max = (1.0 + max_count as f64).ln();

    let mut out = String::new();
    let _ = write!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">",
        w = fmt2(width),
        h = fmt2(height)
    );
    let _ = write!(
        out,
        "<rect x=\"0\" y=\"0\" width=\"{w}\" height=\"{h}\" fill=\"#ffffff\"/>",
        w = fmt2(width),
        h = fmt2(height)
    );
    title_svg(&mut out, width, title);

    for row in 0..n {
        for col in 0..n {
            let count = grid.count(col, row);
            if count == 0 {
                continue;
            }
            let t = (1.0 + count as f64).ln() / log_max;
            let _ = write!(
                out,
                "<rect class=\"cell\" x=\"{x}\" y=\"{y}\" width=\"{w}\" height=\"{h}\" fill=\"{c}\"/>",
                x = fmt2(x0 + col as f64 * cell),
                y = fmt2(y0 + (n - 1 - row) as f64 * cell),
                w = fmt2(cell),
                h = fmt2(cell),
                c = lerp_color(DENSITY_LOW, DENSITY_HIGH, t)
            );
        }
    }

    let (col_totals, row_totals) = crate::stats::marginals(grid);
    let col_max = col_totals.iter().copied().max().unwrap_or(1).max(1) as f64;
    for (col, &count) in col_totals.iter().enumerate() {
        if count == 0 {
            continue;
        }
        let h = count as f64 / col_max * (MARGINAL - 4.0);
        let _ = write!(
            out,
            "<rect class=\"marginal-col\" x=\"{x}\" y=\"{y}\" width=\"{w}\" height=\"{hh}\" fill=\"#7296c4\"/>",
            x = fmt2(x0 + col as f64 * cell + 0.5),
            y = fmt2(TITLE_H + (MARGINAL - h)),
            w = fmt2((cell - 1.0).max(0.5)),
            hh = fmt2(h)
        );
    }
    let row_max = row_totals.iter().copied().max().unwrap_or(1).max(1) as f64;
    for (row, &count) in row_totals.iter().enumerate() {
        if count == 0 {
            continue;
        }
        let w = count as f64 / row_max * (MARGINAL - 4.0);
        let _ = write!(
            out,
            "<rect class=\"marginal-row\" x=\"{x}\" y=\"{y}\" width=\"{ww}\" height=\"{h}\" fill=\"#7296c4\"/>",
            x = fmt2(x0 + PLOT + GAP),
            y = fmt2(y0 + (n - 1 - row) as f64 * cell + 0.5),
            ww = fmt2(w),
            h = fmt2((cell - 1.0).max(0.5))
        );
    }

    axes_svg(&mut out, x0, y0);
    overlays_svg(&mut out, x0, y0, overlays);
    out.push_str("</svg>");
    Ok(out)
}

pub fn render_density(
    grid: &GridHistogram,
    overlays: &Overlays,
    title: &str,
    path: &Path,
) -> Result<()> {
    let svg = density_svg(grid, overlays, title)?;
    fs::write(path, svg)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeviationClass {
    /// Background bin empty or saturated; the Z statistic is undefined.
    Masked,
    Neutral,
    Red,
    Blue,
}

/// Color class of one deviation bin. The boundary is strict: |Z| = 2 stays
/// neutral.
pub fn classify_z(z: Option<f64>) -> DeviationClass {
    match z {
        None => DeviationClass::Masked,
        Some(z) if z > 2.0 => DeviationClass::Red,
        Some(z) if z < -2.0 => DeviationClass::Blue,
        Some(_) => DeviationClass::Neutral,
    }
}

fn deviation_fill(z: f64) -> String {
    match classify_z(Some(z)) {
        DeviationClass::Red => {
            let t = ((z - 2.0) / 4.0).clamp(0.0, 1.0);
            lerp_color(RED_LOW, RED_HIGH, t)
        }
        DeviationClass::Blue => {
            let t = ((-z - 2.0) / 4.0).clamp(0.0, 1.0);
            lerp_color(BLUE_LOW, BLUE_HIGH, t)
        }
        _ => NEUTRAL_FILL.to_string(),
    }
}

/// Deviation heatmap SVG: diverging scale centered at zero, masked bins left
/// blank. Only |Z| > 2 colors a cell.
pub fn deviation_svg(map: &DeviationMap, overlays: &Overlays, title: &str) -> Result<String> {
    let n = map.spec.bins_per_axis;
    let cell = PLOT / n as f64;
    let x0 = AXIS_LEFT;
    let y0 = TITLE_H + GAP;
    let width = AXIS_LEFT + PLOT + PAD;
    let height = TITLE_H + GAP + PLOT + AXIS_BOTTOM + PAD;

    let mut out = String::new();
    let _ = write!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">",
        w = fmt2(width),
        h = fmt2(height)
    );
    let _ = write!(
        out,
        "<rect x=\"0\" y=\"0\" width=\"{w}\" height=\"{h}\" fill=\"#ffffff\"/>",
        w = fmt2(width),
        h = fmt2(height)
    );
    title_svg(&mut out, width, title);

    for row in 0..n {
        for col in 0..n {
            let class = classify_z(map.z_at(col, row));
            let (name, fill) = match class {
                DeviationClass::Masked => continue,
                DeviationClass::Neutral => ("neutral", NEUTRAL_FILL.to_string()),
                DeviationClass::Red => (
                    "red",
                    deviation_fill(map.z_at(col, row).expect("classified")),
                ),
                DeviationClass::Blue => (
                    "blue",
                    deviation_fill(map.z_at(col, row).expect("classified")),
                ),
            };
            let _ = write!(
                out,
                "<rect class=\"dev-{name}\" x=\"{x}\" y=\"{y}\" width=\"{w}\" height=\"{h}\" fill=\"{fill}\"/>",
                x = fmt2(x0 + col as f64 * cell),
                y = fmt2(y0 + (n - 1 - row) as f64 * cell),
                w = fmt2(cell),
                h = fmt2(cell)
            );
        }
    }

    axes_svg(&mut out, x0, y0);
    overlays_svg(&mut out, x0, y0, overlays);
    out.push_str("</svg>");
    Ok(out)
}

pub fn render_deviation(
    map: &DeviationMap,
    overlays: &Overlays,
    title: &str,
    path: &Path,
) -> Result<()> {
    let svg = deviation_svg(map, overlays, title)?;
    fs::write(path, svg)?;
    Ok(())
}

/// One dispersion-and-coverage table row. Conditions a model was not run
/// under stay blank in the CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1Row {
    pub model: String,
    pub baseline_mean_distance: Option<f64>,
    pub right_auth_mean_distance: Option<f64>,
    pub left_lib_mean_distance: Option<f64>,
    pub coverage_top_left: f64,
    pub coverage_top_right: f64,
    pub coverage_bottom_right: f64,
    pub coverage_bottom_left: f64,
    pub coverage_total: f64,
}

impl Table1Row {
    pub fn from_summaries(
        model: impl Into<String>,
        baseline: Option<&DispersionSummary>,
        right_auth: Option<&DispersionSummary>,
        left_lib: Option<&DispersionSummary>,
        coverage: &CoverageSummary,
    ) -> Table1Row {
        Table1Row {
            model: model.into(),
            baseline_mean_distance: baseline.map(|d| d.mean_distance),
            right_auth_mean_distance: right_auth.map(|d| d.mean_distance),
            left_lib_mean_distance: left_lib.map(|d| d.mean_distance),
            coverage_top_left: coverage.top_left,
            coverage_top_right: coverage.top_right,
            coverage_bottom_right: coverage.bottom_right,
            coverage_bottom_left: coverage.bottom_left,
            coverage_total: coverage.total_fraction,
        }
    }
}

/// One paired-shift table row: both axes for one model under one condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table2Row {
    pub model: String,
    pub condition: String,
    pub econ: ShiftReport,
    pub social: ShiftReport,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TableBundle {
    pub table1: Vec<Table1Row>,
    pub table2: Vec<Table2Row>,
}

fn fmt_real(x: f64) -> String {
    format!("{x:.3}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_real).unwrap_or_default()
}

pub fn table1_csv(rows: &[Table1Row]) -> String {
    let mut out = String::from(
        "model,baseline_mean_distance,right_auth_mean_distance,left_lib_mean_distance,coverage_top_left,coverage_top_right,coverage_bottom_right,coverage_bottom_left,coverage_total\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.model,
            fmt_opt(r.baseline_mean_distance),
            fmt_opt(r.right_auth_mean_distance),
            fmt_opt(r.left_lib_mean_distance),
            fmt_real(r.coverage_top_left),
            fmt_real(r.coverage_top_right),
            fmt_real(r.coverage_bottom_right),
            fmt_real(r.coverage_bottom_left),
            fmt_real(r.coverage_total),
        );
    }
    out
}

pub fn table2_csv(rows: &[Table2Row]) -> String {
    let mut out = String::from("model,condition");
    for axis in ["econ", "social"] {
        for col in [
            "delta_mu",
            "sigma",
            "wsr_z",
            "p_bonferroni",
            "cohens_d",
            "ci_low",
            "ci_high",
        ] {
            let _ = write!(out, ",{axis}_{col}");
        }
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{},{}", r.model, r.condition);
        for shift in [&r.econ, &r.social] {
            let _ = write!(
                out,
                ",{},{},{},{},{},{},{}",
                fmt_real(shift.delta_mu),
                fmt_real(shift.sigma),
                fmt_real(shift.wsr_z),
                fmt_real(shift.p_bonferroni),
                fmt_real(shift.cohens_d),
                fmt_real(shift.ci95.0),
                fmt_real(shift.ci95.1),
            );
        }
        out.push('\n');
    }
    out
}

/// Writes table1.csv, table2.csv, and tables.json into `dir`. The CSV files
/// carry presentation-rounded values; the JSON bundle carries the exact
/// numbers and re-parses equal.
pub fn emit_tables(bundle: &TableBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("table1.csv"), table1_csv(&bundle.table1))?;
    fs::write(dir.join("table2.csv"), table2_csv(&bundle.table2))?;
    let json =
        serde_json::to_string_pretty(bundle).map_err(|e| Error::data(e.to_string()))?;
    fs::write(dir.join("tables.json"), json)?;
    Ok(())
}

pub fn read_table_bundle(dir: &Path) -> Result<TableBundle> {
    let path = dir.join("tables.json");
    let raw = fs::read_to_string(&path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&raw).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pct::CompassPoint;
    use crate::stats::{bin_points, deviation_map, Axis, GridHistogram, GridSpec};

    fn pt(x: f64, y: f64) -> CompassPoint {
        CompassPoint::new(x, y)
    }

    fn shift(axis: Axis) -> ShiftReport {
        ShiftReport {
            axis,
            n_pairs: 100,
            delta_mu: 5.25,
            sigma: 1.5,
            wsr_w: 12.0,
            wsr_z: -8.1,
            p_value: 1e-15,
            p_bonferroni: 2.8e-14,
            cohens_d: 3.5,
            ci95: (3.2, 3.8),
        }
    }

    #[test]
    fn density_single_bin_shades_one_cell() {
        let grid = bin_points(&vec![pt(0.0, 0.0); 7], GridSpec::default()).unwrap();
        let svg = density_svg(&grid, &Overlays::default(), "density").unwrap();
        assert_eq!(svg.matches("class=\"cell\"").count(), 1);
        assert_eq!(svg.matches("class=\"marginal-col\"").count(), 1);
        assert_eq!(svg.matches("class=\"marginal-row\"").count(), 1);
    }

    #[test]
    fn density_render_is_deterministic() {
        let points: Vec<CompassPoint> = (0..500)
            .map(|i| pt(((i * 7) % 21) as f64 - 10.0, ((i * 13) % 21) as f64 - 10.0))
            .collect();
        let grid = bin_points(&points, GridSpec::default()).unwrap();
        let overlays = Overlays {
            base_model_point: Some(pt(-4.5, -6.0)),
            baseline_centroid: Some(pt(1.2, 3.4)),
        };
        let a = density_svg(&grid, &overlays, "run A").unwrap();
        let b = density_svg(&grid, &overlays, "run A").unwrap();
        assert_eq!(a, b);
        assert!(a.contains("class=\"base-point\""));
        assert!(a.contains("class=\"baseline-centroid\""));
    }

    #[test]
    fn density_overlay_at_origin_sits_at_plot_center() {
        let grid = bin_points(&[pt(5.0, 5.0)], GridSpec::default()).unwrap();
        let overlays = Overlays {
            base_model_point: Some(pt(0.0, 0.0)),
            baseline_centroid: None,
        };
        let svg = density_svg(&grid, &overlays, "t").unwrap();
        // Plot spans x0 = 48, width 500: center 298; y0 = 96, center 346.
        assert!(svg.contains("cx=\"298.00\""), "{svg}");
        assert!(svg.contains("cy=\"346.00\""));
    }

    #[test]
    fn density_rejects_empty_grid() {
        let grid = GridHistogram::empty(GridSpec::default());
        assert!(density_svg(&grid, &Overlays::default(), "t").is_err());
    }

    #[test]
    fn classify_z_partitions_at_two() {
        assert_eq!(classify_z(None), DeviationClass::Masked);
        assert_eq!(classify_z(Some(0.0)), DeviationClass::Neutral);
        assert_eq!(classify_z(Some(2.0)), DeviationClass::Neutral);
        assert_eq!(classify_z(Some(-2.0)), DeviationClass::Neutral);
        assert_eq!(classify_z(Some(2.0001)), DeviationClass::Red);
        assert_eq!(classify_z(Some(-2.0001)), DeviationClass::Blue);
        assert_eq!(classify_z(Some(50.0)), DeviationClass::Red);
    }

    fn two_bin_map(f0: u64, f1: u64) -> DeviationMap {
        let spec = GridSpec { bins_per_axis: 2 };
        let background =
            GridHistogram::from_counts(spec, vec![500, 500, 0, 0]).unwrap();
        let foreground =
            GridHistogram::from_counts(spec, vec![f0, f1, 0, 0]).unwrap();
        deviation_map(&foreground, &background).unwrap()
    }

    #[test]
    fn deviation_masked_bins_stay_blank() {
        let map = two_bin_map(60, 40);
        let svg = deviation_svg(&map, &Overlays::default(), "dev").unwrap();
        // Two unmasked bins, two masked: exactly two dev- cells.
        let cells = svg.matches("class=\"dev-").count();
        assert_eq!(cells, 2);
    }

    #[test]
    fn deviation_self_map_is_all_neutral() {
        let points: Vec<CompassPoint> =
            (0..100).map(|i| pt((i % 9) as f64 - 4.0, (i % 7) as f64 - 3.0)).collect();
        let grid = bin_points(&points, GridSpec::default()).unwrap();
        let map = deviation_map(&grid, &grid).unwrap();
        let svg = deviation_svg(&map, &Overlays::default(), "self").unwrap();
        assert_eq!(svg.matches("class=\"dev-red\"").count(), 0);
        assert_eq!(svg.matches("class=\"dev-blue\"").count(), 0);
        assert!(svg.matches("class=\"dev-neutral\"").count() > 0);
    }

    #[test]
    fn deviation_sign_flip_swaps_red_and_blue() {
        let map = two_bin_map(90, 10);
        let flipped = two_bin_map(10, 90);
        let svg = deviation_svg(&map, &Overlays::default(), "d").unwrap();
        let svg_flipped = deviation_svg(&flipped, &Overlays::default(), "d").unwrap();
        assert_eq!(
            svg.matches("class=\"dev-red\"").count(),
            svg_flipped.matches("class=\"dev-blue\"").count()
        );
        assert_eq!(
            svg.matches("class=\"dev-blue\"").count(),
            svg_flipped.matches("class=\"dev-red\"").count()
        );
        assert!(svg.matches("class=\"dev-red\"").count() > 0);
    }

    #[test]
    fn deviation_render_is_deterministic() {
        let map = two_bin_map(75, 25);
        let overlays = Overlays {
            base_model_point: None,
            baseline_centroid: Some(pt(-2.0, 2.0)),
        };
        let a = deviation_svg(&map, &overlays, "dev run").unwrap();
        let b = deviation_svg(&map, &overlays, "dev run").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn title_is_escaped() {
        let grid = bin_points(&[pt(0.0, 0.0)], GridSpec::default()).unwrap();
        let svg = density_svg(&grid, &Overlays::default(), "a < b & c").unwrap();
        assert!(svg.contains("a &lt; b &amp; c"));
    }

    #[test]
    fn table1_blanks_missing_conditions() {
        let row = Table1Row {
            model: "mock".to_string(),
            baseline_mean_distance: Some(3.1234),
            right_auth_mean_distance: None,
            left_lib_mean_distance: None,
            coverage_top_left: 0.25,
            coverage_top_right: 0.5,
            coverage_bottom_right: 0.125,
            coverage_bottom_left: 0.0625,
            coverage_total: 0.2,
        };
        let csv = table1_csv(&[row]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(
            lines[1],
            "mock,3.123,,,0.250,0.500,0.125,0.062,0.200"
        );
    }

    #[test]
    fn table2_layout_is_stable() {
        let row = Table2Row {
            model: "mock".to_string(),
            condition: "right_authoritarian".to_string(),
            econ: shift(Axis::Econ),
            social: shift(Axis::Social),
        };
        let csv = table2_csv(&[row]);
        let lines: Vec<&str> = csv.lines().collect();
        assert!(lines[0].starts_with("model,condition,econ_delta_mu"));
        assert!(lines[0].ends_with("social_ci_high"));
        assert!(lines[1].starts_with("mock,right_authoritarian,5.250,1.500,-8.100,0.000,3.500,3.200,3.800"));
    }

    #[test]
    fn table_bundle_round_trips_exactly() {
        let bundle = TableBundle {
            table1: vec![Table1Row {
                model: "m".to_string(),
                baseline_mean_distance: Some(1.0 / 3.0),
                right_auth_mean_distance: Some(2.0_f64.sqrt()),
                left_lib_mean_distance: None,
                coverage_top_left: 0.1,
                coverage_top_right: 0.2,
                coverage_bottom_right: 0.3,
                coverage_bottom_left: 0.4,
                coverage_total: 0.25,
            }],
            table2: vec![Table2Row {
                model: "m".to_string(),
                condition: "left_libertarian".to_string(),
                econ: shift(Axis::Econ),
                social: shift(Axis::Social),
            }],
        };
        let dir = tempfile::tempdir().unwrap();
        emit_tables(&bundle, dir.path()).unwrap();
        let loaded = read_table_bundle(dir.path()).unwrap();
        assert_eq!(loaded, bundle);
        assert!(dir.path().join("table1.csv").exists());
        assert!(dir.path().join("table2.csv").exists());
    }

    #[test]
    fn emit_is_deterministic() {
        let bundle = TableBundle {
            table1: vec![],
            table2: vec![Table2Row {
                model: "m".to_string(),
                condition: "baseline".to_string(),
                econ: shift(Axis::Econ),
                social: shift(Axis::Social),
            }],
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        emit_tables(&bundle, d1.path()).unwrap();
        emit_tables(&bundle, d2.path()).unwrap();
        for f in ["table1.csv", "table2.csv", "tables.json"] {
            assert_eq!(
                fs::read(d1.path().join(f)).unwrap(),
                fs::read(d2.path().join(f)).unwrap(),
                "{f}"
            );
        }
    }
}
