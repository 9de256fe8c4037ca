//! Spatial and paired statistics over scored compass points.
//!
//! Everything here is pure and deterministic: fixed iteration order,
//! compensated accumulation where rounding order could show, and no hidden
//! randomness. The grid covers [-10, 10]² with left-closed bins; the single
//! exception is a coordinate of exactly +10, which lands in the last bin so
//! the domain stays closed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pct::CompassPoint;

pub const DOMAIN_MIN: f64 = -10.0;
pub const DOMAIN_MAX: f64 = 10.0;
const DOMAIN_SPAN: f64 = DOMAIN_MAX - DOMAIN_MIN;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub bins_per_axis: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { bins_per_axis: 35 }
    }
}

impl GridSpec {
    pub fn new(bins_per_axis: usize) -> Result<GridSpec> {
        if bins_per_axis == 0 {
            return Err(Error::data("grid needs at least one bin per axis"));
        }
        Ok(GridSpec { bins_per_axis })
    }

    pub fn bin_width(&self) -> f64 {
        DOMAIN_SPAN / self.bins_per_axis as f64
    }

    pub fn total_bins(&self) -> usize {
        self.bins_per_axis * self.bins_per_axis
    }

    /// (column, row) bin indices for a point; column tracks econ, row tracks
    /// social. Errors on NaN or out-of-domain coordinates.
    pub fn index_of(&self, point: &CompassPoint) -> Result<(usize, usize)> {
        Ok((self.axis_bin(point.econ, point)?, self.axis_bin(point.social, point)?))
    }

    fn axis_bin(&self, coord: f64, point: &CompassPoint) -> Result<usize> {
        if !coord.is_finite() || coord < DOMAIN_MIN || coord > DOMAIN_MAX {
            return Err(Error::data(format!(
                "point ({}, {}) outside [-10, 10] domain",
                point.econ, point.social
            )));
        }
        let raw = ((coord - DOMAIN_MIN) / self.bin_width()).floor() as usize;
        // coord == +10 computes to bins_per_axis; fold it into the last bin.
        Ok(raw.min(self.bins_per_axis - 1))
    }
}

/// Dense 2D histogram, row-major: counts[row * bins + col].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridHistogram {
    pub spec: GridSpec,
    counts: Vec<u64>,
    pub total: u64,
}

impl GridHistogram {
    pub fn empty(spec: GridSpec) -> GridHistogram {
        GridHistogram {
            spec,
            counts: vec![0; spec.total_bins()],
            total: 0,
        }
    }

    pub fn add(&mut self, point: &CompassPoint) -> Result<()> {
        let (col, row) = self.spec.index_of(point)?;
        self.counts[row * self.spec.bins_per_axis + col] += 1;
        self.total += 1;
        Ok(())
    }

    pub fn count(&self, col: usize, row: usize) -> u64 {
        self.counts[row * self.spec.bins_per_axis + col]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn occupied_bins(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    /// Builds a histogram directly from bin counts (row-major). Used by
    /// resampling tests and replay tooling.
    pub fn from_counts(spec: GridSpec, counts: Vec<u64>) -> Result<GridHistogram> {
        if counts.len() != spec.total_bins() {
            return Err(Error::data(format!(
                "expected {} bin counts, got {}",
                spec.total_bins(),
                counts.len()
            )));
        }
        let total = counts.iter().sum();
        Ok(GridHistogram { spec, counts, total })
    }
}

pub fn bin_points(points: &[CompassPoint], spec: GridSpec) -> Result<GridHistogram> {
    let mut grid = GridHistogram::empty(spec);
    for p in points {
        grid.add(p)?;
    }
    Ok(grid)
}

/// Per-column and per-row totals (econ marginal, social marginal). Each
/// vector sums to the histogram total.
pub fn marginals(grid: &GridHistogram) -> (Vec<u64>, Vec<u64>) {
    let n = grid.spec.bins_per_axis;
    let mut cols = vec![0u64; n];
    let mut rows = vec![0u64; n];
    for row in 0..n {
        for col in 0..n {
            let c = grid.count(col, row);
            cols[col] += c;
            rows[row] += c;
        }
    }
    (cols, rows)
}

/// Neumaier variant of Kahan summation: running compensation for lost
/// low-order bits, deterministic for a fixed input order.
fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DispersionSummary {
    pub centroid: CompassPoint,
    pub mean_distance: f64,
    pub n: usize,
}

/// Centroid and mean Euclidean distance from it.
pub fn dispersion(points: &[CompassPoint]) -> Result<DispersionSummary> {
    if points.is_empty() {
        return Err(Error::data("dispersion of an empty point set"));
    }
    let n = points.len() as f64;
    let cx = compensated_sum(points.iter().map(|p| p.econ)) / n;
    let cy = compensated_sum(points.iter().map(|p| p.social)) / n;
    let mean_distance =
        compensated_sum(points.iter().map(|p| (p.econ - cx).hypot(p.social - cy))) / n;
    Ok(DispersionSummary {
        centroid: CompassPoint::new(cx, cy),
        mean_distance,
        n: points.len(),
    })
}

/// How the middle row/column of an odd-sized grid is attributed to quadrants.
/// With 35 bins the middle row/column straddles zero, so quadrant membership
/// is a convention, not a fact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuadrantConvention {
    /// Quadrants share the middle row/column (18×18 each at 35 bins).
    SharedMiddle,
    /// Middle row/column belongs to no quadrant (17×17 each at 35 bins).
    ExcludeMiddle,
    /// Middle row/column belongs to the positive side only.
    PositiveMiddle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageSummary {
    pub convention: QuadrantConvention,
    /// Occupied fraction of all bins.
    pub total_fraction: f64,
    pub top_left: f64,
    pub top_right: f64,
    pub bottom_right: f64,
    pub bottom_left: f64,
}

/// (negative half, positive half) index ranges for one axis, half-open.
fn half_spans(n: usize, convention: QuadrantConvention) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    if n % 2 == 0 {
        // No straddling middle: conventions coincide.
        return (0..n / 2, n / 2..n);
    }
    let mid = n / 2;
    match convention {
        QuadrantConvention::SharedMiddle => (0..mid + 1, mid..n),
        QuadrantConvention::ExcludeMiddle => (0..mid, mid + 1..n),
        QuadrantConvention::PositiveMiddle => (0..mid, mid..n),
    }
}

/// Occupied-bin fractions, overall and per quadrant. Social rows grow toward
/// authoritarian, so "top" means high row indices.
pub fn coverage(grid: &GridHistogram, convention: QuadrantConvention) -> CoverageSummary {
    let n = grid.spec.bins_per_axis;
    let (left, right) = half_spans(n, convention);
    let (bottom, top) = half_spans(n, convention);

    let quadrant = |cols: &std::ops::Range<usize>, rows: &std::ops::Range<usize>| -> f64 {
        let bins = cols.len() * rows.len();
        if bins == 0 {
            return 0.0;
        }
        let mut occupied = 0usize;
        for row in rows.clone() {
            for col in cols.clone() {
                if grid.count(col, row) > 0 {
                    occupied += 1;
                }
            }
        }
        occupied as f64 / bins as f64
    };

    CoverageSummary {
        convention,
        total_fraction: grid.occupied_bins() as f64 / grid.spec.total_bins() as f64,
        top_left: quadrant(&left, &top),
        top_right: quadrant(&right, &top),
        bottom_right: quadrant(&right, &bottom),
        bottom_left: quadrant(&left, &bottom),
    }
}

/// How zero differences enter the signed-rank test.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZeroPolicy {
    /// Classic Wilcoxon: zeros are dropped before ranking.
    Discard,
    /// Pratt: zeros are ranked with everything else, then their ranks are
    /// dropped from both sums with the matching mean/variance adjustment.
    Pratt,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WsrSummary {
    /// Differences actually ranked (zeros excluded under Discard).
    pub n_used: usize,
    pub w_plus: f64,
    pub w_minus: f64,
    /// min(W⁺, W⁻); using the minimum pins z ≤ 0.
    pub w: f64,
    pub mu_w: f64,
    pub sigma_w: f64,
    pub z: f64,
    /// Two-sided normal-approximation p.
    pub p_value: f64,
}

/// Midranks of |values|: ties within a run share the average rank.
fn midranks(sorted_abs: &[f64]) -> (Vec<f64>, f64) {
    let n = sorted_abs.len();
    let mut ranks = vec![0.0; n];
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && sorted_abs[j + 1] == sorted_abs[i] {
            j += 1;
        }
        let run = (j - i + 1) as f64;
        // ranks i+1 ..= j+1 averaged
        let rank = (i + 1 + j + 1) as f64 / 2.0;
        for r in ranks.iter_mut().take(j + 1).skip(i) {
            *r = rank;
        }
        tie_term += run * run * run - run;
        i = j + 1;
    }
    (ranks, tie_term)
}

/// Wilcoxon signed-rank test on paired differences, normal approximation.
///
/// W = min(W⁺, W⁻), μ_W = n(n+1)/4, σ_W² = n(n+1)(2n+1)/24 − Σ(t³−t)/48,
/// z = (W − μ_W)/σ_W, p two-sided. Under `ZeroPolicy::Pratt` the zero pairs
/// stay in the ranking and μ_W/σ_W² lose the zero-block terms instead.
pub fn wilcoxon_signed_rank(diffs: &[f64], zeros: ZeroPolicy) -> Result<WsrSummary> {
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::data("non-finite difference in signed-rank input"));
    }
    let kept: Vec<f64> = match zeros {
        ZeroPolicy::Discard => diffs.iter().copied().filter(|d| *d != 0.0).collect(),
        ZeroPolicy::Pratt => diffs.to_vec(),
    };
    let n_nonzero = diffs.iter().filter(|d| **d != 0.0).count();
    let n_zero = diffs.len() - n_nonzero;
    if n_nonzero < 5 {
        return Err(Error::data(format!(
            "signed-rank test needs at least 5 nonzero differences, have {n_nonzero}"
        )));
    }
    let n = kept.len();

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| kept[a].abs().total_cmp(&kept[b].abs()));
    let sorted_abs: Vec<f64> = order.iter().map(|&i| kept[i].abs()).collect();
    let (ranks, tie_term) = midranks(&sorted_abs);

    let mut w_plus = 0.0;
    let mut w_minus = 0.0;
    for (pos, &i) in order.iter().enumerate() {
        if kept[i] > 0.0 {
            w_plus += ranks[pos];
        } else if kept[i] < 0.0 {
            w_minus += ranks[pos];
        }
        // Zero differences (Pratt) hold their rank but join neither sum.
    }

    let nf = n as f64;
    let (mu_w, mut var) = match zeros {
        ZeroPolicy::Discard => (
            nf * (nf + 1.0) / 4.0,
            nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0,
        ),
        ZeroPolicy::Pratt => {
            let z = n_zero as f64;
            (
                (nf * (nf + 1.0) - z * (z + 1.0)) / 4.0,
                (nf * (nf + 1.0) * (2.0 * nf + 1.0) - z * (z + 1.0) * (2.0 * z + 1.0)) / 24.0,
            )
        }
    };
    // Under Pratt the zero block is itself a tie run; its correction is the
    // zero-block subtraction above, so keep only nonzero tie runs here.
    let tie_correction = match zeros {
        ZeroPolicy::Discard => tie_term,
        ZeroPolicy::Pratt => {
            let z = n_zero as f64;
            tie_term - (z * z * z - z)
        }
    };
    var -= tie_correction / 48.0;
    if var <= 0.0 {
        return Err(Error::data(
            "signed-rank variance is zero (all differences tied)",
        ));
    }

    let w = w_plus.min(w_minus);
    let sigma_w = var.sqrt();
    let z = (w - mu_w) / sigma_w;
    let p_value = (libm::erfc(z.abs() / std::f64::consts::SQRT_2)).min(1.0);
    Ok(WsrSummary {
        n_used: n,
        w_plus,
        w_minus,
        w,
        mu_w,
        sigma_w,
        z,
        p_value,
    })
}

pub fn bonferroni(p: f64, m_tests: usize) -> f64 {
    (p * m_tests as f64).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Econ,
    Social,
}

impl Axis {
    pub fn of(self, p: &CompassPoint) -> f64 {
        match self {
            Axis::Econ => p.econ,
            Axis::Social => p.social,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Axis::Econ => "econ",
            Axis::Social => "social",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    pub axis: Axis,
    pub n_pairs: usize,
    /// Mean conditioned-minus-baseline difference.
    pub delta_mu: f64,
    /// Sample standard deviation of the per-persona differences.
    pub sigma: f64,
    pub wsr_w: f64,
    pub wsr_z: f64,
    pub p_value: f64,
    pub p_bonferroni: f64,
    pub cohens_d: f64,
    pub ci95: (f64, f64),
}

/// Paired shift between a baseline and a conditioned run on one axis.
///
/// Pairs are matched on persona id; personas missing from either side drop
/// out. Cohen's d divides Δμ by the pooled standard deviation of the two
/// condition samples (not of the differences), and its CI uses the normal
/// large-sample standard error √((n₁+n₂)/(n₁n₂) + d²/(2(n₁+n₂))).
pub fn shift_stats(
    baseline: &[(u32, f64)],
    conditioned: &[(u32, f64)],
    axis: Axis,
    m_tests: usize,
) -> Result<ShiftReport> {
    let mut base_sorted: Vec<(u32, f64)> = baseline.to_vec();
    base_sorted.sort_by_key(|(id, _)| *id);
    let mut cond_sorted: Vec<(u32, f64)> = conditioned.to_vec();
    cond_sorted.sort_by_key(|(id, _)| *id);
    for (name, side) in [("baseline", &base_sorted), ("conditioned", &cond_sorted)] {
        if side.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::data(format!("duplicate persona id in {name} side")));
        }
    }

    let mut base_v = Vec::new();
    let mut cond_v = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < base_sorted.len() && j < cond_sorted.len() {
        match base_sorted[i].0.cmp(&cond_sorted[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                base_v.push(base_sorted[i].1);
                cond_v.push(cond_sorted[j].1);
                i += 1;
                j += 1;
            }
        }
    }
    let n = base_v.len();
    if n < 5 {
        return Err(Error::data(format!(
            "shift statistics need at least 5 matched pairs, have {n}"
        )));
    }
    let nf = n as f64;

    let diffs: Vec<f64> = base_v
        .iter()
        .zip(&cond_v)
        .map(|(b, c)| c - b)
        .collect();
    let delta_mu = compensated_sum(diffs.iter().copied()) / nf;
    let sigma = sample_std(&diffs, delta_mu);

    let wsr = wilcoxon_signed_rank(&diffs, ZeroPolicy::Discard)?;

    let mean_b = compensated_sum(base_v.iter().copied()) / nf;
    let mean_c = compensated_sum(cond_v.iter().copied()) / nf;
    let s_b = sample_std(&base_v, mean_b);
    let s_c = sample_std(&cond_v, mean_c);
    let pooled = (((nf - 1.0) * s_b * s_b + (nf - 1.0) * s_c * s_c) / (2.0 * nf - 2.0)).sqrt();
    if pooled == 0.0 {
        return Err(Error::data(
            "pooled standard deviation is zero; effect size undefined",
        ));
    }
    let d = (mean_c - mean_b) / pooled;
    let half = 1.96 * ci_standard_error(d, n, n);

    Ok(ShiftReport {
        axis,
        n_pairs: n,
        delta_mu,
        sigma,
        wsr_w: wsr.w,
        wsr_z: wsr.z,
        p_value: wsr.p_value,
        p_bonferroni: bonferroni(wsr.p_value, m_tests),
        cohens_d: d,
        ci95: (d - half, d + half),
    })
}

/// Large-sample standard error of Cohen's d.
pub fn ci_standard_error(d: f64, n1: usize, n2: usize) -> f64 {
    let (n1, n2) = (n1 as f64, n2 as f64);
    ((n1 + n2) / (n1 * n2) + d * d / (2.0 * (n1 + n2))).sqrt()
}

fn sample_std(values: &[f64], mean: f64) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let ss = compensated_sum(values.iter().map(|v| (v - mean) * (v - mean)));
    (ss / (values.len() as f64 - 1.0)).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationMap {
    pub spec: GridSpec,
    /// Row-major Z per bin; `None` where the background makes Z undefined
    /// (empty bin or the entire background in one bin).
    pub z: Vec<Option<f64>>,
    pub n_foreground: u64,
    pub n_background: u64,
}

impl DeviationMap {
    pub fn z_at(&self, col: usize, row: usize) -> Option<f64> {
        self.z[row * self.spec.bins_per_axis + col]
    }

    /// Bins whose expected foreground count falls below `min_expected`;
    /// display layers can flag these as unstable.
    pub fn low_expectation(&self, background: &GridHistogram, min_expected: f64) -> Vec<bool> {
        let nb = self.n_background as f64;
        let nf = self.n_foreground as f64;
        background
            .counts()
            .iter()
            .map(|&b| nf * (b as f64 / nb) < min_expected)
            .collect()
    }
}

/// Bin-wise binomial Z of a foreground histogram against the background it
/// was drawn from: Z_i = (F_i − N_F·p_i) / √(N_F·p_i·(1−p_i)), p_i = B_i/N_B.
pub fn deviation_map(
    foreground: &GridHistogram,
    background: &GridHistogram,
) -> Result<DeviationMap> {
    if foreground.spec != background.spec {
        return Err(Error::data(format!(
            "grid mismatch: foreground {} bins vs background {} bins per axis",
            foreground.spec.bins_per_axis, background.spec.bins_per_axis
        )));
    }
    if background.total == 0 || foreground.total == 0 {
        return Err(Error::data(
            "deviation map needs non-empty foreground and background",
        ));
    }
    let nb = background.total as f64;
    let nf = foreground.total as f64;
    let z = background
        .counts()
        .iter()
        .zip(foreground.counts())
        .map(|(&b, &f)| {
            if b == 0 || b == background.total {
                None
            } else {
                let p = b as f64 / nb;
                Some((f as f64 - nf * p) / (nf * p * (1.0 - p)).sqrt())
            }
        })
        .collect();
    Ok(DeviationMap {
        spec: foreground.spec,
        z,
        n_foreground: foreground.total,
        n_background: background.total,
    })
}
