//! Open-set evaluation metrics.
//!
//! All four metrics consume detection scores rank-wise, so any strictly
//! increasing transform of a score sheet leaves every number here exactly
//! unchanged. The conventions, pinned once and tested:
//!
//! * a trial is **accepted** when its detection score is strictly above the
//!   threshold; ties count as rejections;
//! * **EER** sweeps the threshold over the distinct scores (plus an
//!   accept-everything point below them all), producing a polyline of
//!   (false-accept rate, false-reject rate) points, and returns the value
//!   where that polyline crosses FAR = FRR — exactly at a grid point when
//!   the crossing lands on one, linearly interpolated along the connecting
//!   segment otherwise;
//! * **minDCF** minimizes `c_miss·P_miss·p + c_fa·P_fa·(1-p)` over the same
//!   sweep and normalizes by the better of the two trivial systems
//!   (`min(c_miss·p, c_fa·(1-p))`), so 1.0 means "no better than always
//!   accepting or always rejecting";
//! * **OSCR** integrates the correct-classification rate of the known
//!   trials (correct *and* above threshold) against the false-positive rate
//!   of the unknown trials, by trapezoid, from the strictest threshold down
//!   to accept-everything;
//! * **accuracy** is the closed-set fraction: known trials whose predicted
//!   target is the true one, thresholds out of the picture.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scoring::ScoreSheet;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no known (in-set) trials to evaluate")]
    EmptyKnown,
    #[error("no unknown (out-of-set) trials to evaluate")]
    EmptyUnknown,
    #[error("scores must be finite; found {0}")]
    NonFiniteScore(f64),
    #[error("invalid metric parameters: {0}")]
    BadParams(String),
    #[error("i/o on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad report file {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

fn default_p_target() -> f64 {
    0.01
}
fn default_cost() -> f64 {
    1.0
}

/// Detection-cost parameters. Defaults: `p_target` 0.01, both costs 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricParams {
    /// Prior probability that a trial is a target (known) trial.
    pub p_target: f64,
    /// Cost of rejecting a known trial.
    pub c_miss: f64,
    /// Cost of accepting an unknown trial.
    pub c_fa: f64,
}

impl Default for MetricParams {
    fn default() -> Self {
        MetricParams {
            p_target: default_p_target(),
            c_miss: default_cost(),
            c_fa: default_cost(),
        }
    }
}

impl MetricParams {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if !(self.p_target > 0.0 && self.p_target < 1.0) {
            return Err(MetricsError::BadParams(format!(
                "p_target must lie strictly between 0 and 1, got {}",
                self.p_target
            )));
        }
        for (name, c) in [("c_miss", self.c_miss), ("c_fa", self.c_fa)] {
            if !(c > 0.0) || !c.is_finite() {
                return Err(MetricsError::BadParams(format!(
                    "{name} must be positive and finite, got {c}"
                )));
            }
        }
        Ok(())
    }
}

/// One stored point of the detection-error polyline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

/// One stored point of the OSCR curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OscrPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub ccr: f64,
}

/// The wording shipped inside every report so a number can never be
/// misread: it states the acceptance rule and the sweep conventions.
pub const SCORE_CONVENTIONS: &str = "accept iff detection > threshold (ties reject); \
    EER from the FAR=FRR crossing of the threshold-swept polyline, interpolated \
    between grid points when needed; minDCF normalized by the better trivial \
    system; OSCR integrated by trapezoid over false-positive rate.";

fn check_finite(scores: &[f64]) -> Result<(), MetricsError> {
    for &s in scores {
        if !s.is_finite() {
            return Err(MetricsError::NonFiniteScore(s));
        }
    }
    Ok(())
}

/// Distinct scores, ascending.
fn ascending_grid(known: &[f64], unknown: &[f64]) -> Vec<f64> {
    let mut grid: Vec<f64> = known.iter().chain(unknown).copied().collect();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    grid
}

/// Fraction of `sorted` strictly above `theta`.
fn frac_above(sorted: &[f64], theta: f64) -> f64 {
    let at_or_below = sorted.partition_point(|&s| s <= theta);
    (sorted.len() - at_or_below) as f64 / sorted.len() as f64
}

/// Fraction of `sorted` at or below `theta`.
fn frac_at_or_below(sorted: &[f64], theta: f64) -> f64 {
    sorted.partition_point(|&s| s <= theta) as f64 / sorted.len() as f64
}

/// Equal error rate of known-vs-unknown detection scores. See the module
/// docs for the exact crossing convention.
pub fn compute_eer(known: &[f64], unknown: &[f64]) -> Result<f64, MetricsError> {
    if known.is_empty() {
        return Err(MetricsError::EmptyKnown);
    }
    if unknown.is_empty() {
        return Err(MetricsError::EmptyUnknown);
    }
    check_finite(known)?;
    check_finite(unknown)?;
    let mut known_sorted = known.to_vec();
    known_sorted.sort_by(f64::total_cmp);
    let mut unknown_sorted = unknown.to_vec();
    unknown_sorted.sort_by(f64::total_cmp);

    // The polyline starts at the accept-everything point (FAR 1, FRR 0) and
    // ends at or past FRR >= FAR (the strictest threshold rejects all known
    // trials: FRR 1, FAR 0), so a sign change always exists.
    let mut prev = (1.0f64, 0.0f64);
    for &theta in &ascending_grid(known, unknown) {
        let far = frac_above(&unknown_sorted, theta);
        let frr = frac_at_or_below(&known_sorted, theta);
        if frr >= far {
            if frr == far {
                return Ok(far);
            }
            // Crossing lies inside the segment prev -> here. Intersect with
            // the diagonal: t where (F0-R0) + t((F1-R1)-(F0-R0)) = 0.
            let (f0, r0) = prev;
            let (f1, r1) = (far, frr);
            let d0 = f0 - r0;
            let d1 = f1 - r1;
            let t = d0 / (d0 - d1);
            return Ok(f0 + t * (f1 - f0));
        }
        prev = (far, frr);
    }
    unreachable!("the strictest threshold always has FRR (=1) >= FAR (=0)");
}

/// Minimum normalized detection cost over the threshold sweep.
pub fn compute_min_dcf(
    known: &[f64],
    unknown: &[f64],
    params: &MetricParams,
) -> Result<f64, MetricsError> {
    params.validate()?;
    if known.is_empty() {
        return Err(MetricsError::EmptyKnown);
    }
    if unknown.is_empty() {
        return Err(MetricsError::EmptyUnknown);
    }
    check_finite(known)?;
    check_finite(unknown)?;
    let mut known_sorted = known.to_vec();
    known_sorted.sort_by(f64::total_cmp);
    let mut unknown_sorted = unknown.to_vec();
    unknown_sorted.sort_by(f64::total_cmp);

    let miss_weight = params.c_miss * params.p_target;
    let fa_weight = params.c_fa * (1.0 - params.p_target);
    let dcf_default = miss_weight.min(fa_weight);

    // Accept-everything first (P_miss 0, P_fa 1); the grid's top threshold
    // is the reject-everything end (P_miss 1, P_fa 0).
    let mut best = fa_weight;
    for &theta in &ascending_grid(known, unknown) {
        let p_miss = frac_at_or_below(&known_sorted, theta);
        let p_fa = frac_above(&unknown_sorted, theta);
        let dcf = miss_weight * p_miss + fa_weight * p_fa;
        if dcf < best {
            best = dcf;
        }
    }
    Ok(best / dcf_default)
}

/// Area under the OSCR curve: correct-classification rate of known trials
/// against false-positive rate of unknown trials, threshold swept from
/// strictest to accept-everything. `known` pairs each detection score with
/// whether the closed-set prediction was correct.
pub fn compute_oscr(known: &[(f64, bool)], unknown: &[f64]) -> Result<f64, MetricsError> {
    if known.is_empty() {
        return Err(MetricsError::EmptyKnown);
    }
    if unknown.is_empty() {
        return Err(MetricsError::EmptyUnknown);
    }
    let known_scores: Vec<f64> = known.iter().map(|(s, _)| *s).collect();
    check_finite(&known_scores)?;
    check_finite(unknown)?;

    let points = oscr_points(known, unknown);
    let mut auc = 0.0;
    for pair in points.windows(2) {
        let (x0, y0) = pair[0];
        let (x1, y1) = pair[1];
        auc += (x1 - x0) * 0.5 * (y0 + y1);
    }
    Ok(auc)
}

/// The swept (FPR, CCR) points, strictest threshold first, ending at the
/// accept-everything point (FPR 1, CCR = closed-set-correct fraction).
fn oscr_points(known: &[(f64, bool)], unknown: &[f64]) -> Vec<(f64, f64)> {
    let n_k = known.len() as f64;
    let mut correct_sorted: Vec<f64> = known
        .iter()
        .filter(|(_, ok)| *ok)
        .map(|(s, _)| *s)
        .collect();
    correct_sorted.sort_by(f64::total_cmp);
    let mut unknown_sorted = unknown.to_vec();
    unknown_sorted.sort_by(f64::total_cmp);

    let known_scores: Vec<f64> = known.iter().map(|(s, _)| *s).collect();
    let mut grid = ascending_grid(&known_scores, unknown);
    grid.reverse();

    let mut points = Vec::with_capacity(grid.len() + 1);
    for &theta in &grid {
        let fpr = frac_above(&unknown_sorted, theta);
        // Correct known trials above the threshold, over all known trials.
        let above = correct_sorted.len() - correct_sorted.partition_point(|&s| s <= theta);
        points.push((fpr, above as f64 / n_k));
    }
    let ccr_all = correct_sorted.len() as f64 / n_k;
    points.push((1.0, ccr_all));
    points
}

/// Closed-set accuracy from per-trial correctness flags.
pub fn compute_acc(correct: &[bool]) -> Result<f64, MetricsError> {
    if correct.is_empty() {
        return Err(MetricsError::EmptyKnown);
    }
    Ok(correct.iter().filter(|c| **c).count() as f64 / correct.len() as f64)
}

/// Everything evaluated from one score sheet, with the parameters and
/// conventions echoed so the file stands on its own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub source: String,
    pub head: Option<String>,
    pub n_known: usize,
    pub n_unknown: usize,
    pub eer: f64,
    pub min_dcf: f64,
    pub oscr: f64,
    pub accuracy: f64,
    pub params: MetricParams,
    pub conventions: String,
    /// (threshold, FAR, FRR) per distinct score, ascending. The implicit
    /// accept-everything point (FAR 1, FRR 0) below the first threshold is
    /// part of the sweep but not stored — thresholds here are all finite.
    pub det_curve: Vec<DetPoint>,
    /// (threshold, FPR, CCR) per distinct score, descending, likewise
    /// without the implicit accept-everything end point.
    pub oscr_curve: Vec<OscrPoint>,
}

/// Evaluate a sheet: split its trials into known and unknown, compute all
/// four metrics and both curves.
pub fn metrics_report(
    sheet: &ScoreSheet,
    params: &MetricParams,
) -> Result<MetricsReport, MetricsError> {
    params.validate()?;
    let mut known: Vec<(f64, bool)> = Vec::new();
    let mut unknown: Vec<f64> = Vec::new();
    for s in &sheet.scores {
        match s.truth {
            Some(t) => known.push((s.detection, s.predicted == t)),
            None => unknown.push(s.detection),
        }
    }
    let known_scores: Vec<f64> = known.iter().map(|(s, _)| *s).collect();
    let correct: Vec<bool> = known.iter().map(|(_, ok)| *ok).collect();

    let eer = compute_eer(&known_scores, &unknown)?;
    let min_dcf = compute_min_dcf(&known_scores, &unknown, params)?;
    let oscr = compute_oscr(&known, &unknown)?;
    let accuracy = compute_acc(&correct)?;

    let mut known_sorted = known_scores.clone();
    known_sorted.sort_by(f64::total_cmp);
    let mut unknown_sorted = unknown.clone();
    unknown_sorted.sort_by(f64::total_cmp);
    let det_curve: Vec<DetPoint> = ascending_grid(&known_scores, &unknown)
        .into_iter()
        .map(|theta| DetPoint {
            threshold: theta,
            far: frac_above(&unknown_sorted, theta),
            frr: frac_at_or_below(&known_sorted, theta),
        })
        .collect();
    let oscr_curve: Vec<OscrPoint> = {
        let points = oscr_points(&known, &unknown);
        let mut grid = ascending_grid(&known_scores, &unknown);
        grid.reverse();
        // oscr_points appends the accept-everything end; the stored curve
        // keeps only the rows with a real threshold.
        grid.iter()
            .zip(&points)
            .map(|(&theta, &(fpr, ccr))| OscrPoint {
                threshold: theta,
                fpr,
                ccr,
            })
            .collect()
    };

    Ok(MetricsReport {
        source: sheet.source.to_string(),
        head: sheet.head.map(|h| h.to_string()),
        n_known: known.len(),
        n_unknown: unknown.len(),
        eer,
        min_dcf,
        oscr,
        accuracy,
        params: *params,
        conventions: SCORE_CONVENTIONS.to_string(),
        det_curve,
        oscr_curve,
    })
}

impl MetricsReport {
    /// Pretty-printed JSON, written atomically.
    pub fn write_json(&self, path: &Path) -> Result<(), MetricsError> {
        let text = serde_json::to_string_pretty(self).map_err(|source| MetricsError::Json {
            path: path.display().to_string(),
            source,
        })?;
        crate::ioutil::write_atomic(path, |w| {
            w.write_all(text.as_bytes())?;
            w.write_all(b"\n")
        })
        .map_err(|source| MetricsError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read_json(path: &Path) -> Result<MetricsReport, MetricsError> {
        let text = std::fs::read_to_string(path).map_err(|source| MetricsError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| MetricsError::Json {
            path: path.display().to_string(),
            source,
        })
    }

    /// Tab-separated DET polyline (`threshold far frr`), one row per stored
    /// point, for external plotting.
    pub fn write_det_tsv(&self, path: &Path) -> Result<(), MetricsError> {
        crate::ioutil::write_atomic(path, |w| {
            writeln!(w, "threshold\tfar\tfrr")?;
            for p in &self.det_curve {
                writeln!(w, "{}\t{}\t{}", p.threshold, p.far, p.frr)?;
            }
            Ok(())
        })
        .map_err(|source| MetricsError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Tab-separated OSCR polyline (`threshold fpr ccr`).
    pub fn write_oscr_tsv(&self, path: &Path) -> Result<(), MetricsError> {
        crate::ioutil::write_atomic(path, |w| {
            writeln!(w, "threshold\tfpr\tccr")?;
            for p in &self.oscr_curve {
                writeln!(w, "{}\t{}\t{}", p.threshold, p.fpr, p.ccr)?;
            }
            Ok(())
        })
        .map_err(|source| MetricsError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}
