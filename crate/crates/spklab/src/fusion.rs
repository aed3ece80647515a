//! Score-level fusion and spectral candidate selection.
//!
//! A pool of independently trained adapters disagrees in useful ways:
//! averaging their per-target posteriors washes out the worst single-model
//! mistakes. But averaging over *every* candidate wastes the budget on
//! degenerate members, and picking members by validation error would leak
//! the evaluation into selection. This module instead ranks candidates by a
//! label-free diagnostic computed from the models alone: the variance of
//! the eigenvalue spectrum of each learned point set's Gram matrix.
//!
//! For a point stack `Z` (rows are reciprocal points — adaptive rows
//! included — or center points), the Gram matrix `Z Zᵀ` has eigenvalues
//! `λ_1..λ_N`, and the diagnostic is their population variance
//!
//! ```text
//! Var = (1/N) Σ (λ_i − λ̄)²
//! ```
//!
//! A spread-out spectrum means a few directions dominate the point set —
//! the geometry collapsed during training — so candidates are ranked by
//! variance *ascending* and the highest-variance tail is discarded, once
//! per point set, keeping only models that survive both cuts.
//!
//! Numerics are belt-and-braces: the variance also falls out of matrix
//! traces alone (`Var = tr(C²)/N − (tr(C)/N)²` for `C = Z Zᵀ`), and
//! [`spectral_variance`] refuses to return a value when the eigensolver
//! route and the trace route disagree.

use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::AdapterModel;
use crate::numeric::eigen::{
    symmetric_eigenvalues, EigenError, SymmetricMatrix, DEFAULT_EIGEN_TOL,
};
use crate::scoring::{ScoreSheet, ScoreSource, TrialScore};
use crate::vecmath;

/// Fraction of the pool discarded per point set. Kept as the exact ratio
/// rather than a rounded decimal so a pool divisible by three cuts exactly
/// `S/3` — 30 candidates lose 10 per metric, keep 20, and the intersection
/// keeps at least 10.
pub const DEFAULT_DISCARD_FRACTION: f64 = 1.0 / 3.0;

/// Allowed disagreement between the eigenvalue-based variance and the
/// trace-identity variance (absolute, relative above magnitude 1).
pub const TRACE_IDENTITY_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("no rows to diagnose")]
    NoRows,
    #[error("rows are ragged: row {row} has {found} entries, expected {expected}")]
    RaggedRows {
        row: usize,
        found: usize,
        expected: usize,
    },
    #[error("cannot normalize zero-norm {matrix} row {row}")]
    ZeroNormRow { matrix: &'static str, row: usize },
    #[error(transparent)]
    Eigen(#[from] EigenError),
    #[error(
        "eigenvalue variance {eig} disagrees with the trace identity {trace}; \
         the eigensolve is untrustworthy"
    )]
    TraceIdentity { eig: f64, trace: f64 },
    #[error("no candidates to select from")]
    NoCandidates,
    #[error("discard fraction must lie in [0, 0.5], got {0}")]
    BadDiscardFraction(f64),
    #[error("no members to fuse")]
    EmptyKept,
    #[error("member index {index} listed twice")]
    DuplicateMember { index: usize },
    #[error("member index {index} out of range for {total} sheets")]
    MemberOutOfRange { index: usize, total: usize },
    #[error("score sheets disagree: {0}")]
    SheetMismatch(String),
    #[error("bad input: {0}")]
    BadInput(String),
    #[error("i/o on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad selection file {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

/// Spectral summary of one candidate's learned point sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralDiagnostics {
    /// Eigenvalues of the reciprocal-point Gram matrix (adaptive rows
    /// included), largest first, one per row.
    pub eigenvalues_rp: Vec<f64>,
    /// Eigenvalues of the center-point Gram matrix, largest first.
    pub eigenvalues_cp: Vec<f64>,
    /// Population variance of `eigenvalues_rp`.
    pub var_rp: f64,
    /// Population variance of `eigenvalues_cp`.
    pub var_cp: f64,
}

/// Eigenvalues of `Z Zᵀ` (largest first, one per row of `Z`) and their
/// population variance.
///
/// When `Z` has fewer columns than rows, the eigensolve runs on the smaller
/// Gram matrix `Zᵀ Z` — the two share their nonzero spectrum, and the
/// remaining eigenvalues of `Z Zᵀ` are exact zeros, which are appended.
/// The variance is cross-checked against the trace identity
/// `tr(C²)/N − (tr(C)/N)²`; disagreement beyond [`TRACE_IDENTITY_TOL`]
/// is an error, never a silent bad number.
pub fn spectral_variance(rows: &[Vec<f64>]) -> Result<(Vec<f64>, f64), FusionError> {
    let n = rows.len();
    if n == 0 {
        return Err(FusionError::NoRows);
    }
    let d = rows[0].len();
    for (row, r) in rows.iter().enumerate() {
        if r.len() != d {
            return Err(FusionError::RaggedRows {
                row,
                found: r.len(),
                expected: d,
            });
        }
    }

    let (gram, pad) = if d < n {
        // Solve the d×d Gram of the columns instead of the n×n Gram of the
        // rows; the missing n−d eigenvalues are exact zeros.
        let cols: Vec<Vec<f64>> = (0..d)
            .map(|j| rows.iter().map(|r| r[j]).collect())
            .collect();
        (SymmetricMatrix::gram(&cols)?, n - d)
    } else {
        (SymmetricMatrix::gram(rows)?, 0)
    };
    let mut eigenvalues = symmetric_eigenvalues(&gram, DEFAULT_EIGEN_TOL)?;
    eigenvalues.extend(std::iter::repeat(0.0).take(pad));
    eigenvalues.sort_by(|a, b| b.total_cmp(a));

    let count = n as f64;
    let mean = eigenvalues.iter().sum::<f64>() / count;
    let variance = eigenvalues.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / count;

    // Both traces are invariant under the row/column Gram swap, so they can
    // be read off whichever matrix was solved.
    let trace = gram.trace();
    let by_trace = gram.frobenius_sq() / count - (trace / count) * (trace / count);
    let tol = TRACE_IDENTITY_TOL * by_trace.abs().max(1.0);
    // Negated comparison so a NaN anywhere trips the error path.
    if !((variance - by_trace).abs() <= tol) {
        return Err(FusionError::TraceIdentity {
            eig: variance,
            trace: by_trace,
        });
    }
    Ok((eigenvalues, variance))
}

/// Spectral diagnostics for one trained adapter: the Gram spectra of its
/// reciprocal points (adaptive rows included — they shape the same score
/// surface as the labeled rows) and of its center points.
///
/// `normalize_rows` switches the Gram to unit-normalized rows, which makes
/// the diagnostic blind to row scale; the default pipeline diagnoses raw
/// rows, because scale collapse is part of what the variance should see.
pub fn diagnose_candidate(
    model: &AdapterModel,
    normalize_rows: bool,
) -> Result<SpectralDiagnostics, FusionError> {
    let (eigenvalues_rp, var_rp) = if normalize_rows {
        spectral_variance(&unit_rows(&model.reciprocal_points, "reciprocal-point")?)?
    } else {
        spectral_variance(&model.reciprocal_points)?
    };
    let (eigenvalues_cp, var_cp) = if normalize_rows {
        spectral_variance(&unit_rows(&model.center_points, "center-point")?)?
    } else {
        spectral_variance(&model.center_points)?
    };
    Ok(SpectralDiagnostics {
        eigenvalues_rp,
        eigenvalues_cp,
        var_rp,
        var_cp,
    })
}

fn unit_rows(rows: &[Vec<f64>], matrix: &'static str) -> Result<Vec<Vec<f64>>, FusionError> {
    rows.iter()
        .enumerate()
        .map(|(row, r)| {
            let norm = vecmath::l2_norm(r);
            if norm <= 0.0 {
                return Err(FusionError::ZeroNormRow { matrix, row });
            }
            Ok(r.iter().map(|x| x / norm).collect())
        })
        .collect()
}

/// Outcome of a selection pass over a candidate pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Number of candidates examined.
    pub total: usize,
    /// Candidate indices that survived both per-metric cuts, ascending.
    pub kept: Vec<usize>,
    /// Fraction discarded per metric.
    pub discard_fraction: f64,
    /// Per-candidate diagnostics, in candidate order.
    pub diagnostics: Vec<SpectralDiagnostics>,
}

impl SelectionResult {
    pub fn write_json(&self, path: &Path) -> Result<(), FusionError> {
        let text = serde_json::to_string_pretty(self).map_err(|source| FusionError::Json {
            path: path.display().to_string(),
            source,
        })?;
        crate::ioutil::write_atomic(path, |w| {
            w.write_all(text.as_bytes())?;
            w.write_all(b"\n")
        })
        .map_err(|source| FusionError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read_json(path: &Path) -> Result<SelectionResult, FusionError> {
        let text = std::fs::read_to_string(path).map_err(|source| FusionError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| FusionError::Json {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Rank candidates by Gram-spectrum variance, ascending, once per point
/// set; discard the `⌊S·fraction⌋` highest-variance candidates under each
/// ranking; keep the intersection of the two survivor sets.
///
/// Equal variances rank by candidate index, so on a tie at the cut
/// boundary the lower index survives. With `S` candidates the result has
/// at least `S − 2·⌊S·fraction⌋` members — nonempty whenever
/// `fraction ≤ 1/3` — and fractions above 0.5 are rejected outright.
pub fn select_candidates(
    diagnostics: &[SpectralDiagnostics],
    discard_fraction: f64,
) -> Result<SelectionResult, FusionError> {
    if diagnostics.is_empty() {
        return Err(FusionError::NoCandidates);
    }
    if !(0.0..=0.5).contains(&discard_fraction) {
        return Err(FusionError::BadDiscardFraction(discard_fraction));
    }
    for d in diagnostics {
        if !(d.var_rp.is_finite() && d.var_cp.is_finite()) {
            return Err(FusionError::BadInput(format!(
                "non-finite variance in diagnostics ({}, {})",
                d.var_rp, d.var_cp
            )));
        }
    }
    let total = diagnostics.len();
    let cut = (total as f64 * discard_fraction).floor() as usize;
    let keep = total - cut;
    let by_rp = survivors(diagnostics.iter().map(|d| d.var_rp), keep);
    let by_cp = survivors(diagnostics.iter().map(|d| d.var_cp), keep);
    let kept: Vec<usize> = by_rp.intersection(&by_cp).copied().collect();
    Ok(SelectionResult {
        total,
        kept,
        discard_fraction,
        diagnostics: diagnostics.to_vec(),
    })
}

fn survivors(vars: impl Iterator<Item = f64>, keep: usize) -> BTreeSet<usize> {
    let mut order: Vec<(f64, usize)> = vars.enumerate().map(|(i, v)| (v, i)).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    order.into_iter().take(keep).map(|(_, i)| i).collect()
}

/// Fuse member sheets by arithmetic mean of their per-target posteriors;
/// detection and predicted-target are recomputed from the fused row.
///
/// `kept` lists member indices into `sheets` (a set: duplicates are an
/// error, order is irrelevant — members are averaged in index order, so any
/// permutation of `kept` produces the identical sheet, bit for bit).
/// Fusing a single member reproduces its rows unchanged.
pub fn fuse_scores(
    sheets: &[ScoreSheet],
    kept: &[usize],
    source: ScoreSource,
) -> Result<ScoreSheet, FusionError> {
    fuse_inner(sheets, kept, source, false)
}

/// Ablation variant of [`fuse_scores`]: the per-target posteriors are fused
/// the same way, but the detection score is the mean of the members' scalar
/// detections instead of the maximum of the fused row. Isolates how much of
/// fusion's benefit survives when only one number per trial is shared.
pub fn fuse_detection_only(
    sheets: &[ScoreSheet],
    kept: &[usize],
    source: ScoreSource,
) -> Result<ScoreSheet, FusionError> {
    fuse_inner(sheets, kept, source, true)
}

fn fuse_inner(
    sheets: &[ScoreSheet],
    kept: &[usize],
    source: ScoreSource,
    detection_only: bool,
) -> Result<ScoreSheet, FusionError> {
    if kept.is_empty() {
        return Err(FusionError::EmptyKept);
    }
    let mut members = kept.to_vec();
    members.sort_unstable();
    for w in members.windows(2) {
        if w[0] == w[1] {
            return Err(FusionError::DuplicateMember { index: w[0] });
        }
    }
    if let Some(&index) = members.iter().find(|&&i| i >= sheets.len()) {
        return Err(FusionError::MemberOutOfRange {
            index,
            total: sheets.len(),
        });
    }

    let first = &sheets[members[0]];
    for &i in &members[1..] {
        compatible(first, &sheets[i])?;
    }
    let head = if members.iter().all(|&i| sheets[i].head == first.head) {
        first.head
    } else {
        None
    };

    let inv_n = 1.0 / members.len() as f64;
    let mut scores = Vec::with_capacity(first.scores.len());
    for t in 0..first.scores.len() {
        let mut target_scores = vec![0.0; first.n_targets];
        let mut detection_sum = 0.0;
        for &i in &members {
            let row = &sheets[i].scores[t];
            vecmath::add_scaled(&mut target_scores, &row.target_scores, 1.0);
            detection_sum += row.detection;
        }
        for v in &mut target_scores {
            *v *= inv_n;
        }
        let predicted = vecmath::argmax(&target_scores);
        let detection = if detection_only {
            detection_sum * inv_n
        } else {
            target_scores[predicted]
        };
        scores.push(TrialScore {
            trial_id: first.scores[t].trial_id.clone(),
            truth: first.scores[t].truth,
            target_scores,
            detection,
            predicted,
        });
    }
    Ok(ScoreSheet {
        source,
        head,
        n_targets: first.n_targets,
        scores,
    })
}

fn compatible(a: &ScoreSheet, b: &ScoreSheet) -> Result<(), FusionError> {
    if a.n_targets != b.n_targets {
        return Err(FusionError::SheetMismatch(format!(
            "target counts differ: {} vs {}",
            a.n_targets, b.n_targets
        )));
    }
    if a.scores.len() != b.scores.len() {
        return Err(FusionError::SheetMismatch(format!(
            "trial counts differ: {} vs {}",
            a.scores.len(),
            b.scores.len()
        )));
    }
    for (ra, rb) in a.scores.iter().zip(&b.scores) {
        if ra.trial_id != rb.trial_id {
            return Err(FusionError::SheetMismatch(format!(
                "trial ids diverge: {:?} vs {:?}",
                ra.trial_id, rb.trial_id
            )));
        }
        if ra.truth != rb.truth {
            return Err(FusionError::SheetMismatch(format!(
                "ground truth diverges on trial {:?}",
                ra.trial_id
            )));
        }
    }
    Ok(())
}

/// Spearman rank correlation with average ranks on ties: Pearson
/// correlation of the two rank vectors. Errors on length mismatch, fewer
/// than two pairs, non-finite values, or a constant input (its rank
/// variance is zero, so the correlation is undefined).
pub fn spearman_correlation(xs: &[f64], ys: &[f64]) -> Result<f64, FusionError> {
    if xs.len() != ys.len() {
        return Err(FusionError::BadInput(format!(
            "paired samples differ in length: {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(FusionError::BadInput(
            "need at least two paired observations".into(),
        ));
    }
    if let Some(v) = xs.iter().chain(ys).find(|v| !v.is_finite()) {
        return Err(FusionError::BadInput(format!("non-finite value {v}")));
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    pearson(&rx, &ry)
        .ok_or_else(|| FusionError::BadInput("constant input has no rank ordering".into()))
}

/// 1-based ranks; tied values all receive the mean of the positions they
/// occupy.
fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&i, &j| xs[i].total_cmp(&xs[j]));
    let mut ranks = vec![0.0; xs.len()];
    let mut k = 0;
    while k < order.len() {
        let mut m = k + 1;
        while m < order.len() && xs[order[m]] == xs[order[k]] {
            m += 1;
        }
        // Positions k+1..=m (1-based) hold this value; share their mean.
        let avg = (k + 1 + m) as f64 / 2.0;
        for &idx in &order[k..m] {
            ranks[idx] = avg;
        }
        k = m;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let dx = x - mx;
        let dy = y - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Human-readable selection summary: one line per candidate with both
/// variances and whether it survived, tab-separated decimal text.
pub fn write_diagnostics_table(
    diagnostics: &[SpectralDiagnostics],
    kept: &[usize],
    path: &Path,
) -> Result<(), FusionError> {
    let kept_set: BTreeSet<usize> = kept.iter().copied().collect();
    crate::ioutil::write_atomic(path, |w| {
        writeln!(w, "candidate\tvar_rp\tvar_cp\tkept")?;
        for (i, d) in diagnostics.iter().enumerate() {
            let flag = if kept_set.contains(&i) { 1 } else { 0 };
            writeln!(w, "{i}\t{}\t{}\t{flag}", d.var_rp, d.var_cp)?;
        }
        Ok(())
    })
    .map_err(|source| FusionError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{init_model, AdapterConfig};
    use crate::numeric::rng::SeededRng;
    use crate::scoring::HeadKind;
    use tempfile::tempdir;

    fn diag(var_rp: f64, var_cp: f64) -> SpectralDiagnostics {
        SpectralDiagnostics {
            eigenvalues_rp: vec![],
            eigenvalues_cp: vec![],
            var_rp,
            var_cp,
        }
    }

    fn sheet(source: ScoreSource, rows: &[(&str, Option<usize>, Vec<f64>)]) -> ScoreSheet {
        let scores = rows
            .iter()
            .map(|(id, truth, ts)| {
                let predicted = vecmath::argmax(ts);
                TrialScore {
                    trial_id: (*id).to_string(),
                    truth: *truth,
                    target_scores: ts.clone(),
                    detection: ts[predicted],
                    predicted,
                }
            })
            .collect();
        ScoreSheet {
            source,
            head: Some(HeadKind::Mean),
            n_targets: rows[0].2.len(),
            scores,
        }
    }

    #[test]
    fn orthonormal_rows_have_zero_spread() {
        let (eig, var) = spectral_variance(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(eig, vec![1.0, 1.0]);
        assert_eq!(var, 0.0);
    }

    #[test]
    fn duplicated_row_concentrates_the_spectrum() {
        // Identical rows: Gram [[1,1],[1,1]], eigenvalues {2, 0}, mean 1,
        // variance ((2-1)^2 + (0-1)^2)/2 = 1.
        let (eig, var) = spectral_variance(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert!((eig[0] - 2.0).abs() < 1e-12, "eigenvalues {eig:?}");
        assert!(eig[1].abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-12);
    }

    #[test]
    fn three_rows_in_two_dims_use_the_small_gram() {
        // {e1, e2, (e1+e2)/sqrt(2)}: spectrum of Z Z^T is {2, 1, 0}, so the
        // variance is ((2-1)^2 + 0 + (0-1)^2)/3 = 2/3. Three rows in two
        // dims also exercises the column-Gram shortcut and its zero pad.
        let s = (0.5f64).sqrt();
        let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![s, s]];
        let (eig, var) = spectral_variance(&rows).unwrap();
        assert_eq!(eig.len(), 3);
        assert!((eig[0] - 2.0).abs() < 1e-12);
        assert!((eig[1] - 1.0).abs() < 1e-12);
        assert_eq!(eig[2], 0.0);
        assert!((var - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn column_gram_shortcut_matches_the_direct_solve() {
        let mut rng = SeededRng::new(314);
        for _ in 0..8 {
            let rows: Vec<Vec<f64>> = (0..10).map(|_| rng.gaussian(4)).collect();
            let (eig, var) = spectral_variance(&rows).unwrap();

            let direct = SymmetricMatrix::gram(&rows).unwrap();
            let mut expect = symmetric_eigenvalues(&direct, DEFAULT_EIGEN_TOL).unwrap();
            expect.sort_by(|a, b| b.total_cmp(a));
            assert_eq!(eig.len(), expect.len());
            for (a, b) in eig.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-9, "shortcut {a} vs direct {b}");
            }
            let mean = expect.iter().sum::<f64>() / expect.len() as f64;
            let direct_var =
                expect.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / expect.len() as f64;
            assert!((var - direct_var).abs() < 1e-9);
        }
    }

    #[test]
    fn variance_tracks_row_scale_quartically() {
        let rows = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
        let doubled: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().map(|x| 2.0 * x).collect())
            .collect();
        let (_, base) = spectral_variance(&rows).unwrap();
        let (_, scaled) = spectral_variance(&doubled).unwrap();
        // Eigenvalues scale by 4, so their variance scales by 16.
        assert!((scaled - 16.0 * base).abs() < 1e-9 * scaled.max(1.0));
    }

    #[test]
    fn trace_identity_and_psd_hold_on_random_stacks() {
        let mut rng = SeededRng::new(2718);
        for trial in 0..20 {
            let n = 3 + trial % 12;
            let d = 2 + trial % 7;
            let rows: Vec<Vec<f64>> = (0..n).map(|_| rng.gaussian(d)).collect();
            let (eig, var) = spectral_variance(&rows).unwrap();
            assert!(var >= -1e-12, "variance {var} negative");
            for l in &eig {
                assert!(*l >= -1e-9, "gram eigenvalue {l} below -1e-9");
            }
            // Recompute the trace route independently of the library path.
            let count = n as f64;
            let mut tr = 0.0;
            let mut tr_sq = 0.0;
            for a in &rows {
                for b in &rows {
                    let g = vecmath::dot(a, b);
                    tr_sq += g * g;
                }
                tr += vecmath::dot(a, a);
            }
            let by_trace = tr_sq / count - (tr / count) * (tr / count);
            assert!(
                (var - by_trace).abs() <= 1e-9 * by_trace.abs().max(1.0),
                "eig route {var} vs trace route {by_trace}"
            );
        }
    }

    #[test]
    fn degenerate_row_stacks_are_rejected() {
        assert!(matches!(spectral_variance(&[]), Err(FusionError::NoRows)));
        assert!(matches!(
            spectral_variance(&[vec![1.0, 2.0], vec![1.0]]),
            Err(FusionError::RaggedRows { row: 1, .. })
        ));
        assert!(matches!(
            spectral_variance(&[vec![f64::NAN, 0.0]]),
            Err(FusionError::Eigen(_))
        ));
    }

    #[test]
    fn model_diagnostics_cover_every_point_row() {
        let config = AdapterConfig {
            input_dim: 6,
            hidden_dim: 8,
            output_dim: 4,
            labeled_classes: 5,
            adaptive_points: 3,
            init_scale: 0.4,
            delta_init: 1.0,
        };
        let model = init_model(&config, 11).unwrap();
        let d = diagnose_candidate(&model, false).unwrap();
        // One eigenvalue per reciprocal row, adaptive rows included.
        assert_eq!(d.eigenvalues_rp.len(), 8);
        assert_eq!(d.eigenvalues_cp.len(), 5);
        assert!(d.var_rp.is_finite() && d.var_rp >= 0.0);
        assert!(d.var_cp.is_finite() && d.var_cp >= 0.0);

        // Normalized diagnostics equal the raw diagnostics of the manually
        // unit-scaled rows, bit for bit (same code path, same arithmetic).
        let normalized = diagnose_candidate(&model, true).unwrap();
        let manual_rp =
            spectral_variance(&unit_rows(&model.reciprocal_points, "reciprocal-point").unwrap())
                .unwrap();
        assert_eq!(normalized.eigenvalues_rp, manual_rp.0);
        assert_eq!(normalized.var_rp, manual_rp.1);

        // A zero row cannot be unit-scaled.
        let mut broken = model;
        broken.center_points[2] = vec![0.0; 4];
        assert!(matches!(
            diagnose_candidate(&broken, true),
            Err(FusionError::ZeroNormRow {
                matrix: "center-point",
                row: 2
            })
        ));
        // Raw diagnostics tolerate the zero row fine.
        assert!(diagnose_candidate(&broken, false).is_ok());
    }

    #[test]
    fn selection_keeps_the_low_variance_intersection() {
        // Per-metric cut of one candidate: ranking by var_rp keeps {0, 2},
        // ranking by var_cp keeps {1, 0}; the intersection is {0}.
        let diags = vec![diag(0.1, 0.2), diag(0.5, 0.1), diag(0.2, 0.9)];
        let result = select_candidates(&diags, 1.0 / 3.0).unwrap();
        assert_eq!(result.total, 3);
        assert_eq!(result.kept, vec![0]);
        assert_eq!(result.discard_fraction, 1.0 / 3.0);
        assert_eq!(result.diagnostics.len(), 3);
    }

    #[test]
    fn equal_variances_cut_the_highest_index() {
        // All variances equal: the index tie-break ranks 0, 1, 2, so the
        // forced discard removes candidate 2 under both metrics.
        let diags = vec![diag(0.3, 0.3), diag(0.3, 0.3), diag(0.3, 0.3)];
        let result = select_candidates(&diags, 1.0 / 3.0).unwrap();
        assert_eq!(result.kept, vec![0, 1]);
    }

    #[test]
    fn selection_size_is_bounded_by_counting() {
        let mut rng = SeededRng::new(99);
        for _ in 0..10 {
            let diags: Vec<SpectralDiagnostics> = (0..30)
                .map(|_| diag(rng.next_f64(), rng.next_f64()))
                .collect();
            let result = select_candidates(&diags, DEFAULT_DISCARD_FRACTION).unwrap();
            // 10 cut per metric from 30: at least 30 - 2*10 survive.
            assert!(result.kept.len() >= 10, "kept {:?}", result.kept);
            assert!(result.kept.len() <= 20);
            assert!(result.kept.windows(2).all(|w| w[0] < w[1]));
            assert!(result.kept.iter().all(|&i| i < 30));
        }
    }

    #[test]
    fn zero_fraction_keeps_everyone() {
        let diags = vec![diag(0.4, 0.1), diag(0.2, 0.3)];
        let result = select_candidates(&diags, 0.0).unwrap();
        assert_eq!(result.kept, vec![0, 1]);
    }

    #[test]
    fn bad_fractions_and_empty_pools_are_rejected() {
        let diags = vec![diag(0.1, 0.1)];
        assert!(matches!(
            select_candidates(&diags, 0.6),
            Err(FusionError::BadDiscardFraction(_))
        ));
        assert!(matches!(
            select_candidates(&diags, -0.1),
            Err(FusionError::BadDiscardFraction(_))
        ));
        assert!(matches!(
            select_candidates(&diags, f64::NAN),
            Err(FusionError::BadDiscardFraction(_))
        ));
        assert!(matches!(
            select_candidates(&[], 0.3),
            Err(FusionError::NoCandidates)
        ));
        assert!(matches!(
            select_candidates(&[diag(f64::NAN, 0.1)], 0.3),
            Err(FusionError::BadInput(_))
        ));
    }

    #[test]
    fn fusing_averages_posteriors_and_rescores() {
        let a = sheet(
            ScoreSource::Candidate(0),
            &[
                ("s/000", Some(0), vec![0.8, 0.2]),
                ("u/000", None, vec![0.5, 0.5]),
            ],
        );
        let b = sheet(
            ScoreSource::Candidate(1),
            &[
                ("s/000", Some(0), vec![0.6, 0.4]),
                ("u/000", None, vec![0.1, 0.9]),
            ],
        );
        let fused = fuse_scores(&[a, b], &[0, 1], ScoreSource::FusedNaive).unwrap();
        assert_eq!(fused.source, ScoreSource::FusedNaive);
        assert_eq!(fused.head, Some(HeadKind::Mean));
        let row = &fused.scores[0];
        assert_eq!(row.target_scores[0], (0.8f64 + 0.6) / 2.0);
        assert_eq!(row.target_scores[1], (0.2f64 + 0.4) / 2.0);
        assert_eq!(row.predicted, 0);
        assert_eq!(row.detection, row.target_scores[0]);
        // Second trial flips toward target 1 after averaging.
        let row = &fused.scores[1];
        assert_eq!(row.predicted, 1);
        assert_eq!(row.detection, (0.5f64 + 0.9) / 2.0);
    }

    #[test]
    fn fusion_is_idempotent_and_permutation_invariant() {
        let mut rng = SeededRng::new(5);
        let sheets: Vec<ScoreSheet> = (0..3)
            .map(|i| {
                let rows: Vec<(String, Option<usize>, Vec<f64>)> = (0..6)
                    .map(|t| {
                        let raw = rng.gaussian(4);
                        let posterior = crate::vecmath::softmax(&raw);
                        let truth = if t % 2 == 0 { Some(t % 4) } else { None };
                        (format!("t/{t:03}"), truth, posterior)
                    })
                    .collect();
                let borrowed: Vec<(&str, Option<usize>, Vec<f64>)> = rows
                    .iter()
                    .map(|(id, truth, p)| (id.as_str(), *truth, p.clone()))
                    .collect();
                sheet(ScoreSource::Candidate(i), &borrowed)
            })
            .collect();

        let alone = fuse_scores(&sheets, &[1], ScoreSource::FusedSelected).unwrap();
        assert_eq!(alone.scores, sheets[1].scores);

        let forward = fuse_scores(&sheets, &[0, 1, 2], ScoreSource::FusedNaive).unwrap();
        let shuffled = fuse_scores(&sheets, &[2, 0, 1], ScoreSource::FusedNaive).unwrap();
        assert_eq!(forward, shuffled);
    }

    #[test]
    fn fused_posteriors_still_sum_to_one() {
        let mut rng = SeededRng::new(17);
        let sheets: Vec<ScoreSheet> = (0..4)
            .map(|i| {
                let rows: Vec<(String, Option<usize>, Vec<f64>)> = (0..5)
                    .map(|t| {
                        let raw = rng.gaussian(3);
                        (format!("t/{t:03}"), Some(0), crate::vecmath::softmax(&raw))
                    })
                    .collect();
                let borrowed: Vec<(&str, Option<usize>, Vec<f64>)> = rows
                    .iter()
                    .map(|(id, truth, p)| (id.as_str(), *truth, p.clone()))
                    .collect();
                sheet(ScoreSource::Candidate(i), &borrowed)
            })
            .collect();
        let fused = fuse_scores(&sheets, &[0, 1, 2, 3], ScoreSource::FusedNaive).unwrap();
        for row in &fused.scores {
            let total: f64 = row.target_scores.iter().sum();
            assert!((total - 1.0).abs() < 1e-12, "posterior sum {total}");
        }
    }

    #[test]
    fn detection_only_variant_averages_the_scalars() {
        let a = sheet(ScoreSource::Candidate(0), &[("s/000", Some(0), vec![0.9, 0.1])]);
        let b = sheet(ScoreSource::Candidate(1), &[("s/000", Some(0), vec![0.2, 0.8])]);
        let fused = fuse_detection_only(&[a, b], &[0, 1], ScoreSource::FusedNaive).unwrap();
        let row = &fused.scores[0];
        // Posterior matrix fuses exactly as in full fusion...
        assert_eq!(row.target_scores, vec![(0.9f64 + 0.2) / 2.0, (0.1f64 + 0.8) / 2.0]);
        assert_eq!(row.predicted, 0);
        // ...but detection is the mean of the members' maxima, not the
        // maximum of the means.
        assert_eq!(row.detection, (0.9f64 + 0.8) / 2.0);
        assert!(row.detection > row.target_scores[row.predicted]);
    }

    #[test]
    fn incompatible_sheets_are_refused() {
        let a = sheet(ScoreSource::Candidate(0), &[("s/000", Some(0), vec![0.9, 0.1])]);
        let b = sheet(ScoreSource::Candidate(1), &[("x/000", Some(0), vec![0.2, 0.8])]);
        assert!(matches!(
            fuse_scores(&[a.clone(), b], &[0, 1], ScoreSource::FusedNaive),
            Err(FusionError::SheetMismatch(_))
        ));
        let c = sheet(ScoreSource::Candidate(1), &[("s/000", None, vec![0.2, 0.8])]);
        assert!(matches!(
            fuse_scores(&[a.clone(), c], &[0, 1], ScoreSource::FusedNaive),
            Err(FusionError::SheetMismatch(_))
        ));
        let d = sheet(
            ScoreSource::Candidate(1),
            &[
                ("s/000", Some(0), vec![0.2, 0.8]),
                ("s/001", Some(0), vec![0.2, 0.8]),
            ],
        );
        assert!(matches!(
            fuse_scores(&[a.clone(), d], &[0, 1], ScoreSource::FusedNaive),
            Err(FusionError::SheetMismatch(_))
        ));
        assert!(matches!(
            fuse_scores(&[a.clone()], &[], ScoreSource::FusedNaive),
            Err(FusionError::EmptyKept)
        ));
        assert!(matches!(
            fuse_scores(&[a.clone()], &[3], ScoreSource::FusedNaive),
            Err(FusionError::MemberOutOfRange { index: 3, total: 1 })
        ));
        assert!(matches!(
            fuse_scores(&[a], &[0, 0], ScoreSource::FusedNaive),
            Err(FusionError::DuplicateMember { index: 0 })
        ));
    }

    #[test]
    fn spearman_matches_hand_computations() {
        // Strictly increasing pair: perfect rank agreement.
        let r = spearman_correlation(&[1.0, 2.0, 5.0], &[10.0, 20.0, 21.0]).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
        // Reversed: perfect disagreement.
        let r = spearman_correlation(&[1.0, 2.0, 5.0], &[3.0, 2.0, 1.0]).unwrap();
        assert!((r + 1.0).abs() < 1e-12);
        // Two swapped neighbors: 1 - 6*4/(5*24) = 0.8.
        let r = spearman_correlation(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 1.0, 4.0, 3.0, 5.0])
            .unwrap();
        assert!((r - 0.8).abs() < 1e-12);
        // Ties share averaged ranks on both sides: still perfect agreement.
        let r = spearman_correlation(&[1.0, 2.0, 2.0, 3.0], &[10.0, 20.0, 20.0, 40.0]).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn spearman_rejects_degenerate_inputs() {
        assert!(spearman_correlation(&[1.0], &[2.0]).is_err());
        assert!(spearman_correlation(&[1.0, 2.0], &[2.0]).is_err());
        assert!(spearman_correlation(&[1.0, f64::NAN], &[2.0, 3.0]).is_err());
        assert!(spearman_correlation(&[1.0, 1.0], &[2.0, 3.0]).is_err());
    }

    #[test]
    fn average_ranks_handle_tied_runs() {
        assert_eq!(average_ranks(&[5.0, 1.0, 3.0]), vec![3.0, 1.0, 2.0]);
        // Values 2.0 occupy positions 2 and 3: both rank 2.5.
        assert_eq!(
            average_ranks(&[1.0, 2.0, 2.0, 4.0]),
            vec![1.0, 2.5, 2.5, 4.0]
        );
        assert_eq!(average_ranks(&[7.0, 7.0]), vec![1.5, 1.5]);
    }

    #[test]
    fn diagnostics_table_lists_every_candidate() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("diagnostics.tsv");
        let diags = vec![diag(0.25, 0.5), diag(1.5, 0.125)];
        write_diagnostics_table(&diags, &[1], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "candidate\tvar_rp\tvar_cp\tkept");
        assert_eq!(lines[1], "0\t0.25\t0.5\t0");
        assert_eq!(lines[2], "1\t1.5\t0.125\t1");
        assert_eq!(lines.len(), 3);
    }

    #[test]
    fn selection_round_trips_through_json() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("selection.json");
        let diags = vec![
            SpectralDiagnostics {
                eigenvalues_rp: vec![2.0, 1.0, 0.0],
                eigenvalues_cp: vec![1.5, 0.5],
                var_rp: 2.0 / 3.0,
                var_cp: 0.25,
            },
            diag(0.9, 0.8),
        ];
        let result = select_candidates(&diags, 0.0).unwrap();
        result.write_json(&path).unwrap();
        let back = SelectionResult::read_json(&path).unwrap();
        assert_eq!(back, result);
        assert!(std::fs::read_to_string(&path).unwrap().ends_with('\n'));
    }
}
