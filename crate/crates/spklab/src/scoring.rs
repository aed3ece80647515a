//! Turning models into open-set trial scores.
//!
//! A *trial* is one test embedding asked against a split's enrolled targets:
//! "which target is this, and is it any of them at all?" Known trials carry
//! the true target index; unknown trials (other splits' speakers and the
//! held-out unknown-test speakers) carry none.
//!
//! A *score sheet* holds, per trial, a posterior over the enrolled targets,
//! a detection score (the maximum posterior — low means "none of them"),
//! and the predicted target. Adapter sheets come in three heads:
//!
//! * `rp` — softmax over the negated reciprocal-point logits of **all**
//!   rows (synthetic classes and adaptive rows stay in the denominator,
//!   which is what lets them absorb probability mass from impostors),
//!   truncated to the enrolled targets;
//! * `cp` — softmax over the length-normalized center-point logits,
//!   truncated the same way;
//! * `mean` — the entrywise mean of the two, the default for reports.
//!
//! The direct-enrollment baseline scores trials by cosine similarity to
//! per-target centroids of the enrollment vectors. Those scores are
//! similarities, not posteriors (they need not sum to anything); every
//! metric downstream consumes scores rank-wise, so the two kinds of sheet
//! are directly comparable.

use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::AdapterModel;
use crate::corpus::{EmbeddingRecord, Role, SplitPlan};
use crate::objectives::DEGENERATE_LOGIT_EPS;
use crate::vecmath;

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error("i/o on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    BadScoreFile {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("speaker {speaker} has no enrollment records")]
    EmptyEnrollment { speaker: String },
    #[error("speaker {speaker}'s enrollment centroid has zero norm; cannot normalize")]
    ZeroNormCentroid { speaker: String },
    #[error("embedding dimension {found} does not match the expected {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("unknown scoring head {0:?} (expected rp, cp, or mean)")]
    BadHead(String),
    #[error("unknown score source {0:?}")]
    BadSource(String),
}

/// Which posterior an adapter sheet reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    Rp,
    Cp,
    Mean,
}

impl HeadKind {
    pub const ALL: [HeadKind; 3] = [HeadKind::Rp, HeadKind::Cp, HeadKind::Mean];

    pub fn as_str(&self) -> &'static str {
        match self {
            HeadKind::Rp => "rp",
            HeadKind::Cp => "cp",
            HeadKind::Mean => "mean",
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HeadKind {
    type Err = ScoringError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rp" => Ok(HeadKind::Rp),
            "cp" => Ok(HeadKind::Cp),
            "mean" => Ok(HeadKind::Mean),
            other => Err(ScoringError::BadHead(other.to_string())),
        }
    }
}

/// What produced a score sheet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreSource {
    /// Direct enrollment: cosine to enrollment-only centroids.
    Baseline,
    /// Direct enrollment with augmentation vectors folded into the centroids.
    BaselineAug,
    /// A single trained adapter, by pool index.
    Candidate(usize),
    /// Mean fusion over the whole candidate pool.
    FusedNaive,
    /// Mean fusion over the spectrally selected members.
    FusedSelected,
}

impl fmt::Display for ScoreSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScoreSource::Baseline => f.write_str("baseline"),
            ScoreSource::BaselineAug => f.write_str("baseline-aug"),
            ScoreSource::Candidate(i) => write!(f, "candidate-{i:02}"),
            ScoreSource::FusedNaive => f.write_str("fused-naive"),
            ScoreSource::FusedSelected => f.write_str("fused-selected"),
        }
    }
}

impl FromStr for ScoreSource {
    type Err = ScoringError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(ScoreSource::Baseline),
            "baseline-aug" => Ok(ScoreSource::BaselineAug),
            "fused-naive" => Ok(ScoreSource::FusedNaive),
            "fused-selected" => Ok(ScoreSource::FusedSelected),
            other => match other.strip_prefix("candidate-") {
                Some(idx) => idx
                    .parse::<usize>()
                    .map(ScoreSource::Candidate)
                    .map_err(|_| ScoringError::BadSource(other.to_string())),
                None => Err(ScoringError::BadSource(other.to_string())),
            },
        }
    }
}

/// One test embedding with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    /// `speaker_id/occurrence`, unique and stable across runs.
    pub trial_id: String,
    pub speaker_id: String,
    pub vector: Vec<f64>,
    /// Index into the split's target list, or `None` for unknown speakers.
    pub truth: Option<usize>,
}

/// Scores for one trial under one source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialScore {
    pub trial_id: String,
    /// Copied from the trial so a sheet is self-contained for evaluation.
    pub truth: Option<usize>,
    /// Per-enrolled-target score (posterior or similarity).
    pub target_scores: Vec<f64>,
    /// `max(target_scores)`: the "this is one of my targets" confidence.
    pub detection: f64,
    /// `argmax(target_scores)`, lowest index on exact ties.
    pub predicted: usize,
}

/// All trial scores from one source over one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSheet {
    pub source: ScoreSource,
    /// `None` for baseline sheets (they have a single similarity rule).
    pub head: Option<HeadKind>,
    pub n_targets: usize,
    pub scores: Vec<TrialScore>,
}

/// Collect a split's trials: test records of its targets (known, truth =
/// the target's position in the plan) and of its unknowns (truth = `None`).
/// Trials are ordered by id — `speaker_id/occurrence` with the occurrence
/// counted per speaker in corpus order — so every scoring path sees the
/// same sequence.
pub fn build_trials(records: &[EmbeddingRecord], plan: &SplitPlan) -> Vec<Trial> {
    let target_index = |id: &str| plan.target_ids.iter().position(|t| t == id);
    let is_unknown = |id: &str| plan.unknown_ids.iter().any(|u| u == id);
    let mut occurrence: std::collections::BTreeMap<&str, usize> = std::collections::BTreeMap::new();
    let mut trials = Vec::new();
    for rec in records {
        if !matches!(rec.role, Role::TargetTest | Role::UnknownTest) {
            continue;
        }
        let truth = match target_index(&rec.speaker_id) {
            Some(idx) => Some(idx),
            None if is_unknown(&rec.speaker_id) => None,
            None => continue, // not part of this split
        };
        let occ = occurrence.entry(rec.speaker_id.as_str()).or_insert(0);
        trials.push(Trial {
            trial_id: format!("{}/{:03}", rec.speaker_id, occ),
            speaker_id: rec.speaker_id.clone(),
            vector: rec.vector.clone(),
            truth,
        });
        *occ += 1;
    }
    trials.sort_by(|a, b| a.trial_id.cmp(&b.trial_id));
    trials
}

/// Softmax over `logits`, truncated to the first `n_targets` entries.
fn truncated_posterior(logits: &[f64], n_targets: usize, out: &mut Vec<f64>) {
    let mut full = Vec::with_capacity(logits.len());
    vecmath::softmax_into(logits, &mut full);
    out.clear();
    out.extend_from_slice(&full[..n_targets]);
}

/// Score every trial with one adapter under one head.
///
/// `n_targets` is the number of enrolled targets (the first `n_targets`
/// labeled classes); synthetic classes and adaptive rows contribute softmax
/// mass but are never reported.
pub fn score_trials(
    model: &AdapterModel,
    trials: &[Trial],
    n_targets: usize,
    head: HeadKind,
    source: ScoreSource,
) -> Result<ScoreSheet, ScoringError> {
    assert!(
        n_targets <= model.config.labeled_classes,
        "n_targets {n_targets} exceeds the model's {} labeled classes",
        model.config.labeled_classes
    );
    let mut scores = Vec::with_capacity(trials.len());
    let mut rp_post = Vec::new();
    let mut cp_post = Vec::new();
    for trial in trials {
        if trial.vector.len() != model.config.input_dim {
            return Err(ScoringError::DimensionMismatch {
                expected: model.config.input_dim,
                found: trial.vector.len(),
            });
        }
        let out = model.forward(&trial.vector);
        let target_scores: Vec<f64> = match head {
            HeadKind::Rp => {
                truncated_posterior(&out.rp_logits, n_targets, &mut rp_post);
                rp_post.clone()
            }
            HeadKind::Cp => {
                cp_posterior(&out.cp_logits, n_targets, &mut cp_post);
                cp_post.clone()
            }
            HeadKind::Mean => {
                truncated_posterior(&out.rp_logits, n_targets, &mut rp_post);
                cp_posterior(&out.cp_logits, n_targets, &mut cp_post);
                rp_post
                    .iter()
                    .zip(&cp_post)
                    .map(|(a, b)| 0.5 * (a + b))
                    .collect()
            }
        };
        scores.push(make_score(trial, target_scores));
    }
    Ok(ScoreSheet {
        source,
        head: Some(head),
        n_targets,
        scores,
    })
}

/// Center-point posterior: softmax over `z / ‖z‖`, truncated. A degenerate
/// (near-zero-norm) logit vector has no direction to normalize, so it scores
/// as the uniform posterior over the labeled classes.
fn cp_posterior(cp_logits: &[f64], n_targets: usize, out: &mut Vec<f64>) {
    let norm = vecmath::l2_norm(cp_logits);
    out.clear();
    if norm < DEGENERATE_LOGIT_EPS {
        out.extend(std::iter::repeat(1.0 / cp_logits.len() as f64).take(n_targets));
        return;
    }
    let normalized: Vec<f64> = cp_logits.iter().map(|z| z / norm).collect();
    truncated_posterior(&normalized, n_targets, out);
}

fn make_score(trial: &Trial, target_scores: Vec<f64>) -> TrialScore {
    let predicted = vecmath::argmax(&target_scores);
    let detection = target_scores[predicted];
    TrialScore {
        trial_id: trial.trial_id.clone(),
        truth: trial.truth,
        target_scores,
        detection,
        predicted,
    }
}

/// Per-target enrollment centroids: mean of each target's enrollment
/// vectors (plus its augmentation vectors when `include_aug`), normalized
/// to unit length. Order follows the plan's target list.
pub fn enroll_centroids(
    records: &[EmbeddingRecord],
    plan: &SplitPlan,
    include_aug: bool,
) -> Result<Vec<Vec<f64>>, ScoringError> {
    let mut centroids = Vec::with_capacity(plan.target_ids.len());
    for id in &plan.target_ids {
        let mut sum: Option<Vec<f64>> = None;
        let mut count = 0usize;
        for rec in records {
            let wanted = rec.speaker_id == *id
                && (rec.role == Role::TargetEnroll || (include_aug && rec.role == Role::TargetAug));
            if !wanted {
                continue;
            }
            match &mut sum {
                None => sum = Some(rec.vector.clone()),
                Some(s) => {
                    if rec.vector.len() != s.len() {
                        return Err(ScoringError::DimensionMismatch {
                            expected: s.len(),
                            found: rec.vector.len(),
                        });
                    }
                    vecmath::add_scaled(s, &rec.vector, 1.0);
                }
            }
            count += 1;
        }
        let Some(mut centroid) = sum else {
            return Err(ScoringError::EmptyEnrollment {
                speaker: id.clone(),
            });
        };
        for v in centroid.iter_mut() {
            *v /= count as f64;
        }
        let norm = vecmath::l2_norm(&centroid);
        if norm < 1e-12 {
            return Err(ScoringError::ZeroNormCentroid {
                speaker: id.clone(),
            });
        }
        for v in centroid.iter_mut() {
            *v /= norm;
        }
        centroids.push(centroid);
    }
    Ok(centroids)
}

/// Score trials by cosine similarity to the enrollment centroids.
/// Scores live in [-1, 1] and do not sum to anything — they are
/// similarities, consumed rank-wise by the metrics.
pub fn baseline_score_trials(
    centroids: &[Vec<f64>],
    trials: &[Trial],
    source: ScoreSource,
) -> Result<ScoreSheet, ScoringError> {
    let mut scores = Vec::with_capacity(trials.len());
    for trial in trials {
        let norm = vecmath::l2_norm(&trial.vector);
        let target_scores: Vec<f64> = centroids
            .iter()
            .map(|c| {
                if c.len() != trial.vector.len() {
                    return f64::NAN; // caught below
                }
                if norm < 1e-12 {
                    // A zero test vector is equally far from everything.
                    0.0
                } else {
                    // Centroids are unit-length already.
                    vecmath::dot(&trial.vector, c) / norm
                }
            })
            .collect();
        if target_scores.iter().any(|s| s.is_nan()) {
            return Err(ScoringError::DimensionMismatch {
                expected: centroids.first().map_or(0, Vec::len),
                found: trial.vector.len(),
            });
        }
        scores.push(make_score(trial, target_scores));
    }
    Ok(ScoreSheet {
        source,
        head: None,
        n_targets: centroids.len(),
        scores,
    })
}

impl ScoreSheet {
    /// Detection scores of the known trials (those with a true target).
    pub fn known_detection(&self) -> Vec<f64> {
        self.scores
            .iter()
            .filter(|s| s.truth.is_some())
            .map(|s| s.detection)
            .collect()
    }

    /// Detection scores of the unknown trials.
    pub fn unknown_detection(&self) -> Vec<f64> {
        self.scores
            .iter()
            .filter(|s| s.truth.is_none())
            .map(|s| s.detection)
            .collect()
    }

    /// Write as versioned TSV. Floats use shortest round-trip formatting,
    /// so write -> read -> write reproduces the file byte for byte.
    ///
    /// ```text
    /// spklab-scores v1
    /// source <source> head <head|-> targets <n>
    /// <trial_id>\t<truth|-> \t<predicted>\t<detection>\t<s0,s1,...>
    /// ```
    pub fn write(&self, path: &Path) -> Result<(), ScoringError> {
        crate::ioutil::write_atomic(path, |w| {
            writeln!(w, "spklab-scores v1")?;
            writeln!(
                w,
                "source {} head {} targets {}",
                self.source,
                self.head.map_or("-", |h| h.as_str()),
                self.n_targets
            )?;
            let mut line = String::new();
            for s in &self.scores {
                line.clear();
                line.push_str(&s.trial_id);
                line.push('\t');
                match s.truth {
                    Some(t) => line.push_str(&t.to_string()),
                    None => line.push('-'),
                }
                use std::fmt::Write as _;
                write!(line, "\t{}\t{}", s.predicted, s.detection).expect("write to string");
                line.push('\t');
                for (i, v) in s.target_scores.iter().enumerate() {
                    if i > 0 {
                        line.push(',');
                    }
                    write!(line, "{v}").expect("write to string");
                }
                line.push('\n');
                w.write_all(line.as_bytes())?;
            }
            Ok(())
        })
        .map_err(|source| ScoringError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Read a sheet written by [`ScoreSheet::write`], validating structure,
    /// finiteness, and the internal consistency of detection/predicted.
    pub fn read(path: &Path) -> Result<ScoreSheet, ScoringError> {
        let p = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| ScoringError::Io {
            path: p.clone(),
            source,
        })?;
        let bad = |line: usize, reason: String| ScoringError::BadScoreFile {
            path: p.clone(),
            line,
            reason,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "spklab-scores v1")) => {}
            Some((i, other)) => return Err(bad(i + 1, format!("unsupported header {other:?}"))),
            None => return Err(bad(1, "empty file".into())),
        }
        let (idx, meta) = lines
            .next()
            .ok_or_else(|| bad(2, "missing metadata line".into()))?;
        let parts: Vec<&str> = meta.split_ascii_whitespace().collect();
        if parts.len() != 6 || parts[0] != "source" || parts[2] != "head" || parts[4] != "targets" {
            return Err(bad(
                idx + 1,
                "expected `source <s> head <h> targets <n>`".into(),
            ));
        }
        let source: ScoreSource = parts[1].parse()?;
        let head = match parts[3] {
            "-" => None,
            h => Some(h.parse::<HeadKind>()?),
        };
        let n_targets: usize = parts[5]
            .parse()
            .map_err(|e| bad(idx + 1, format!("bad target count: {e}")))?;

        let mut scores = Vec::new();
        for (i, line) in lines {
            let line_no = i + 1;
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 5 {
                return Err(bad(line_no, format!("expected 5 columns, got {}", cols.len())));
            }
            let truth = match cols[1] {
                "-" => None,
                t => Some(t.parse::<usize>().map_err(|e| {
                    bad(line_no, format!("bad truth index {t:?}: {e}"))
                })?),
            };
            let predicted: usize = cols[2]
                .parse()
                .map_err(|e| bad(line_no, format!("bad predicted index: {e}")))?;
            let detection: f64 = cols[3]
                .parse()
                .map_err(|e| bad(line_no, format!("bad detection score: {e}")))?;
            let mut target_scores = Vec::with_capacity(n_targets);
            for piece in cols[4].split(',') {
                let v: f64 = piece
                    .parse()
                    .map_err(|e| bad(line_no, format!("bad score {piece:?}: {e}")))?;
                if !v.is_finite() {
                    return Err(bad(line_no, format!("non-finite score {v}")));
                }
                target_scores.push(v);
            }
            if target_scores.len() != n_targets {
                return Err(bad(
                    line_no,
                    format!(
                        "expected {n_targets} target scores, got {}",
                        target_scores.len()
                    ),
                ));
            }
            // detection usually equals target_scores[predicted], but
            // detection-only fused sheets are allowed to break that tie,
            // so only the index ranges are validated here.
            if predicted >= n_targets {
                return Err(bad(
                    line_no,
                    format!("predicted index {predicted} out of range"),
                ));
            }
            if !detection.is_finite() {
                return Err(bad(line_no, format!("non-finite detection {detection}")));
            }
            if let Some(t) = truth {
                if t >= n_targets {
                    return Err(bad(line_no, format!("truth index {t} out of range")));
                }
            }
            scores.push(TrialScore {
                trial_id: cols[0].to_string(),
                truth,
                target_scores,
                detection,
                predicted,
            });
        }
        Ok(ScoreSheet {
            source,
            head,
            n_targets,
            scores,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{init_model, AdapterConfig};
    use crate::corpus::{generate_corpus, make_splits, CorpusConfig};
    use crate::numeric::rng::SeededRng;
    use approx::assert_relative_eq;
    use tempfile::tempdir;

    fn corpus_and_plan() -> (Vec<EmbeddingRecord>, SplitPlan) {
        let cfg = CorpusConfig {
            dim: 8,
            n_target_speakers: 4,
            n_unknown_test_speakers: 2,
            n_synthetic_unknown_speakers: 2,
            enroll_per_target: 5,
            test_per_speaker: 3,
            aug_per_target: 2,
            cluster_separation: 3.0,
            within_noise: 0.5,
            aug_noise: None,
            synthetic_per_speaker: None,
            seed: 41,
        };
        let records = generate_corpus(&cfg).unwrap();
        let plans = make_splits(&records, 2, 2, 7).unwrap();
        (records, plans.into_iter().next().unwrap())
    }

    fn test_model(labeled: usize, adaptive: usize, seed: u64) -> AdapterModel {
        let cfg = AdapterConfig {
            input_dim: 8,
            hidden_dim: 12,
            output_dim: 6,
            labeled_classes: labeled,
            adaptive_points: adaptive,
            init_scale: 0.6,
            delta_init: 1.0,
        };
        init_model(&cfg, seed).unwrap()
    }

    #[test]
    fn trials_cover_targets_and_unknowns_in_sorted_order() {
        let (records, plan) = corpus_and_plan();
        let trials = build_trials(&records, &plan);
        // 2 targets + 2 other-split targets + 2 unknown speakers, 3 tests each.
        assert_eq!(trials.len(), 6 * 3);
        let known = trials.iter().filter(|t| t.truth.is_some()).count();
        assert_eq!(known, 2 * 3);
        for t in &trials {
            if let Some(idx) = t.truth {
                assert_eq!(plan.target_ids[idx], t.speaker_id);
            } else {
                assert!(plan.unknown_ids.contains(&t.speaker_id));
            }
        }
        let mut ids: Vec<&String> = trials.iter().map(|t| &t.trial_id).collect();
        ids.dedup();
        assert_eq!(ids.len(), trials.len(), "trial ids must be unique");
        let mut sorted = trials.clone();
        sorted.sort_by(|a, b| a.trial_id.cmp(&b.trial_id));
        assert_eq!(sorted, trials, "trials arrive sorted by id");
    }

    #[test]
    fn posteriors_are_probabilities() {
        let (records, plan) = corpus_and_plan();
        let trials = build_trials(&records, &plan);
        // 2 targets + 2 synthetic classes + 3 anchors in the denominators.
        let model = test_model(4, 3, 9);
        for head in HeadKind::ALL {
            let sheet =
                score_trials(&model, &trials, 2, head, ScoreSource::Candidate(0)).unwrap();
            assert_eq!(sheet.scores.len(), trials.len());
            for s in &sheet.scores {
                assert_eq!(s.target_scores.len(), 2);
                for v in &s.target_scores {
                    assert!((0.0..=1.0).contains(v), "{head}: posterior {v} out of range");
                }
                // Truncation can only lose mass.
                let sum: f64 = s.target_scores.iter().sum();
                assert!(sum <= 1.0 + 1e-12, "{head}: truncated sum {sum} exceeds 1");
                assert_relative_eq!(s.detection, s.target_scores[s.predicted]);
            }
        }
    }

    #[test]
    fn full_softmax_sums_to_one_without_extra_classes() {
        // With no synthetic classes and no anchors, nothing is truncated
        // away and each posterior sums to exactly 1.
        let (records, plan) = corpus_and_plan();
        let trials = build_trials(&records, &plan);
        let model = test_model(2, 0, 13);
        for head in [HeadKind::Rp, HeadKind::Cp] {
            let sheet =
                score_trials(&model, &trials, 2, head, ScoreSource::Candidate(1)).unwrap();
            for s in &sheet.scores {
                let sum: f64 = s.target_scores.iter().sum();
                assert_relative_eq!(sum, 1.0, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn mean_head_averages_the_other_two() {
        let (records, plan) = corpus_and_plan();
        let trials = build_trials(&records, &plan);
        let model = test_model(4, 2, 21);
        let rp = score_trials(&model, &trials, 2, HeadKind::Rp, ScoreSource::Candidate(0)).unwrap();
        let cp = score_trials(&model, &trials, 2, HeadKind::Cp, ScoreSource::Candidate(0)).unwrap();
        let mean =
            score_trials(&model, &trials, 2, HeadKind::Mean, ScoreSource::Candidate(0)).unwrap();
        for ((r, c), m) in rp.scores.iter().zip(&cp.scores).zip(&mean.scores) {
            for j in 0..2 {
                assert_relative_eq!(
                    m.target_scores[j],
                    0.5 * (r.target_scores[j] + c.target_scores[j]),
                    max_relative = 1e-15
                );
            }
        }
    }

    #[test]
    fn rp_and_cp_agree_on_ranking_when_points_coincide() {
        // With R = -C (and no extra rows), rp logits equal cp logits, so
        // both heads order the targets identically even though the cp head
        // normalizes before its softmax (normalization is monotone).
        let (records, plan) = corpus_and_plan();
        let trials = build_trials(&records, &plan);
        let mut model = test_model(2, 0, 33);
        model.reciprocal_points = model
            .center_points
            .iter()
            .map(|c| c.iter().map(|v| -v).collect())
            .collect();
        let rp = score_trials(&model, &trials, 2, HeadKind::Rp, ScoreSource::Candidate(0)).unwrap();
        let cp = score_trials(&model, &trials, 2, HeadKind::Cp, ScoreSource::Candidate(0)).unwrap();
        for (r, c) in rp.scores.iter().zip(&cp.scores) {
            assert_eq!(r.predicted, c.predicted);
        }
    }

    #[test]
    fn extra_reciprocal_rows_only_drain_detection() {
        // Appending anchor rows enlarges the rp softmax denominator; no
        // trial's detection score can rise.
        let (records, plan) = corpus_and_plan();
        let trials = build_trials(&records, &plan);
        let base = test_model(4, 0, 55);
        let mut widened = base.clone();
        let mut rng = SeededRng::new(999);
        for _ in 0..6 {
            widened.reciprocal_points.push(rng.gaussian(6));
        }
        widened.config.adaptive_points = 6;
        let before =
            score_trials(&base, &trials, 2, HeadKind::Rp, ScoreSource::Candidate(0)).unwrap();
        let after =
            score_trials(&widened, &trials, 2, HeadKind::Rp, ScoreSource::Candidate(0)).unwrap();
        for (b, a) in before.scores.iter().zip(&after.scores) {
            assert!(
                a.detection <= b.detection + 1e-15,
                "detection rose from {} to {}",
                b.detection,
                a.detection
            );
        }
    }

    #[test]
    fn degenerate_center_logits_score_uniform_and_tie_to_lowest() {
        let (records, plan) = corpus_and_plan();
        let trials = build_trials(&records, &plan);
        let mut model = test_model(3, 0, 2);
        for row in model.center_points.iter_mut() {
            row.iter_mut().for_each(|v| *v = 0.0);
        }
        let sheet =
            score_trials(&model, &trials, 2, HeadKind::Cp, ScoreSource::Candidate(0)).unwrap();
        for s in &sheet.scores {
            // Uniform over the 3 labeled classes, truncated to 2 targets.
            assert_relative_eq!(s.target_scores[0], 1.0 / 3.0);
            assert_relative_eq!(s.target_scores[1], 1.0 / 3.0);
            assert_eq!(s.predicted, 0, "exact ties resolve to the lowest index");
        }
    }

    #[test]
    fn centroids_are_unit_length_means() {
        let (records, plan) = corpus_and_plan();
        let plain = enroll_centroids(&records, &plan, false).unwrap();
        let with_aug = enroll_centroids(&records, &plan, true).unwrap();
        assert_eq!(plain.len(), 2);
        for c in plain.iter().chain(&with_aug) {
            assert_relative_eq!(crate::vecmath::l2_norm(c), 1.0, max_relative = 1e-12);
        }
        assert_ne!(plain, with_aug, "augmentation vectors move the centroids");

        // Recompute the first centroid by hand.
        let id = &plan.target_ids[0];
        let vecs: Vec<&Vec<f64>> = records
            .iter()
            .filter(|r| r.speaker_id == *id && r.role == Role::TargetEnroll)
            .map(|r| &r.vector)
            .collect();
        let mut mean = vec![0.0; 8];
        for v in &vecs {
            crate::vecmath::add_scaled(&mut mean, v, 1.0 / vecs.len() as f64);
        }
        let norm = crate::vecmath::l2_norm(&mean);
        for (a, b) in plain[0].iter().zip(&mean) {
            assert_relative_eq!(*a, b / norm, max_relative = 1e-12);
        }
    }

    #[test]
    fn missing_enrollments_are_an_error() {
        let (records, mut plan) = corpus_and_plan();
        plan.target_ids.push("ghost_999".to_string());
        match enroll_centroids(&records, &plan, false) {
            Err(ScoringError::EmptyEnrollment { speaker }) => assert_eq!(speaker, "ghost_999"),
            other => panic!("expected EmptyEnrollment, got {other:?}"),
        }
    }

    #[test]
    fn baseline_scores_are_cosines() {
        let (records, plan) = corpus_and_plan();
        let trials = build_trials(&records, &plan);
        let centroids = enroll_centroids(&records, &plan, false).unwrap();
        let sheet = baseline_score_trials(&centroids, &trials, ScoreSource::Baseline).unwrap();
        assert_eq!(sheet.head, None);
        for (s, t) in sheet.scores.iter().zip(&trials) {
            for (j, v) in s.target_scores.iter().enumerate() {
                assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(v));
                let expect = crate::vecmath::dot(&t.vector, &centroids[j])
                    / crate::vecmath::l2_norm(&t.vector);
                assert_relative_eq!(*v, expect, max_relative = 1e-12);
            }
        }
        // On this easy corpus the true target should usually win.
        let correct = sheet
            .scores
            .iter()
            .filter(|s| s.truth == Some(s.predicted))
            .count();
        let known = sheet.scores.iter().filter(|s| s.truth.is_some()).count();
        assert!(correct * 2 > known, "cosine baseline should beat chance");
    }

    #[test]
    fn sheet_files_round_trip_byte_for_byte() {
        let (records, plan) = corpus_and_plan();
        let trials = build_trials(&records, &plan);
        let model = test_model(4, 2, 77);
        let sheet =
            score_trials(&model, &trials, 2, HeadKind::Mean, ScoreSource::Candidate(7)).unwrap();
        let dir = tempdir().unwrap();
        let path_a = dir.path().join("a.scores");
        let path_b = dir.path().join("b.scores");
        sheet.write(&path_a).unwrap();
        let reread = ScoreSheet::read(&path_a).unwrap();
        assert_eq!(reread, sheet);
        reread.write(&path_b).unwrap();
        assert_eq!(
            std::fs::read(&path_a).unwrap(),
            std::fs::read(&path_b).unwrap(),
            "write -> read -> write must be byte-stable"
        );
    }

    #[test]
    fn sheet_reader_reports_line_numbers() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.scores");
        std::fs::write(
            &path,
            "spklab-scores v1\nsource candidate-03 head mean targets 2\n\
             t/000\t0\t0\t0.7\t0.7,0.2\nt/001\t-\t0\t0.9\t0.9,oops\n",
        )
        .unwrap();
        match ScoreSheet::read(&path) {
            Err(ScoringError::BadScoreFile { line, reason, .. }) => {
                assert_eq!(line, 4);
                assert!(reason.contains("oops"), "reason was {reason:?}");
            }
            other => panic!("expected BadScoreFile, got {other:?}"),
        }
        // Out-of-range predicted index is also rejected.
        std::fs::write(
            &path,
            "spklab-scores v1\nsource baseline head - targets 2\n\
             t/000\t0\t5\t0.5\t0.7,0.2\n",
        )
        .unwrap();
        assert!(matches!(
            ScoreSheet::read(&path),
            Err(ScoringError::BadScoreFile { line: 3, .. })
        ));
        // A detection that disagrees with the row maximum still reads back:
        // detection-only fused sheets legitimately carry such rows.
        std::fs::write(
            &path,
            "spklab-scores v1\nsource fused-selected head - targets 2\n\
             t/000\t0\t0\t0.5\t0.7,0.2\n",
        )
        .unwrap();
        let sheet = ScoreSheet::read(&path).unwrap();
        assert_eq!(sheet.scores[0].detection, 0.5);
        assert_eq!(sheet.scores[0].target_scores, vec![0.7, 0.2]);
    }

    #[test]
    fn source_and_head_round_trip_as_strings() {
        for source in [
            ScoreSource::Baseline,
            ScoreSource::BaselineAug,
            ScoreSource::Candidate(12),
            ScoreSource::FusedNaive,
            ScoreSource::FusedSelected,
        ] {
            let text = source.to_string();
            assert_eq!(text.parse::<ScoreSource>().unwrap(), source);
        }
        for head in HeadKind::ALL {
            assert_eq!(head.to_string().parse::<HeadKind>().unwrap(), head);
        }
        assert!("candidate-x".parse::<ScoreSource>().is_err());
        assert!("sideways".parse::<HeadKind>().is_err());
    }
}
