//! Synthetic embedding corpora, their on-disk format, and split plans.
//!
//! A corpus stands in for the output of a frozen speaker-embedding frontend:
//! each speaker is a Gaussian cluster in d-dimensional space. Cluster
//! centroids are drawn from `N(0, cluster_separation^2 I)` and samples from
//! `N(centroid, within_noise^2 I)`, so the ratio of separation to noise
//! controls task difficulty. Speakers come in three populations:
//!
//! * target speakers, with enrollment, test, and optional augmentation
//!   records;
//! * unknown-test speakers, which only ever appear as test trials;
//! * synthetic-unknown speakers, training-only stand-ins for unknown voices
//!   (the role a zero-shot synthesis system would fill at full scale). They
//!   never appear in test trials.
//!
//! Augmentation records are enrollment vectors plus fresh Gaussian jitter,
//! mimicking cheap signal-level perturbation of the few enrollment
//! utterances.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::rng::SeededRng;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus config invalid: {0}")]
    BadConfig(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {reason}")]
    MalformedLine {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("{path}:{line}: vector has {found} dims, expected {expected}")]
    DimensionMismatch {
        path: String,
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("not enough target-eligible speakers: need {needed} for {n_splits} splits of {per_split}, corpus has {available}")]
    InsufficientSpeakers {
        needed: usize,
        available: usize,
        n_splits: usize,
        per_split: usize,
    },
    #[error("split geometry invalid: {0}")]
    BadSplitGeometry(String),
}

/// What a record is for. The role decides which pipeline stages may see it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    TargetEnroll,
    TargetTest,
    UnknownTest,
    SyntheticUnknown,
    TargetAug,
}

impl Role {
    pub const ALL: [Role; 5] = [
        Role::TargetEnroll,
        Role::TargetTest,
        Role::UnknownTest,
        Role::SyntheticUnknown,
        Role::TargetAug,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::TargetEnroll => "target-enroll",
            Role::TargetTest => "target-test",
            Role::UnknownTest => "unknown-test",
            Role::SyntheticUnknown => "synthetic-unknown",
            Role::TargetAug => "target-aug",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Role::ALL
            .iter()
            .copied()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| format!("unknown role {s:?}"))
    }
}

/// One embedding with its speaker identity and role.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub speaker_id: String,
    pub role: Role,
    pub vector: Vec<f64>,
}

fn default_dim() -> usize {
    192
}

/// Generation parameters for a synthetic corpus. JSON keys equal field names.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    /// Embedding dimensionality.
    #[serde(default = "default_dim")]
    pub dim: usize,
    pub n_target_speakers: usize,
    pub n_unknown_test_speakers: usize,
    pub n_synthetic_unknown_speakers: usize,
    /// Enrollment records per target speaker.
    pub enroll_per_target: usize,
    /// Test records per target and per unknown-test speaker.
    pub test_per_speaker: usize,
    /// Augmentation records per target speaker (jittered enrollments).
    pub aug_per_target: usize,
    /// Scale of the centroid distribution; larger means easier.
    pub cluster_separation: f64,
    /// Within-speaker sample noise.
    pub within_noise: f64,
    /// Jitter applied to enrollment vectors for augmentation records.
    /// Defaults to `within_noise`.
    #[serde(default)]
    pub aug_noise: Option<f64>,
    /// Training samples per synthetic-unknown speaker.
    /// Defaults to `enroll_per_target`.
    #[serde(default)]
    pub synthetic_per_speaker: Option<usize>,
    pub seed: u64,
}

impl CorpusConfig {
    pub fn aug_noise(&self) -> f64 {
        self.aug_noise.unwrap_or(self.within_noise)
    }

    pub fn synthetic_per_speaker(&self) -> usize {
        self.synthetic_per_speaker.unwrap_or(self.enroll_per_target)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.dim == 0 {
            return Err(CorpusError::BadConfig("dim must be positive".into()));
        }
        if !(self.cluster_separation > 0.0) || !self.cluster_separation.is_finite() {
            return Err(CorpusError::BadConfig(format!(
                "cluster_separation must be positive and finite, got {}",
                self.cluster_separation
            )));
        }
        if !(self.within_noise > 0.0) || !self.within_noise.is_finite() {
            return Err(CorpusError::BadConfig(format!(
                "within_noise must be positive and finite, got {}",
                self.within_noise
            )));
        }
        if let Some(a) = self.aug_noise {
            if !(a >= 0.0) || !a.is_finite() {
                return Err(CorpusError::BadConfig(format!(
                    "aug_noise must be non-negative and finite, got {a}"
                )));
            }
        }
        // Augmentations are jittered enrollments; with no enrollments there
        // is nothing to jitter.
        if self.aug_per_target > 0 && self.enroll_per_target == 0 && self.n_target_speakers > 0 {
            return Err(CorpusError::BadConfig(
                "aug_per_target > 0 requires enroll_per_target > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Draw the full corpus. The record sequence (and therefore the RNG call
/// order) is fixed: targets first (centroid, enrollments, tests, then
/// augmentations per speaker), then unknown-test speakers, then
/// synthetic-unknown speakers. Reordering would silently change every
/// downstream artifact for a given seed, so it is part of the contract.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Vec<EmbeddingRecord>, CorpusError> {
    cfg.validate()?;
    let mut rng = SeededRng::new(cfg.seed);
    let mut records = Vec::new();

    let sample =
        |rng: &mut SeededRng, center: &[f64], noise: f64| -> Vec<f64> {
            center
                .iter()
                .map(|c| c + noise * rng.next_gaussian())
                .collect()
        };

    for t in 0..cfg.n_target_speakers {
        let id = format!("target_{t:03}");
        let centroid: Vec<f64> = rng
            .gaussian(cfg.dim)
            .into_iter()
            .map(|g| g * cfg.cluster_separation)
            .collect();
        let mut enrollments = Vec::with_capacity(cfg.enroll_per_target);
        for _ in 0..cfg.enroll_per_target {
            let v = sample(&mut rng, &centroid, cfg.within_noise);
            enrollments.push(v.clone());
            records.push(EmbeddingRecord {
                speaker_id: id.clone(),
                role: Role::TargetEnroll,
                vector: v,
            });
        }
        for _ in 0..cfg.test_per_speaker {
            records.push(EmbeddingRecord {
                speaker_id: id.clone(),
                role: Role::TargetTest,
                vector: sample(&mut rng, &centroid, cfg.within_noise),
            });
        }
        for j in 0..cfg.aug_per_target {
            // Jitter enrollment vectors round-robin (validate() guarantees
            // enrollments is non-empty when this loop runs).
            let base = &enrollments[j % enrollments.len()];
            records.push(EmbeddingRecord {
                speaker_id: id.clone(),
                role: Role::TargetAug,
                vector: sample(&mut rng, base, cfg.aug_noise()),
            });
        }
    }

    for u in 0..cfg.n_unknown_test_speakers {
        let id = format!("unknown_{u:03}");
        let centroid: Vec<f64> = rng
            .gaussian(cfg.dim)
            .into_iter()
            .map(|g| g * cfg.cluster_separation)
            .collect();
        for _ in 0..cfg.test_per_speaker {
            records.push(EmbeddingRecord {
                speaker_id: id.clone(),
                role: Role::UnknownTest,
                vector: sample(&mut rng, &centroid, cfg.within_noise),
            });
        }
    }

    for s in 0..cfg.n_synthetic_unknown_speakers {
        let id = format!("synth_{s:03}");
        let centroid: Vec<f64> = rng
            .gaussian(cfg.dim)
            .into_iter()
            .map(|g| g * cfg.cluster_separation)
            .collect();
        for _ in 0..cfg.synthetic_per_speaker() {
            records.push(EmbeddingRecord {
                speaker_id: id.clone(),
                role: Role::SyntheticUnknown,
                vector: sample(&mut rng, &centroid, cfg.within_noise),
            });
        }
    }

    Ok(records)
}

/// Write records as tab-separated text: `speaker_id \t role \t v0,v1,...`.
///
/// Floats are printed with Rust's shortest round-trip formatting (at most 17
/// significant digits), so `read_embeddings(write_embeddings(r)) == r`
/// exactly.
pub fn write_embeddings(path: &Path, records: &[EmbeddingRecord]) -> Result<(), CorpusError> {
    crate::ioutil::write_atomic(path, |w| {
        for rec in records {
            write!(w, "{}\t{}\t", rec.speaker_id, rec.role)?;
            let mut first = true;
            for v in &rec.vector {
                if !first {
                    w.write_all(b",")?;
                }
                write!(w, "{v}")?;
                first = false;
            }
            w.write_all(b"\n")?;
        }
        Ok(())
    })
    .map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Read a corpus written by [`write_embeddings`]. Rejects malformed lines
/// (with their line number), inconsistent dimensions, and non-finite values.
pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddingRecord>, CorpusError> {
    let file = std::fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = std::io::BufReader::new(file);
    let path_str = path.display().to_string();
    let mut records = Vec::new();
    let mut expected_dim: Option<usize> = None;

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: path_str.clone(),
            source,
        })?;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.splitn(3, '\t');
        let speaker_id = fields.next().unwrap_or_default();
        let role_str = fields.next().ok_or_else(|| CorpusError::MalformedLine {
            path: path_str.clone(),
            line: line_no,
            reason: "missing role field".into(),
        })?;
        let vec_str = fields.next().ok_or_else(|| CorpusError::MalformedLine {
            path: path_str.clone(),
            line: line_no,
            reason: "missing vector field".into(),
        })?;
        if speaker_id.is_empty() {
            return Err(CorpusError::MalformedLine {
                path: path_str.clone(),
                line: line_no,
                reason: "empty speaker id".into(),
            });
        }
        let role = Role::from_str(role_str).map_err(|reason| CorpusError::MalformedLine {
            path: path_str.clone(),
            line: line_no,
            reason,
        })?;
        let mut vector = Vec::new();
        for piece in vec_str.split(',') {
            let v: f64 = piece
                .trim()
                .parse()
                .map_err(|e| CorpusError::MalformedLine {
                    path: path_str.clone(),
                    line: line_no,
                    reason: format!("bad float {piece:?}: {e}"),
                })?;
            if !v.is_finite() {
                return Err(CorpusError::MalformedLine {
                    path: path_str.clone(),
                    line: line_no,
                    reason: format!("non-finite value {v}"),
                });
            }
            vector.push(v);
        }
        match expected_dim {
            None => expected_dim = Some(vector.len()),
            Some(d) if d != vector.len() => {
                return Err(CorpusError::DimensionMismatch {
                    path: path_str.clone(),
                    line: line_no,
                    expected: d,
                    found: vector.len(),
                })
            }
            _ => {}
        }
        records.push(EmbeddingRecord {
            speaker_id: speaker_id.to_string(),
            role,
            vector,
        });
    }
    Ok(records)
}

/// One evaluation split: which speakers are enrolled targets and which count
/// as unknown at test time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub split_index: usize,
    pub target_ids: Vec<String>,
    pub unknown_ids: Vec<String>,
}

/// Partition target-eligible speakers (those with enrollment records) into
/// `n_splits` disjoint groups of `targets_per_split`. Within a split, every
/// other speaker that has test records (the remaining target-eligible
/// speakers plus all unknown-test speakers) is an unknown. Synthetic-unknown
/// speakers never appear in a plan.
pub fn make_splits(
    records: &[EmbeddingRecord],
    n_splits: usize,
    targets_per_split: usize,
    seed: u64,
) -> Result<Vec<SplitPlan>, CorpusError> {
    if n_splits == 0 || targets_per_split == 0 {
        return Err(CorpusError::BadSplitGeometry(
            "n_splits and targets_per_split must be positive".into(),
        ));
    }
    let mut eligible: BTreeSet<&str> = BTreeSet::new();
    let mut unknown_only: BTreeSet<&str> = BTreeSet::new();
    for rec in records {
        match rec.role {
            Role::TargetEnroll => {
                eligible.insert(&rec.speaker_id);
            }
            Role::UnknownTest => {
                unknown_only.insert(&rec.speaker_id);
            }
            _ => {}
        }
    }
    let needed = n_splits * targets_per_split;
    if eligible.len() < needed {
        return Err(CorpusError::InsufficientSpeakers {
            needed,
            available: eligible.len(),
            n_splits,
            per_split: targets_per_split,
        });
    }

    let mut pool: Vec<&str> = eligible.iter().copied().collect();
    let mut rng = SeededRng::new(seed);
    rng.shuffle(&mut pool);

    let mut plans = Vec::with_capacity(n_splits);
    for k in 0..n_splits {
        let targets: Vec<String> = pool[k * targets_per_split..(k + 1) * targets_per_split]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let target_set: BTreeSet<&str> = targets.iter().map(|s| s.as_str()).collect();
        // Deterministic unknown order: sorted ids, eligible and unknown-test
        // speakers interleaved lexicographically.
        let mut unknowns: Vec<String> = eligible
            .iter()
            .chain(unknown_only.iter())
            .filter(|s| !target_set.contains(**s))
            .map(|s| s.to_string())
            .collect();
        unknowns.sort();
        unknowns.dedup();
        plans.push(SplitPlan {
            split_index: k,
            target_ids: targets,
            unknown_ids: unknowns,
        });
    }
    Ok(plans)
}

pub fn write_splits(path: &Path, plans: &[SplitPlan]) -> Result<(), CorpusError> {
    crate::ioutil::write_atomic(path, |w| {
        let text = serde_json::to_string_pretty(plans).expect("split plans serialize");
        w.write_all(text.as_bytes())?;
        w.write_all(b"\n")?;
        Ok(())
    })
    .map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_splits(path: &Path) -> Result<Vec<SplitPlan>, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| CorpusError::MalformedLine {
        path: path.display().to_string(),
        line: e.line(),
        reason: e.to_string(),
    })
}
