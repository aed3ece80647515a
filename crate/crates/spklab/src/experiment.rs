//! End-to-end experiment orchestration over reproducible run directories.
//!
//! An experiment is a config plus a directory. Seven stages move artifacts
//! through the directory, each reading only files earlier stages wrote, so
//! any stage can be rerun (or run from the command line) in isolation:
//!
//! 1. **gen** — synthesize or import the embedding corpus, carve the
//!    evaluation splits, echo the resolved config;
//! 2. **train** — per split, train one candidate pool per method row;
//! 3. **score** — per split, write one score sheet per baseline and one per
//!    pool candidate;
//! 4. **select** — diagnose the main pool's point-set spectra and pick the
//!    fusion members;
//! 5. **fuse** — average the main pool's posteriors, over everyone and over
//!    the selected members;
//! 6. **eval** — compute metrics for every sheet and persist them per split;
//! 7. **report** — aggregate everything into a machine report and an
//!    aligned-text table, with a relative-EER-change column.
//!
//! Layout, relative to the run directory:
//!
//! ```text
//! config.json                          resolved config echo
//! corpus/embeddings.tsv                the corpus
//! corpus/splits.json                   evaluation splits
//! pools/split_<k>/<row>/candidate_<i>.model
//! pools/split_<k>/<row>/pool.json      training provenance per candidate
//! pools/split_<k>/<main>/selection.json + diagnostics.tsv
//! scores/split_<k>/<row>.scores        single-sheet rows
//! scores/split_<k>/<row>/candidate-<i>.scores
//! reports/metrics/split_<k>.json       per-sheet metric scalars
//! reports/report.json + report.txt     the final report
//! status/split_<k>.json                written only when a split fails
//! ```
//!
//! Every write is atomic and every byte is a function of (config, seeds):
//! rerunning a stage overwrites its outputs with identical content. A split
//! that fails in some stage is recorded in `status/` and skipped by later
//! stages; the report marks it incomplete and aggregates over the rest.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{AdapterError, AdapterModel};
use crate::corpus::{
    generate_corpus, make_splits, read_embeddings, read_splits, write_embeddings, write_splits,
    CorpusConfig, CorpusError, EmbeddingRecord, SplitPlan,
};
use crate::fusion::{
    diagnose_candidate, fuse_detection_only, fuse_scores, select_candidates,
    write_diagnostics_table, FusionError, SelectionResult, DEFAULT_DISCARD_FRACTION,
};
use crate::metrics::{metrics_report, MetricParams, MetricsError};
use crate::scoring::{
    baseline_score_trials, build_trials, enroll_centroids, score_trials, HeadKind, ScoreSheet,
    ScoreSource, ScoringError,
};
use crate::trainer::{train_pool, LossKind, SettingFlags, TrainConfig, TrainError, TrainingSet};
use crate::vecmath;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error("experiment config invalid: {0}")]
    BadConfig(String),
    #[error("i/o on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad json in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

/// Where the embeddings come from: generated in-run or imported from a
/// previously written embeddings file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CorpusSource {
    Generate(CorpusConfig),
    Load { embeddings: String },
}

fn default_head() -> HeadKind {
    HeadKind::Mean
}
fn default_discard_fraction() -> f64 {
    DEFAULT_DISCARD_FRACTION
}

/// The whole experiment in one JSON document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: CorpusSource,
    /// Number of disjoint evaluation splits.
    pub n_splits: usize,
    /// Enrolled target speakers per split.
    pub targets_per_split: usize,
    /// Seed for carving splits; defaults to corpus seed + 1 for generated
    /// corpora and is required for imported ones.
    #[serde(default)]
    pub split_seed: Option<u64>,
    /// Optimization settings shared by every pool row.
    #[serde(default)]
    pub train: TrainConfig,
    /// Posterior head for adapter score sheets.
    #[serde(default = "default_head")]
    pub head: HeadKind,
    #[serde(default)]
    pub metric_params: MetricParams,
    /// Fraction of the pool cut per spectral metric during selection.
    #[serde(default = "default_discard_fraction")]
    pub discard_fraction: f64,
    /// Diagnose unit-normalized point rows instead of raw ones.
    #[serde(default)]
    pub normalize_gram: bool,
    /// Fuse only the scalar detection scores (ablation) instead of the
    /// full posterior rows.
    #[serde(default)]
    pub fuse_detection_only: bool,
    /// Extra single-objective pool rows trained for reference, e.g.
    /// softmax or prototype.
    #[serde(default)]
    pub reference_losses: Vec<LossKind>,
    /// Add the three progressive flag-ablation rows (everything off, plus
    /// augmentation, plus synthetic unknowns — the main row completes the
    /// ladder with anchors).
    #[serde(default)]
    pub flag_ablation: bool,
    /// Extra main-objective rows, one per anchor count.
    #[serde(default)]
    pub anchor_sweep: Vec<usize>,
    /// Also export DET and OSCR curves as TSV for single-sheet rows.
    #[serde(default)]
    pub emit_curves: bool,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.n_splits == 0 || self.targets_per_split == 0 {
            return Err(ExperimentError::BadConfig(
                "n_splits and targets_per_split must be positive".into(),
            ));
        }
        match &self.corpus {
            CorpusSource::Generate(cfg) => cfg.validate()?,
            CorpusSource::Load { .. } => {
                if self.split_seed.is_none() {
                    return Err(ExperimentError::BadConfig(
                        "split_seed is required when embeddings are imported".into(),
                    ));
                }
            }
        }
        self.train.validate()?;
        self.metric_params
            .validate()
            .map_err(|e| ExperimentError::BadConfig(e.to_string()))?;
        if !(0.0..=0.5).contains(&self.discard_fraction) {
            return Err(ExperimentError::BadConfig(format!(
                "discard_fraction must lie in [0, 0.5], got {}",
                self.discard_fraction
            )));
        }
        let main = self.train.loss.name();
        let mut seen = vec![main.to_string()];
        for loss in &self.reference_losses {
            let name = loss.name().to_string();
            if seen.contains(&name) {
                return Err(ExperimentError::BadConfig(format!(
                    "reference loss {name:?} duplicates another pool row"
                )));
            }
            seen.push(name);
        }
        let mut anchors = self.anchor_sweep.clone();
        anchors.sort_unstable();
        anchors.dedup();
        if anchors.len() != self.anchor_sweep.len() {
            return Err(ExperimentError::BadConfig(
                "anchor_sweep contains duplicate counts".into(),
            ));
        }
        Ok(())
    }

    /// Seed for split carving: explicit, or corpus seed + 1.
    pub fn resolved_split_seed(&self) -> u64 {
        match (&self.split_seed, &self.corpus) {
            (Some(s), _) => *s,
            (None, CorpusSource::Generate(cfg)) => cfg.seed.wrapping_add(1),
            // validate() requires an explicit seed for imported corpora.
            (None, CorpusSource::Load { .. }) => 0,
        }
    }

    pub fn seed_manifest(&self) -> SeedManifest {
        SeedManifest {
            corpus_seed: match &self.corpus {
                CorpusSource::Generate(cfg) => Some(cfg.seed),
                CorpusSource::Load { .. } => None,
            },
            split_seed: self.resolved_split_seed(),
            train_base_seed: self.train.base_seed,
            candidate_rule: "candidate i initializes from train_base_seed + i".into(),
        }
    }
}

/// Every seed that shaped the run, echoed into the report so an artifact
/// can be traced back to its randomness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedManifest {
    /// `None` when the embeddings were imported rather than generated.
    pub corpus_seed: Option<u64>,
    pub split_seed: u64,
    pub train_base_seed: u64,
    pub candidate_rule: String,
}

// ---------------------------------------------------------------------------
// Method rows
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
enum RowKind {
    /// One sheet per split at `scores/split_<k>/<file>`.
    Single { file: String },
    /// A trained pool: one sheet per candidate under
    /// `scores/split_<k>/<id>/`.
    Pool {
        loss: LossKind,
        anchor_count: usize,
    },
}

#[derive(Debug, Clone)]
struct RowSpec {
    id: String,
    label: String,
    flags: Option<SettingFlags>,
    head: Option<HeadKind>,
    kind: RowKind,
}

impl RowSpec {
    fn is_pool(&self) -> bool {
        matches!(self.kind, RowKind::Pool { .. })
    }

    /// Relative paths of every score sheet backing this row in split `k`.
    fn sheet_rels(&self, config: &ExperimentConfig, k: usize) -> Vec<String> {
        match &self.kind {
            RowKind::Single { file } => vec![format!("scores/split_{k}/{file}")],
            RowKind::Pool { .. } => (0..config.train.n_candidates)
                .map(|i| format!("scores/split_{k}/{}/candidate-{i:02}.scores", self.id))
                .collect(),
        }
    }

    /// Training settings for a pool row: shared optimizer, row-specific
    /// objective, flags and anchor budget.
    fn train_config(&self, config: &ExperimentConfig) -> TrainConfig {
        let RowKind::Pool { loss, anchor_count } = &self.kind else {
            unreachable!("only pool rows train");
        };
        let mut tc = config.train.clone();
        tc.loss = loss.clone();
        tc.flags = self.flags.clone().expect("pool rows carry flags");
        tc.anchor_count = *anchor_count;
        tc
    }
}

/// All report rows, in display order: baselines, the flag-ablation ladder,
/// the main pool, anchor sweeps, reference pools, fusion. Every row is
/// produced if and only if its switch asks for it.
fn report_row_specs(config: &ExperimentConfig) -> Vec<RowSpec> {
    let flags = &config.train.flags;
    let mut rows = Vec::new();
    rows.push(RowSpec {
        id: "baseline".into(),
        label: "cosine to enrollment centroids".into(),
        flags: None,
        head: None,
        kind: RowKind::Single {
            file: "baseline.scores".into(),
        },
    });
    if flags.target_aug {
        rows.push(RowSpec {
            id: "baseline-aug".into(),
            label: "cosine to centroids with augmentation".into(),
            flags: None,
            head: None,
            kind: RowKind::Single {
                file: "baseline-aug.scores".into(),
            },
        });
    }
    if config.flag_ablation {
        let ladder = [
            SettingFlags {
                target_aug: false,
                synthetic_unknowns: false,
                adaptive_anchors: false,
                fusion: false,
            },
            SettingFlags {
                target_aug: true,
                synthetic_unknowns: false,
                adaptive_anchors: false,
                fusion: false,
            },
            SettingFlags {
                target_aug: true,
                synthetic_unknowns: true,
                adaptive_anchors: false,
                fusion: false,
            },
        ];
        for ablation in ladder {
            rows.push(RowSpec {
                id: format!("{}-{}", config.train.loss.name(), ablation.label()),
                label: format!(
                    "{} pool, settings {}, candidate mean",
                    config.train.loss.name(),
                    ablation.label()
                ),
                flags: Some(ablation.clone()),
                head: Some(config.head),
                kind: RowKind::Pool {
                    loss: config.train.loss.clone(),
                    anchor_count: 0,
                },
            });
        }
    }
    rows.push(RowSpec {
        id: config.train.loss.name().into(),
        label: format!("{} pool, candidate mean", config.train.loss.name()),
        flags: Some(flags.clone()),
        head: Some(config.head),
        kind: RowKind::Pool {
            loss: config.train.loss.clone(),
            anchor_count: config.train.anchor_count,
        },
    });
    for &n in &config.anchor_sweep {
        let mut sweep_flags = flags.clone();
        sweep_flags.adaptive_anchors = n > 0;
        sweep_flags.fusion = false;
        rows.push(RowSpec {
            id: format!("{}-anchors-{n:02}", config.train.loss.name()),
            label: format!(
                "{} pool, {n} adaptive anchors, candidate mean",
                config.train.loss.name()
            ),
            flags: Some(sweep_flags),
            head: Some(config.head),
            kind: RowKind::Pool {
                loss: config.train.loss.clone(),
                anchor_count: n,
            },
        });
    }
    for loss in &config.reference_losses {
        let reference_flags = SettingFlags {
            target_aug: flags.target_aug,
            synthetic_unknowns: flags.synthetic_unknowns,
            adaptive_anchors: false,
            fusion: false,
        };
        rows.push(RowSpec {
            id: loss.name().into(),
            label: format!("{} reference pool, candidate mean", loss.name()),
            flags: Some(reference_flags),
            // Reference objectives shape only the trunk and the center
            // points, so they are scored on the center-point head: the
            // reciprocal rows never trained.
            head: Some(HeadKind::Cp),
            kind: RowKind::Pool {
                loss: loss.clone(),
                anchor_count: 0,
            },
        });
    }
    if flags.fusion {
        let style = if config.fuse_detection_only {
            "detection-mean"
        } else {
            "posterior-mean"
        };
        rows.push(RowSpec {
            id: "fused-naive".into(),
            label: format!("{style} fusion of all candidates"),
            flags: Some(flags.clone()),
            head: Some(config.head),
            kind: RowKind::Single {
                file: "fused-naive.scores".into(),
            },
        });
        rows.push(RowSpec {
            id: "fused-selected".into(),
            label: format!("{style} fusion of spectrally selected candidates"),
            flags: Some(flags.clone()),
            head: Some(config.head),
            kind: RowKind::Single {
                file: "fused-selected.scores".into(),
            },
        });
    }
    rows
}

fn main_row_id(config: &ExperimentConfig) -> String {
    config.train.loss.name().into()
}

// ---------------------------------------------------------------------------
// Paths and small file helpers
// ---------------------------------------------------------------------------

fn embeddings_path(run_dir: &Path) -> PathBuf {
    run_dir.join("corpus/embeddings.tsv")
}
fn splits_path(run_dir: &Path) -> PathBuf {
    run_dir.join("corpus/splits.json")
}
fn config_path(run_dir: &Path) -> PathBuf {
    run_dir.join("config.json")
}
fn pool_dir(run_dir: &Path, k: usize, row_id: &str) -> PathBuf {
    run_dir.join(format!("pools/split_{k}/{row_id}"))
}
fn model_path(run_dir: &Path, k: usize, row_id: &str, i: usize) -> PathBuf {
    pool_dir(run_dir, k, row_id).join(format!("candidate_{i:02}.model"))
}
fn scores_dir(run_dir: &Path, k: usize) -> PathBuf {
    run_dir.join(format!("scores/split_{k}"))
}
fn metrics_rel(k: usize) -> String {
    format!("reports/metrics/split_{k}.json")
}
fn failure_path(run_dir: &Path, k: usize) -> PathBuf {
    run_dir.join(format!("status/split_{k}.json"))
}
fn report_json_path(run_dir: &Path) -> PathBuf {
    run_dir.join("reports/report.json")
}
fn report_txt_path(run_dir: &Path) -> PathBuf {
    run_dir.join("reports/report.txt")
}

fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<(), ExperimentError> {
    let text = serde_json::to_string_pretty(value).map_err(|source| ExperimentError::Json {
        path: path.display().to_string(),
        source,
    })?;
    crate::ioutil::write_atomic(path, |w| {
        w.write_all(text.as_bytes())?;
        w.write_all(b"\n")
    })
    .map_err(|source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, ExperimentError> {
    let text = fs::read_to_string(path).map_err(|source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| ExperimentError::Json {
        path: path.display().to_string(),
        source,
    })
}

/// Load and validate an experiment config from JSON.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, ExperimentError> {
    let config: ExperimentConfig = read_json(path)?;
    config.validate()?;
    Ok(config)
}

fn remove_dir_if_exists(path: &Path) -> Result<(), ExperimentError> {
    match fs::remove_dir_all(path) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(source) => Err(ExperimentError::Io {
            path: path.display().to_string(),
            source,
        }),
    }
}

/// What broke, for the report. Written to `status/split_<k>.json`; later
/// stages skip a failed split and the report marks it incomplete.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitFailure {
    pub split_index: usize,
    pub stage: String,
    pub error: String,
}

fn for_each_split(
    run_dir: &Path,
    n_splits: usize,
    stage: &str,
    mut f: impl FnMut(usize) -> Result<(), ExperimentError>,
) -> Result<(), ExperimentError> {
    for k in 0..n_splits {
        if failure_path(run_dir, k).exists() {
            continue;
        }
        if let Err(error) = f(k) {
            let failure = SplitFailure {
                split_index: k,
                stage: stage.to_string(),
                error: error.to_string(),
            };
            write_json_atomic(&failure_path(run_dir, k), &failure)?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

/// Stage 1: corpus and splits into `corpus/`, config echo at the root.
/// Clears stale failure markers; a fresh generation is a fresh start.
pub fn stage_gen(config: &ExperimentConfig, run_dir: &Path) -> Result<(), ExperimentError> {
    config.validate()?;
    remove_dir_if_exists(&run_dir.join("status"))?;
    let records = match &config.corpus {
        CorpusSource::Generate(cfg) => generate_corpus(cfg)?,
        CorpusSource::Load { embeddings } => read_embeddings(Path::new(embeddings))?,
    };
    write_embeddings(&embeddings_path(run_dir), &records)?;
    let plans = make_splits(
        &records,
        config.n_splits,
        config.targets_per_split,
        config.resolved_split_seed(),
    )?;
    write_splits(&splits_path(run_dir), &plans)?;
    write_json_atomic(&config_path(run_dir), config)
}

fn load_corpus_and_splits(
    config: &ExperimentConfig,
    run_dir: &Path,
) -> Result<(Vec<EmbeddingRecord>, Vec<SplitPlan>), ExperimentError> {
    let records = read_embeddings(&embeddings_path(run_dir))?;
    let plans = read_splits(&splits_path(run_dir))?;
    if plans.len() != config.n_splits {
        return Err(ExperimentError::BadConfig(format!(
            "run directory holds {} splits but the config asks for {}; regenerate first",
            plans.len(),
            config.n_splits
        )));
    }
    Ok((records, plans))
}

/// Stage 2: per split and per pool row, train the candidates and persist
/// each model plus the pool's training provenance.
pub fn stage_train(config: &ExperimentConfig, run_dir: &Path) -> Result<(), ExperimentError> {
    config.validate()?;
    let (records, plans) = load_corpus_and_splits(config, run_dir)?;
    let rows: Vec<RowSpec> = report_row_specs(config)
        .into_iter()
        .filter(RowSpec::is_pool)
        .collect();
    for_each_split(run_dir, config.n_splits, "train", |k| {
        let plan = &plans[k];
        remove_dir_if_exists(&run_dir.join(format!("pools/split_{k}")))?;
        for row in &rows {
            let flags = row.flags.as_ref().expect("pool rows carry flags");
            let set = TrainingSet::from_split(&records, plan, flags)?;
            let tc = row.train_config(config);
            let pool = train_pool(&tc, &set)?;
            let mut provenance = Vec::with_capacity(pool.len());
            for (model, record) in &pool {
                model.save(&model_path(run_dir, k, &row.id, record.index))?;
                provenance.push(record.clone());
            }
            write_json_atomic(&pool_dir(run_dir, k, &row.id).join("pool.json"), &provenance)?;
        }
        Ok(())
    })
}

/// Stage 3: per split, one sheet per baseline and one per pool candidate.
pub fn stage_score(config: &ExperimentConfig, run_dir: &Path) -> Result<(), ExperimentError> {
    config.validate()?;
    let (records, plans) = load_corpus_and_splits(config, run_dir)?;
    let rows: Vec<RowSpec> = report_row_specs(config)
        .into_iter()
        .filter(RowSpec::is_pool)
        .collect();
    for_each_split(run_dir, config.n_splits, "score", |k| {
        let plan = &plans[k];
        let trials = build_trials(&records, plan);
        let n_targets = plan.target_ids.len();
        let sdir = scores_dir(run_dir, k);
        remove_dir_if_exists(&sdir)?;

        let centroids = enroll_centroids(&records, plan, false)?;
        baseline_score_trials(&centroids, &trials, ScoreSource::Baseline)?
            .write(&sdir.join("baseline.scores"))?;
        if config.train.flags.target_aug {
            let centroids = enroll_centroids(&records, plan, true)?;
            baseline_score_trials(&centroids, &trials, ScoreSource::BaselineAug)?
                .write(&sdir.join("baseline-aug.scores"))?;
        }
        for row in &rows {
            let head = row.head.expect("pool rows carry a head");
            for i in 0..config.train.n_candidates {
                let model = AdapterModel::load(&model_path(run_dir, k, &row.id, i))?;
                let sheet =
                    score_trials(&model, &trials, n_targets, head, ScoreSource::Candidate(i))?;
                sheet.write(&sdir.join(&row.id).join(format!("candidate-{i:02}.scores")))?;
            }
        }
        Ok(())
    })
}

/// Stage 4: diagnose the main pool's point-set spectra and persist which
/// candidates survive selection. Runs whether or not fusion is enabled —
/// the diagnostics are reported either way.
pub fn stage_select(config: &ExperimentConfig, run_dir: &Path) -> Result<(), ExperimentError> {
    config.validate()?;
    let main_id = main_row_id(config);
    for_each_split(run_dir, config.n_splits, "select", |k| {
        let mut diagnostics = Vec::with_capacity(config.train.n_candidates);
        for i in 0..config.train.n_candidates {
            let model = AdapterModel::load(&model_path(run_dir, k, &main_id, i))?;
            diagnostics.push(diagnose_candidate(&model, config.normalize_gram)?);
        }
        let selection = select_candidates(&diagnostics, config.discard_fraction)?;
        let dir = pool_dir(run_dir, k, &main_id);
        selection.write_json(&dir.join("selection.json"))?;
        write_diagnostics_table(
            &selection.diagnostics,
            &selection.kept,
            &dir.join("diagnostics.tsv"),
        )?;
        Ok(())
    })
}

/// Stage 5: fuse the main pool's sheets — everyone into `fused-naive`, the
/// selected members into `fused-selected`. Skipped entirely when the fusion
/// flag is off (no silent fallback rows).
pub fn stage_fuse(config: &ExperimentConfig, run_dir: &Path) -> Result<(), ExperimentError> {
    config.validate()?;
    if !config.train.flags.fusion {
        return Ok(());
    }
    let main_id = main_row_id(config);
    let fuse: fn(&[ScoreSheet], &[usize], ScoreSource) -> Result<ScoreSheet, FusionError> =
        if config.fuse_detection_only {
            fuse_detection_only
        } else {
            fuse_scores
        };
    for_each_split(run_dir, config.n_splits, "fuse", |k| {
        let sdir = scores_dir(run_dir, k);
        let mut sheets = Vec::with_capacity(config.train.n_candidates);
        for i in 0..config.train.n_candidates {
            let path = sdir.join(&main_id).join(format!("candidate-{i:02}.scores"));
            sheets.push(ScoreSheet::read(&path)?);
        }
        let everyone: Vec<usize> = (0..sheets.len()).collect();
        fuse(&sheets, &everyone, ScoreSource::FusedNaive)?
            .write(&sdir.join("fused-naive.scores"))?;
        let selection =
            SelectionResult::read_json(&pool_dir(run_dir, k, &main_id).join("selection.json"))?;
        fuse(&sheets, &selection.kept, ScoreSource::FusedSelected)?
            .write(&sdir.join("fused-selected.scores"))?;
        Ok(())
    })
}

/// One sheet's metric scalars plus the sheet it came from, so every number
/// in the report traces back to a stored artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SheetEval {
    pub sheet: String,
    pub eer: f64,
    pub min_dcf: f64,
    pub oscr: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowEval {
    pub id: String,
    pub sheets: Vec<SheetEval>,
}

/// Everything stage 6 learned about one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEval {
    pub split_index: usize,
    pub rows: Vec<RowEval>,
}

/// Stage 6: metrics for every sheet of every row, one JSON per split.
/// With `emit_curves`, single-sheet rows also get DET and OSCR TSVs.
pub fn stage_eval(config: &ExperimentConfig, run_dir: &Path) -> Result<(), ExperimentError> {
    config.validate()?;
    remove_dir_if_exists(&run_dir.join("reports/metrics"))?;
    remove_dir_if_exists(&run_dir.join("reports/curves"))?;
    let rows = report_row_specs(config);
    for_each_split(run_dir, config.n_splits, "eval", |k| {
        let mut row_evals = Vec::with_capacity(rows.len());
        for row in &rows {
            let mut sheet_evals = Vec::new();
            for rel in row.sheet_rels(config, k) {
                let sheet = ScoreSheet::read(&run_dir.join(&rel))?;
                let m = metrics_report(&sheet, &config.metric_params)?;
                if config.emit_curves && !row.is_pool() {
                    let cdir = run_dir.join(format!("reports/curves/split_{k}"));
                    m.write_det_tsv(&cdir.join(format!("{}.det.tsv", row.id)))?;
                    m.write_oscr_tsv(&cdir.join(format!("{}.oscr.tsv", row.id)))?;
                }
                sheet_evals.push(SheetEval {
                    sheet: rel,
                    eer: m.eer,
                    min_dcf: m.min_dcf,
                    oscr: m.oscr,
                    accuracy: m.accuracy,
                });
            }
            row_evals.push(RowEval {
                id: row.id.clone(),
                sheets: sheet_evals,
            });
        }
        write_json_atomic(
            &run_dir.join(metrics_rel(k)),
            &SplitEval {
                split_index: k,
                rows: row_evals,
            },
        )
    })
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation over splits.
    pub std: f64,
}

fn mean_std(values: &[f64]) -> MeanStd {
    MeanStd {
        mean: vecmath::mean(values),
        std: vecmath::std_dev(values),
    }
}

/// A row's metrics in one split: the mean over its sheets (a single sheet
/// for baseline and fused rows, the candidate mean for pool rows).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub eer: f64,
    pub min_dcf: f64,
    pub oscr: f64,
    pub accuracy: f64,
    /// How many sheets the numbers average.
    pub sheets: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub eer: MeanStd,
    pub min_dcf: MeanStd,
    pub oscr: MeanStd,
    pub accuracy: MeanStd,
    /// How many splits contributed.
    pub splits: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub id: String,
    pub label: String,
    /// Settings label like `T+U+A+F+`; absent for untrained rows.
    pub flags: Option<String>,
    pub head: Option<String>,
    /// Aligned with the split list; `None` where the split is incomplete.
    pub per_split: Vec<Option<SplitMetrics>>,
    pub aggregate: Option<MetricSummary>,
    /// Relative EER change vs. the baseline row, in percent; positive
    /// means lower EER than baseline.
    pub eer_reduction_vs_baseline: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitStatus {
    pub split_index: usize,
    pub complete: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<SplitFailure>,
}

/// Selection outcome per split, minus the eigenvalue vectors (those stay in
/// `selection.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub split_index: usize,
    pub total: usize,
    pub kept: Vec<usize>,
    pub var_rp: Vec<f64>,
    pub var_cp: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub seeds: SeedManifest,
    pub splits: Vec<SplitStatus>,
    /// Per-split metric files backing the rows, where present.
    pub metrics_files: Vec<Option<String>>,
    pub rows: Vec<ReportRow>,
    pub selection: Vec<Option<SelectionSummary>>,
    /// Artifacts the report wanted but could not read, with reasons.
    pub missing: Vec<String>,
}

fn try_read_json<T: DeserializeOwned>(path: &Path, missing: &mut Vec<String>) -> Option<T> {
    match fs::read_to_string(path) {
        Ok(text) => match serde_json::from_str(&text) {
            Ok(v) => Some(v),
            Err(e) => {
                missing.push(format!("{}: {e}", path.display()));
                None
            }
        },
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            missing.push(path.display().to_string());
            None
        }
        Err(e) => {
            missing.push(format!("{}: {e}", path.display()));
            None
        }
    }
}

/// Stage 7: aggregate everything the run directory holds into
/// `reports/report.json` and `reports/report.txt`. Works on partial runs:
/// incomplete splits are marked, missing artifacts listed, aggregates
/// taken over what exists. Rendering is deterministic — rerunning writes
/// identical bytes.
pub fn stage_report(run_dir: &Path) -> Result<ExperimentReport, ExperimentError> {
    let config = load_config(&config_path(run_dir))?;
    let rows = report_row_specs(&config);
    let main_id = main_row_id(&config);
    let mut missing = Vec::new();

    let mut splits = Vec::with_capacity(config.n_splits);
    let mut evals: Vec<Option<SplitEval>> = Vec::with_capacity(config.n_splits);
    let mut metrics_files = Vec::with_capacity(config.n_splits);
    let mut selection = Vec::with_capacity(config.n_splits);
    for k in 0..config.n_splits {
        let failure: Option<SplitFailure> = if failure_path(run_dir, k).exists() {
            try_read_json(&failure_path(run_dir, k), &mut missing)
        } else {
            None
        };
        let eval: Option<SplitEval> = if failure.is_none() {
            try_read_json(&run_dir.join(metrics_rel(k)), &mut missing)
        } else {
            None
        };
        splits.push(SplitStatus {
            split_index: k,
            complete: failure.is_none() && eval.is_some(),
            failure,
        });
        metrics_files.push(eval.as_ref().map(|_| metrics_rel(k)));
        evals.push(eval);

        let sel_path = pool_dir(run_dir, k, &main_id).join("selection.json");
        let sel: Option<SelectionResult> = if sel_path.exists() {
            try_read_json(&sel_path, &mut missing)
        } else {
            None
        };
        selection.push(sel.map(|s| SelectionSummary {
            split_index: k,
            total: s.total,
            kept: s.kept,
            var_rp: s.diagnostics.iter().map(|d| d.var_rp).collect(),
            var_cp: s.diagnostics.iter().map(|d| d.var_cp).collect(),
        }));
    }

    let mut report_rows = Vec::with_capacity(rows.len());
    for row in &rows {
        let mut per_split = Vec::with_capacity(config.n_splits);
        for eval in &evals {
            let metrics = eval.as_ref().and_then(|e| {
                let row_eval = e.rows.iter().find(|r| r.id == row.id)?;
                if row_eval.sheets.is_empty() {
                    return None;
                }
                let collect = |f: fn(&SheetEval) -> f64| -> Vec<f64> {
                    row_eval.sheets.iter().map(f).collect()
                };
                Some(SplitMetrics {
                    eer: vecmath::mean(&collect(|s| s.eer)),
                    min_dcf: vecmath::mean(&collect(|s| s.min_dcf)),
                    oscr: vecmath::mean(&collect(|s| s.oscr)),
                    accuracy: vecmath::mean(&collect(|s| s.accuracy)),
                    sheets: row_eval.sheets.len(),
                })
            });
            per_split.push(metrics);
        }
        let available: Vec<&SplitMetrics> = per_split.iter().flatten().collect();
        let aggregate = if available.is_empty() {
            None
        } else {
            let pull = |f: fn(&SplitMetrics) -> f64| -> Vec<f64> {
                available.iter().map(|m| f(m)).collect()
            };
            Some(MetricSummary {
                eer: mean_std(&pull(|m| m.eer)),
                min_dcf: mean_std(&pull(|m| m.min_dcf)),
                oscr: mean_std(&pull(|m| m.oscr)),
                accuracy: mean_std(&pull(|m| m.accuracy)),
                splits: available.len(),
            })
        };
        report_rows.push(ReportRow {
            id: row.id.clone(),
            label: row.label.clone(),
            flags: row.flags.as_ref().map(SettingFlags::label),
            head: row.head.map(|h| h.to_string()),
            per_split,
            aggregate,
            eer_reduction_vs_baseline: None,
        });
    }

    // Relative EER change against the plain baseline row.
    let baseline_eer = report_rows
        .iter()
        .find(|r| r.id == "baseline")
        .and_then(|r| r.aggregate.as_ref())
        .map(|a| a.eer.mean);
    if let Some(base) = baseline_eer {
        if base > 0.0 {
            for row in report_rows.iter_mut().filter(|r| r.id != "baseline") {
                row.eer_reduction_vs_baseline = row
                    .aggregate
                    .as_ref()
                    .map(|a| (base - a.eer.mean) / base * 100.0);
            }
        }
    }

    let report = ExperimentReport {
        seeds: config.seed_manifest(),
        config,
        splits,
        metrics_files,
        rows: report_rows,
        selection,
        missing,
    };
    write_json_atomic(&report_json_path(run_dir), &report)?;
    let text = render_text(&report);
    crate::ioutil::write_atomic(&report_txt_path(run_dir), |w| w.write_all(text.as_bytes()))
        .map_err(|source| ExperimentError::Io {
            path: report_txt_path(run_dir).display().to_string(),
            source,
        })?;
    Ok(report)
}

fn fmt_pct(m: Option<&MetricSummary>, pick: fn(&MetricSummary) -> MeanStd) -> String {
    match m {
        Some(s) => {
            let v = pick(s);
            format!("{:.3}±{:.3}", v.mean * 100.0, v.std * 100.0)
        }
        None => "-".into(),
    }
}

fn fmt_raw(m: Option<&MetricSummary>, pick: fn(&MetricSummary) -> MeanStd) -> String {
    match m {
        Some(s) => {
            let v = pick(s);
            format!("{:.4}±{:.4}", v.mean, v.std)
        }
        None => "-".into(),
    }
}

/// Aligned-text rendering of a report. Pure function of the report value.
pub fn render_text(report: &ExperimentReport) -> String {
    let mut out = String::new();
    let push = |out: &mut String, line: &str| {
        out.push_str(line);
        out.push('\n');
    };

    push(&mut out, "open-set identification run report");
    push(&mut out, "===================================");
    push(&mut out, "");
    match report.seeds.corpus_seed {
        Some(s) => push(&mut out, &format!("corpus seed     : {s}")),
        None => push(&mut out, "corpus          : imported embeddings"),
    }
    push(
        &mut out,
        &format!("split seed      : {}", report.seeds.split_seed),
    );
    push(
        &mut out,
        &format!("train base seed : {}", report.seeds.train_base_seed),
    );
    push(
        &mut out,
        &format!(
            "pool size       : {} candidates, head {}",
            report.config.train.n_candidates, report.config.head
        ),
    );
    push(
        &mut out,
        &format!(
            "selection       : discard fraction {:.4}, {} rows",
            report.config.discard_fraction,
            if report.config.normalize_gram {
                "unit-normalized"
            } else {
                "raw"
            }
        ),
    );
    let complete = report.splits.iter().filter(|s| s.complete).count();
    push(
        &mut out,
        &format!(
            "splits complete : {complete} of {}",
            report.splits.len()
        ),
    );
    push(&mut out, "");

    // Metric table: EER and accuracy in percent, minDCF and OSCR raw,
    // mean±std over completed splits, EER change relative to baseline.
    push(
        &mut out,
        &format!(
            "{:<26} {:<9} {:<5} {:<15} {:<15} {:<15} {:<15} {:>7}",
            "row", "flags", "head", "EER%", "minDCF", "OSCR", "Acc%", "dEER%"
        ),
    );
    push(
        &mut out,
        &format!(
            "{:-<26} {:-<9} {:-<5} {:-<15} {:-<15} {:-<15} {:-<15} {:-<7}",
            "", "", "", "", "", "", "", ""
        ),
    );
    for row in &report.rows {
        let agg = row.aggregate.as_ref();
        let reduction = match row.eer_reduction_vs_baseline {
            Some(r) => format!("{r:+.1}"),
            None => "-".into(),
        };
        push(
            &mut out,
            &format!(
                "{:<26} {:<9} {:<5} {:<15} {:<15} {:<15} {:<15} {:>7}",
                row.id,
                row.flags.as_deref().unwrap_or("-"),
                row.head.as_deref().unwrap_or("-"),
                fmt_pct(agg, |m| m.eer),
                fmt_raw(agg, |m| m.min_dcf),
                fmt_raw(agg, |m| m.oscr),
                fmt_pct(agg, |m| m.accuracy),
                reduction
            ),
        );
    }
    push(&mut out, "");

    push(&mut out, "rows:");
    for row in &report.rows {
        push(&mut out, &format!("  {:<26} {}", row.id, row.label));
    }
    push(&mut out, "");

    if report.selection.iter().any(Option::is_some) {
        push(&mut out, "selection:");
        for sel in report.selection.iter().flatten() {
            let kept: Vec<String> = sel.kept.iter().map(|i| i.to_string()).collect();
            push(
                &mut out,
                &format!(
                    "  split {}: kept {} of {} [{}]",
                    sel.split_index,
                    sel.kept.len(),
                    sel.total,
                    kept.join(" ")
                ),
            );
        }
        push(&mut out, "");
    }

    let failures: Vec<&SplitStatus> = report.splits.iter().filter(|s| !s.complete).collect();
    if failures.is_empty() {
        push(&mut out, "all splits complete");
    } else {
        push(&mut out, "incomplete splits:");
        for s in failures {
            match &s.failure {
                Some(f) => push(
                    &mut out,
                    &format!("  split {} failed during {}: {}", f.split_index, f.stage, f.error),
                ),
                None => push(
                    &mut out,
                    &format!("  split {}: metrics missing", s.split_index),
                ),
            }
        }
    }
    if !report.missing.is_empty() {
        push(&mut out, "");
        push(&mut out, "missing artifacts:");
        for m in &report.missing {
            push(&mut out, &format!("  {m}"));
        }
    }
    push(&mut out, "");
    push(
        &mut out,
        "per-split metrics live in reports/metrics/split_<k>.json; every number \
         there names the score sheet it was computed from.",
    );
    out
}

/// All seven stages in order. Stages communicate only through the run
/// directory, so this is exactly what running the stage commands one after
/// another produces.
pub fn run_experiment(
    config: &ExperimentConfig,
    run_dir: &Path,
) -> Result<ExperimentReport, ExperimentError> {
    stage_gen(config, run_dir)?;
    stage_train(config, run_dir)?;
    stage_score(config, run_dir)?;
    stage_select(config, run_dir)?;
    stage_fuse(config, run_dir)?;
    stage_eval(config, run_dir)?;
    stage_report(run_dir)
}
