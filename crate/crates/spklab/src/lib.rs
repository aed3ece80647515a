//! A desk-scale laboratory for open-set speaker identification on embedding
//! corpora.
//!
//! The crate generates synthetic speaker-embedding corpora, tunes small MLP
//! adapters with a combined reciprocal-point / normalized-logit objective,
//! scores open-set trials, fuses candidate models at the score level, and
//! selects fusion members by the eigenvalue spread of their learned point
//! sets. Everything is deterministic: a seed pins the corpus, every model,
//! and every report byte.
//!
//! The pipeline, end to end:
//!
//! ```text
//! corpus ──> splits ──> adapter pool ──> score sheets ──> metrics
//!                          │                  │
//!                          └─ spectral        └─ fused sheets (naive /
//!                             diagnostics ──────> selected members)
//! ```
//!
//! Modules follow the pipeline: [`corpus`] makes and stores embeddings,
//! [`adapter`] defines the model, [`objectives`] the losses and their
//! gradients, [`trainer`] the optimization loop and candidate pools,
//! [`scoring`] turns models into trial scores, [`metrics`] evaluates them,
//! [`fusion`] diagnoses, selects and fuses candidates, and [`experiment`]
//! wires the stages into reproducible run directories. [`numeric`] holds the
//! shared deterministic RNG, the symmetric eigensolver, and the
//! finite-difference gradient oracle the tests are built on.

pub mod adapter;
pub mod corpus;
pub mod experiment;
pub mod fusion;
pub mod metrics;
pub mod numeric;
pub mod objectives;
pub mod scoring;
pub mod trainer;

pub(crate) mod ioutil;
pub(crate) mod vecmath;

pub use adapter::{init_model, AdapterConfig, AdapterModel, AdapterOutput};
pub use corpus::{
    generate_corpus, make_splits, read_embeddings, write_embeddings, CorpusConfig,
    EmbeddingRecord, Role, SplitPlan,
};
pub use experiment::{
    load_config, run_experiment, stage_eval, stage_fuse, stage_gen, stage_report, stage_score,
    stage_select, stage_train, CorpusSource, ExperimentConfig, ExperimentError, ExperimentReport,
};
pub use fusion::{
    diagnose_candidate, fuse_detection_only, fuse_scores, select_candidates,
    spearman_correlation, spectral_variance, SelectionResult, SpectralDiagnostics,
    DEFAULT_DISCARD_FRACTION,
};
pub use metrics::{
    compute_acc, compute_eer, compute_min_dcf, compute_oscr, metrics_report, MetricParams,
    MetricsReport,
};
pub use numeric::eigen::{symmetric_eigenvalues, SymmetricMatrix};
pub use numeric::gradcheck::finite_difference_gradient;
pub use numeric::rng::SeededRng;
pub use objectives::{
    baseline_loss_and_grads, combined_loss_and_grads, logitnorm_loss, rpl_loss, BaselineLoss,
    LossBreakdown, ParameterGradients,
};
pub use scoring::{
    baseline_score_trials, build_trials, enroll_centroids, score_trials, HeadKind, ScoreSheet,
    ScoreSource, Trial, TrialScore,
};
pub use trainer::{
    train_candidate, train_pool, CandidateRecord, LossKind, SettingFlags, TrainConfig,
    TrainingSet,
};

// Book chapters double as doc-tests so the guide cannot drift from the API.
// `cargo test --doc` compiles and runs every fenced Rust block in book/src.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/corpus.md")]
    mod corpus {}
    #[doc = include_str!("../../../book/src/adapter.md")]
    mod adapter {}
    #[doc = include_str!("../../../book/src/objective.md")]
    mod objective {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/scoring-and-metrics.md")]
    mod scoring_and_metrics {}
    #[doc = include_str!("../../../book/src/fusion-and-selection.md")]
    mod fusion_and_selection {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
