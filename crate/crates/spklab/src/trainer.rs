//! Few-shot adapter training: Adam over minibatches, candidate pools.
//!
//! A *candidate* is one adapter trained from one seed; a *pool* is
//! `n_candidates` of them trained from consecutive seeds on identical data.
//! Pool members differ only in initialization and shuffle order, which is
//! exactly the diversity the downstream fusion stage feeds on.
//!
//! Determinism contract: a candidate is a pure function of
//! `(TrainConfig, TrainingSet, index)`. Candidates never share state, so a
//! pool trains to bit-identical parameters whether it runs on one worker
//! thread or many.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{init_model, AdapterConfig, AdapterError, AdapterModel};
use crate::corpus::{EmbeddingRecord, Role, SplitPlan};
use crate::numeric::rng::SeededRng;
use crate::objectives::{
    accumulate_combined, accumulate_prototype_batch, accumulate_softmax_family, BaselineLoss,
    LossBreakdown, ObjectiveError, ParameterGradients, Workspace,
};

/// XOR'd into the candidate seed for the shuffle stream so that batch order
/// is decorrelated from weight initialization (which consumes the raw seed).
const SHUFFLE_STREAM: u64 = 0xD1B5_4A32_D192_ED03;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("invalid training configuration: {0}")]
    BadConfig(String),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("class {class_id} has no training samples under the current flags")]
    EmptyClass { class_id: String },
    #[error(
        "loss became non-finite at epoch {epoch}, batch {batch} (value {value}); \
         lower the learning rate or the initialization scale"
    )]
    NonFiniteLoss { epoch: usize, batch: usize, value: f64 },
}

/// Which objective a candidate trains.
///
/// `Combined` is the reciprocal-point + normalized-logit objective; the rest
/// are the reference losses used for comparison rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LossKind {
    Combined,
    Softmax,
    AmSoftmax { scale: f64, margin: f64 },
    AamSoftmax { scale: f64, margin: f64 },
    Prototype,
}

impl Default for LossKind {
    fn default() -> Self {
        LossKind::Combined
    }
}

impl LossKind {
    pub fn is_combined(&self) -> bool {
        matches!(self, LossKind::Combined)
    }

    /// The reference-loss equivalent, if this is not the combined objective.
    pub fn baseline(&self) -> Option<BaselineLoss> {
        match self {
            LossKind::Combined => None,
            LossKind::Softmax => Some(BaselineLoss::Softmax),
            LossKind::AmSoftmax { scale, margin } => Some(BaselineLoss::AmSoftmax {
                scale: *scale,
                margin: *margin,
            }),
            LossKind::AamSoftmax { scale, margin } => Some(BaselineLoss::AamSoftmax {
                scale: *scale,
                margin: *margin,
            }),
            LossKind::Prototype => Some(BaselineLoss::Prototype),
        }
    }

    /// Short name for reports.
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Combined => "combined",
            LossKind::Softmax => "softmax",
            LossKind::AmSoftmax { .. } => "am-softmax",
            LossKind::AamSoftmax { .. } => "aam-softmax",
            LossKind::Prototype => "prototype",
        }
    }
}

/// The four experiment toggles. Every toggle changes what a *single*
/// candidate sees or does; fusion additionally changes what the experiment
/// stage reports.
///
/// * `target_aug` — include augmentation records of the enrolled targets in
///   training.
/// * `synthetic_unknowns` — include synthetic-unknown speakers as extra
///   labeled classes.
/// * `adaptive_anchors` — give the reciprocal-point set its extra unlabeled
///   rows (off forces the anchor count to zero).
/// * `fusion` — report score-fused model combinations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SettingFlags {
    pub target_aug: bool,
    pub synthetic_unknowns: bool,
    pub adaptive_anchors: bool,
    pub fusion: bool,
}

impl Default for SettingFlags {
    fn default() -> Self {
        SettingFlags {
            target_aug: true,
            synthetic_unknowns: true,
            adaptive_anchors: true,
            fusion: true,
        }
    }
}

impl SettingFlags {
    /// Compact row label, e.g. `T+U+A+F-`.
    pub fn label(&self) -> String {
        let sign = |b: bool| if b { '+' } else { '-' };
        format!(
            "T{}U{}A{}F{}",
            sign(self.target_aug),
            sign(self.synthetic_unknowns),
            sign(self.adaptive_anchors),
            sign(self.fusion)
        )
    }
}

fn default_epochs() -> usize {
    50
}
fn default_batch_size() -> usize {
    64
}
fn default_learning_rate() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_hidden_dim() -> usize {
    256
}
fn default_init_scale() -> f64 {
    0.1
}
fn default_delta_init() -> f64 {
    1.0
}
fn default_anchor_count() -> usize {
    50
}
fn default_n_candidates() -> usize {
    30
}

/// Everything that shapes one training run. JSON keys equal field names;
/// omitted keys take the defaults shown on each field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Passes over the training set. Default 50.
    pub epochs: usize,
    /// Minibatch size (the last batch of an epoch may be smaller). Default 64.
    pub batch_size: usize,
    /// Adam step size. Default 1e-3.
    pub learning_rate: f64,
    /// Adam first-moment decay. Default 0.9.
    pub beta1: f64,
    /// Adam second-moment decay. Default 0.999.
    pub beta2: f64,
    /// Adam denominator floor. Default 1e-8.
    pub adam_eps: f64,
    /// Decoupled L2 decay on the weight matrices (w1, w2, R, C); biases and
    /// the margin are never decayed. Default 0.
    pub weight_decay: f64,
    /// Trunk hidden width. Default 256.
    pub hidden_dim: usize,
    /// Projected dimension; defaults to the input dimension when omitted.
    pub output_dim: Option<usize>,
    /// Initialization scale for all weight matrices. Default 0.1.
    pub init_scale: f64,
    /// Initial margin (the hinge radius is a trained parameter). Default 1.
    pub delta_init: f64,
    /// Objective to train. Default: the combined objective.
    pub loss: LossKind,
    /// Experiment toggles. Default: all on.
    pub flags: SettingFlags,
    /// Adaptive reciprocal rows per model (ignored — forced to zero — when
    /// `flags.adaptive_anchors` is off). Default 50.
    pub anchor_count: usize,
    /// Candidate `i` trains from seed `base_seed + i`. Default 0.
    pub base_seed: u64,
    /// Pool size. Default 30.
    pub n_candidates: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            learning_rate: default_learning_rate(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            adam_eps: default_adam_eps(),
            weight_decay: 0.0,
            hidden_dim: default_hidden_dim(),
            output_dim: None,
            init_scale: default_init_scale(),
            delta_init: default_delta_init(),
            loss: LossKind::default(),
            flags: SettingFlags::default(),
            anchor_count: default_anchor_count(),
            base_seed: 0,
            n_candidates: default_n_candidates(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::BadConfig("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(TrainError::BadConfig(format!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        for (name, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(TrainError::BadConfig(format!(
                    "{name} must lie in [0, 1), got {beta}"
                )));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(TrainError::BadConfig("adam_eps must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(TrainError::BadConfig(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.n_candidates == 0 {
            return Err(TrainError::BadConfig(
                "n_candidates must be positive".into(),
            ));
        }
        if let Some(b) = self.loss.baseline() {
            b.validate()?;
        }
        Ok(())
    }

    /// Anchor rows actually used: the adaptive-anchor flag gates the count.
    pub fn effective_anchor_count(&self) -> usize {
        if self.flags.adaptive_anchors {
            self.anchor_count
        } else {
            0
        }
    }
}

/// One labeled training vector.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub vector: Vec<f64>,
    pub label: usize,
}

/// The labeled material one candidate trains on, assembled from a corpus
/// and a split plan under the experiment flags.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    /// Class index -> speaker id: the split's targets in plan order, then
    /// (if synthetic unknowns are enabled) the synthetic speakers in corpus
    /// order.
    pub class_ids: Vec<String>,
    /// How many of `class_ids` are targets (the rest are synthetic).
    pub n_targets: usize,
    pub samples: Vec<TrainSample>,
    /// Per-class sample vectors; the prototype loss reads these as supports.
    pub supports_by_class: Vec<Vec<Vec<f64>>>,
    pub input_dim: usize,
}

impl TrainingSet {
    /// Collect training material for a split. Enrollment records of the
    /// split's targets are always included; augmentation records join when
    /// `flags.target_aug`, and synthetic-unknown speakers become additional
    /// classes when `flags.synthetic_unknowns`. Test records never do.
    pub fn from_split(
        records: &[EmbeddingRecord],
        plan: &SplitPlan,
        flags: &SettingFlags,
    ) -> Result<Self, TrainError> {
        let mut class_ids: Vec<String> = plan.target_ids.clone();
        if flags.synthetic_unknowns {
            for rec in records {
                if rec.role == Role::SyntheticUnknown
                    && !class_ids.iter().any(|id| id == &rec.speaker_id)
                {
                    class_ids.push(rec.speaker_id.clone());
                }
            }
        }
        let n_targets = plan.target_ids.len();
        let class_of = |id: &str| class_ids.iter().position(|c| c == id);

        let mut samples = Vec::new();
        for rec in records {
            let include = match rec.role {
                Role::TargetEnroll => true,
                Role::TargetAug => flags.target_aug,
                Role::SyntheticUnknown => flags.synthetic_unknowns,
                Role::TargetTest | Role::UnknownTest => false,
            };
            if !include {
                continue;
            }
            // Enrollment/augmentation records of non-split speakers are
            // other splits' material, not this one's.
            let Some(label) = class_of(&rec.speaker_id) else {
                continue;
            };
            if rec.role != Role::SyntheticUnknown && label >= n_targets {
                continue;
            }
            samples.push(TrainSample {
                vector: rec.vector.clone(),
                label,
            });
        }
        if samples.is_empty() {
            return Err(TrainError::EmptyTrainingSet);
        }
        let input_dim = samples[0].vector.len();

        let mut supports_by_class: Vec<Vec<Vec<f64>>> = vec![Vec::new(); class_ids.len()];
        for s in &samples {
            supports_by_class[s.label].push(s.vector.clone());
        }
        for (label, class) in supports_by_class.iter().enumerate() {
            if class.is_empty() {
                return Err(TrainError::EmptyClass {
                    class_id: class_ids[label].clone(),
                });
            }
        }
        Ok(TrainingSet {
            class_ids,
            n_targets,
            samples,
            supports_by_class,
            input_dim,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.class_ids.len()
    }
}

/// Provenance and loss trace of one trained candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    /// Position in the pool; also the seed offset.
    pub index: usize,
    /// The exact seed this candidate initialized from.
    pub seed: u64,
    /// Objective trained.
    pub loss_kind: LossKind,
    /// Flags in effect.
    pub flags: SettingFlags,
    /// Mean per-sample loss over the final epoch. For reference losses the
    /// whole objective is recorded in `l_logitnorm` with `l_rpl = 0`, so
    /// `l_total = l_rpl + l_logitnorm` stays exact everywhere.
    pub final_loss: LossBreakdown,
    /// Mean per-sample total loss, one entry per epoch.
    pub epoch_losses: Vec<f64>,
}

struct AdamState {
    m: ParameterGradients,
    v: ParameterGradients,
    step: u64,
}

impl AdamState {
    fn new(model: &AdapterModel) -> Self {
        AdamState {
            m: ParameterGradients::zeros_like(model),
            v: ParameterGradients::zeros_like(model),
            step: 0,
        }
    }

    /// One Adam step with bias correction. `decay` applies (decoupled) to
    /// weight matrices only — never to biases or the margin.
    fn apply(&mut self, model: &mut AdapterModel, grads: &ParameterGradients, cfg: &TrainConfig) {
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        let lr = cfg.learning_rate;
        let (b1, b2, eps) = (cfg.beta1, cfg.beta2, cfg.adam_eps);
        let mut update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64, decay: f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * (m_hat / (v_hat.sqrt() + eps) + decay * *p);
        };
        let matrices = |p: &mut Vec<Vec<f64>>,
                            g: &Vec<Vec<f64>>,
                            m: &mut Vec<Vec<f64>>,
                            v: &mut Vec<Vec<f64>>,
                            update: &mut dyn FnMut(&mut f64, f64, &mut f64, &mut f64, f64),
                            decay: f64| {
            for (((pr, gr), mr), vr) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                for (((p, g), m), v) in pr.iter_mut().zip(gr).zip(mr.iter_mut()).zip(vr.iter_mut())
                {
                    update(p, *g, m, v, decay);
                }
            }
        };
        let wd = cfg.weight_decay;
        matrices(&mut model.w1, &grads.w1, &mut self.m.w1, &mut self.v.w1, &mut update, wd);
        matrices(&mut model.w2, &grads.w2, &mut self.m.w2, &mut self.v.w2, &mut update, wd);
        matrices(
            &mut model.reciprocal_points,
            &grads.reciprocal_points,
            &mut self.m.reciprocal_points,
            &mut self.v.reciprocal_points,
            &mut update,
            wd,
        );
        matrices(
            &mut model.center_points,
            &grads.center_points,
            &mut self.m.center_points,
            &mut self.v.center_points,
            &mut update,
            wd,
        );
        for ((p, g), (m, v)) in model
            .b1
            .iter_mut()
            .zip(&grads.b1)
            .zip(self.m.b1.iter_mut().zip(self.v.b1.iter_mut()))
        {
            update(p, *g, m, v, 0.0);
        }
        for ((p, g), (m, v)) in model
            .b2
            .iter_mut()
            .zip(&grads.b2)
            .zip(self.m.b2.iter_mut().zip(self.v.b2.iter_mut()))
        {
            update(p, *g, m, v, 0.0);
        }
        update(
            &mut model.margin,
            grads.margin,
            &mut self.m.margin,
            &mut self.v.margin,
            0.0,
        );
        // The hinge radius is a distance; optimization must not push it
        // below zero.
        if model.margin < 0.0 {
            model.margin = 0.0;
        }
    }
}

/// Train candidate `index` of the pool: seed `base_seed + index`, Adam over
/// shuffled minibatches with mean-per-batch gradients.
///
/// After a prototype-loss run the center-point rows are overwritten with the
/// class prototypes (projected support means), so that center-point scoring
/// and diagnostics evaluate what the loss actually optimized; the trunk is
/// untouched.
pub fn train_candidate(
    config: &TrainConfig,
    set: &TrainingSet,
    index: usize,
) -> Result<(AdapterModel, CandidateRecord), TrainError> {
    config.validate()?;
    if set.samples.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let seed = config.base_seed + index as u64;
    let adapter_config = AdapterConfig {
        input_dim: set.input_dim,
        hidden_dim: config.hidden_dim,
        output_dim: config.output_dim.unwrap_or(set.input_dim),
        labeled_classes: set.n_classes(),
        adaptive_points: config.effective_anchor_count(),
        init_scale: config.init_scale,
        delta_init: config.delta_init,
    };
    let mut model = init_model(&adapter_config, seed)?;
    let mut adam = AdamState::new(&model);
    let mut grads = ParameterGradients::zeros_like(&model);
    let mut ws = Workspace::default();
    let mut shuffle_rng = SeededRng::new(seed ^ SHUFFLE_STREAM);
    let baseline = config.loss.baseline();

    let n = set.samples.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut final_rpl_sum = 0.0;
    let mut final_ln_sum = 0.0;
    let mut proto_batch: Vec<(&[f64], usize)> = Vec::new();

    for epoch in 0..config.epochs {
        shuffle_rng.shuffle(&mut order);
        let mut epoch_rpl = 0.0;
        let mut epoch_ln = 0.0;
        for (batch_idx, batch) in order.chunks(config.batch_size).enumerate() {
            grads.zero();
            let mut batch_rpl = 0.0;
            let mut batch_ln = 0.0;
            match &baseline {
                None => {
                    for &i in batch {
                        let sample = &set.samples[i];
                        let bd = accumulate_combined(
                            &model,
                            &sample.vector,
                            sample.label,
                            &mut grads,
                            &mut ws,
                        );
                        batch_rpl += bd.l_rpl;
                        batch_ln += bd.l_logitnorm;
                    }
                }
                Some(BaselineLoss::Prototype) => {
                    proto_batch.clear();
                    proto_batch.extend(
                        batch
                            .iter()
                            .map(|&i| (set.samples[i].vector.as_slice(), set.samples[i].label)),
                    );
                    batch_ln += accumulate_prototype_batch(
                        &model,
                        &proto_batch,
                        &set.supports_by_class,
                        &mut grads,
                        &mut ws,
                    )?;
                }
                Some(loss) => {
                    for &i in batch {
                        let sample = &set.samples[i];
                        batch_ln += accumulate_softmax_family(
                            &model,
                            &sample.vector,
                            sample.label,
                            loss,
                            &mut grads,
                            &mut ws,
                        )?;
                    }
                }
            }
            let batch_total = batch_rpl + batch_ln;
            if !batch_total.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                    value: batch_total,
                });
            }
            grads.scale(1.0 / batch.len() as f64);
            adam.apply(&mut model, &grads, config);
            epoch_rpl += batch_rpl;
            epoch_ln += batch_ln;
        }
        epoch_losses.push((epoch_rpl + epoch_ln) / n as f64);
        if epoch + 1 == config.epochs {
            final_rpl_sum = epoch_rpl;
            final_ln_sum = epoch_ln;
        }
    }

    if matches!(baseline, Some(BaselineLoss::Prototype)) {
        bake_prototype_centers(&mut model, &set.supports_by_class);
    }

    let record = CandidateRecord {
        index,
        seed,
        loss_kind: config.loss.clone(),
        flags: config.flags,
        final_loss: {
            let l_rpl = final_rpl_sum / n as f64;
            let l_ln = final_ln_sum / n as f64;
            LossBreakdown {
                l_rpl,
                l_logitnorm: l_ln,
                l_total: l_rpl + l_ln,
            }
        },
        epoch_losses,
    };
    Ok((model, record))
}

/// Replace each center-point row with its class prototype: the mean of the
/// class supports projected through the (frozen, already-trained) trunk.
fn bake_prototype_centers(model: &mut AdapterModel, supports_by_class: &[Vec<Vec<f64>>]) {
    let out_dim = model.config.output_dim;
    for (c, supports) in supports_by_class.iter().enumerate() {
        let mut proto = vec![0.0; out_dim];
        for s in supports {
            let out = model.forward(s);
            for (p, e) in proto.iter_mut().zip(&out.projected) {
                *p += e / supports.len() as f64;
            }
        }
        model.center_points[c] = proto;
    }
}

/// Train the whole pool. Candidates are independent, so this parallelizes
/// over workers without changing a single bit of any result; the returned
/// order is always pool order.
pub fn train_pool(
    config: &TrainConfig,
    set: &TrainingSet,
) -> Result<Vec<(AdapterModel, CandidateRecord)>, TrainError> {
    config.validate()?;
    (0..config.n_candidates)
        .into_par_iter()
        .map(|i| train_candidate(config, set, i))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, make_splits, CorpusConfig};
    use crate::vecmath;

    fn small_corpus() -> (Vec<EmbeddingRecord>, Vec<SplitPlan>) {
        let cfg = CorpusConfig {
            dim: 8,
            n_target_speakers: 6,
            n_unknown_test_speakers: 2,
            n_synthetic_unknown_speakers: 3,
            enroll_per_target: 6,
            test_per_speaker: 3,
            aug_per_target: 4,
            cluster_separation: 4.0,
            within_noise: 0.4,
            aug_noise: None,
            synthetic_per_speaker: None,
            seed: 99,
        };
        let records = generate_corpus(&cfg).unwrap();
        let plans = make_splits(&records, 2, 3, 100).unwrap();
        (records, plans)
    }

    fn quick_config() -> TrainConfig {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            learning_rate: 3e-3,
            hidden_dim: 16,
            output_dim: Some(8),
            anchor_count: 7,
            n_candidates: 3,
            base_seed: 5000,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_set_honors_flags() {
        let (records, plans) = small_corpus();
        let plan = &plans[0];

        let all = SettingFlags::default();
        let set = TrainingSet::from_split(&records, plan, &all).unwrap();
        assert_eq!(set.n_targets, 3);
        assert_eq!(set.n_classes(), 3 + 3, "targets plus synthetic classes");
        // 3 targets * (6 enroll + 4 aug) + 3 synthetic * 6 samples.
        assert_eq!(set.samples.len(), 3 * 10 + 3 * 6);
        // Synthetic labels sit after the targets.
        for s in &set.samples {
            if set.class_ids[s.label].starts_with("synth") {
                assert!(s.label >= set.n_targets);
            } else {
                assert!(s.label < set.n_targets);
            }
        }

        let no_aug = SettingFlags {
            target_aug: false,
            ..all
        };
        let set = TrainingSet::from_split(&records, plan, &no_aug).unwrap();
        assert_eq!(set.samples.len(), 3 * 6 + 3 * 6);

        let bare = SettingFlags {
            target_aug: false,
            synthetic_unknowns: false,
            ..all
        };
        let set = TrainingSet::from_split(&records, plan, &bare).unwrap();
        assert_eq!(set.n_classes(), 3);
        assert_eq!(set.samples.len(), 3 * 6);
        // Supports mirror the samples class by class.
        for (c, class) in set.supports_by_class.iter().enumerate() {
            assert_eq!(
                class.len(),
                set.samples.iter().filter(|s| s.label == c).count()
            );
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (records, plans) = small_corpus();
        let set = TrainingSet::from_split(&records, &plans[0], &SettingFlags::default()).unwrap();
        let cfg = quick_config();
        let (m1, r1) = train_candidate(&cfg, &set, 2).unwrap();
        let (m2, r2) = train_candidate(&cfg, &set, 2).unwrap();
        assert_eq!(m1.flatten(), m2.flatten(), "training must be bit-stable");
        assert_eq!(r1.epoch_losses, r2.epoch_losses);
        assert_eq!(r1.seed, cfg.base_seed + 2);
        // A different candidate index lands on different parameters.
        let (m3, _) = train_candidate(&cfg, &set, 0).unwrap();
        assert_ne!(m1.flatten(), m3.flatten());
    }

    #[test]
    fn pool_matches_sequential_training() {
        // train_pool runs candidates on however many workers rayon has;
        // results must equal the strictly sequential loop bit for bit.
        let (records, plans) = small_corpus();
        let set = TrainingSet::from_split(&records, &plans[0], &SettingFlags::default()).unwrap();
        let cfg = quick_config();
        let pool = train_pool(&cfg, &set).unwrap();
        assert_eq!(pool.len(), cfg.n_candidates);
        for (i, (model, record)) in pool.iter().enumerate() {
            let (m_seq, r_seq) = train_candidate(&cfg, &set, i).unwrap();
            assert_eq!(model.flatten(), m_seq.flatten());
            assert_eq!(record.epoch_losses, r_seq.epoch_losses);
            assert_eq!(record.index, i);
        }
    }

    #[test]
    fn loss_decreases_and_classes_separate() {
        let (records, plans) = small_corpus();
        let set = TrainingSet::from_split(&records, &plans[0], &SettingFlags::default()).unwrap();
        let cfg = quick_config();
        let (model, record) = train_candidate(&cfg, &set, 0).unwrap();

        let head: f64 = record.epoch_losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 =
            record.epoch_losses[record.epoch_losses.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(
            tail < head,
            "trailing mean loss {tail} should undercut leading mean {head}"
        );
        assert_eq!(
            record.final_loss.l_total,
            record.final_loss.l_rpl + record.final_loss.l_logitnorm
        );

        // Well-separated clusters should be fully learned: every training
        // sample lands on its own class by center-point logits.
        let correct = set
            .samples
            .iter()
            .filter(|s| {
                let out = model.forward(&s.vector);
                vecmath::argmax(&out.cp_logits) == s.label
            })
            .count();
        assert_eq!(correct, set.samples.len(), "training accuracy below 100%");
    }

    #[test]
    fn anchor_flag_gates_reciprocal_rows() {
        let (records, plans) = small_corpus();
        let set = TrainingSet::from_split(&records, &plans[0], &SettingFlags::default()).unwrap();
        let mut cfg = quick_config();
        cfg.epochs = 2;
        let (with_anchors, _) = train_candidate(&cfg, &set, 0).unwrap();
        assert_eq!(
            with_anchors.reciprocal_points.len() - with_anchors.center_points.len(),
            cfg.anchor_count
        );
        cfg.flags.adaptive_anchors = false;
        let (without, _) = train_candidate(&cfg, &set, 0).unwrap();
        assert_eq!(without.reciprocal_points.len(), without.center_points.len());
    }

    #[test]
    fn margin_never_goes_negative() {
        let (records, plans) = small_corpus();
        let set = TrainingSet::from_split(&records, &plans[0], &SettingFlags::default()).unwrap();
        let mut cfg = quick_config();
        // A tiny initial margin plus a large step invites negative values;
        // the clamp must hold the trained margin at or above zero.
        cfg.delta_init = 0.01;
        cfg.learning_rate = 5e-2;
        cfg.epochs = 10;
        let (model, _) = train_candidate(&cfg, &set, 1).unwrap();
        assert!(model.margin >= 0.0, "margin {} went negative", model.margin);
    }

    #[test]
    fn reference_losses_train_and_record_single_component() {
        let (records, plans) = small_corpus();
        let set = TrainingSet::from_split(&records, &plans[0], &SettingFlags::default()).unwrap();
        let losses = [
            LossKind::Softmax,
            LossKind::AmSoftmax {
                scale: 30.0,
                margin: 0.2,
            },
            LossKind::AamSoftmax {
                scale: 30.0,
                margin: 0.1,
            },
            LossKind::Prototype,
        ];
        for loss in losses {
            let cfg = TrainConfig {
                loss: loss.clone(),
                epochs: 8,
                ..quick_config()
            };
            let (model, record) = train_candidate(&cfg, &set, 0).unwrap();
            assert_eq!(record.final_loss.l_rpl, 0.0, "{loss:?}");
            assert_eq!(record.final_loss.l_total, record.final_loss.l_logitnorm);
            assert!(
                record.epoch_losses.last().unwrap() < record.epoch_losses.first().unwrap(),
                "{loss:?} failed to reduce its loss"
            );
            assert!(model.flatten().iter().all(|p| p.is_finite()));

            if loss == LossKind::Prototype {
                // Center rows must equal the class prototypes after baking.
                for (c, supports) in set.supports_by_class.iter().enumerate() {
                    let mut proto = vec![0.0; model.config.output_dim];
                    for s in supports {
                        let out = model.forward(s);
                        for (p, e) in proto.iter_mut().zip(&out.projected) {
                            *p += e / supports.len() as f64;
                        }
                    }
                    assert_eq!(model.center_points[c], proto);
                }
            }
        }
    }

    #[test]
    fn config_validation_and_json_defaults() {
        let cfg: TrainConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, TrainConfig::default());
        assert_eq!(cfg.epochs, 50);
        assert_eq!(cfg.anchor_count, 50);
        assert!(cfg.loss.is_combined());
        assert!(cfg.flags.fusion);

        let parsed: TrainConfig = serde_json::from_str(
            r#"{"loss": {"kind": "am-softmax", "scale": 30.0, "margin": 0.2},
                "flags": {"adaptive_anchors": false}}"#,
        )
        .unwrap();
        assert_eq!(
            parsed.loss,
            LossKind::AmSoftmax {
                scale: 30.0,
                margin: 0.2
            }
        );
        assert!(!parsed.flags.adaptive_anchors);
        assert!(parsed.flags.target_aug, "unset flags keep their defaults");
        assert_eq!(parsed.effective_anchor_count(), 0);

        assert!(serde_json::from_str::<TrainConfig>(r#"{"learning_rate": "fast"}"#).is_err());
        assert!(serde_json::from_str::<TrainConfig>(r#"{"typo_field": 1}"#).is_err());

        let bad = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(TrainError::BadConfig(_))));
    }

    #[test]
    fn flag_labels_read_correctly() {
        assert_eq!(SettingFlags::default().label(), "T+U+A+F+");
        let off = SettingFlags {
            target_aug: false,
            synthetic_unknowns: false,
            adaptive_anchors: false,
            fusion: false,
        };
        assert_eq!(off.label(), "T-U-A-F-");
    }
}
