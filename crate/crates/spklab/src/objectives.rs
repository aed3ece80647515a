//! Training objectives and their exact analytic gradients.
//!
//! The primary objective is a sum of two branches sharing the MLP trunk:
//!
//! * a reciprocal-point term: cross-entropy over logits `-emb.R_k` for every
//!   `R` row (labeled classes *and* adaptive rows), plus a hinge
//!   `max(‖emb - R_y‖ - margin, 0)` confining the labeled class's embedding
//!   to a ball around its reciprocal point;
//! * a normalized-logit term: cross-entropy over `z/‖z‖` where
//!   `z_k = emb.C_k`, which removes the confidence-inflating freedom to
//!   scale logits.
//!
//! Four reference losses (plain softmax, additive-margin softmax,
//! additive-angular-margin softmax, and prototype cross-entropy) share the
//! same trunk and gradient plumbing so they can be swapped in for
//! comparison rows.
//!
//! Every gradient here is the exact derivative of the loss as implemented —
//! including the paths through logit normalization, the margin hinge, and
//! (for the prototype loss) the support-set projections that define each
//! prototype. The test suite holds all of them to finite-difference
//! agreement at relative error < 1e-5.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::AdapterModel;
use crate::vecmath;

/// Below this L2 norm a logit vector is treated as directionless: the
/// normalized-logit loss falls back to `ln(K)` (the uniform posterior) and
/// contributes zero gradient.
pub const DEGENERATE_LOGIT_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("embedding projects to a zero-norm vector; cosine-based losses are undefined")]
    ZeroNormEmbedding,
    #[error("class row {class} has zero norm; cosine-based losses are undefined")]
    ZeroNormClassRow { class: usize },
    #[error("invalid loss parameters: {0}")]
    BadLossParams(String),
    #[error("class {class} has no support samples for the prototype loss")]
    EmptySupport { class: usize },
}

/// The two branches of the combined objective and their sum.
///
/// `l_total = l_rpl + l_logitnorm` holds exactly (same additions, no
/// re-derivation). All components are finite and non-negative for finite
/// inputs. When a reference loss is trained instead of the combined one, the
/// whole objective is recorded in `l_logitnorm` with `l_rpl = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_rpl: f64,
    pub l_logitnorm: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    fn new(l_rpl: f64, l_logitnorm: f64) -> Self {
        LossBreakdown {
            l_rpl,
            l_logitnorm,
            l_total: l_rpl + l_logitnorm,
        }
    }
}

/// Gradients with the same shapes as the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterGradients {
    pub w1: Vec<Vec<f64>>,
    pub b1: Vec<f64>,
    pub w2: Vec<Vec<f64>>,
    pub b2: Vec<f64>,
    pub reciprocal_points: Vec<Vec<f64>>,
    pub center_points: Vec<Vec<f64>>,
    pub margin: f64,
}

fn zeros_matrix(rows: usize, cols: usize) -> Vec<Vec<f64>> {
    vec![vec![0.0; cols]; rows]
}

impl ParameterGradients {
    pub fn zeros_like(model: &AdapterModel) -> Self {
        let c = &model.config;
        ParameterGradients {
            w1: zeros_matrix(c.hidden_dim, c.input_dim),
            b1: vec![0.0; c.hidden_dim],
            w2: zeros_matrix(c.output_dim, c.hidden_dim),
            b2: vec![0.0; c.output_dim],
            reciprocal_points: zeros_matrix(model.n_reciprocal(), c.output_dim),
            center_points: zeros_matrix(c.labeled_classes, c.output_dim),
            margin: 0.0,
        }
    }

    /// Reset every entry to zero (for per-batch reuse without reallocating).
    pub fn zero(&mut self) {
        let zero_matrix = |m: &mut Vec<Vec<f64>>| {
            for row in m {
                for v in row {
                    *v = 0.0;
                }
            }
        };
        zero_matrix(&mut self.w1);
        zero_matrix(&mut self.w2);
        zero_matrix(&mut self.reciprocal_points);
        zero_matrix(&mut self.center_points);
        self.b1.iter_mut().for_each(|v| *v = 0.0);
        self.b2.iter_mut().for_each(|v| *v = 0.0);
        self.margin = 0.0;
    }

    /// Multiply every entry by `s` (e.g. 1/batch-size for a mean gradient).
    pub fn scale(&mut self, s: f64) {
        let scale_matrix = |m: &mut Vec<Vec<f64>>| {
            for row in m {
                for v in row {
                    *v *= s;
                }
            }
        };
        scale_matrix(&mut self.w1);
        scale_matrix(&mut self.w2);
        scale_matrix(&mut self.reciprocal_points);
        scale_matrix(&mut self.center_points);
        self.b1.iter_mut().for_each(|v| *v *= s);
        self.b2.iter_mut().for_each(|v| *v *= s);
        self.margin *= s;
    }

    /// Flatten in the model's parameter order
    /// (`w1, b1, w2, b2, reciprocal_points, center_points, margin`), so the
    /// result aligns index-by-index with [`AdapterModel::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for row in &self.w1 {
            out.extend_from_slice(row);
        }
        out.extend_from_slice(&self.b1);
        for row in &self.w2 {
            out.extend_from_slice(row);
        }
        out.extend_from_slice(&self.b2);
        for row in &self.reciprocal_points {
            out.extend_from_slice(row);
        }
        for row in &self.center_points {
            out.extend_from_slice(row);
        }
        out.push(self.margin);
        out
    }
}

/// Scratch buffers for the per-sample loss/gradient kernels, reused across
/// samples so the training inner loop never allocates.
#[derive(Debug, Default)]
pub(crate) struct Workspace {
    pub hidden_pre: Vec<f64>,
    pub hidden: Vec<f64>,
    pub projected: Vec<f64>,
    pub rp_logits: Vec<f64>,
    pub cp_logits: Vec<f64>,
    /// Softmax probabilities (reciprocal-point branch, or active loss).
    p: Vec<f64>,
    /// Softmax probabilities over normalized logits.
    q: Vec<f64>,
    /// Normalized logits z/‖z‖.
    zt: Vec<f64>,
    /// Gradient w.r.t. raw cp logits.
    gz: Vec<f64>,
    /// Gradient w.r.t. the projected embedding.
    de: Vec<f64>,
    /// Gradient w.r.t. hidden activations (taken in/out of the workspace).
    dh: Vec<f64>,
    /// Per-class cosine values (margin-softmax losses).
    cosines: Vec<f64>,
    /// Working logits for margin-softmax / prototype losses.
    logits: Vec<f64>,
    scratch: Vec<f64>,
}

/// Run the trunk and both logit families into the workspace buffers.
pub(crate) fn forward_into(model: &AdapterModel, embedding: &[f64], ws: &mut Workspace) {
    assert_eq!(
        embedding.len(),
        model.config.input_dim,
        "embedding dim {} does not match adapter input dim {}",
        embedding.len(),
        model.config.input_dim
    );
    ws.hidden_pre.clear();
    ws.hidden_pre.extend(
        model
            .w1
            .iter()
            .zip(&model.b1)
            .map(|(row, b)| vecmath::dot(row, embedding) + b),
    );
    ws.hidden.clear();
    ws.hidden.extend(ws.hidden_pre.iter().map(|h| h.max(0.0)));
    ws.projected.clear();
    ws.projected.extend(
        model
            .w2
            .iter()
            .zip(&model.b2)
            .map(|(row, b)| vecmath::dot(row, &ws.hidden) + b),
    );
    ws.rp_logits.clear();
    ws.rp_logits.extend(
        model
            .reciprocal_points
            .iter()
            .map(|r| -vecmath::dot(&ws.projected, r)),
    );
    ws.cp_logits.clear();
    ws.cp_logits.extend(
        model
            .center_points
            .iter()
            .map(|c| vecmath::dot(&ws.projected, c)),
    );
}

/// Backpropagate a gradient w.r.t. the projected embedding through the
/// trunk at input `x`, accumulating into `grads`. `hidden_pre`/`hidden` are
/// the activations recorded on the forward pass at `x`.
fn backprop_trunk_at(
    model: &AdapterModel,
    x: &[f64],
    hidden_pre: &[f64],
    hidden: &[f64],
    de: &[f64],
    dh: &mut Vec<f64>,
    grads: &mut ParameterGradients,
) {
    vecmath::add_scaled(&mut grads.b2, de, 1.0);
    dh.clear();
    dh.resize(hidden.len(), 0.0);
    for (i, &g) in de.iter().enumerate() {
        vecmath::add_scaled(&mut grads.w2[i], hidden, g);
        vecmath::add_scaled(dh, &model.w2[i], g);
    }
    // ReLU gate: the subgradient at exactly zero pre-activation is zero.
    for (j, &pre) in hidden_pre.iter().enumerate() {
        if pre <= 0.0 {
            dh[j] = 0.0;
        }
    }
    vecmath::add_scaled(&mut grads.b1, dh, 1.0);
    for (j, &g) in dh.iter().enumerate() {
        vecmath::add_scaled(&mut grads.w1[j], x, g);
    }
}

/// Reciprocal-point loss for one projected embedding: cross-entropy of
/// `softmax(-emb.R_k)` over **all** rows of `R` (adaptive rows included in
/// the denominator) at the labeled class `label`, plus the margin hinge
/// `max(‖emb - R_label‖ - margin, 0)`.
///
/// # Panics
/// If `label >= labeled_classes` (labels never point at adaptive rows) or
/// `labeled_classes > reciprocal_points.len()`.
pub fn rpl_loss(
    projected: &[f64],
    reciprocal_points: &[Vec<f64>],
    labeled_classes: usize,
    label: usize,
    margin: f64,
) -> f64 {
    assert!(
        labeled_classes <= reciprocal_points.len(),
        "labeled_classes {labeled_classes} exceeds reciprocal rows {}",
        reciprocal_points.len()
    );
    assert!(
        label < labeled_classes,
        "label {label} is not a labeled class (labeled_classes = {labeled_classes}); \
         adaptive rows carry no labels"
    );
    let logits: Vec<f64> = reciprocal_points
        .iter()
        .map(|r| -vecmath::dot(projected, r))
        .collect();
    let mut scratch = Vec::new();
    let ce = vecmath::cross_entropy(&logits, label, &mut scratch);
    let dist = {
        let mut sq = 0.0;
        for (e, r) in projected.iter().zip(&reciprocal_points[label]) {
            let d = e - r;
            sq += d * d;
        }
        sq.sqrt()
    };
    ce + (dist - margin).max(0.0)
}

/// Normalized-logit cross-entropy: `-log softmax(z/‖z‖)[label]`.
///
/// If `‖z‖ < DEGENERATE_LOGIT_EPS` the logits carry no direction; the loss
/// falls back to `ln(K)` — the uniform posterior — and (in the gradient
/// kernels) contributes zero gradient through the normalization.
///
/// # Panics
/// If `label` is out of range or `cp_logits` is empty.
pub fn logitnorm_loss(cp_logits: &[f64], label: usize) -> f64 {
    assert!(
        label < cp_logits.len(),
        "label {label} out of range for {} logits",
        cp_logits.len()
    );
    let norm = vecmath::l2_norm(cp_logits);
    if norm < DEGENERATE_LOGIT_EPS {
        return (cp_logits.len() as f64).ln();
    }
    let normalized: Vec<f64> = cp_logits.iter().map(|z| z / norm).collect();
    let mut scratch = Vec::new();
    vecmath::cross_entropy(&normalized, label, &mut scratch)
}

/// Combined loss and exact gradients for one labeled sample.
///
/// Gradients flow through every parameter the loss touches: both point
/// sets, the margin (zero whenever the hinge is inactive), and the shared
/// trunk, whose gradient is the sum of both branches' contributions.
pub fn combined_loss_and_grads(
    model: &AdapterModel,
    embedding: &[f64],
    label: usize,
) -> (LossBreakdown, ParameterGradients) {
    let mut grads = ParameterGradients::zeros_like(model);
    let mut ws = Workspace::default();
    let breakdown = accumulate_combined(model, embedding, label, &mut grads, &mut ws);
    (breakdown, grads)
}

/// Hot-path variant of [`combined_loss_and_grads`]: adds this sample's
/// gradients into `grads` and reuses `ws` buffers.
pub(crate) fn accumulate_combined(
    model: &AdapterModel,
    embedding: &[f64],
    label: usize,
    grads: &mut ParameterGradients,
    ws: &mut Workspace,
) -> LossBreakdown {
    let labeled = model.config.labeled_classes;
    assert!(
        label < labeled,
        "label {label} is not a labeled class (labeled_classes = {labeled})"
    );
    forward_into(model, embedding, ws);

    // --- Reciprocal-point branch ---
    let l_ce = vecmath::cross_entropy(&ws.rp_logits, label, &mut ws.scratch);
    vecmath::softmax_into(&ws.rp_logits, &mut ws.p);

    let mut dist_sq = 0.0;
    for (e, r) in ws.projected.iter().zip(&model.reciprocal_points[label]) {
        let d = e - r;
        dist_sq += d * d;
    }
    let dist = dist_sq.sqrt();
    let hinge = (dist - model.margin).max(0.0);
    let l_rpl = l_ce + hinge;

    ws.de.clear();
    ws.de.resize(ws.projected.len(), 0.0);
    // Cross-entropy: dL/dR_k = -(p_k - 1[k=y]) emb; dL/demb = -sum_k (...) R_k.
    for (k, r) in model.reciprocal_points.iter().enumerate() {
        let coeff = ws.p[k] - if k == label { 1.0 } else { 0.0 };
        vecmath::add_scaled(&mut ws.de, r, -coeff);
        vecmath::add_scaled(&mut grads.reciprocal_points[k], &ws.projected, -coeff);
    }
    // Hinge: active only strictly outside the margin ball (subgradient 0 at
    // the kink). dist > margin >= 0 implies dist > 0, so the division is safe.
    if dist > model.margin {
        let inv = 1.0 / dist;
        for (j, (e, r)) in ws
            .projected
            .iter()
            .zip(&model.reciprocal_points[label])
            .enumerate()
        {
            let dir = (e - r) * inv;
            ws.de[j] += dir;
            grads.reciprocal_points[label][j] -= dir;
        }
        grads.margin -= 1.0;
    }

    // --- Normalized-logit branch ---
    let norm = vecmath::l2_norm(&ws.cp_logits);
    let l_ln;
    if norm < DEGENERATE_LOGIT_EPS {
        l_ln = (labeled as f64).ln();
        // Degenerate direction: uniform posterior, zero gradient.
    } else {
        ws.zt.clear();
        ws.zt.extend(ws.cp_logits.iter().map(|z| z / norm));
        l_ln = vecmath::cross_entropy(&ws.zt, label, &mut ws.scratch);
        vecmath::softmax_into(&ws.zt, &mut ws.q);
        // g = q - onehot(label); dL/dz = (g - (g.zt) zt) / norm.
        let mut g_dot_zt = 0.0;
        for (k, q) in ws.q.iter().enumerate() {
            let g = q - if k == label { 1.0 } else { 0.0 };
            g_dot_zt += g * ws.zt[k];
        }
        ws.gz.clear();
        for (k, q) in ws.q.iter().enumerate() {
            let g = q - if k == label { 1.0 } else { 0.0 };
            ws.gz.push((g - g_dot_zt * ws.zt[k]) / norm);
        }
        for (j, c) in model.center_points.iter().enumerate() {
            let gz = ws.gz[j];
            vecmath::add_scaled(&mut ws.de, c, gz);
            vecmath::add_scaled(&mut grads.center_points[j], &ws.projected, gz);
        }
    }

    let mut dh = std::mem::take(&mut ws.dh);
    backprop_trunk_at(
        model,
        embedding,
        &ws.hidden_pre,
        &ws.hidden,
        &ws.de,
        &mut dh,
        grads,
    );
    ws.dh = dh;

    LossBreakdown::new(l_rpl, l_ln)
}

/// The four reference losses trained for comparison rows.
///
/// All operate on the same trunk as the combined objective. The margin
/// variants length-normalize both the projected embedding and the class
/// rows; `scale` multiplies the resulting cosines before the softmax, and
/// `margin` is applied to the labeled class only (subtracted from its cosine
/// for `AmSoftmax`, added to its angle for `AamSoftmax`). `Prototype` scores
/// classes by negative squared distance to class prototypes — means of the
/// projected support samples — and its gradient flows through those support
/// projections as well as the query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BaselineLoss {
    Softmax,
    AmSoftmax { scale: f64, margin: f64 },
    AamSoftmax { scale: f64, margin: f64 },
    Prototype,
}

impl BaselineLoss {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        match self {
            BaselineLoss::Softmax | BaselineLoss::Prototype => Ok(()),
            BaselineLoss::AmSoftmax { scale, margin }
            | BaselineLoss::AamSoftmax { scale, margin } => {
                if !(*scale > 0.0) || !scale.is_finite() {
                    return Err(ObjectiveError::BadLossParams(format!(
                        "scale must be positive and finite, got {scale}"
                    )));
                }
                if !(*margin >= 0.0) || !margin.is_finite() {
                    return Err(ObjectiveError::BadLossParams(format!(
                        "margin must be non-negative and finite, got {margin}"
                    )));
                }
                Ok(())
            }
        }
    }
}

/// Loss and exact gradients for one sample under a reference loss.
///
/// `class_supports` is only read by `Prototype`: one list of input-space
/// support embeddings per labeled class (class means of these, projected
/// through the trunk, are the prototypes). Pass `&[]` for the other kinds.
pub fn baseline_loss_and_grads(
    model: &AdapterModel,
    embedding: &[f64],
    label: usize,
    loss: &BaselineLoss,
    class_supports: &[Vec<Vec<f64>>],
) -> Result<(f64, ParameterGradients), ObjectiveError> {
    let mut grads = ParameterGradients::zeros_like(model);
    let mut ws = Workspace::default();
    let value = match loss {
        BaselineLoss::Prototype => accumulate_prototype_batch(
            model,
            &[(embedding, label)],
            class_supports,
            &mut grads,
            &mut ws,
        )?,
        _ => accumulate_softmax_family(model, embedding, label, loss, &mut grads, &mut ws)?,
    };
    Ok((value, grads))
}

/// Softmax / AM-softmax / AAM-softmax gradient kernel (single sample,
/// accumulating). Not for `Prototype` — that one is batch-shaped.
pub(crate) fn accumulate_softmax_family(
    model: &AdapterModel,
    embedding: &[f64],
    label: usize,
    loss: &BaselineLoss,
    grads: &mut ParameterGradients,
    ws: &mut Workspace,
) -> Result<f64, ObjectiveError> {
    loss.validate()?;
    let labeled = model.config.labeled_classes;
    assert!(label < labeled, "label {label} out of range");
    forward_into(model, embedding, ws);
    ws.de.clear();
    ws.de.resize(ws.projected.len(), 0.0);

    let value = match loss {
        BaselineLoss::Softmax => {
            let l = vecmath::cross_entropy(&ws.cp_logits, label, &mut ws.scratch);
            vecmath::softmax_into(&ws.cp_logits, &mut ws.p);
            for (k, c) in model.center_points.iter().enumerate() {
                let g = ws.p[k] - if k == label { 1.0 } else { 0.0 };
                vecmath::add_scaled(&mut ws.de, c, g);
                vecmath::add_scaled(&mut grads.center_points[k], &ws.projected, g);
            }
            l
        }
        BaselineLoss::AmSoftmax { scale, margin } | BaselineLoss::AamSoftmax { scale, margin } => {
            let angular = matches!(loss, BaselineLoss::AamSoftmax { .. });
            let e_norm = vecmath::l2_norm(&ws.projected);
            if e_norm < 1e-12 {
                return Err(ObjectiveError::ZeroNormEmbedding);
            }
            ws.cosines.clear();
            for (k, c) in model.center_points.iter().enumerate() {
                let c_norm = vecmath::l2_norm(c);
                if c_norm < 1e-12 {
                    return Err(ObjectiveError::ZeroNormClassRow { class: k });
                }
                ws.cosines
                    .push(vecmath::dot(&ws.projected, c) / (e_norm * c_norm));
            }
            ws.logits.clear();
            // d(label logit)/d(label cosine); 1 for the plain-cosine classes.
            let mut label_slope = *scale;
            for (k, &cos) in ws.cosines.iter().enumerate() {
                let logit = if k != label {
                    scale * cos
                } else if angular {
                    // cos(theta + m) expanded; the clamp guards acos's domain.
                    let c = cos.clamp(-1.0, 1.0);
                    let sin = (1.0 - c * c).max(0.0).sqrt();
                    label_slope = scale * (margin.cos() + margin.sin() * c / sin.max(1e-12));
                    scale * (c * margin.cos() - sin * margin.sin())
                } else {
                    scale * (cos - margin)
                };
                ws.logits.push(logit);
            }
            let l = vecmath::cross_entropy(&ws.logits, label, &mut ws.scratch);
            vecmath::softmax_into(&ws.logits, &mut ws.p);
            for (k, c) in model.center_points.iter().enumerate() {
                let g = ws.p[k] - if k == label { 1.0 } else { 0.0 };
                let dcos = if k == label { label_slope * g } else { scale * g };
                // cos = (e.c)/(|e||c|): d/de = (c_hat - cos e_hat)/|e|,
                // d/dc = (e_hat - cos c_hat)/|c| — gradients through both
                // normalizations.
                let c_norm = vecmath::l2_norm(c);
                let cos = ws.cosines[k];
                for j in 0..ws.projected.len() {
                    let e_hat = ws.projected[j] / e_norm;
                    let c_hat = c[j] / c_norm;
                    ws.de[j] += dcos * (c_hat - cos * e_hat) / e_norm;
                    grads.center_points[k][j] += dcos * (e_hat - cos * c_hat) / c_norm;
                }
            }
            l
        }
        BaselineLoss::Prototype => unreachable!("prototype uses the batch kernel"),
    };

    let mut dh = std::mem::take(&mut ws.dh);
    backprop_trunk_at(
        model,
        embedding,
        &ws.hidden_pre,
        &ws.hidden,
        &ws.de,
        &mut dh,
        grads,
    );
    ws.dh = dh;
    Ok(value)
}

/// Prototype-loss kernel over a whole minibatch, accumulating into `grads`
/// and returning the **sum** of the per-sample losses.
///
/// Prototypes are class means of the projected supports, recomputed here
/// (they move with the trunk). The gradient of each prototype is
/// distributed over its supports and backpropagated once per batch, which
/// is what makes the loss affordable: cost is O(batch + supports) trunk
/// passes instead of O(batch × supports).
pub(crate) fn accumulate_prototype_batch(
    model: &AdapterModel,
    batch: &[(&[f64], usize)],
    class_supports: &[Vec<Vec<f64>>],
    grads: &mut ParameterGradients,
    ws: &mut Workspace,
) -> Result<f64, ObjectiveError> {
    let labeled = model.config.labeled_classes;
    assert_eq!(
        class_supports.len(),
        labeled,
        "need one support set per labeled class"
    );
    let out_dim = model.config.output_dim;

    // Forward every support once; keep activations for the backward pass.
    struct SupportCache {
        hidden_pre: Vec<f64>,
        hidden: Vec<f64>,
    }
    let mut caches: Vec<Vec<SupportCache>> = Vec::with_capacity(labeled);
    let mut prototypes: Vec<Vec<f64>> = Vec::with_capacity(labeled);
    for (c, supports) in class_supports.iter().enumerate() {
        if supports.is_empty() {
            return Err(ObjectiveError::EmptySupport { class: c });
        }
        let mut proto = vec![0.0; out_dim];
        let mut class_caches = Vec::with_capacity(supports.len());
        for s in supports {
            forward_into(model, s, ws);
            vecmath::add_scaled(&mut proto, &ws.projected, 1.0 / supports.len() as f64);
            class_caches.push(SupportCache {
                hidden_pre: ws.hidden_pre.clone(),
                hidden: ws.hidden.clone(),
            });
        }
        prototypes.push(proto);
        caches.push(class_caches);
    }

    // Query passes: accumulate trunk gradients and per-prototype gradients.
    let mut proto_grads: Vec<Vec<f64>> = vec![vec![0.0; out_dim]; labeled];
    let mut total = 0.0;
    for &(x, y) in batch {
        assert!(y < labeled, "label {y} out of range");
        forward_into(model, x, ws);
        ws.logits.clear();
        for proto in &prototypes {
            let mut sq = 0.0;
            for (e, p) in ws.projected.iter().zip(proto) {
                let d = e - p;
                sq += d * d;
            }
            ws.logits.push(-sq);
        }
        total += vecmath::cross_entropy(&ws.logits, y, &mut ws.scratch);
        vecmath::softmax_into(&ws.logits, &mut ws.p);

        ws.de.clear();
        ws.de.resize(out_dim, 0.0);
        for (c, proto) in prototypes.iter().enumerate() {
            let g = ws.p[c] - if c == y { 1.0 } else { 0.0 };
            // logit_c = -|e - P_c|^2: d/de = -2(e - P_c), d/dP_c = 2(e - P_c).
            for j in 0..out_dim {
                let diff = ws.projected[j] - proto[j];
                ws.de[j] += -2.0 * g * diff;
                proto_grads[c][j] += 2.0 * g * diff;
            }
        }
        let mut dh = std::mem::take(&mut ws.dh);
        backprop_trunk_at(model, x, &ws.hidden_pre, &ws.hidden, &ws.de, &mut dh, grads);
        ws.dh = dh;
    }

    // Each support receives its equal share of its class's prototype
    // gradient, backpropagated through the trunk at the support input.
    let mut dh = std::mem::take(&mut ws.dh);
    for (c, supports) in class_supports.iter().enumerate() {
        let share = 1.0 / supports.len() as f64;
        ws.de.clear();
        ws.de
            .extend(proto_grads[c].iter().map(|g| g * share));
        for (s, cache) in supports.iter().zip(&caches[c]) {
            backprop_trunk_at(
                model,
                s,
                &cache.hidden_pre,
                &cache.hidden,
                &ws.de,
                &mut dh,
                grads,
            );
        }
    }
    ws.dh = dh;
    Ok(total)
}
