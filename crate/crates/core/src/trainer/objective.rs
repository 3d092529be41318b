//! Per-sample forward and backward pass of the multi-task objective.

use ndarray::{ArrayD, Ix3};

use crate::error::Result;
use crate::losses::{appearance_loss_grad, kd_loss_grad, motion_loss_grad, LossConfig, NegativeQueue};
use crate::model::layers::{Sequential, Trace};
use crate::model::{clip_tensor, l2_normalize, l2_normalize_backward, softmax_backward, vec_tensor, Model, ParamSet};
use crate::teacher::SegmentationProbMap;
use crate::video_data::{TrainingSample, VideoClip};

/// Loss weights applied in one step. A zero weight skips the branch entirely.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchWeights {
    pub kd: f64,
    pub motion: f64,
    pub appearance: f64,
}

impl BranchWeights {
    pub fn from_config(cfg: &LossConfig) -> Self {
        Self {
            kd: cfg.lambda_kd,
            motion: cfg.lambda_motion,
            appearance: cfg.lambda_appearance,
        }
    }

    pub fn kd_only(self) -> Self {
        Self { motion: 0.0, appearance: 0.0, ..self }
    }

    pub fn contrastive_only(self) -> Self {
        Self { kd: 0.0, ..self }
    }
}

/// Unweighted branch losses of one sample. Skipped branches report 0.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub l_kd: f64,
    pub l_m: f64,
    pub l_a: f64,
}

impl LossParts {
    pub fn weighted(&self, w: &BranchWeights) -> f64 {
        w.kd * self.l_kd + w.motion * self.l_m + w.appearance * self.l_a
    }

    pub fn is_finite(&self) -> bool {
        self.l_kd.is_finite() && self.l_m.is_finite() && self.l_a.is_finite()
    }
}

/// Everything the objective needs besides the student parameters.
pub struct SampleInputs<'a> {
    pub sample: &'a TrainingSample,
    /// Teacher map of the anchor's middle frame; required when `weights.kd > 0`.
    pub teacher_map: Option<&'a SegmentationProbMap>,
    /// Key-encoder embedding of the appearance positive.
    pub key: &'a [f64],
    pub queue: &'a NegativeQueue,
}

struct Branch {
    low: Trace,
    high: Trace,
}

fn forward_branch(model: &Model, params: &ParamSet, head: &Sequential, clip: &VideoClip) -> Branch {
    let low = model.arch.low.forward(params, clip_tensor(clip));
    let high = head.forward(params, low.output().clone());
    Branch { low, high }
}

fn backward_branch(model: &Model, params: &ParamSet, head: &Sequential, b: &Branch, g_z: ArrayD<f64>, grads: &mut ParamSet) {
    let g_low = head.backward(params, &b.high, g_z, grads);
    model.arch.low.backward(params, &b.low, g_low, grads);
}

/// Normalised projection and the trace needed to backpropagate through it.
struct Projection {
    trace: Trace,
    unit: Vec<f64>,
}

fn project(head: &Sequential, params: &ParamSet, z: &ArrayD<f64>) -> Projection {
    let trace = head.forward(params, z.clone());
    let unit = l2_normalize(trace.output().as_slice().expect("contiguous"));
    Projection { trace, unit }
}

fn project_backward(head: &Sequential, params: &ParamSet, p: &Projection, g_unit: &[f64], scale: f64, grads: &mut ParamSet) -> ArrayD<f64> {
    let raw = p.trace.output().as_slice().expect("contiguous");
    let g_raw: Vec<f64> = l2_normalize_backward(raw, &p.unit, g_unit).into_iter().map(|g| g * scale).collect();
    head.backward(params, &p.trace, vec_tensor(&g_raw), grads)
}

/// Evaluate the sample's losses under `params` and add `scale * d(weighted loss)/d(params)`
/// into `grads`. The appearance branch is skipped when the queue is empty.
pub fn accumulate_sample_gradients(
    model: &Model,
    params: &ParamSet,
    inputs: &SampleInputs<'_>,
    weights: &BranchWeights,
    loss_cfg: &LossConfig,
    scale: f64,
    grads: &mut ParamSet,
) -> Result<LossParts> {
    let arch = &model.arch;
    let sample = inputs.sample;
    let mut parts = LossParts::default();
    let anchor_low = arch.low.forward(params, clip_tensor(&sample.anchor));
    let mut g_anchor_low = ArrayD::zeros(anchor_low.output().raw_dim());

    if weights.kd > 0.0 {
        if let (Some(prior), Some(decoder), Some(teacher)) = (&arch.prior, &arch.decoder, inputs.teacher_map) {
            let high = prior.forward(params, anchor_low.output().clone());
            let dec = decoder.forward(params, high.output().clone());
            if dec.output().iter().any(|v| !v.is_finite()) {
                parts.l_kd = f64::NAN;
                return Ok(parts);
            }
            let logits = dec.output().view().into_dimensionality::<Ix3>().expect("decoder logits are (C, H, W)");
            let student = SegmentationProbMap::from_logits(logits);
            let (l_kd, g_probs) = kd_loss_grad(teacher, &student)?;
            parts.l_kd = l_kd;
            let g_logits = softmax_backward(student.probs().view(), g_probs.view()) * (weights.kd * scale);
            let g_z = decoder.backward(params, &dec, g_logits, grads);
            g_anchor_low += &prior.backward(params, &high, g_z, grads);
        }
    }

    let use_appearance = weights.appearance > 0.0 && !inputs.queue.is_empty();
    if weights.motion > 0.0 || use_appearance {
        let head = &arch.contrastive;
        let anchor_high = head.forward(params, anchor_low.output().clone());
        let mut g_anchor_z = ArrayD::zeros(anchor_high.output().raw_dim());

        if weights.motion > 0.0 {
            let pos = forward_branch(model, params, head, &sample.speed_positive);
            let neg = forward_branch(model, params, head, &sample.speed_negative);
            let pa = project(&arch.motion, params, anchor_high.output());
            let pp = project(&arch.motion, params, pos.high.output());
            let pn = project(&arch.motion, params, neg.high.output());
            let mg = motion_loss_grad(&pa.unit, &pp.unit, &pn.unit, loss_cfg.margin)?;
            parts.l_m = mg.loss;
            if mg.loss > 0.0 {
                let s = weights.motion * scale;
                g_anchor_z += &project_backward(&arch.motion, params, &pa, &mg.anchor, s, grads);
                let g_pos = project_backward(&arch.motion, params, &pp, &mg.positive, s, grads);
                backward_branch(model, params, head, &pos, g_pos, grads);
                let g_neg = project_backward(&arch.motion, params, &pn, &mg.negative, s, grads);
                backward_branch(model, params, head, &neg, g_neg, grads);
            }
        }

        if use_appearance {
            let q = project(&arch.appearance, params, anchor_high.output());
            let ag = appearance_loss_grad(&q.unit, inputs.key, inputs.queue, loss_cfg.temperature)?;
            parts.l_a = ag.loss;
            g_anchor_z += &project_backward(&arch.appearance, params, &q, &ag.anchor, weights.appearance * scale, grads);
        }

        g_anchor_low += &head.backward(params, &anchor_high, g_anchor_z, grads);
    }

    arch.low.backward(params, &anchor_low, g_anchor_low, grads);
    Ok(parts)
}

/// Losses only; gradients are computed and discarded.
pub fn sample_losses(
    model: &Model,
    params: &ParamSet,
    inputs: &SampleInputs<'_>,
    weights: &BranchWeights,
    loss_cfg: &LossConfig,
) -> Result<LossParts> {
    let mut scratch = params.zeros_like();
    accumulate_sample_gradients(model, params, inputs, weights, loss_cfg, 1.0, &mut scratch)
}
