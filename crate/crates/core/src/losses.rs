//! Distillation, motion-ranking and appearance InfoNCE losses, their weighted
//! sum, and the FIFO queue of negative appearance keys.
//!
//! Every loss has a `*_grad` twin returning analytic gradients with respect
//! to its inputs; the model's backward pass chains through these.

use std::collections::VecDeque;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::teacher::SegmentationProbMap;

/// Guard used in every normalisation and logarithm.
pub const EPS: f64 = 1e-12;

/// Tolerance used when checking that distillation inputs are normalised.
pub const KD_NORMALIZATION_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Margin of the motion ranking loss.
    pub margin: f64,
    /// InfoNCE temperature.
    pub temperature: f64,
    pub lambda_kd: f64,
    pub lambda_motion: f64,
    pub lambda_appearance: f64,
    /// Negative queue capacity.
    pub queue_capacity: usize,
    /// Momentum of the key encoder update.
    pub key_momentum: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 0.15,
            temperature: 0.07,
            lambda_kd: 1.0,
            lambda_motion: 1.0,
            lambda_appearance: 1.0,
            queue_capacity: 256,
            key_momentum: 0.99,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("loss: {m}")));
        if !(self.margin > 0.0 && self.margin <= 2.0) {
            return bad(format!("margin must lie in (0, 2], got {}", self.margin));
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        let lambdas = [self.lambda_kd, self.lambda_motion, self.lambda_appearance];
        if lambdas.iter().any(|l| !(*l >= 0.0)) {
            return bad("loss weights must be non-negative".into());
        }
        if lambdas.iter().all(|l| *l == 0.0) {
            return bad("at least one loss weight must be positive".into());
        }
        if self.queue_capacity == 0 {
            return bad("queue_capacity must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.key_momentum) {
            return bad(format!("key_momentum must lie in [0, 1], got {}", self.key_momentum));
        }
        Ok(())
    }
}

fn check_dims(u: &[f64], v: &[f64]) -> Result<()> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!("embedding dimensions differ: {} vs {}", u.len(), v.len())));
    }
    Ok(())
}

fn norm(u: &[f64]) -> f64 {
    u.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity with norms floored at [`EPS`].
pub fn similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    check_dims(u, v)?;
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok(dot / (norm(u).max(EPS) * norm(v).max(EPS)))
}

/// Cosine similarity and its gradients with respect to `u` and `v`.
pub fn similarity_grad(u: &[f64], v: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    check_dims(u, v)?;
    let (nu_raw, nv_raw) = (norm(u), norm(v));
    let (nu, nv) = (nu_raw.max(EPS), nv_raw.max(EPS));
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let cos = dot / (nu * nv);
    let grad = |a: &[f64], b: &[f64], na_raw: f64| -> Vec<f64> {
        a.iter()
            .zip(b)
            .map(|(ai, bi)| {
                let mut g = bi / (nu * nv);
                if na_raw > EPS {
                    g -= cos * ai / (na_raw * na_raw);
                }
                g
            })
            .collect()
    };
    Ok((cos, grad(u, v, nu_raw), grad(v, u, nv_raw)))
}

fn check_maps(teacher: &SegmentationProbMap, student: &SegmentationProbMap) -> Result<()> {
    if teacher.probs().dim() != student.probs().dim() {
        return Err(Error::Shape(format!(
            "teacher map {:?} vs student map {:?}",
            teacher.probs().dim(),
            student.probs().dim()
        )));
    }
    SegmentationProbMap::check(teacher.probs(), KD_NORMALIZATION_TOL)?;
    SegmentationProbMap::check(student.probs(), KD_NORMALIZATION_TOL)
}

/// `-(1/N) sum_{i,j} sum_c F_t(i,j,c) log F_h(i,j,c)` with `N = H * W`.
///
/// This is the cross-entropy `H(F_t, F_h) = KL(F_t || F_h) + H(F_t)`; the
/// entropy offset does not depend on the student.
pub fn kd_loss(teacher: &SegmentationProbMap, student: &SegmentationProbMap) -> Result<f64> {
    check_maps(teacher, student)?;
    let n = teacher.locations() as f64;
    let sum: f64 = teacher
        .probs()
        .iter()
        .zip(student.probs().iter())
        .map(|(t, &s)| t * (if s < EPS { EPS } else { s }).ln())
        .sum();
    Ok(-sum / n)
}

/// Loss and its gradient with respect to the student map entries.
pub fn kd_loss_grad(teacher: &SegmentationProbMap, student: &SegmentationProbMap) -> Result<(f64, Array3<f64>)> {
    let loss = kd_loss(teacher, student)?;
    let n = teacher.locations() as f64;
    let mut grad = Array3::zeros(student.probs().raw_dim());
    ndarray::Zip::from(&mut grad)
        .and(teacher.probs())
        .and(student.probs())
        .for_each(|g, &t, &s| {
            *g = if s > EPS { -t / (s * n) } else { 0.0 };
        });
    Ok((loss, grad))
}

/// `max(0, margin - (d+ - d-))` with `d+ = cos(anchor, positive)`, `d- = cos(anchor, negative)`.
pub fn motion_loss(anchor: &[f64], positive: &[f64], negative: &[f64], margin: f64) -> Result<f64> {
    let d_pos = similarity(anchor, positive)?;
    let d_neg = similarity(anchor, negative)?;
    Ok((margin - (d_pos - d_neg)).max(0.0))
}

pub struct MotionGrad {
    pub loss: f64,
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

pub fn motion_loss_grad(anchor: &[f64], positive: &[f64], negative: &[f64], margin: f64) -> Result<MotionGrad> {
    let (d_pos, ga_pos, gp) = similarity_grad(anchor, positive)?;
    let (d_neg, ga_neg, gn) = similarity_grad(anchor, negative)?;
    let raw = margin - (d_pos - d_neg);
    if raw <= 0.0 {
        let zeros = vec![0.0; anchor.len()];
        return Ok(MotionGrad {
            loss: 0.0,
            anchor: zeros.clone(),
            positive: zeros.clone(),
            negative: zeros,
        });
    }
    Ok(MotionGrad {
        loss: raw,
        anchor: ga_pos.iter().zip(&ga_neg).map(|(p, n)| n - p).collect(),
        positive: gp.iter().map(|g| -g).collect(),
        negative: gn,
    })
}

/// InfoNCE from raw similarities:
/// `-log(e^{d+/tau} / (e^{d+/tau} + sum_n e^{d_n/tau}))`, evaluated with max-subtraction.
pub fn info_nce_from_similarities(d_pos: f64, d_neg: &[f64], temperature: f64) -> Result<f64> {
    Ok(info_nce_parts(d_pos, d_neg, temperature)?.0)
}

// Returns (loss, softmax weight of the positive, softmax weights of negatives).
fn info_nce_parts(d_pos: f64, d_neg: &[f64], temperature: f64) -> Result<(f64, f64, Vec<f64>)> {
    if d_neg.is_empty() {
        return Err(Error::EmptyQueue);
    }
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let s_pos = d_pos / temperature;
    let max = d_neg.iter().map(|d| d / temperature).fold(s_pos, f64::max);
    let e_pos = (s_pos - max).exp();
    let e_neg: Vec<f64> = d_neg.iter().map(|d| (d / temperature - max).exp()).collect();
    let z = e_pos + e_neg.iter().sum::<f64>();
    let loss = -(s_pos - max) + z.ln();
    Ok((loss, e_pos / z, e_neg.into_iter().map(|e| e / z).collect()))
}

/// Appearance InfoNCE of `anchor` against its `positive` key and every queued negative.
pub fn appearance_loss(anchor: &[f64], positive: &[f64], queue: &NegativeQueue, temperature: f64) -> Result<f64> {
    Ok(appearance_loss_grad(anchor, positive, queue, temperature)?.loss)
}

pub struct AppearanceGrad {
    pub loss: f64,
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
}

/// Gradients with respect to the anchor and the positive key; negatives are constants.
pub fn appearance_loss_grad(
    anchor: &[f64],
    positive: &[f64],
    queue: &NegativeQueue,
    temperature: f64,
) -> Result<AppearanceGrad> {
    if queue.is_empty() {
        return Err(Error::EmptyQueue);
    }
    let (d_pos, ga_pos, gp) = similarity_grad(anchor, positive)?;
    let mut d_neg = Vec::with_capacity(queue.len());
    let mut ga_neg = Vec::with_capacity(queue.len());
    for key in queue.iter() {
        let (d, ga, _) = similarity_grad(anchor, key)?;
        d_neg.push(d);
        ga_neg.push(ga);
    }
    let (loss, p_pos, p_neg) = info_nce_parts(d_pos, &d_neg, temperature)?;
    // dL/ds+ = p+ - 1, dL/ds_n = p_n, with s = d / tau.
    let mut g_anchor: Vec<f64> = ga_pos.iter().map(|g| (p_pos - 1.0) / temperature * g).collect();
    for (p, ga) in p_neg.iter().zip(&ga_neg) {
        for (acc, g) in g_anchor.iter_mut().zip(ga) {
            *acc += p / temperature * g;
        }
    }
    let g_pos = gp.iter().map(|g| (p_pos - 1.0) / temperature * g).collect();
    Ok(AppearanceGrad {
        loss,
        anchor: g_anchor,
        positive: g_pos,
    })
}

/// `lambda_kd * l_kd + lambda_motion * l_m + lambda_appearance * l_a`.
pub fn total_loss(l_kd: f64, l_m: f64, l_a: f64, weights: &LossConfig) -> f64 {
    weights.lambda_kd * l_kd + weights.lambda_motion * l_m + weights.lambda_appearance * l_a
}

/// FIFO buffer of at most `capacity` unit-norm keys.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeQueue {
    capacity: usize,
    dim: usize,
    entries: VecDeque<Vec<f64>>,
}

impl NegativeQueue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self {
            capacity,
            dim,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Append `key`, evicting the oldest entry when full.
    pub fn push(&mut self, key: &[f64]) -> Result<()> {
        if key.len() != self.dim {
            return Err(Error::Shape(format!("queue holds {}-d keys, got {}", self.dim, key.len())));
        }
        let n = norm(key);
        if (n - 1.0).abs() > 1e-6 {
            return Err(Error::Shape(format!("queue keys must be unit-norm, got norm {n}")));
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(key.to_vec());
        Ok(())
    }

    /// Oldest first, i.e. in eviction order.
    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.entries.iter().cloned().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.entries.iter().map(Vec::as_slice)
    }
}
