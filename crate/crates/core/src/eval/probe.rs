use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fraction of rows whose label is among the `k` highest scores. Ties are
/// broken towards the smaller class index, so a label ranks ahead of every
/// equal-scored class with a larger index.
pub fn topk_accuracy(scores: ArrayView2<f64>, labels: &[usize], k: usize) -> Result<f64> {
    let (n, c) = scores.dim();
    if labels.len() != n {
        return Err(Error::Shape(format!("{n} score rows but {} labels", labels.len())));
    }
    if k == 0 || k > c {
        return Err(Error::Shape(format!("k = {k} must lie in 1..={c}")));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Shape(format!("label {bad} out of range for {c} classes")));
    }
    if n == 0 {
        return Ok(0.0);
    }
    let hits = scores
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &label)| {
            let s = row[label];
            let ahead = row
                .iter()
                .enumerate()
                .filter(|&(j, &v)| v > s || (v == s && j < label))
                .count();
            ahead < k
        })
        .count();
    Ok(hits as f64 / n as f64)
}

/// Index of the highest score, smallest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Full-batch gradient steps of the logistic regression.
    pub iterations: usize,
    pub learning_rate: f64,
    pub l2: f64,
    /// Playback speed of evaluation clips.
    pub clip_speed: usize,
    /// Evenly spaced clips per video whose representations are averaged.
    pub clips_per_video: usize,
    /// Train the whole backbone with the classifier instead of freezing it.
    pub fine_tune: bool,
    pub fine_tune_epochs: usize,
    pub fine_tune_lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            learning_rate: 0.5,
            l2: 1e-3,
            clip_speed: 2,
            clips_per_video: 3,
            fine_tune: false,
            fine_tune_epochs: 4,
            fine_tune_lr: 0.01,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("probe: {m}")));
        if self.iterations == 0 || self.clips_per_video == 0 || self.clip_speed == 0 {
            return bad("iterations, clips_per_video and clip_speed must be positive");
        }
        if !(self.learning_rate > 0.0) || !(self.fine_tune_lr > 0.0) || !(self.l2 >= 0.0) {
            return bad("learning rates must be positive and l2 non-negative");
        }
        Ok(())
    }
}

/// Multinomial logistic regression on standardised features.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
    /// `(num_classes, dim)`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

fn softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

impl LinearClassifier {
    /// Fit by full-batch gradient descent from zero weights, so the result
    /// depends only on the data and `cfg`.
    pub fn fit(features: ArrayView2<f64>, labels: &[usize], num_classes: usize, cfg: &ProbeConfig) -> Result<Self> {
        let (n, d) = features.dim();
        if labels.len() != n {
            return Err(Error::Shape(format!("{n} feature rows but {} labels", labels.len())));
        }
        if num_classes < 2 {
            return Err(Error::Config("a probe needs at least 2 classes".into()));
        }
        let mut seen = vec![false; num_classes];
        for &l in labels {
            if l >= num_classes {
                return Err(Error::Shape(format!("label {l} out of range for {num_classes} classes")));
            }
            seen[l] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Config(format!("class {missing} has no training examples")));
        }
        let mean = features.mean_axis(Axis(0)).expect("non-empty");
        let std = features.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-8 { s } else { 1.0 });
        let x = (&features - &mean) / &std;
        let mut y = Array2::zeros((n, num_classes));
        for (i, &l) in labels.iter().enumerate() {
            y[[i, l]] = 1.0;
        }
        let mut weights = Array2::zeros((num_classes, d));
        let mut bias = Array1::zeros(num_classes);
        for _ in 0..cfg.iterations {
            let mut p = x.dot(&weights.t()) + &bias;
            softmax_rows(&mut p);
            let err = (p - &y) / n as f64;
            let gw = err.t().dot(&x) + &weights * cfg.l2;
            let gb = err.sum_axis(Axis(0));
            weights.scaled_add(-cfg.learning_rate, &gw);
            bias.scaled_add(-cfg.learning_rate, &gb);
        }
        Ok(Self { mean, std, weights, bias })
    }

    pub fn num_classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn scores(&self, features: ArrayView2<f64>) -> Result<Array2<f64>> {
        if features.ncols() != self.dim() {
            return Err(Error::Shape(format!(
                "features have dimension {}, classifier expects {}",
                features.ncols(),
                self.dim()
            )));
        }
        let x = (&features - &self.mean) / &self.std;
        Ok(x.dot(&self.weights.t()) + &self.bias)
    }

    /// Class weights expressed on raw (unstandardised) features.
    pub fn raw_class_weights(&self, class: usize) -> Vec<f64> {
        self.weights.row(class).iter().zip(&self.std).map(|(w, s)| w / s).collect()
    }
}

/// Acc@1 of each class over the test rows that carry it (`NaN`-free: absent classes give 0).
pub fn per_class_accuracy(scores: ArrayView2<f64>, labels: &[usize]) -> Vec<f64> {
    let c = scores.ncols();
    let mut hit = vec![0usize; c];
    let mut total = vec![0usize; c];
    for (row, &l) in scores.rows().into_iter().zip(labels) {
        total[l] += 1;
        if argmax(row.as_slice().expect("row-major")) == l {
            hit[l] += 1;
        }
    }
    hit.iter()
        .zip(&total)
        .map(|(&h, &t)| if t == 0 { 0.0 } else { h as f64 / t as f64 })
        .collect()
}
