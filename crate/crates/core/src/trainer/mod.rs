//! Multi-task pre-training loop: sample, augment, forward both branches,
//! weighted loss, SGD update, key-encoder update, queue push.
//!
//! All randomness is derived from `(seed, step, slot)`, so the training state
//! needs no RNG stream and a resumed run replays exactly.

mod ablation;
mod objective;

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::losses::{LossConfig, NegativeQueue};
use crate::model::checkpoint::{read_container, write_container, Dtype, FORMAT_VERSION};
use crate::model::{Model, ModelConfig, MomentumEncoder, ParamSet, Variant};
use crate::rng::{derive_seed, rng_for};
use crate::teacher::{SegmentationProbMap, Teacher, TeacherContext};
use crate::video_data::{make_training_sample, AugmentConfig, SourceVideo, TrainingSample};

pub use ablation::{run_ablation_suite, AblationReport, AblationRow, ReferenceRow, REFERENCE_ROWS};
pub use objective::{accumulate_sample_gradients, sample_losses, BranchWeights, LossParts, SampleInputs};

const ORDER_TAG: u64 = 0x0D3;
const SAMPLE_TAG: u64 = 0x5A;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub epochs: usize,
    /// Samples per step; at least 2.
    pub batch_size: usize,
    pub base_lr: f64,
    /// Epochs at which the learning rate is multiplied by `lr_gamma`.
    pub lr_milestones: Vec<usize>,
    pub lr_gamma: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Playback speeds (frame strides) used for motion positives and negatives.
    pub speeds: Vec<usize>,
    /// Steps between snapshots; the final step is always saved.
    pub snapshot_interval: u64,
    /// Seeds per variant in the ablation suite.
    pub ablation_runs: usize,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            epochs: 24,
            batch_size: 8,
            base_lr: 0.05,
            lr_milestones: vec![18],
            lr_gamma: 0.1,
            sgd_momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            speeds: vec![1, 2, 4],
            snapshot_interval: 100,
            ablation_runs: 3,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("trainer: {m}")));
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if !(self.base_lr > 0.0) || !(self.lr_gamma > 0.0) {
            return bad("base_lr and lr_gamma must be positive".into());
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) {
            return bad("sgd_momentum must lie in [0, 1)".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative".into());
        }
        if self.snapshot_interval == 0 || self.ablation_runs == 0 {
            return bad("snapshot_interval and ablation_runs must be positive".into());
        }
        let mut distinct = self.speeds.clone();
        distinct.sort_unstable();
        distinct.dedup();
        if distinct.len() < 2 || distinct[0] == 0 {
            return bad(format!("need at least two distinct positive speeds, got {:?}", self.speeds));
        }
        self.loss.validate()
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let decays = self.lr_milestones.iter().filter(|&&m| epoch >= m).count();
        self.base_lr * self.lr_gamma.powi(decays as i32)
    }

    /// Weights actually applied: distillation is forced off without a decoder.
    pub fn branch_weights(&self) -> BranchWeights {
        let mut w = BranchWeights::from_config(&self.loss);
        if !self.variant.has_kd() {
            w.kd = 0.0;
        }
        w
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub l_kd: f64,
    pub l_m: f64,
    pub l_a: f64,
    pub total: f64,
    pub lr: f64,
    pub wall_time_s: f64,
}

impl StepMetrics {
    /// Equality on everything except wall time.
    pub fn same_values(&self, other: &Self) -> bool {
        (self.step, self.l_kd, self.l_m, self.l_a, self.total, self.lr)
            == (other.step, other.l_kd, other.l_m, other.l_a, other.total, other.lr)
    }
}

/// Complete mutable state of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Number of completed steps.
    pub step: u64,
    pub model: Model,
    pub key: MomentumEncoder,
    pub queue: NegativeQueue,
    /// SGD velocity, one entry per student parameter.
    pub velocity: ParamSet,
}

impl TrainState {
    pub fn new(model: Model, loss: &LossConfig) -> Self {
        let key = MomentumEncoder::new(&model.params, &model.arch.key_prefixes(), loss.key_momentum);
        let queue = NegativeQueue::new(loss.queue_capacity, model.config.proj_dim);
        let velocity = model.params.zeros_like();
        Self {
            step: 0,
            model,
            key,
            queue,
            velocity,
        }
    }

    /// Queue size from which the appearance loss is switched on.
    pub fn warm_threshold(&self) -> usize {
        self.queue.capacity().div_ceil(4).max(1)
    }

    pub fn queue_is_warm(&self) -> bool {
        self.queue.len() >= self.warm_threshold()
    }

    /// Save everything at 64-bit precision.
    pub fn save(&self, path: &Path, seed: u64, config_hash: &str) -> Result<()> {
        let meta = serde_json::json!({
            "format_version": FORMAT_VERSION,
            "kind": "train_state",
            "variant": self.model.variant,
            "step": self.step,
            "seed": seed,
            "config_hash": config_hash,
            "model": self.model.config,
            "key_momentum": self.key.momentum,
            "queue_capacity": self.queue.capacity(),
        });
        let dim = self.queue.dim();
        let flat: Vec<f64> = self.queue.iter().flatten().copied().collect();
        let queue = ArrayD::from_shape_vec(IxDyn(&[self.queue.len(), dim]), flat).expect("queue shape");
        let names: Vec<(String, &ArrayD<f64>)> = self
            .model
            .params
            .iter()
            .map(|(n, v)| (format!("params/{n}"), v))
            .chain(self.velocity.iter().map(|(n, v)| (format!("velocity/{n}"), v)))
            .chain(self.key.params.iter().map(|(n, v)| (format!("key/{n}"), v)))
            .chain(std::iter::once(("queue".to_string(), &queue)))
            .collect();
        write_container(path, &meta, names.iter().map(|(n, v)| (n.as_str(), *v)), Dtype::F64)
    }

    pub fn load(path: &Path) -> Result<(Self, u64)> {
        let container = read_container(path)?;
        let meta = container.meta;
        let corrupt = |m: &str| Error::CorruptCheckpoint {
            offset: 12,
            message: format!("train state metadata: {m}"),
        };
        if meta["kind"] != "train_state" {
            return Err(corrupt("not a training-state file"));
        }
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| corrupt(&format!("missing `{k}`")));
        let variant: Variant = serde_json::from_value(field("variant")?)?;
        let model_cfg: ModelConfig = serde_json::from_value(field("model")?)?;
        let step: u64 = serde_json::from_value(field("step")?)?;
        let seed: u64 = serde_json::from_value(field("seed")?)?;
        let key_momentum: f64 = serde_json::from_value(field("key_momentum")?)?;
        let capacity: usize = serde_json::from_value(field("queue_capacity")?)?;

        let model = Model::build(&model_cfg, variant, 0)?;
        let loss = LossConfig {
            key_momentum,
            queue_capacity: capacity,
            ..LossConfig::default()
        };
        let mut state = TrainState::new(model, &loss);
        state.step = step;
        let (mut params, mut velocity, mut key) = (ParamSet::new(), ParamSet::new(), ParamSet::new());
        let mut queue_rows = None;
        for (name, array) in container.arrays {
            if let Some(n) = name.strip_prefix("params/") {
                params.insert(n, array);
            } else if let Some(n) = name.strip_prefix("velocity/") {
                velocity.insert(n, array);
            } else if let Some(n) = name.strip_prefix("key/") {
                key.insert(n, array);
            } else if name == "queue" {
                queue_rows = Some(array);
            } else {
                return Err(corrupt(&format!("unexpected array `{name}`")));
            }
        }
        state.model.params.check_same_layout(&params)?;
        state.velocity.check_same_layout(&velocity)?;
        state.key.params.check_same_layout(&key)?;
        state.model.params = params;
        state.velocity = velocity;
        state.key.params = key;
        let rows = queue_rows.ok_or_else(|| corrupt("missing queue"))?;
        let rows: Array2<f64> = rows
            .into_dimensionality()
            .map_err(|_| corrupt("queue must be two-dimensional"))?;
        if rows.ncols() != state.queue.dim() || rows.nrows() > capacity {
            return Err(corrupt("queue shape does not match the model"));
        }
        for row in rows.rows() {
            state.queue.push(row.as_slice().expect("contiguous"))?;
        }
        Ok((state, seed))
    }
}

/// Training data plus the teacher that labels it.
pub struct TrainData<'a> {
    pub videos: &'a [SourceVideo],
    pub teacher: Option<&'a dyn Teacher>,
}

impl TrainData<'_> {
    pub fn steps_per_epoch(&self, batch_size: usize) -> usize {
        self.videos.len() / batch_size
    }
}

/// Indices of the videos used at `step`: each epoch is a fixed permutation,
/// iterated in whole batches (the remainder is dropped).
pub fn batch_indices(num_videos: usize, batch_size: usize, seed: u64, step: u64) -> Vec<usize> {
    let per_epoch = (num_videos / batch_size) as u64;
    let epoch = step / per_epoch;
    let pos = (step % per_epoch) as usize;
    let mut order: Vec<usize> = (0..num_videos).collect();
    order.shuffle(&mut rng_for(seed, &[ORDER_TAG, epoch]));
    order[pos * batch_size..(pos + 1) * batch_size].to_vec()
}

/// Draw the batch for `step` together with teacher maps of each anchor.
pub fn make_batch(
    data: &TrainData<'_>,
    train: &TrainConfig,
    clip_length: usize,
    augment: &AugmentConfig,
    step: u64,
) -> Result<Vec<(TrainingSample, Option<SegmentationProbMap>)>> {
    let needs_teacher = train.branch_weights().kd > 0.0;
    batch_indices(data.videos.len(), train.batch_size, train.seed, step)
        .into_iter()
        .enumerate()
        .map(|(slot, idx)| {
            let video = &data.videos[idx];
            let seed = derive_seed(train.seed, &[SAMPLE_TAG, step, slot as u64]);
            let sample = make_training_sample(video, &train.speeds, clip_length, augment, seed)?;
            let map = if needs_teacher {
                let teacher = data
                    .teacher
                    .ok_or_else(|| Error::Teacher("variant needs a teacher but none was provided".into()))?;
                let ctx = TeacherContext::for_frame(video, &sample.teacher_frame);
                Some(teacher.parse(&sample.teacher_frame, &ctx)?)
            } else {
                None
            };
            Ok((sample, map))
        })
        .collect()
}

/// One optimisation step. Returns the batch-mean losses; `wall_time_s` is left at 0.
pub fn pretrain_step(
    state: &mut TrainState,
    batch: &[(TrainingSample, Option<SegmentationProbMap>)],
    train: &TrainConfig,
    lr: f64,
) -> Result<StepMetrics> {
    let model = &state.model;
    let keys = batch
        .iter()
        .map(|(s, _)| model.key_embedding(&state.key.params, &s.appearance_positive))
        .collect::<Result<Vec<_>>>()?;
    let mut weights = train.branch_weights();
    if !state.queue_is_warm() {
        weights.appearance = 0.0;
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grads = model.params.zeros_like();
    let mut mean = LossParts::default();
    for ((sample, map), key) in batch.iter().zip(&keys) {
        let inputs = SampleInputs {
            sample,
            teacher_map: map.as_ref(),
            key,
            queue: &state.queue,
        };
        let parts = accumulate_sample_gradients(model, &model.params, &inputs, &weights, &train.loss, scale, &mut grads)?;
        if !parts.is_finite() {
            return Err(non_finite(state.step, batch, format!("{parts:?}")));
        }
        mean.l_kd += parts.l_kd * scale;
        mean.l_m += parts.l_m * scale;
        mean.l_a += parts.l_a * scale;
    }
    if !grads.all_finite() {
        return Err(non_finite(state.step, batch, "non-finite gradient".into()));
    }

    let (mu, wd) = (train.sgd_momentum, train.weight_decay);
    for (name, p) in state.model.params.iter_mut() {
        let v = state.velocity.get_mut(name);
        let g = grads.get(name);
        ndarray::Zip::from(&mut *v).and(&mut *p).and(g).for_each(|v, p, &g| {
            *v = mu * *v + g + wd * *p;
            *p -= lr * *v;
        });
    }
    state.key.update(&state.model.params)?;
    for key in &keys {
        state.queue.push(key)?;
    }
    state.step += 1;
    Ok(StepMetrics {
        step: state.step - 1,
        l_kd: mean.l_kd,
        l_m: mean.l_m,
        l_a: mean.l_a,
        total: mean.weighted(&weights),
        lr,
        wall_time_s: 0.0,
    })
}

fn non_finite(step: u64, batch: &[(TrainingSample, Option<SegmentationProbMap>)], detail: String) -> Error {
    Error::NonFiniteLoss {
        step,
        video_ids: batch.iter().map(|(s, _)| s.video_id().to_string()).collect(),
        detail,
    }
}

/// Files produced by [`pretrain`].
#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    /// Model checkpoint of the last completed step.
    pub checkpoint: PathBuf,
    pub state: PathBuf,
    pub metrics_log: PathBuf,
    pub final_step: u64,
    pub metrics: Vec<StepMetrics>,
    pub model: Model,
}

/// Options that control a single invocation rather than the experiment.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunControl {
    /// Continue from the newest training state in the output directory.
    pub resume: bool,
    /// Stop (and snapshot) after this many total steps.
    pub stop_after: Option<u64>,
}

pub fn checkpoint_dir(out_dir: &Path) -> PathBuf {
    out_dir.join("checkpoints")
}

fn snapshot_paths(out_dir: &Path, step: u64) -> (PathBuf, PathBuf) {
    let dir = checkpoint_dir(out_dir);
    (dir.join(format!("step_{step:06}.ckpt")), dir.join(format!("step_{step:06}.state")))
}

/// Newest `step_*.state` file in the output directory.
pub fn latest_state(out_dir: &Path) -> Option<PathBuf> {
    let pattern = checkpoint_dir(out_dir).join("step_*.state");
    glob::glob(pattern.to_str()?)
        .ok()?
        .filter_map(std::result::Result::ok)
        .max()
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    BufReader::new(file)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|line| {
            let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
            Ok(serde_json::from_str(&line)?)
        })
        .collect()
}

/// Run (or continue) pre-training of `config.trainer.variant` on `data`,
/// writing snapshots and `metrics.jsonl` under `out_dir`.
pub fn pretrain(config: &Config, data: &TrainData<'_>, out_dir: &Path, control: RunControl) -> Result<PretrainOutcome> {
    config.validate()?;
    let train = &config.trainer;
    let per_epoch = data.steps_per_epoch(train.batch_size);
    if per_epoch == 0 {
        return Err(Error::Config(format!(
            "{} training videos cannot fill a batch of {}",
            data.videos.len(),
            train.batch_size
        )));
    }
    let total_steps = (per_epoch * train.epochs) as u64;
    let end = control.stop_after.map_or(total_steps, |s| s.min(total_steps));
    let hash = config.hash();
    fs::create_dir_all(checkpoint_dir(out_dir)).map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let metrics_log = out_dir.join("metrics.jsonl");

    let mut history = Vec::new();
    let mut state = match latest_state(out_dir).filter(|_| control.resume) {
        Some(path) => {
            let (state, seed) = TrainState::load(&path)?;
            if seed != train.seed || state.model.variant != train.variant || state.model.config != config.model {
                return Err(Error::Config(format!(
                    "{} was written by a different configuration",
                    path.display()
                )));
            }
            if metrics_log.exists() {
                history = read_metrics(&metrics_log)?;
                history.retain(|m| m.step < state.step);
            }
            state
        }
        None => {
            let model = Model::build(&config.model, train.variant, train.seed)?;
            TrainState::new(model, &train.loss)
        }
    };
    {
        let mut w = BufWriter::new(File::create(&metrics_log).map_err(|e| Error::io("creating metrics log", e))?);
        for m in &history {
            writeln!(w, "{}", serde_json::to_string(m)?).map_err(|e| Error::io("writing metrics log", e))?;
        }
    }
    let mut log = OpenOptions::new()
        .append(true)
        .open(&metrics_log)
        .map_err(|e| Error::io("opening metrics log", e))?;

    let started = Instant::now();
    let mut last = None;
    while state.step < end {
        let epoch = (state.step / per_epoch as u64) as usize;
        let lr = train.lr_at_epoch(epoch);
        let batch = make_batch(data, train, config.model.clip_length, &config.augment, state.step)?;
        let mut m = match pretrain_step(&mut state, &batch, train, lr) {
            Ok(m) => m,
            Err(e @ Error::NonFiniteLoss { .. }) => {
                let dump = out_dir.join("nonfinite_batch.json");
                if let Error::NonFiniteLoss { step, video_ids, detail } = &e {
                    let body = serde_json::json!({"step": step, "video_ids": video_ids, "detail": detail});
                    let _ = fs::write(&dump, serde_json::to_string_pretty(&body)?);
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        m.wall_time_s = started.elapsed().as_secs_f64();
        writeln!(log, "{}", serde_json::to_string(&m)?).map_err(|e| Error::io("writing metrics log", e))?;
        history.push(m);
        if state.step % train.snapshot_interval == 0 || state.step == end {
            last = Some(snapshot(&state, out_dir, train.seed, &hash)?);
        }
    }
    let (checkpoint, state_path) = match last {
        Some(paths) => paths,
        None => snapshot(&state, out_dir, train.seed, &hash)?,
    };
    Ok(PretrainOutcome {
        checkpoint,
        state: state_path,
        metrics_log,
        final_step: state.step,
        metrics: history,
        model: state.model,
    })
}

fn snapshot(state: &TrainState, out_dir: &Path, seed: u64, hash: &str) -> Result<(PathBuf, PathBuf)> {
    let (ckpt, st) = snapshot_paths(out_dir, state.step);
    state.model.save(&ckpt, state.step, seed, hash)?;
    state.save(&st, seed, hash)?;
    Ok((ckpt, st))
}
