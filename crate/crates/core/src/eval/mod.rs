//! Downstream evaluation: linear probe on frozen representations (with an
//! optional fine-tune mode), Acc@k, class-activation maps and reports.

mod cam;
mod probe;
mod report;

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{clip_tensor, Embedding, Model, ModelConfig};
use crate::teacher::align_class_map;
use crate::video_data::{center_crop, middle_frame, sample_clip, SourceVideo, VideoClip};

pub use cam::{actor_background_heat, blend_overlay, cam_from_features, cam_heatmap, overlay_file_name, render_overlay, CamMap, VizConfig};
pub use probe::{argmax, per_class_accuracy, topk_accuracy, LinearClassifier, ProbeConfig};
pub use report::{emit_report, read_report, Report, ReportRow, REPORT_SCHEMA};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub variant: String,
    pub seed: u64,
    pub num_classes: usize,
    pub acc_at_1: f64,
    pub acc_at_5: f64,
    pub per_class_accuracy: Vec<f64>,
}

/// `[z_h || z_c]`, or `z_c` alone for a model without a prior branch.
pub fn extract_representation(model: &Model, clip: &VideoClip) -> Result<Embedding> {
    model.representation(clip)
}

/// Evenly spaced evaluation clips of `video` at the probe speed, centre-cropped
/// to the model input.
pub fn evaluation_clips(video: &SourceVideo, model: &ModelConfig, cfg: &ProbeConfig) -> Result<Vec<VideoClip>> {
    let starts = video.start_count(cfg.clip_speed, model.clip_length);
    if starts == 0 {
        return Err(Error::VideoTooShort {
            video_id: video.video_id.clone(),
            frames: video.frame_count(),
            length: model.clip_length,
            speed: cfg.clip_speed,
        });
    }
    let n = cfg.clips_per_video;
    (0..n)
        .map(|k| {
            let start = if n == 1 { (starts - 1) / 2 } else { k * (starts - 1) / (n - 1) };
            let clip = sample_clip(video, cfg.clip_speed, model.clip_length, start)?;
            Ok(center_crop(&clip, model.input_height, model.input_width))
        })
        .collect()
}

/// Which features a probe is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    /// The clip representation used for action recognition.
    Representation,
    /// Global average pool of the shared encoder output, for CAM.
    PooledLow,
}

fn pooled_low(model: &Model, clip: &VideoClip) -> Result<Vec<f64>> {
    let f = model.low_features(clip)?;
    let c = f.shape()[0];
    let per = (f.len() / c) as f64;
    Ok(f.outer_iter().map(|ch| ch.sum() / per).collect())
}

/// One feature row per video: the mean over its evaluation clips.
pub fn video_features(model: &Model, videos: &[SourceVideo], cfg: &ProbeConfig, kind: FeatureKind) -> Result<Array2<f64>> {
    let dim = match kind {
        FeatureKind::Representation => model.representation_dim(),
        FeatureKind::PooledLow => model.config.low_output_dims()[0],
    };
    let mut out = Array2::zeros((videos.len(), dim));
    for (row, video) in out.rows_mut().into_iter().zip(videos) {
        let clips = evaluation_clips(video, &model.config, cfg)?;
        let mut acc = Array1::<f64>::zeros(dim);
        for clip in &clips {
            let v = match kind {
                FeatureKind::Representation => extract_representation(model, clip)?.values,
                FeatureKind::PooledLow => pooled_low(model, clip)?,
            };
            acc += &Array1::from(v);
        }
        let mut row = row;
        row.assign(&(acc / clips.len() as f64));
    }
    Ok(out)
}

pub fn labels_of(videos: &[SourceVideo]) -> Vec<usize> {
    videos.iter().map(|v| v.action_label).collect()
}

fn check_disjoint(train: &[SourceVideo], test: &[SourceVideo]) -> Result<()> {
    let ids: BTreeSet<&str> = train.iter().map(|v| v.video_id.as_str()).collect();
    if let Some(v) = test.iter().find(|v| ids.contains(v.video_id.as_str())) {
        return Err(Error::Config(format!("video {} appears in both train and test splits", v.video_id)));
    }
    Ok(())
}

fn num_classes_of(train: &[SourceVideo], test: &[SourceVideo]) -> usize {
    train.iter().chain(test).map(|v| v.action_label + 1).max().unwrap_or(0)
}

/// Fit a classifier on train features and score the test split.
pub fn linear_probe(
    train_features: &Array2<f64>,
    train_labels: &[usize],
    test_features: &Array2<f64>,
    test_labels: &[usize],
    num_classes: usize,
    cfg: &ProbeConfig,
) -> Result<(LinearClassifier, Array2<f64>)> {
    let clf = LinearClassifier::fit(train_features.view(), train_labels, num_classes, cfg)?;
    if let Some(&bad) = test_labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::Config(format!("test label {bad} has no class in the training split")));
    }
    let scores = clf.scores(test_features.view())?;
    Ok((clf, scores))
}

pub fn summarize(scores: &Array2<f64>, labels: &[usize], variant: &str, seed: u64) -> Result<ProbeResult> {
    let c = scores.ncols();
    Ok(ProbeResult {
        variant: variant.to_string(),
        seed,
        num_classes: c,
        acc_at_1: topk_accuracy(scores.view(), labels, 1)?,
        acc_at_5: topk_accuracy(scores.view(), labels, 5.min(c))?,
        per_class_accuracy: per_class_accuracy(scores.view(), labels),
    })
}

/// Probe a model on its representations. With `cfg.fine_tune` the backbone is
/// first trained jointly with a linear head on the train split.
pub fn evaluate_model(model: &Model, train: &[SourceVideo], test: &[SourceVideo], cfg: &ProbeConfig, seed: u64) -> Result<ProbeResult> {
    check_disjoint(train, test)?;
    let num_classes = num_classes_of(train, test);
    let tuned;
    let model = if cfg.fine_tune {
        tuned = fine_tune(model, train, num_classes, cfg)?;
        &tuned
    } else {
        model
    };
    let xtr = video_features(model, train, cfg, FeatureKind::Representation)?;
    let xte = video_features(model, test, cfg, FeatureKind::Representation)?;
    let (_, scores) = linear_probe(&xtr, &labels_of(train), &xte, &labels_of(test), num_classes, cfg)?;
    summarize(&scores, &labels_of(test), model.variant.as_str(), seed)
}

/// Probe on pooled shared-encoder features, the structure CAM requires.
pub fn fit_cam_probe(model: &Model, train: &[SourceVideo], cfg: &ProbeConfig) -> Result<LinearClassifier> {
    let x = video_features(model, train, cfg, FeatureKind::PooledLow)?;
    let labels = labels_of(train);
    let c = num_classes_of(train, &[]);
    LinearClassifier::fit(x.view(), &labels, c, cfg)
}

/// Heat statistics of one test video under its true class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CamFocus {
    pub video_id: String,
    pub actor_heat: f64,
    pub background_heat: f64,
}

impl CamFocus {
    pub fn focused(&self) -> bool {
        self.actor_heat > self.background_heat
    }
}

/// CAM of the middle evaluation clip of `video` and its ground-truth actor mask.
pub fn video_cam(model: &Model, probe: &LinearClassifier, video: &SourceVideo, cfg: &ProbeConfig, viz: &VizConfig) -> Result<(CamMap, VideoClip)> {
    let single = ProbeConfig { clips_per_video: 1, ..cfg.clone() };
    let clip = evaluation_clips(video, &model.config, &single)?.remove(0);
    let cam = cam_heatmap(model, probe, &clip, video.action_label, viz.cam_height, viz.cam_width)?;
    Ok((cam, clip))
}

pub fn cam_focus(model: &Model, probe: &LinearClassifier, video: &SourceVideo, cfg: &ProbeConfig, viz: &VizConfig) -> Result<CamFocus> {
    let (cam, clip) = video_cam(model, probe, video, cfg, viz)?;
    let gt = video.parsing_gt.as_ref().ok_or_else(|| Error::Dataset {
        video_id: video.video_id.clone(),
        message: "no ground-truth parsing for the actor mask".into(),
    })?;
    let frame = middle_frame(&clip)?;
    let mask = align_class_map(gt.index_axis(Axis(0), frame.source_index), clip.geometry.as_ref(), viz.cam_height, viz.cam_width);
    let (actor_heat, background_heat) = actor_background_heat(&cam.heat, &mask)?;
    Ok(CamFocus {
        video_id: video.video_id.clone(),
        actor_heat,
        background_heat,
    })
}

/// Train backbone and a linear head on the representation with softmax
/// cross-entropy, one video's middle evaluation clip per example.
pub fn fine_tune(model: &Model, train: &[SourceVideo], num_classes: usize, cfg: &ProbeConfig) -> Result<Model> {
    let mut model = model.clone();
    let dim = model.representation_dim();
    let single = ProbeConfig { clips_per_video: 1, ..cfg.clone() };
    let clips: Vec<VideoClip> = train
        .iter()
        .map(|v| Ok(evaluation_clips(v, &model.config, &single)?.remove(0)))
        .collect::<Result<_>>()?;
    let mut head_w = Array2::<f64>::zeros((num_classes, dim));
    let mut head_b = Array1::<f64>::zeros(num_classes);
    let arch = model.arch.clone();
    let lr = cfg.fine_tune_lr;
    for _ in 0..cfg.fine_tune_epochs {
        for (clip, video) in clips.iter().zip(train) {
            let params = &model.params;
            let low = arch.low.forward(params, clip_tensor(clip));
            let zc = arch.contrastive.forward(params, low.output().clone());
            let zh = arch.prior.as_ref().map(|p| p.forward(params, low.output().clone()));
            let mut rep: Vec<f64> = Vec::with_capacity(dim);
            if let Some(zh) = &zh {
                rep.extend(zh.output().iter());
            }
            rep.extend(zc.output().iter());
            let rep = Array1::from(rep);
            let mut p = head_w.dot(&rep) + &head_b;
            let max = p.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            p.mapv_inplace(|v| (v - max).exp());
            p /= p.sum();
            p[video.action_label] -= 1.0;
            let g_rep = head_w.t().dot(&p);
            head_w.scaled_add(-lr, &p.view().insert_axis(Axis(1)).dot(&rep.view().insert_axis(Axis(0))));
            head_b.scaled_add(-lr, &p);

            let mut grads = params.zeros_like();
            let split = if zh.is_some() { dim / 2 } else { 0 };
            let to_tensor = |s: &[f64]| ArrayD::from_shape_vec(IxDyn(&[s.len()]), s.to_vec()).expect("vector");
            let g = g_rep.as_slice().expect("contiguous");
            let mut g_low = arch.contrastive.backward(params, &zc, to_tensor(&g[split..]), &mut grads);
            if let (Some(prior), Some(zh)) = (&arch.prior, &zh) {
                g_low += &prior.backward(params, zh, to_tensor(&g[..split]), &mut grads);
            }
            arch.low.backward(params, &low, g_low, &mut grads);
            model.params.add_scaled(&grads, -lr);
        }
    }
    if !model.params.all_finite() {
        return Err(Error::Config("fine-tuning diverged; lower probe.fine_tune_lr".into()));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;
    use crate::video_data::{generate_corpus, SceneConfig};
    use rand::Rng;

    fn small_model() -> ModelConfig {
        ModelConfig {
            clip_length: 4,
            input_height: 16,
            input_width: 16,
            conv_channels: vec![4, 8],
            hidden_dim: 8,
            embed_dim: 8,
            proj_dim: 8,
            decoder_channels: 4,
            ..ModelConfig::default()
        }
    }

    fn small_scene() -> SceneConfig {
        SceneConfig {
            num_actions: 3,
            height: 16,
            width: 16,
            frame_count: 16,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn representation_dims_follow_variant() {
        let corpus = generate_corpus(&small_scene(), 1, 1, 3).unwrap();
        let cfg = ProbeConfig::default();
        for (variant, dim) in [(Variant::Full, 16), (Variant::NoKd, 8), (Variant::TaskIndependent, 16)] {
            let model = Model::build(&small_model(), variant, 1).unwrap();
            let f = video_features(&model, &corpus.train, &cfg, FeatureKind::Representation).unwrap();
            assert_eq!(f.dim(), (3, dim));
        }
    }

    #[test]
    fn probe_is_deterministic_and_bounded() {
        let corpus = generate_corpus(&small_scene(), 3, 2, 3).unwrap();
        let model = Model::build(&small_model(), Variant::Full, 1).unwrap();
        let cfg = ProbeConfig::default();
        let a = evaluate_model(&model, &corpus.train, &corpus.test, &cfg, 1).unwrap();
        let b = evaluate_model(&model, &corpus.train, &corpus.test, &cfg, 1).unwrap();
        assert_eq!(a, b);
        assert!((0.0..=1.0).contains(&a.acc_at_1));
        assert_eq!(a.acc_at_5, 1.0);
    }

    #[test]
    fn overlapping_splits_are_rejected() {
        let corpus = generate_corpus(&small_scene(), 2, 1, 3).unwrap();
        let model = Model::build(&small_model(), Variant::NoKd, 1).unwrap();
        let err = evaluate_model(&model, &corpus.train, &corpus.train, &ProbeConfig::default(), 0);
        assert!(err.is_err());
    }

    #[test]
    fn random_labels_give_chance_accuracy() {
        let mut rng = crate::rng::rng_for(5, &[]);
        let (n_train, n_test, c) = (400, 400, 4);
        let xtr = Array2::from_shape_fn((n_train, 6), |_| rng.gen_range(-1.0..1.0));
        let ytr: Vec<usize> = (0..n_train).map(|_| rng.gen_range(0..c)).collect();
        let xte = Array2::from_shape_fn((n_test, 6), |_| rng.gen_range(-1.0..1.0));
        let yte: Vec<usize> = (0..n_test).map(|_| rng.gen_range(0..c)).collect();
        let (_, scores) = linear_probe(&xtr, &ytr, &xte, &yte, c, &ProbeConfig::default()).unwrap();
        let acc = topk_accuracy(scores.view(), &yte, 1).unwrap();
        let p = 1.0 / c as f64;
        let sigma = (p * (1.0 - p) / n_test as f64).sqrt();
        assert!((acc - p).abs() <= 3.0 * sigma, "acc {acc}");
    }

    #[test]
    fn fine_tune_changes_the_backbone() {
        let corpus = generate_corpus(&small_scene(), 2, 1, 3).unwrap();
        let model = Model::build(&small_model(), Variant::Full, 1).unwrap();
        let cfg = ProbeConfig {
            fine_tune: true,
            fine_tune_epochs: 1,
            ..ProbeConfig::default()
        };
        let tuned = fine_tune(&model, &corpus.train, 3, &cfg).unwrap();
        let conv = model.params.names().find(|n| n.starts_with("f_l.")).unwrap();
        assert_ne!(tuned.params.get(conv), model.params.get(conv));
        let r = evaluate_model(&model, &corpus.train, &corpus.test, &cfg, 0).unwrap();
        assert!(r.acc_at_5 >= r.acc_at_1);
    }

    #[test]
    fn cam_of_a_video() {
        let corpus = generate_corpus(&small_scene(), 2, 1, 3).unwrap();
        let model = Model::build(&small_model(), Variant::Full, 1).unwrap();
        let cfg = ProbeConfig::default();
        let viz = VizConfig {
            cam_height: 16,
            cam_width: 16,
            ..VizConfig::default()
        };
        let probe = fit_cam_probe(&model, &corpus.train, &cfg).unwrap();
        assert_eq!(probe.dim(), 8);
        let focus = cam_focus(&model, &probe, &corpus.test[0], &cfg, &viz).unwrap();
        assert!(focus.actor_heat.is_finite() && focus.background_heat.is_finite());
    }
}
