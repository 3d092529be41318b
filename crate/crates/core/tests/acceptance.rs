//! Acceptance suite. Prints one line per criterion and exits non-zero if any
//! hard criterion fails. Pass criterion numbers as arguments to run a subset.

use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use mtvssl::eval::{self, cam_from_features, ProbeResult, Report};
use mtvssl::losses::{
    appearance_loss, appearance_loss_grad, kd_loss, kd_loss_grad, motion_loss, motion_loss_grad, NegativeQueue,
};
use mtvssl::model::{
    momentum_update, softmax_backward, Model, ModelConfig, ParamSet, Variant, APPEARANCE, CONTRASTIVE, DECODER, LOW, MOTION,
    PRIOR, SHARED_HIGH,
};
use mtvssl::rng::rng_for;
use mtvssl::teacher::{build_teacher, SegmentationProbMap};
use mtvssl::trainer::{
    accumulate_sample_gradients, make_batch, pretrain, read_metrics, sample_losses, BranchWeights, RunControl,
    SampleInputs, StepMetrics, TrainData, TrainState, REFERENCE_ROWS,
};
use mtvssl::video_data::Corpus;
use mtvssl::Config;
use ndarray::Array3;
use rand::Rng;

// Tolerances and thresholds.
const ORACLE_TOL: f64 = 1e-6;
const UNIFORM_TOL: f64 = 1e-9;
const GRAD_STEP: f64 = 1e-5;
const GRAD_REL_TOL: f64 = 1e-3;
/// Denominator floor of the relative error, so gradients that vanish up to
/// rounding are compared absolutely.
const GRAD_REL_FLOOR: f64 = 1e-6;
const GRAD_INSTANCES: usize = 20;
const ISOLATION_BATCHES: u64 = 10;
const GIBBS_PAIRS: usize = 1000;
const GIBBS_EQ_TOL: f64 = 1e-9;
const MOMENTUM_TOL: f64 = 1e-10;
const TOY_SEEDS: [u64; 3] = [0, 1, 2];
const MIN_PROBE_GAIN: f64 = 0.15;
const MAX_PRETRAIN_SECS: f64 = 15.0 * 60.0;
const MIN_CAM_FOCUS: f64 = 0.60;
const RESUME_TOL: f64 = 1e-9;

enum Verdict {
    Pass(String),
    Fail(String),
    Reported(String),
}

struct Criterion {
    id: u32,
    name: &'static str,
    run: fn(&mut Context) -> Verdict,
}

const CRITERIA: [Criterion; 9] = [
    Criterion { id: 1, name: "loss oracles", run: loss_oracles },
    Criterion { id: 2, name: "gradient checks", run: gradient_checks },
    Criterion { id: 3, name: "task-dependence isolation", run: isolation },
    Criterion { id: 4, name: "Gibbs property", run: gibbs },
    Criterion { id: 5, name: "queue and momentum mechanics", run: queue_and_momentum },
    Criterion { id: 6, name: "toy end-to-end probe gain", run: toy_end_to_end },
    Criterion { id: 7, name: "ablation direction full >= no_kd", run: ablation_direction },
    Criterion { id: 8, name: "CAM focus", run: cam_focus },
    Criterion { id: 9, name: "determinism and resume", run: determinism_and_resume },
];

fn main() {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut ctx = Context::default();
    let mut failures = 0;
    for c in CRITERIA.iter().filter(|c| selected.is_empty() || selected.contains(&c.id)) {
        let start = Instant::now();
        let verdict = panic::catch_unwind(AssertUnwindSafe(|| (c.run)(&mut ctx)))
            .unwrap_or_else(|e| Verdict::Fail(format!("panicked: {}", panic_message(&e))));
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match verdict {
            Verdict::Pass(d) => ("PASS", d),
            Verdict::Fail(d) => {
                failures += 1;
                ("FAIL", d)
            }
            Verdict::Reported(d) => ("REPORTED", d),
        };
        println!("criterion {} ({}): {tag} - {detail} [{secs:.1}s]", c.id, c.name);
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn panic_message(e: &Box<dyn std::any::Any + Send>) -> String {
    e.downcast_ref::<String>()
        .cloned()
        .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "unknown panic".into())
}

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

// ---------------------------------------------------------------- helpers

fn map(probs: &[f64], h: usize, w: usize, c: usize) -> SegmentationProbMap {
    SegmentationProbMap::new(Array3::from_shape_vec((h, w, c), probs.to_vec()).unwrap()).unwrap()
}

/// Channel-first `(C, H, W)` logits.
fn random_logits(rng: &mut impl Rng, h: usize, w: usize, c: usize, scale: f64) -> Array3<f64> {
    Array3::from_shape_fn((c, h, w), |_| rng.gen_range(-scale..scale))
}

fn random_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_REL_FLOOR)
}

fn central<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], i: usize) -> f64 {
    let mut p = x.to_vec();
    let mut m = x.to_vec();
    p[i] += GRAD_STEP;
    m[i] -= GRAD_STEP;
    (f(&p) - f(&m)) / (2.0 * GRAD_STEP)
}

/// Small configuration used by the mechanics checks.
fn toy_config() -> Config {
    let mut c = Config::default();
    c.data.scene.height = 16;
    c.data.scene.width = 16;
    c.data.scene.frame_count = 24;
    c.data.scene.num_actions = 4;
    c.data.train_per_action = 3;
    c.data.test_per_action = 1;
    c.augment.out_height = 16;
    c.augment.out_width = 16;
    c.model = ModelConfig {
        clip_length: 4,
        input_height: 16,
        input_width: 16,
        conv_channels: vec![4, 8],
        hidden_dim: 16,
        embed_dim: 16,
        proj_dim: 16,
        decoder_channels: 4,
        ..ModelConfig::default()
    };
    c.trainer.batch_size = 4;
    c.trainer.epochs = 2;
    c.trainer.lr_milestones = vec![1];
    c.trainer.loss.queue_capacity = 8;
    c.trainer.snapshot_interval = 2;
    c.validate().unwrap();
    c
}

fn random_queue(rng: &mut impl Rng, capacity: usize, dim: usize) -> NegativeQueue {
    let mut q = NegativeQueue::new(capacity, dim);
    for _ in 0..capacity {
        q.push(&unit(&random_vec(rng, dim))).unwrap();
    }
    q
}

// ---------------------------------------------------------------- 1

fn loss_oracles(_: &mut Context) -> Verdict {
    let mut checks: Vec<(String, f64, f64, f64)> = Vec::new();
    let mut push = |name: &str, got: f64, want: f64, tol: f64| checks.push((name.to_string(), got, want, tol));

    let ln2 = 2f64.ln();
    push("kd uniform C=2", kd_loss(&map(&[0.5, 0.5], 1, 1, 2), &map(&[0.5, 0.5], 1, 1, 2)).unwrap(), ln2, ORACLE_TOL);
    push("kd one-hot vs uniform", kd_loss(&map(&[1.0, 0.0], 1, 1, 2), &map(&[0.5, 0.5], 1, 1, 2)).unwrap(), ln2, ORACLE_TOL);
    let want = -(0.7 * 0.6f64.ln() + 0.3 * 0.4f64.ln());
    push("kd (0.7,0.3)/(0.6,0.4)", kd_loss(&map(&[0.7, 0.3], 1, 1, 2), &map(&[0.6, 0.4], 1, 1, 2)).unwrap(), want, ORACLE_TOL);
    push("kd oracle literal", want, 0.632465, 5e-7);

    // Motion examples with prescribed similarities: unit vectors at known angles.
    let at = |d: f64| vec![d, (1.0 - d * d).sqrt()];
    let a = vec![1.0, 0.0];
    push("motion satisfied", motion_loss(&a, &at(0.9), &at(0.2), 0.5).unwrap(), 0.0, ORACLE_TOL);
    push("motion equal", motion_loss(&a, &at(0.3), &at(0.3), 0.5).unwrap(), 0.5, ORACLE_TOL);
    push("motion analytic", motion_loss(&a, &at(0.4), &at(0.3), 0.5).unwrap(), 0.4, ORACLE_TOL);

    let mut q3 = NegativeQueue::new(3, 2);
    for _ in 0..3 {
        q3.push(&a).unwrap();
    }
    push("appearance uniform K=3", appearance_loss(&a, &a, &q3, 0.07).unwrap(), 4f64.ln(), ORACLE_TOL);
    let mut q1 = NegativeQueue::new(1, 2);
    q1.push(&[0.0, 1.0]).unwrap();
    push(
        "appearance d+=1 d-=0 tau=1",
        appearance_loss(&a, &a, &q1, 1.0).unwrap(),
        (1.0 + (-1f64).exp()).ln(),
        ORACLE_TOL,
    );
    for k in [1usize, 7, 256] {
        let mut q = NegativeQueue::new(k, 2);
        for _ in 0..k {
            q.push(&a).unwrap();
        }
        push(
            &format!("appearance uniform K={k}"),
            appearance_loss(&a, &a, &q, 0.07).unwrap(),
            ((k + 1) as f64).ln(),
            UNIFORM_TOL,
        );
    }

    let bad: Vec<String> = checks
        .iter()
        .filter(|(_, got, want, tol)| (got - want).abs() > *tol)
        .map(|(n, got, want, _)| format!("{n}: {got} vs {want}"))
        .collect();
    verdict(bad.is_empty(), format!("{} oracle values checked; mismatches: {bad:?}", checks.len()))
}

// ---------------------------------------------------------------- 2

fn gradient_checks(_: &mut Context) -> Verdict {
    let mut rng = rng_for(2, &[]);
    let mut worst = [0.0f64; 4];
    let (h, w, c, d) = (4, 4, 4, 16);

    for _ in 0..GRAD_INSTANCES {
        // KD through the student softmax, as the decoder sees it.
        let teacher = SegmentationProbMap::from_logits(random_logits(&mut rng, h, w, c, 2.0).view());
        let logits = random_logits(&mut rng, h, w, c, 2.0);
        let student = SegmentationProbMap::from_logits(logits.view());
        let (_, g_probs) = kd_loss_grad(&teacher, &student).unwrap();
        let g_logits = softmax_backward(student.probs().view(), g_probs.view());
        let flat = logits.as_slice().unwrap().to_vec();
        let f = |x: &[f64]| {
            let l = Array3::from_shape_vec((c, h, w), x.to_vec()).unwrap();
            kd_loss(&teacher, &SegmentationProbMap::from_logits(l.view())).unwrap()
        };
        for (k, g) in g_logits.iter().enumerate() {
            worst[0] = worst[0].max(rel_err(*g, central(f, &flat, k)));
        }

        // Motion: keep away from the hinge kink.
        let (a, p, n, margin) = loop {
            let a = random_vec(&mut rng, d);
            let p = random_vec(&mut rng, d);
            let n = random_vec(&mut rng, d);
            let margin = rng.gen_range(0.1..1.0);
            let raw = margin - (cos(&a, &p) - cos(&a, &n));
            if raw > 1e-3 {
                break (a, p, n, margin);
            }
        };
        let g = motion_loss_grad(&a, &p, &n, margin).unwrap();
        for i in 0..d {
            worst[1] = worst[1]
                .max(rel_err(g.anchor[i], central(|x| motion_loss(x, &p, &n, margin).unwrap(), &a, i)))
                .max(rel_err(g.positive[i], central(|x| motion_loss(&a, x, &n, margin).unwrap(), &p, i)))
                .max(rel_err(g.negative[i], central(|x| motion_loss(&a, &p, x, margin).unwrap(), &n, i)));
        }

        // Appearance.
        let queue = random_queue(&mut rng, 8, d);
        let tau = rng.gen_range(0.05..1.0);
        let a = random_vec(&mut rng, d);
        let k = random_vec(&mut rng, d);
        let g = appearance_loss_grad(&a, &k, &queue, tau).unwrap();
        for i in 0..d {
            worst[2] = worst[2]
                .max(rel_err(g.anchor[i], central(|x| appearance_loss(x, &k, &queue, tau).unwrap(), &a, i)))
                .max(rel_err(g.positive[i], central(|x| appearance_loss(&a, x, &queue, tau).unwrap(), &k, i)));
        }
    }

    // Full forward pass, all branches active, toy dimensions.
    let cfg = toy_config();
    let corpus = cfg.data.load_corpus().unwrap();
    let teacher = build_teacher(&cfg.teacher).unwrap();
    let data = TrainData {
        videos: &corpus.train,
        teacher: Some(teacher.as_ref()),
    };
    let model = Model::build(&cfg.model, Variant::Full, 5).unwrap();
    let weights = BranchWeights { kd: 1.0, motion: 1.0, appearance: 1.0 };
    let mut loss_cfg = cfg.trainer.loss.clone();
    loss_cfg.temperature = 0.5;
    let mut instances = 0;
    let mut step = 0;
    while instances < GRAD_INSTANCES {
        let batch = make_batch(&data, &cfg.trainer, cfg.model.clip_length, &cfg.augment, step).unwrap();
        step += 1;
        for (sample, teacher_map) in &batch {
            if instances == GRAD_INSTANCES {
                break;
            }
            let key = model.key_embedding(&model.params, &sample.appearance_positive).unwrap();
            let queue = random_queue(&mut rng, 8, cfg.model.proj_dim);
            let inputs = SampleInputs {
                sample,
                teacher_map: teacher_map.as_ref(),
                key: &key,
                queue: &queue,
            };
            let objective = |p: &ParamSet| {
                sample_losses(&model, p, &inputs, &weights, &loss_cfg).unwrap().weighted(&weights)
            };
            let mut grads = model.params.zeros_like();
            let parts =
                accumulate_sample_gradients(&model, &model.params, &inputs, &weights, &loss_cfg, 1.0, &mut grads).unwrap();
            if parts.l_m <= 1e-3 {
                continue;
            }
            instances += 1;
            for name in model.params.names() {
                let len = model.params.get(name).len();
                for _ in 0..2 {
                    let idx = rng.gen_range(0..len);
                    let mut plus = model.params.clone();
                    let mut minus = model.params.clone();
                    plus.get_mut(name).as_slice_mut().unwrap()[idx] += GRAD_STEP;
                    minus.get_mut(name).as_slice_mut().unwrap()[idx] -= GRAD_STEP;
                    let numeric = (objective(&plus) - objective(&minus)) / (2.0 * GRAD_STEP);
                    worst[3] = worst[3].max(rel_err(grads.get(name).as_slice().unwrap()[idx], numeric));
                }
            }
        }
    }
    let ok = worst.iter().all(|&e| e < GRAD_REL_TOL);
    verdict(
        ok,
        format!(
            "max relative error over {GRAD_INSTANCES} instances each: kd {:.1e}, motion {:.1e}, appearance {:.1e}, full model {:.1e} (tol {GRAD_REL_TOL:.0e})",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
}

// ---------------------------------------------------------------- 3

/// Norm of a parameter group's gradient; panics if the group has no parameters,
/// so that no check passes vacuously.
fn group_norm(grads: &ParamSet, prefixes: &[&str]) -> f64 {
    assert!(prefixes.iter().all(|p| grads.subset(&[p]).len() > 0), "missing group in {prefixes:?}");
    grads.norm_of(prefixes)
}

fn group_max(grads: &ParamSet, prefixes: &[&str]) -> f64 {
    assert!(prefixes.iter().all(|p| grads.subset(&[p]).len() > 0), "missing group in {prefixes:?}");
    grads.max_abs_of(prefixes)
}

fn isolation(_: &mut Context) -> Verdict {
    let cfg = Config::default();
    let corpus = cfg.data.load_corpus().unwrap();
    let teacher = build_teacher(&cfg.teacher).unwrap();
    let data = TrainData {
        videos: &corpus.train,
        teacher: Some(teacher.as_ref()),
    };
    let mut rng = rng_for(3, &[]);
    let mut problems = Vec::new();
    let mut min_f_l = f64::INFINITY;
    let mut min_shared = f64::INFINITY;
    for variant in [Variant::Full, Variant::TaskIndependent] {
        let model = Model::build(&cfg.model, variant, 11).unwrap();
        let kd = BranchWeights::from_config(&cfg.trainer.loss).kd_only();
        let contrastive = BranchWeights::from_config(&cfg.trainer.loss).contrastive_only();
        for b in 0..ISOLATION_BATCHES {
            let batch = make_batch(&data, &cfg.trainer, cfg.model.clip_length, &cfg.augment, b * 7 + 1).unwrap();
            let queue = random_queue(&mut rng, 16, cfg.model.proj_dim);
            let mut g_kd = model.params.zeros_like();
            let mut g_c = model.params.zeros_like();
            for (sample, teacher_map) in &batch {
                let key = model.key_embedding(&model.params, &sample.appearance_positive).unwrap();
                let inputs = SampleInputs {
                    sample,
                    teacher_map: teacher_map.as_ref(),
                    key: &key,
                    queue: &queue,
                };
                let s = 1.0 / batch.len() as f64;
                accumulate_sample_gradients(&model, &model.params, &inputs, &kd, &cfg.trainer.loss, s, &mut g_kd).unwrap();
                accumulate_sample_gradients(&model, &model.params, &inputs, &contrastive, &cfg.trainer.loss, s, &mut g_c)
                    .unwrap();
            }
            let kd_f_l = group_norm(&g_kd, &[LOW]);
            let c_f_l = group_norm(&g_c, &[LOW]);
            min_f_l = min_f_l.min(kd_f_l).min(c_f_l);
            if kd_f_l == 0.0 || c_f_l == 0.0 {
                problems.push(format!("{variant} batch {b}: zero f_l gradient"));
            }
            match variant {
                Variant::Full => {
                    let leak_kd = group_max(&g_kd, &[CONTRASTIVE, MOTION, APPEARANCE]);
                    let leak_c = group_max(&g_c, &[PRIOR, DECODER]);
                    if leak_kd != 0.0 || leak_c != 0.0 {
                        problems.push(format!("full batch {b}: leakage kd->contrastive {leak_kd}, contrastive->prior {leak_c}"));
                    }
                }
                _ => {
                    let a = group_norm(&g_kd, &[SHARED_HIGH]);
                    let c = group_norm(&g_c, &[SHARED_HIGH]);
                    min_shared = min_shared.min(a).min(c);
                    if a == 0.0 || c == 0.0 {
                        problems.push(format!("ti batch {b}: shared encoder gradient kd {a}, contrastive {c}"));
                    }
                }
            }
        }
    }
    verdict(
        problems.is_empty(),
        format!(
            "{ISOLATION_BATCHES} batches per variant; cross-branch gradients exactly zero; min |grad f_l| {min_f_l:.2e}, min |grad h_shared| (TI) {min_shared:.2e}; problems: {problems:?}"
        ),
    )
}

// ---------------------------------------------------------------- 4

fn gibbs(_: &mut Context) -> Verdict {
    let mut rng = rng_for(4, &[]);
    let mut min_gap = f64::INFINITY;
    let mut max_self_gap = 0.0f64;
    let mut violations = 0;
    for k in 0..GIBBS_PAIRS {
        let (h, w, c) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(2..6));
        let scale = if k % 2 == 0 { 1.0 } else { 6.0 };
        let t = SegmentationProbMap::from_logits(random_logits(&mut rng, h, w, c, scale).view());
        let s = SegmentationProbMap::from_logits(random_logits(&mut rng, h, w, c, scale).view());
        let self_loss = kd_loss(&t, &t).unwrap();
        let entropy = -t.probs().iter().map(|p| if *p > 0.0 { p * p.ln() } else { 0.0 }).sum::<f64>() / (h * w) as f64;
        let gap = kd_loss(&t, &s).unwrap() - self_loss;
        let copy_gap = kd_loss(&t, &SegmentationProbMap::new(t.probs().clone()).unwrap()).unwrap() - self_loss;
        max_self_gap = max_self_gap.max(copy_gap.abs()).max((self_loss - entropy).abs());
        min_gap = min_gap.min(gap);
        // Distinct random maps must be strictly worse; identical maps must tie.
        if gap <= GIBBS_EQ_TOL || copy_gap.abs() > GIBBS_EQ_TOL || (self_loss - entropy).abs() > GIBBS_EQ_TOL {
            violations += 1;
        }
    }
    verdict(
        violations == 0,
        format!(
            "{GIBBS_PAIRS} pairs: min kd(t,s)-kd(t,t) {min_gap:.3e} (> {GIBBS_EQ_TOL:.0e}), max |kd(t,t)-H(t)| or self gap {max_self_gap:.1e}; violations {violations}"
        ),
    )
}

// ---------------------------------------------------------------- 5

fn queue_and_momentum(_: &mut Context) -> Verdict {
    let mut problems = Vec::new();
    let k = 16;
    let mut q = NegativeQueue::new(k, 3);
    let pushed: Vec<Vec<f64>> = (0..10 * k).map(|i| unit(&[1.0, i as f64, 0.5])).collect();
    for (n, key) in pushed.iter().enumerate() {
        q.push(key).unwrap();
        let expect_len = (n + 1).min(k);
        if q.len() != expect_len {
            problems.push(format!("length {} after {} pushes", q.len(), n + 1));
        }
        if q.snapshot() != pushed[n + 1 - expect_len..=n].to_vec() {
            problems.push(format!("snapshot order wrong after {} pushes", n + 1));
        }
    }

    let cfg = toy_config();
    let model = Model::build(&cfg.model, Variant::Full, 1).unwrap();
    let other = Model::build(&cfg.model, Variant::Full, 2).unwrap();
    let student = other.params.subset(&model.arch.key_prefixes());
    let start = model.params.subset(&model.arch.key_prefixes());
    let m: f64 = 0.95;
    let mut shadow = start.clone();
    for _ in 0..100 {
        momentum_update(&student, &mut shadow, m).unwrap();
    }
    let decay = m.powi(100);
    let mut worst = 0.0f64;
    for (name, v) in shadow.iter() {
        for ((s, s0), th) in v.iter().zip(start.get(name)).zip(student.get(name)) {
            worst = worst.max((s - (decay * s0 + (1.0 - decay) * th)).abs());
        }
    }
    if worst > MOMENTUM_TOL {
        problems.push(format!("closed form error {worst:.2e}"));
    }
    let mut frozen = start.clone();
    momentum_update(&student, &mut frozen, 1.0).unwrap();
    if frozen != start {
        problems.push("m = 1 changed the shadow".into());
    }
    let mut copied = start.clone();
    momentum_update(&student, &mut copied, 0.0).unwrap();
    if copied != student {
        problems.push("m = 0 did not copy the student".into());
    }
    let state = TrainState::new(model, &cfg.trainer.loss);
    let prefixes = state.key.prefixes();
    if !(prefixes.contains(&LOW) && prefixes.contains(&APPEARANCE) && prefixes.contains(&CONTRASTIVE) && prefixes.len() == 3) {
        problems.push(format!("key encoder covers {prefixes:?}"));
    }
    verdict(
        problems.is_empty(),
        format!("FIFO over {} pushes at K={k}; 100-step closed-form error {worst:.1e}; problems: {problems:?}", 10 * k),
    )
}

// ---------------------------------------------------------------- 6-8

#[derive(Default)]
struct Context {
    toy: Option<ToyRuns>,
}

struct ToyRun {
    seed: u64,
    full: Model,
    full_probe: ProbeResult,
    random_probe: ProbeResult,
    no_kd_probe: ProbeResult,
    pretrain_secs: f64,
    /// Mean total loss over the first epoch after queue warm-up and over the last epoch.
    loss_trend: (f64, f64),
}

struct ToyRuns {
    config: Config,
    corpus: Corpus,
    runs: Vec<ToyRun>,
}

fn train_variant(config: &Config, corpus: &Corpus, variant: Variant, seed: u64, dir: &Path) -> (Model, f64, (f64, f64)) {
    let mut cfg = config.clone();
    cfg.trainer.variant = variant;
    cfg.trainer.seed = seed;
    let teacher = build_teacher(&cfg.teacher).unwrap();
    let data = TrainData {
        videos: &corpus.train,
        teacher: variant.has_kd().then_some(teacher.as_ref()),
    };
    let start = Instant::now();
    let outcome = pretrain(&cfg, &data, &dir.join(format!("{variant}_{seed}")), RunControl::default()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let window = data.steps_per_epoch(cfg.trainer.batch_size);
    let totals: Vec<f64> = outcome.metrics.iter().map(|m| m.total).collect();
    let warm = outcome.metrics.iter().position(|m| m.l_a > 0.0).unwrap_or(0);
    let trend = (
        mean(totals[warm..warm + window].iter().copied()),
        mean(totals[totals.len() - window..].iter().copied()),
    );
    (outcome.model, secs, trend)
}

fn toy_runs(ctx: &mut Context) -> &ToyRuns {
    ctx.toy.get_or_insert_with(|| {
        let config = Config::default();
        let corpus = config.data.load_corpus().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let probe = |m: &Model, seed| eval::evaluate_model(m, &corpus.train, &corpus.test, &config.probe, seed).unwrap();
        let runs = TOY_SEEDS
            .iter()
            .map(|&seed| {
                let random_probe = probe(&Model::build(&config.model, Variant::Full, seed).unwrap(), seed);
                let (full, pretrain_secs, loss_trend) = train_variant(&config, &corpus, Variant::Full, seed, dir.path());
                let full_probe = probe(&full, seed);
                let (no_kd, _, _) = train_variant(&config, &corpus, Variant::NoKd, seed, dir.path());
                let no_kd_probe = probe(&no_kd, seed);
                ToyRun {
                    seed,
                    full,
                    full_probe,
                    random_probe,
                    no_kd_probe,
                    pretrain_secs,
                    loss_trend,
                }
            })
            .collect();
        ToyRuns { config, corpus, runs }
    })
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn toy_end_to_end(ctx: &mut Context) -> Verdict {
    let toy = toy_runs(ctx);
    let trained = mean(toy.runs.iter().map(|r| r.full_probe.acc_at_1));
    let random = mean(toy.runs.iter().map(|r| r.random_probe.acc_at_1));
    let slowest = toy.runs.iter().map(|r| r.pretrain_secs).fold(0.0, f64::max);
    let per_seed: Vec<String> = toy
        .runs
        .iter()
        .map(|r| format!("seed {}: {:.3} vs {:.3}", r.seed, r.full_probe.acc_at_1, r.random_probe.acc_at_1))
        .collect();
    let gain = trained - random;
    let trends: Vec<String> = toy.runs.iter().map(|r| format!("{:.2}->{:.2}", r.loss_trend.0, r.loss_trend.1)).collect();
    let fell = toy.runs.iter().filter(|r| r.loss_trend.1 < r.loss_trend.0).count();
    verdict(
        gain >= MIN_PROBE_GAIN && slowest <= MAX_PRETRAIN_SECS,
        format!(
            "mean Acc@1 pre-trained {trained:.3} vs random init {random:.3}, gain {:.1} pp (need >= {:.0}); {}; slowest pre-training {slowest:.0}s on one core (limit {MAX_PRETRAIN_SECS:.0}s); total loss first->last epoch {} (fell in {fell}/{})",
            100.0 * gain,
            100.0 * MIN_PROBE_GAIN,
            per_seed.join(", "),
            trends.join(", "),
            toy.runs.len()
        ),
    )
}

fn ablation_direction(ctx: &mut Context) -> Verdict {
    let toy = toy_runs(ctx);
    let results: Vec<ProbeResult> = toy
        .runs
        .iter()
        .flat_map(|r| [r.full_probe.clone(), r.no_kd_probe.clone()])
        .collect();
    let mut report = Report::from_results(&results);
    for row in &mut report.summary {
        if let Some(r) = REFERENCE_ROWS.iter().find(|r| r.variant.as_str() == row.variant) {
            row.reference_acc1 = Some(r.acc1);
            row.reference_acc5 = Some(r.acc5);
        }
    }
    report.reference_note = Some("published C3D / UCF101 numbers".into());
    for line in report.to_table().lines() {
        println!("    {line}");
    }
    let full = report.mean_acc1("full").unwrap();
    let no_kd = report.mean_acc1("no_kd").unwrap();
    Verdict::Reported(format!(
        "full {:.1}% vs no_kd {:.1}% over {} seeds: ordering {} (reference 80.4 vs 77.6)",
        100.0 * full,
        100.0 * no_kd,
        toy.runs.len(),
        if full >= no_kd { "holds" } else { "does not hold" }
    ))
}

fn cam_focus(ctx: &mut Context) -> Verdict {
    let toy = toy_runs(ctx);
    let cfg = &toy.config;
    let mut fractions = Vec::new();
    let mut range_ok = true;
    let mut scale_ok = true;
    for run in &toy.runs {
        let probe = eval::fit_cam_probe(&run.full, &toy.corpus.train, &cfg.probe).unwrap();
        let mut focused = 0;
        for video in &toy.corpus.test {
            let focus = eval::cam_focus(&run.full, &probe, video, &cfg.probe, &cfg.viz).unwrap();
            focused += focus.focused() as usize;
            let (cam, clip) = eval::video_cam(&run.full, &probe, video, &cfg.probe, &cfg.viz).unwrap();
            range_ok &= cam.heat.iter().all(|v| (0.0..=1.0).contains(v));
            let features = run.full.low_features(&clip).unwrap().into_dimensionality().unwrap();
            let weights = probe.raw_class_weights(video.action_label);
            for factor in [2.0, 0.25, 8.0] {
                let scaled: Vec<f64> = weights.iter().map(|w| w * factor).collect();
                let a = cam_from_features(features.view(), &scaled, cfg.viz.cam_height, cfg.viz.cam_width).unwrap();
                scale_ok &= a == cam.heat;
            }
        }
        fractions.push(focused as f64 / toy.corpus.test.len() as f64);
    }
    let focus = mean(fractions.iter().copied());
    verdict(
        focus >= MIN_CAM_FOCUS && range_ok && scale_ok,
        format!(
            "actor heat > background heat on {:.1}% of test clips (mean over seeds; need >= {:.0}%), per seed {:?}; values in [0,1]: {range_ok}; scale invariance exact: {scale_ok}",
            100.0 * focus,
            100.0 * MIN_CAM_FOCUS,
            fractions.iter().map(|f| format!("{:.1}%", 100.0 * f)).collect::<Vec<_>>()
        ),
    )
}

// ---------------------------------------------------------------- 9

fn determinism_and_resume(_: &mut Context) -> Verdict {
    let cfg = toy_config();
    let corpus = cfg.data.load_corpus().unwrap();
    let teacher = build_teacher(&cfg.teacher).unwrap();
    let data = TrainData {
        videos: &corpus.train,
        teacher: Some(teacher.as_ref()),
    };
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, control: RunControl| pretrain(&cfg, &data, &dir.path().join(name), control).unwrap();

    let a = run("a", RunControl::default());
    let b = run("b", RunControl::default());
    let logs_equal = a.metrics.len() == b.metrics.len() && a.metrics.iter().zip(&b.metrics).all(|(x, y)| x.same_values(y));

    let stop = 3;
    run("r", RunControl { resume: false, stop_after: Some(stop) });
    let resumed = run("r", RunControl { resume: true, stop_after: None });
    let logged: Vec<StepMetrics> = read_metrics(&resumed.metrics_log).unwrap();
    let steps: Vec<u64> = logged.iter().map(|m| m.step).collect();
    let contiguous = steps == (0..a.final_step).collect::<Vec<_>>();
    let next = &logged[stop as usize];
    let reference = &a.metrics[stop as usize];
    let next_err = [
        (next.total - reference.total).abs(),
        (next.l_kd - reference.l_kd).abs(),
        (next.l_m - reference.l_m).abs(),
        (next.l_a - reference.l_a).abs(),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    let params_equal = resumed.model.params == a.model.params;
    verdict(
        logs_equal && contiguous && next_err <= RESUME_TOL && params_equal,
        format!(
            "identical-seed logs equal: {logs_equal} ({} steps); resumed steps contiguous: {contiguous}; step-{stop} loss error after resume {next_err:.1e} (tol {RESUME_TOL:.0e}); final parameters equal: {params_equal}",
            a.metrics.len()
        ),
    )
}
