//! Synthetic corpus: an articulated stick actor whose parts map one-to-one
//! onto parsing classes, moving according to one motion pattern per action.
//! Every action shares the same actor appearance; only the motion differs.

use ndarray::{Array3, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::SourceVideo;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_for};

/// Background plus torso, head, arms, legs, hands, feet.
pub const MAX_PART_CLASSES: usize = 7;

/// Number of distinct motion patterns the generator knows.
pub const MOTION_PATTERNS: usize = 8;

const PART_COLORS: [[f64; 3]; MAX_PART_CLASSES - 1] = [
    [0.85, 0.20, 0.20],
    [0.95, 0.80, 0.60],
    [0.20, 0.70, 0.25],
    [0.20, 0.30, 0.85],
    [0.95, 0.90, 0.20],
    [0.60, 0.30, 0.70],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub num_actions: usize,
    /// Parsing classes including background class 0.
    pub num_part_classes: usize,
    pub frame_count: usize,
    pub height: usize,
    pub width: usize,
    /// Actor height as a fraction of the frame height.
    pub body_fraction: f64,
    /// Multiplier on every motion amplitude.
    pub motion_amplitude: f64,
    /// Per-video random factor on motion rates, drawn from `[1 - x, 1 + x]`.
    pub rate_jitter: f64,
    /// Number of static coloured rectangles cluttering the background.
    pub clutter_rects: usize,
    /// Amplitude of the static background texture.
    pub texture_noise: f64,
    /// Amplitude of per-frame sensor noise.
    pub pixel_noise: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            num_actions: 8,
            num_part_classes: 4,
            frame_count: 48,
            height: 32,
            width: 32,
            body_fraction: 0.5,
            motion_amplitude: 1.0,
            rate_jitter: 0.2,
            clutter_rects: 3,
            texture_noise: 0.06,
            pixel_noise: 0.02,
        }
    }
}

impl SceneConfig {
    pub const MIN_RESOLUTION: usize = 16;

    pub fn validate(&self) -> Result<()> {
        if self.num_actions < 2 || self.num_actions > MOTION_PATTERNS {
            return Err(Error::Config(format!(
                "scene.num_actions must lie in 2..={MOTION_PATTERNS}, got {}",
                self.num_actions
            )));
        }
        if self.num_part_classes < 2 || self.num_part_classes > MAX_PART_CLASSES {
            return Err(Error::Config(format!(
                "scene.num_part_classes must lie in 2..={MAX_PART_CLASSES}, got {}",
                self.num_part_classes
            )));
        }
        if self.frame_count == 0 {
            return Err(Error::Config("scene.frame_count must be positive".into()));
        }
        if !(0.1..=0.8).contains(&self.body_fraction) {
            return Err(Error::Config("scene.body_fraction must lie in [0.1, 0.8]".into()));
        }
        if !(0.0..1.0).contains(&self.rate_jitter) {
            return Err(Error::Config("scene.rate_jitter must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Pose {
    cx: f64,
    cy: f64,
    scale: f64,
    arm_angle: f64,
    leg_swing: f64,
}

enum Shape {
    Rect { cx: f64, cy: f64, hx: f64, hy: f64 },
    Disc { cx: f64, cy: f64, r: f64 },
    Capsule { ax: f64, ay: f64, bx: f64, by: f64, r: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Rect { cx, cy, hx, hy } => (x - cx).abs() <= hx && (y - cy).abs() <= hy,
            Shape::Disc { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Capsule { ax, ay, bx, by, r } => {
                let (dx, dy) = (bx - ax, by - ay);
                let len2 = dx * dx + dy * dy;
                let t = if len2 > 0.0 {
                    (((x - ax) * dx + (y - ay) * dy) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (px, py) = (ax + t * dx - x, ay + t * dy - y);
                px * px + py * py <= r * r
            }
        }
    }
}

/// Shapes in painting order, each tagged with its parsing class.
fn body_shapes(pose: &Pose, unit: f64, num_classes: usize) -> Vec<(u8, Shape)> {
    let u = unit * pose.scale;
    let (cx, cy) = (pose.cx, pose.cy);
    let limb = |sx: f64, sy: f64, angle: f64, len: f64| {
        let (ax, ay) = (cx + sx * u, cy + sy * u);
        (ax, ay, ax + angle.sin() * len * u, ay + angle.cos() * len * u)
    };
    let arm_r = (0.045 * u).max(0.6);
    let leg_r = (0.05 * u).max(0.6);
    let end_r = (0.06 * u).max(0.75);

    let arms = [
        limb(-0.11, -0.15, -pose.arm_angle, 0.27),
        limb(0.11, -0.15, pose.arm_angle, 0.27),
    ];
    let legs = [
        limb(-0.06, 0.19, -(0.15 + pose.leg_swing), 0.30),
        limb(0.06, 0.19, 0.15 - pose.leg_swing, 0.30),
    ];

    let mut shapes = Vec::new();
    if num_classes > 4 {
        for &(ax, ay, bx, by) in &legs {
            shapes.push((4, Shape::Capsule { ax, ay, bx, by, r: leg_r }));
        }
    }
    shapes.push((1, Shape::Rect { cx, cy, hx: (0.11 * u).max(0.75), hy: 0.19 * u }));
    if num_classes > 3 {
        for &(ax, ay, bx, by) in &arms {
            shapes.push((3, Shape::Capsule { ax, ay, bx, by, r: arm_r }));
        }
    }
    if num_classes > 2 {
        shapes.push((2, Shape::Disc { cx, cy: cy - 0.31 * u, r: (0.1 * u).max(0.75) }));
    }
    if num_classes > 5 {
        for &(_, _, bx, by) in &arms {
            shapes.push((5, Shape::Disc { cx: bx, cy: by, r: end_r }));
        }
    }
    if num_classes > 6 {
        for &(_, _, bx, by) in &legs {
            shapes.push((6, Shape::Disc { cx: bx, cy: by, r: end_r }));
        }
    }
    shapes
}

const BASE_ARM_ANGLE: f64 = 0.35;

/// Pose at frame `t`. Every pattern leaves the actor at its initial placement at `t = 0`.
fn pose_at(action: usize, t: f64, start: &Pose, rate: f64, direction: f64, amp: f64, px: f64) -> Pose {
    let mut p = *start;
    let t = t * rate;
    match action {
        // walk: steady horizontal travel with swinging legs
        0 => {
            p.cx += direction * 0.22 * amp * px * t;
            p.leg_swing = 0.5 * (0.6 * t).sin();
        }
        // jump
        1 => p.cy -= 6.0 * amp * px * (0.2 * t).sin().abs(),
        // wave
        2 => p.arm_angle = BASE_ARM_ANGLE + 1.4 * (1.0 - (0.35 * t).cos()),
        // squat
        3 => p.scale *= 1.0 - 0.15 * amp * (1.0 - (0.3 * t).cos()),
        // shake
        4 => p.cx += 2.5 * amp * px * (1.1 * t).sin(),
        // windmill arms
        5 => p.arm_angle = BASE_ARM_ANGLE + 0.3 * t,
        // drift diagonally upward
        6 => {
            p.cx += direction * 0.15 * amp * px * t;
            p.cy -= 0.15 * amp * px * t;
        }
        // sink downward with arms spreading
        _ => {
            p.cy += 0.2 * amp * px * t;
            p.arm_angle = BASE_ARM_ANGLE + 0.02 * t;
        }
    }
    p
}

/// Render one synthetic video. Deterministic in `(scene, action, seed)`; the
/// actor's frame-0 placement and the background depend on `seed` only.
pub fn generate_synthetic_video(scene: &SceneConfig, action: usize, seed: u64) -> Result<SourceVideo> {
    scene.validate()?;
    if action >= scene.num_actions {
        return Err(Error::InvalidAction {
            action,
            num_actions: scene.num_actions,
        });
    }
    let (h, w, f) = (scene.height, scene.width, scene.frame_count);
    if h < SceneConfig::MIN_RESOLUTION || w < SceneConfig::MIN_RESOLUTION {
        return Err(Error::ResolutionTooSmall {
            height: h,
            width: w,
            min: SceneConfig::MIN_RESOLUTION,
        });
    }
    let px = h as f64 / 32.0;

    let mut place = rng_for(seed, &[0]);
    let unit = h as f64 * scene.body_fraction * place.gen_range(0.9..1.1);
    let start = Pose {
        cx: w as f64 * place.gen_range(0.38..0.62),
        cy: h as f64 * place.gen_range(0.42..0.55),
        scale: 1.0,
        arm_angle: BASE_ARM_ANGLE,
        leg_swing: 0.0,
    };

    let mut motion = rng_for(seed, &[1, action as u64]);
    let rate = motion.gen_range(1.0 - scene.rate_jitter..=1.0 + scene.rate_jitter);
    let direction = if motion.gen_bool(0.5) { 1.0 } else { -1.0 };

    let background = render_background(scene, seed);
    let mut frames = Array4::zeros((f, h, w, 3));
    let mut parsing = Array3::<u8>::zeros((f, h, w));
    let mut noise = rng_for(seed, &[3, action as u64]);
    for k in 0..f {
        let pose = pose_at(action, k as f64, &start, rate, direction, scene.motion_amplitude, px);
        let shapes = body_shapes(&pose, unit, scene.num_part_classes);
        for i in 0..h {
            let y = i as f64 + 0.5;
            for j in 0..w {
                let x = j as f64 + 0.5;
                let class = shapes
                    .iter()
                    .rev()
                    .find(|(_, s)| s.contains(x, y))
                    .map_or(0, |(c, _)| *c);
                parsing[[k, i, j]] = class;
                for ch in 0..3 {
                    let base = if class == 0 {
                        background[[i, j, ch]]
                    } else {
                        PART_COLORS[class as usize - 1][ch]
                    };
                    let n = if scene.pixel_noise > 0.0 {
                        noise.gen_range(-scene.pixel_noise..=scene.pixel_noise)
                    } else {
                        0.0
                    };
                    frames[[k, i, j, ch]] = (base + n).clamp(0.0, 1.0);
                }
            }
        }
    }
    SourceVideo::new(frames, Some(parsing), action, format!("synthetic_a{action}_s{seed}"))
}

fn render_background(scene: &SceneConfig, seed: u64) -> Array3<f64> {
    let (h, w) = (scene.height, scene.width);
    let mut rng = rng_for(seed, &[2]);
    let base: [f64; 3] = [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
    let mut bg = Array3::from_shape_fn((h, w, 3), |(_, _, c)| base[c]);
    for _ in 0..scene.clutter_rects {
        let color: [f64; 3] = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
        let rh = rng.gen_range(2..=h / 4);
        let rw = rng.gen_range(2..=w / 4);
        let y0 = rng.gen_range(0..h - rh);
        let x0 = rng.gen_range(0..w - rw);
        for i in y0..y0 + rh {
            for j in x0..x0 + rw {
                for c in 0..3 {
                    bg[[i, j, c]] = color[c];
                }
            }
        }
    }
    if scene.texture_noise > 0.0 {
        bg.mapv_inplace(|v| (v + rng.gen_range(-scene.texture_noise..=scene.texture_noise)).clamp(0.0, 1.0));
    }
    bg
}

/// Labelled train/test split of synthetic videos.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: Vec<SourceVideo>,
    pub test: Vec<SourceVideo>,
}

/// `train_per_action` and `test_per_action` videos for every action; seeds are
/// derived from `(seed, split, action, index)` so the two splits never share a video.
pub fn generate_corpus(
    scene: &SceneConfig,
    train_per_action: usize,
    test_per_action: usize,
    seed: u64,
) -> Result<Corpus> {
    let split = |tag: u64, per_action: usize, name: &str| -> Result<Vec<SourceVideo>> {
        let mut videos = Vec::with_capacity(per_action * scene.num_actions);
        for action in 0..scene.num_actions {
            for idx in 0..per_action {
                let video_seed = derive_seed(seed, &[tag, action as u64, idx as u64]);
                let mut v = generate_synthetic_video(scene, action, video_seed)?;
                v.video_id = format!("{name}_a{action}_{idx:03}");
                videos.push(v);
            }
        }
        Ok(videos)
    };
    Ok(Corpus {
        train: split(0, train_per_action, "train")?,
        test: split(1, test_per_action, "test")?,
    })
}
