use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;

use super::{augment, middle_frame, sample_clip, AugmentConfig, Frame, SourceVideo, VideoClip};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_for};

/// One pre-training example. All clips come from the same source video.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub anchor: VideoClip,
    /// Same speed as the anchor, different start offset.
    pub speed_positive: VideoClip,
    /// Different speed.
    pub speed_negative: VideoClip,
    /// Independently augmented clip at the anchor's speed.
    pub appearance_positive: VideoClip,
    /// Un-augmented middle frame of the anchor; its `geometry` is the anchor's crop.
    pub teacher_frame: Frame,
}

impl TrainingSample {
    pub fn video_id(&self) -> &str {
        &self.anchor.source_id
    }
}

/// Draw a [`TrainingSample`] from `video`, deterministically from `seed`.
pub fn make_training_sample(
    video: &SourceVideo,
    speeds: &[usize],
    length: usize,
    augment_cfg: &AugmentConfig,
    seed: u64,
) -> Result<TrainingSample> {
    let distinct: BTreeSet<usize> = speeds.iter().copied().collect();
    if distinct.len() < 2 || distinct.contains(&0) {
        return Err(Error::Config(format!(
            "need at least two distinct positive speeds, got {speeds:?}"
        )));
    }
    let speeds: Vec<usize> = distinct.into_iter().collect();
    let too_short = |speed: usize| Error::VideoTooShort {
        video_id: video.video_id.clone(),
        frames: video.frame_count(),
        length,
        speed,
    };
    // The anchor speed needs two distinct starts; every other speed needs one.
    for &speed in &speeds {
        if video.start_count(speed, length) < 2 {
            return Err(too_short(speed));
        }
    }

    let mut rng = rng_for(seed, &[0x5A3]);
    let anchor_speed = *speeds.choose(&mut rng).expect("non-empty");
    let others: Vec<usize> = speeds.iter().copied().filter(|&s| s != anchor_speed).collect();
    let negative_speed = *others.choose(&mut rng).expect("at least one alternative");

    let starts = video.start_count(anchor_speed, length);
    let anchor_start = rng.gen_range(0..starts);
    let mut positive_start = rng.gen_range(0..starts - 1);
    if positive_start >= anchor_start {
        positive_start += 1;
    }
    let negative_start = rng.gen_range(0..video.start_count(negative_speed, length));
    let appearance_start = rng.gen_range(0..starts);

    let raw_anchor = sample_clip(video, anchor_speed, length, anchor_start)?;
    let clip_seed = |k: u64| derive_seed(seed, &[0xC11, k]);
    // The speed triplet shares one augmentation so that only timing differs.
    let motion_seed = clip_seed(0);
    let anchor = augment(&raw_anchor, augment_cfg, motion_seed)?;
    let speed_positive = augment(
        &sample_clip(video, anchor_speed, length, positive_start)?,
        augment_cfg,
        motion_seed,
    )?;
    let speed_negative = augment(
        &sample_clip(video, negative_speed, length, negative_start)?,
        augment_cfg,
        motion_seed,
    )?;
    let appearance_positive = augment(
        &sample_clip(video, anchor_speed, length, appearance_start)?,
        augment_cfg,
        clip_seed(1),
    )?;

    let mut teacher_frame = middle_frame(&raw_anchor)?;
    teacher_frame.geometry = anchor.geometry;

    Ok(TrainingSample {
        anchor,
        speed_positive,
        speed_negative,
        appearance_positive,
        teacher_frame,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::video_data::{generate_synthetic_video, SceneConfig};

    fn video() -> SourceVideo {
        let scene = SceneConfig {
            frame_count: 40,
            ..SceneConfig::default()
        };
        generate_synthetic_video(&scene, 1, 3).unwrap()
    }

    fn is_progression(clip: &VideoClip) -> bool {
        clip.frame_indices.windows(2).all(|w| w[1] - w[0] == clip.speed)
    }

    #[test]
    fn two_speeds_force_the_negative() {
        let v = video();
        let cfg = AugmentConfig::default();
        for seed in 0..20 {
            let s = make_training_sample(&v, &[1, 2], 8, &cfg, seed).unwrap();
            let expected = if s.anchor.speed == 1 { 2 } else { 1 };
            assert_eq!(s.speed_negative.speed, expected);
        }
    }

    #[test]
    fn sample_invariants_hold_over_many_seeds() {
        let v = video();
        let cfg = AugmentConfig::default();
        for seed in 0..1000 {
            let s = make_training_sample(&v, &[1, 2, 4], 8, &cfg, seed).unwrap();
            assert_ne!(s.speed_negative.speed, s.anchor.speed, "seed {seed}");
            assert_eq!(s.speed_positive.speed, s.anchor.speed);
            assert_ne!(s.speed_positive.frame_indices[0], s.anchor.frame_indices[0]);
            for clip in [&s.anchor, &s.speed_positive, &s.speed_negative, &s.appearance_positive] {
                assert_eq!(clip.source_id, v.video_id);
                assert!(is_progression(clip));
            }
            assert_eq!(s.teacher_frame.clip_source, v.video_id);
            assert_eq!(s.teacher_frame.source_index, s.anchor.frame_indices[4]);
            assert_eq!(s.teacher_frame.geometry, s.anchor.geometry);
        }
    }

    #[test]
    fn rejects_short_videos_and_single_speed() {
        let v = video();
        let cfg = AugmentConfig::default();
        assert!(matches!(
            make_training_sample(&v, &[1, 8], 8, &cfg, 0),
            Err(Error::VideoTooShort { speed: 8, .. })
        ));
        assert!(matches!(
            make_training_sample(&v, &[2, 2], 8, &cfg, 0),
            Err(Error::Config(_))
        ));
    }
}
