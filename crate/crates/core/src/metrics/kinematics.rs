use log::warn;

use super::MetricsError;
use crate::motion::{MotionSequence, SkeletonSpec, POSE_DIM, ROT_DIM};

fn joint_delta(a: &[f32], b: &[f32], joint: usize) -> f64 {
    let r = joint * ROT_DIM..(joint + 1) * ROT_DIM;
    a[r.clone()]
        .iter()
        .zip(&b[r])
        .map(|(x, y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Mean pairwise mean-absolute difference between consecutive
/// non-overlapping segments of `segment_len` frames.
pub fn diversity(motion: &MotionSequence, segment_len: usize) -> Result<f64, MetricsError> {
    if segment_len == 0 {
        return Err(MetricsError::Config("segment length must be positive".into()));
    }
    let n = motion.len() / segment_len;
    if n < 2 {
        return Err(MetricsError::TooFew {
            needed: 2 * segment_len,
            got: motion.len(),
        });
    }
    let width = segment_len * POSE_DIM;
    let seg = |i: usize| &motion.poses[i * width..(i + 1) * width];
    let (mut total, mut pairs) = (0.0, 0usize);
    for i in 0..n {
        for j in i + 1..n {
            let l1: f64 = seg(i).iter().zip(seg(j)).map(|(a, b)| (a - b).abs() as f64).sum();
            total += l1 / width as f64;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Summed central-difference speed of the shoulder, elbow and wrist joints.
/// Entry `f` belongs to frame `f + 1`.
pub fn arm_speed(motion: &MotionSequence) -> Vec<f64> {
    let joints = SkeletonSpec::upper_body().beat_joints();
    (1..motion.len().saturating_sub(1))
        .map(|f| {
            let (prev, next) = (motion.frame(f - 1), motion.frame(f + 1));
            joints.iter().map(|&j| joint_delta(next, prev, j)).sum::<f64>() / 2.0
        })
        .collect()
}

/// Times in seconds of strict local minima of the arm speed.
pub fn kinematic_beats(motion: &MotionSequence) -> Vec<f64> {
    let speed = arm_speed(motion);
    (1..speed.len().saturating_sub(1))
        .filter(|&i| speed[i] < speed[i - 1] && speed[i] < speed[i + 1])
        .map(|i| (i + 1) as f64 / motion.fps)
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeatScore {
    /// Mean Gaussian kernel of each kinematic beat's distance to the
    /// nearest audio beat, in [0, 1].
    pub score: f64,
    /// Mean raw distance in seconds.
    pub mean_distance: f64,
    pub kinematic_beats: usize,
}

/// Scores kinematic beats against the given audio beat times.
pub fn beat_score(kinematic: &[f64], audio_beats: &[f64], sigma: f64) -> Result<BeatScore, MetricsError> {
    if audio_beats.is_empty() {
        return Err(MetricsError::TooFew { needed: 1, got: 0 });
    }
    if !(sigma > 0.0) {
        return Err(MetricsError::Config(format!("beat sigma {sigma} must be positive")));
    }
    if kinematic.is_empty() {
        warn!("no kinematic beats detected; beat consistency is 0");
        return Ok(BeatScore {
            score: 0.0,
            mean_distance: f64::INFINITY,
            kinematic_beats: 0,
        });
    }
    let (mut score, mut dist) = (0.0, 0.0);
    for &t in kinematic {
        let d = audio_beats.iter().map(|&b| (t - b).abs()).fold(f64::INFINITY, f64::min);
        score += (-d * d / (2.0 * sigma * sigma)).exp();
        dist += d;
    }
    let n = kinematic.len() as f64;
    Ok(BeatScore {
        score: score / n,
        mean_distance: dist / n,
        kinematic_beats: kinematic.len(),
    })
}

pub fn beat_consistency(motion: &MotionSequence, audio_beats: &[f64], sigma: f64) -> Result<BeatScore, MetricsError> {
    beat_score(&kinematic_beats(motion), audio_beats, sigma)
}

/// Mean per-frame change of both wrist rotations.
pub fn wrist_speed(motion: &MotionSequence) -> Result<f64, MetricsError> {
    if motion.len() < 2 {
        return Err(MetricsError::TooFew { needed: 2, got: motion.len() });
    }
    let wrists = SkeletonSpec::upper_body().wrists;
    let total: f64 = (1..motion.len())
        .map(|f| wrists.iter().map(|&j| joint_delta(motion.frame(f), motion.frame(f - 1), j)).sum::<f64>())
        .sum();
    Ok(total / (motion.len() - 1) as f64)
}

pub fn wrist_speed_ratio(synth: &MotionSequence, reference: &MotionSequence) -> Result<f64, MetricsError> {
    let r = wrist_speed(reference)?;
    if r == 0.0 {
        return Err(MetricsError::ZeroReference);
    }
    Ok(wrist_speed(synth)? / r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::{rot6d, FPS};
    use proptest::prelude::*;

    fn rest(frames: usize) -> Vec<f32> {
        let id = [1.0f32, 0.0, 0.0, 0.0, 1.0, 0.0];
        (0..frames * POSE_DIM).map(|i| id[i % 6]).collect()
    }

    /// Arms swing about z with a speed that dips to zero at `dips`.
    fn swinging(frames: usize, dips: &[usize], amplitude: f64) -> MotionSequence {
        let mut poses = rest(frames);
        let mut angle = 0.0;
        for f in 0..frames {
            let near = dips.iter().map(|&d| (f as f64 - d as f64).abs()).fold(f64::INFINITY, f64::min);
            angle += amplitude * near / 4.0;
            let r = rot6d::encode(&rot6d::axis_angle([0.0, 0.0, 1.0], angle)).unwrap();
            for j in SkeletonSpec::upper_body().beat_joints() {
                for k in 0..6 {
                    poses[f * POSE_DIM + j * 6 + k] = r[k] as f32;
                }
            }
        }
        MotionSequence::new(FPS, poses).unwrap()
    }

    #[test]
    fn diversity_examples() {
        let constant = MotionSequence::new(FPS, rest(120)).unwrap();
        assert_eq!(diversity(&constant, 40).unwrap(), 0.0);
        let mut poses = vec![0.0f32; 40 * POSE_DIM];
        poses.extend(vec![1.0f32; 40 * POSE_DIM]);
        let two = MotionSequence::new(FPS, poses).unwrap();
        assert!((diversity(&two, 40).unwrap() - 1.0).abs() < 1e-12);
        assert!(diversity(&MotionSequence::new(FPS, rest(79)).unwrap(), 40).is_err());
    }

    #[test]
    fn diversity_ignores_segment_order() {
        let m = swinging(120, &[30, 70], 0.05);
        let mut swapped = m.poses[40 * POSE_DIM..80 * POSE_DIM].to_vec();
        swapped.extend_from_slice(&m.poses[80 * POSE_DIM..]);
        swapped.extend_from_slice(&m.poses[..40 * POSE_DIM]);
        let s = MotionSequence::new(FPS, swapped).unwrap();
        assert!((diversity(&m, 40).unwrap() - diversity(&s, 40).unwrap()).abs() < 1e-12);
        assert!(diversity(&m, 40).unwrap() > 0.0);
    }

    #[test]
    fn kernel_examples() {
        let exact = beat_score(&[1.0, 2.0], &[1.0, 2.0, 3.0], 0.1).unwrap();
        assert_eq!(exact.score, 1.0);
        let off = beat_score(&[1.1], &[1.0], 0.1).unwrap();
        assert!((off.score - (-0.5f64).exp()).abs() < 1e-12);
        assert!((off.mean_distance - 0.1).abs() < 1e-12);
        assert!(beat_score(&[1.6], &[1.0], 0.1).unwrap().score < 1e-5);
        let none = beat_score(&[], &[1.0], 0.1).unwrap();
        assert_eq!(none.score, 0.0);
        assert!(beat_score(&[1.0], &[], 0.1).is_err());
    }

    #[test]
    fn speed_minima_are_kinematic_beats() {
        let m = swinging(100, &[20, 50, 80], 0.05);
        assert_eq!(kinematic_beats(&m), vec![1.0, 2.5, 4.0]);
        let s = beat_consistency(&m, &[1.0, 2.5, 4.0], 0.1).unwrap();
        assert_eq!(s.score, 1.0);
    }

    #[test]
    fn motionless_padding_leaves_score_unchanged() {
        let m = swinging(100, &[20, 50, 80], 0.05);
        let beats = [1.0, 2.5, 4.0];
        let mut poses = m.poses.clone();
        let last = m.frame(99).to_vec();
        for _ in 0..60 {
            poses.extend_from_slice(&last);
        }
        let padded = MotionSequence::new(FPS, poses).unwrap();
        let inside = |k: &Vec<f64>| k.iter().copied().filter(|&t| t < 4.5).collect::<Vec<_>>();
        assert_eq!(inside(&kinematic_beats(&padded)), inside(&kinematic_beats(&m)));
        assert_eq!(
            beat_score(&inside(&kinematic_beats(&padded)), &beats, 0.1).unwrap(),
            beat_consistency(&m, &beats, 0.1).unwrap()
        );
    }

    #[test]
    fn wrist_speed_examples() {
        let m = swinging(60, &[30], 0.05);
        assert!((wrist_speed_ratio(&m, &m).unwrap() - 1.0).abs() < 1e-12);
        let base = m.frame(0).to_vec();
        let half: Vec<f32> = m
            .poses
            .iter()
            .enumerate()
            .map(|(i, &v)| base[i % POSE_DIM] + 0.5 * (v - base[i % POSE_DIM]))
            .collect();
        let half = MotionSequence::new(FPS, half).unwrap();
        assert!((wrist_speed_ratio(&half, &m).unwrap() - 0.5).abs() < 1e-6);
        let still = MotionSequence::new(FPS, rest(10)).unwrap();
        assert!(matches!(wrist_speed_ratio(&m, &still), Err(MetricsError::ZeroReference)));
    }

    proptest! {
        #[test]
        fn diversity_zero_for_repeated_segments(seed in 0u64..50) {
            let m = swinging(40, &[(seed % 30) as usize + 5], 0.03);
            let mut poses = m.poses.clone();
            poses.extend_from_slice(&m.poses);
            poses.extend_from_slice(&m.poses);
            let r = MotionSequence::new(FPS, poses).unwrap();
            prop_assert_eq!(diversity(&r, 40).unwrap(), 0.0);
        }
    }
}
