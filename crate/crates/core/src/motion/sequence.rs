use log::warn;

use super::skeleton::POSE_DIM;
use super::{rot6d, MotionError};

pub const FPS: f64 = 20.0;
pub const SAMPLE_RATE: usize = 16_000;
/// Audio samples per 20 fps motion frame.
pub const SAMPLES_PER_FRAME: usize = SAMPLE_RATE / 20;
pub const CLIP_FRAMES: usize = 64;
pub const CLIP_SAMPLES: usize = CLIP_FRAMES * SAMPLES_PER_FRAME;
pub const WINDOW_STEP: usize = 10;
pub const PAD_WORD: u32 = 0;

/// Variable-length pose stream, optionally paired with speech.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    pub fps: f64,
    /// Frame-major pose values, `frames × POSE_DIM`.
    pub poses: Vec<f32>,
    /// Mono waveform at 16 kHz, `SAMPLES_PER_FRAME` per 20 fps frame.
    pub audio: Option<Vec<f32>>,
    /// One word id per frame; `PAD_WORD` is padding.
    pub words: Option<Vec<u32>>,
    /// Audio beat times in seconds.
    pub beats: Option<Vec<f32>>,
}

impl MotionSequence {
    pub fn new(fps: f64, poses: Vec<f32>) -> Result<Self, MotionError> {
        if poses.len() % POSE_DIM != 0 {
            return Err(MotionError::Shape(format!("{} values is not a whole number of {POSE_DIM}-value frames", poses.len())));
        }
        Ok(Self {
            fps,
            poses,
            audio: None,
            words: None,
            beats: None,
        })
    }

    pub fn len(&self) -> usize {
        self.poses.len() / POSE_DIM
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        &self.poses[i * POSE_DIM..(i + 1) * POSE_DIM]
    }

    /// Checks that paired tracks line up with the frames.
    pub fn validate(&self) -> Result<(), MotionError> {
        if let Some(w) = &self.words {
            if w.len() != self.len() {
                return Err(MotionError::Shape(format!("{} word ids for {} frames", w.len(), self.len())));
            }
        }
        if let Some(a) = &self.audio {
            if (self.fps - FPS).abs() < 1e-9 && a.len() != self.len() * SAMPLES_PER_FRAME {
                return Err(MotionError::Shape(format!("{} audio samples for {} frames", a.len(), self.len())));
            }
        }
        if !self.poses.iter().all(|v| v.is_finite()) {
            return Err(MotionError::Shape("non-finite pose value".into()));
        }
        Ok(())
    }
}

/// Fixed 64-frame window; the unit of training and synthesis.
#[derive(Clone, Debug, PartialEq)]
pub struct GestureClip {
    /// `CLIP_FRAMES × POSE_DIM` values.
    pub poses: Vec<f32>,
    pub audio: Option<Vec<f32>>,
    pub words: Option<Vec<u32>>,
    /// Source frame offset.
    pub start: usize,
}

impl GestureClip {
    pub fn new(poses: Vec<f32>) -> Result<Self, MotionError> {
        if poses.len() != CLIP_FRAMES * POSE_DIM {
            return Err(MotionError::Shape(format!("clip needs {} values, got {}", CLIP_FRAMES * POSE_DIM, poses.len())));
        }
        if !poses.iter().all(|v| v.is_finite()) {
            return Err(MotionError::Shape("non-finite clip value".into()));
        }
        Ok(Self {
            poses,
            audio: None,
            words: None,
            start: 0,
        })
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        &self.poses[i * POSE_DIM..(i + 1) * POSE_DIM]
    }
}

/// Brings a sequence to 20 fps: integer ratios decimate, other ratios
/// interpolate the rotation channels and re-orthonormalize each joint.
pub fn resample_20fps(seq: &MotionSequence) -> Result<MotionSequence, MotionError> {
    if seq.fps < FPS {
        return Err(MotionError::FrameRate(seq.fps));
    }
    let n = seq.len();
    let ratio = seq.fps / FPS;
    let integer = (ratio - ratio.round()).abs() < 1e-9;
    let count = if integer {
        let r = ratio.round() as usize;
        n.div_ceil(r)
    } else {
        ((n - 1) as f64 / ratio).floor() as usize + 1
    };
    let mut poses = Vec::with_capacity(count * POSE_DIM);
    let mut src_index = Vec::with_capacity(count);
    for i in 0..count {
        let p = i as f64 * ratio;
        let lo = p.floor() as usize;
        let frac = p - lo as f64;
        src_index.push(lo);
        if integer || frac < 1e-12 || lo + 1 >= n {
            poses.extend_from_slice(seq.frame(lo.min(n - 1)));
            continue;
        }
        let (a, b) = (seq.frame(lo), seq.frame(lo + 1));
        for j in 0..POSE_DIM / 6 {
            let mut v = [0.0f64; 6];
            for (c, vc) in v.iter_mut().enumerate() {
                let k = j * 6 + c;
                *vc = (1.0 - frac) * a[k] as f64 + frac * b[k] as f64;
            }
            let o = rot6d::orthonormalize(&v)?;
            poses.extend(o.iter().map(|&x| x as f32));
        }
    }
    let audio = seq.audio.as_ref().map(|a| {
        let want = count * SAMPLES_PER_FRAME;
        let mut a = a.clone();
        a.resize(want, 0.0);
        a
    });
    let words = seq.words.as_ref().map(|w| src_index.iter().map(|&i| w[i.min(w.len() - 1)]).collect());
    Ok(MotionSequence {
        fps: FPS,
        poses,
        audio,
        words,
        beats: seq.beats.clone(),
    })
}

/// Cuts 64-frame windows every 10 frames, slicing paired speech alongside.
pub fn extract_windows(seq: &MotionSequence) -> Vec<GestureClip> {
    let n = seq.len();
    if n < CLIP_FRAMES {
        warn!("sequence of {n} frames is shorter than one {CLIP_FRAMES}-frame window");
        return Vec::new();
    }
    let count = (n - CLIP_FRAMES) / WINDOW_STEP + 1;
    (0..count)
        .map(|k| {
            let start = k * WINDOW_STEP;
            GestureClip {
                poses: seq.poses[start * POSE_DIM..(start + CLIP_FRAMES) * POSE_DIM].to_vec(),
                audio: seq
                    .audio
                    .as_ref()
                    .map(|a| a[start * SAMPLES_PER_FRAME..(start + CLIP_FRAMES) * SAMPLES_PER_FRAME].to_vec()),
                words: seq.words.as_ref().map(|w| w[start..start + CLIP_FRAMES].to_vec()),
                start,
            }
        })
        .collect()
}

/// Per-dimension mean and variance of the training clips.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub floor: f32,
}

pub const VARIANCE_FLOOR: f32 = 1e-6;

impl DatasetStats {
    pub fn uniform(var: f32) -> Self {
        Self {
            mean: vec![0.0; POSE_DIM],
            var: vec![var.max(VARIANCE_FLOOR); POSE_DIM],
            floor: VARIANCE_FLOOR,
        }
    }
}

/// Population variance over every frame of every clip, floored.
pub fn dataset_stats(clips: &[GestureClip]) -> Result<DatasetStats, MotionError> {
    if clips.len() < 2 {
        return Err(MotionError::TooFew { needed: 2, got: clips.len() });
    }
    let mut sum = vec![0.0f64; POSE_DIM];
    let mut sq = vec![0.0f64; POSE_DIM];
    let mut count = 0usize;
    for c in clips {
        for f in c.poses.chunks(POSE_DIM) {
            for (d, &v) in f.iter().enumerate() {
                sum[d] += v as f64;
            }
            count += 1;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    for c in clips {
        for f in c.poses.chunks(POSE_DIM) {
            for (d, &v) in f.iter().enumerate() {
                let e = v as f64 - mean[d];
                sq[d] += e * e;
            }
        }
    }
    Ok(DatasetStats {
        mean: mean.iter().map(|&m| m as f32).collect(),
        var: sq.iter().map(|s| ((s / count as f64) as f32).max(VARIANCE_FLOOR)).collect(),
        floor: VARIANCE_FLOOR,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::rot6d::{axis_angle, encode};

    fn constant_seq(frames: usize, fps: f64) -> MotionSequence {
        let pose: Vec<f32> = (0..POSE_DIM).map(|i| (i % 6 == 0 || i % 6 == 4) as u8 as f32).collect();
        MotionSequence::new(fps, pose.repeat(frames)).unwrap()
    }

    #[test]
    fn integer_ratios_decimate() {
        assert_eq!(resample_20fps(&constant_seq(128, 40.0)).unwrap().len(), 64);
        assert_eq!(resample_20fps(&constant_seq(120, 60.0)).unwrap().len(), 40);
        assert!(matches!(resample_20fps(&constant_seq(10, 15.0)), Err(MotionError::FrameRate(_))));
    }

    #[test]
    fn thirty_fps_ramp_interpolates_midpoints() {
        // joint-0 angle about z ramps 0.01 rad per source frame
        let n = 31;
        let mut poses = Vec::new();
        for k in 0..n {
            let e = encode(&axis_angle([0.0, 0.0, 1.0], 0.01 * k as f64)).unwrap();
            for j in 0..POSE_DIM / 6 {
                if j == 0 {
                    poses.extend(e.iter().map(|&v| v as f32));
                } else {
                    poses.extend([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
                }
            }
        }
        let out = resample_20fps(&MotionSequence::new(30.0, poses).unwrap()).unwrap();
        assert_eq!(out.len(), 21);
        for i in 0..out.len() {
            // output i sits at source position 1.5·i; normalized lerp of two
            // unit columns is exact at the midpoint
            let angle = (out.frame(i)[1] as f64).atan2(out.frame(i)[0] as f64);
            assert!((angle - 0.015 * i as f64).abs() < 1e-6, "frame {i}: {angle}");
        }
    }

    #[test]
    fn window_counts() {
        assert_eq!(extract_windows(&constant_seq(64, FPS)).len(), 1);
        let w = extract_windows(&constant_seq(74, FPS));
        assert_eq!(w.iter().map(|c| c.start).collect::<Vec<_>>(), vec![0, 10]);
        assert!(extract_windows(&constant_seq(63, FPS)).is_empty());
    }

    #[test]
    fn windows_preserve_alignment() {
        let n = 100;
        let poses: Vec<f32> = (0..n * POSE_DIM).map(|i| i as f32).collect();
        let mut seq = MotionSequence::new(FPS, poses).unwrap();
        seq.audio = Some((0..n * SAMPLES_PER_FRAME).map(|i| (i % 1000) as f32 / 1000.0).collect());
        seq.words = Some((0..n as u32).collect());
        for (k, clip) in extract_windows(&seq).iter().enumerate() {
            for f in [0, 17, 63] {
                assert_eq!(clip.frame(f), seq.frame(10 * k + f));
            }
            assert_eq!(clip.words.as_ref().unwrap()[5], (10 * k + 5) as u32);
            assert_eq!(clip.audio.as_ref().unwrap().len(), CLIP_SAMPLES);
            assert_eq!(clip.audio.as_ref().unwrap()[0], seq.audio.as_ref().unwrap()[10 * k * SAMPLES_PER_FRAME]);
        }
    }

    #[test]
    fn stats_examples() {
        let constant = vec![GestureClip::new(vec![0.5; CLIP_FRAMES * POSE_DIM]).unwrap(); 3];
        let s = dataset_stats(&constant).unwrap();
        assert_eq!(s.var.len(), 126);
        assert!(s.var.iter().all(|&v| v == VARIANCE_FLOOR));

        let mut poses = vec![0.0; CLIP_FRAMES * POSE_DIM];
        for f in 0..CLIP_FRAMES {
            poses[f * POSE_DIM + 3] = if f % 2 == 0 { 0.0 } else { 2.0 };
        }
        let clip = GestureClip::new(poses).unwrap();
        let s = dataset_stats(&[clip.clone(), clip.clone()]).unwrap();
        assert!((s.var[3] - 1.0).abs() < 1e-6);
        assert!((s.mean[3] - 1.0).abs() < 1e-6);

        assert!(matches!(dataset_stats(&[clip]), Err(MotionError::TooFew { .. })));
    }
}
