//! Synthetic speech–gesture corpus with a built-in one-to-many structure.
//!
//! A sequence is a random walk over gesture modes. Each mode has its own
//! stroke count, joint axes and amplitudes; the speech carries a click at
//! every mode boundary, a tone whose pitch identifies the mode, and the
//! mode's word id. Which arm performs the gesture (left, right or both) is
//! drawn per occurrence and appears in neither audio nor text.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::rot6d::{axis_angle, encode};
use super::sequence::{MotionSequence, FPS, PAD_WORD, SAMPLES_PER_FRAME, SAMPLE_RATE};
use super::skeleton::{SkeletonSpec, POSE_DIM};
use super::MotionError;
use crate::rng::stream;

/// Padding frames at the start of each mode occurrence in the word track.
pub const PHRASE_GAP: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Number of gesture modes (and non-padding words).
    pub modes: usize,
    pub sequences: usize,
    pub frames: usize,
    pub min_mode_frames: usize,
    pub max_mode_frames: usize,
    /// Relative per-occurrence amplitude jitter.
    pub amplitude_jitter: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            modes: 8,
            sequences: 24,
            frames: 400,
            min_mode_frames: 20,
            max_mode_frames: 40,
            amplitude_jitter: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Handedness {
    Left,
    Right,
    Both,
}

impl Handedness {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        match rng.random_range(0..3) {
            0 => Handedness::Left,
            1 => Handedness::Right,
            _ => Handedness::Both,
        }
    }
}

/// One gesture-mode occurrence.
#[derive(Clone, Debug, PartialEq)]
pub struct Occurrence {
    pub mode: usize,
    pub start: usize,
    pub frames: usize,
    pub hand: Handedness,
    pub gain: f64,
}

#[derive(Clone, Debug)]
struct ModeShape {
    strokes: u32,
    arm_axes: [[f64; 3]; 7],
    arm_amps: [f64; 7],
    torso_axis: [f64; 3],
    torso_amp: f64,
    tone_hz: f64,
}

/// The fixed set of gesture modes of one corpus seed.
#[derive(Clone, Debug)]
pub struct ModeBank {
    modes: Vec<ModeShape>,
    skeleton: SkeletonSpec,
}

fn unit(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 0.2 && n <= 1.0 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn mirror(a: [f64; 3]) -> [f64; 3] {
    [a[0], -a[1], -a[2]]
}

impl ModeBank {
    pub fn new(modes: usize, seed: u64) -> Result<Self, MotionError> {
        if modes < 2 {
            return Err(MotionError::Config(format!("need at least 2 gesture modes, got {modes}")));
        }
        let mut rng = stream(seed, "modes", 0);
        // collar, shoulder, elbow, wrist, hand, index, thumb
        let base_amp = [0.15, 0.9, 1.0, 0.6, 0.3, 0.2, 0.2];
        let modes = (0..modes)
            .map(|m| {
                let mut arm_axes = [[0.0; 3]; 7];
                let mut arm_amps = [0.0; 7];
                for j in 0..7 {
                    arm_axes[j] = unit(&mut rng);
                    arm_amps[j] = base_amp[j] * rng.random_range(0.6..1.2);
                }
                ModeShape {
                    strokes: 1 + (m % 2) as u32,
                    arm_axes,
                    arm_amps,
                    torso_axis: unit(&mut rng),
                    torso_amp: rng.random_range(0.05..0.15),
                    tone_hz: 160.0 + 60.0 * m as f64,
                }
            })
            .collect();
        Ok(Self {
            modes,
            skeleton: SkeletonSpec::upper_body(),
        })
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn tone_hz(&self, mode: usize) -> f64 {
        self.modes[mode].tone_hz
    }

    /// Word id of a mode; 0 is padding.
    pub fn word(&self, mode: usize) -> u32 {
        mode as u32 + 1
    }

    pub fn vocab_size(&self) -> usize {
        self.modes.len() + 1
    }

    fn rest(&self, j: usize) -> [f64; 3] {
        // arms hang slightly away from the torso
        let (left, right) = self.skeleton.arms();
        if j == left[1] {
            [0.0, 0.0, 1.0]
        } else if j == right[1] {
            [0.0, 0.0, -1.0]
        } else {
            [1.0, 0.0, 0.0]
        }
    }

    fn rest_angle(&self, j: usize) -> f64 {
        let (left, right) = self.skeleton.arms();
        if j == left[1] || j == right[1] {
            1.1
        } else {
            0.0
        }
    }

    /// Pose of one frame inside an occurrence at phase `tau ∈ [0, 1]`.
    fn pose(&self, occ: &Occurrence, tau: f64, out: &mut Vec<f32>) {
        let shape = &self.modes[occ.mode];
        let env = (PI * shape.strokes as f64 * tau).sin().powi(2) * occ.gain;
        let (left, right) = self.skeleton.arms();
        let torso = [1usize, 2, 3, 4, 5];
        for j in 0..self.skeleton.joint_count() {
            let mut r = axis_angle(self.rest(j), self.rest_angle(j));
            if let Some(k) = left.iter().position(|&x| x == j) {
                if matches!(occ.hand, Handedness::Left | Handedness::Both) {
                    r *= axis_angle(shape.arm_axes[k], shape.arm_amps[k] * env);
                }
            } else if let Some(k) = right.iter().position(|&x| x == j) {
                if matches!(occ.hand, Handedness::Right | Handedness::Both) {
                    r *= axis_angle(mirror(shape.arm_axes[k]), -shape.arm_amps[k] * env);
                }
            } else if torso.contains(&j) {
                r *= axis_angle(shape.torso_axis, shape.torso_amp * env);
            }
            let e = encode(&r).expect("product of rotations is a rotation");
            out.extend(e.iter().map(|&v| v as f32));
        }
    }

    /// Renders motion and speech for an explicit occurrence script.
    pub fn render(&self, script: &[Occurrence]) -> MotionSequence {
        let frames: usize = script.iter().map(|o| o.frames).sum();
        let mut poses = Vec::with_capacity(frames * POSE_DIM);
        let mut words = Vec::with_capacity(frames);
        let mut audio = vec![0.0f32; frames * SAMPLES_PER_FRAME];
        let mut beats = Vec::with_capacity(script.len());
        for occ in script {
            for f in 0..occ.frames {
                self.pose(occ, f as f64 / occ.frames as f64, &mut poses);
                // a short pause opens every phrase
                words.push(if f < PHRASE_GAP { PAD_WORD } else { self.word(occ.mode) });
            }
            let hz = self.tone_hz(occ.mode);
            let s0 = occ.start * SAMPLES_PER_FRAME;
            for (i, a) in audio[s0..s0 + occ.frames * SAMPLES_PER_FRAME].iter_mut().enumerate() {
                let t = (s0 + i) as f64 / SAMPLE_RATE as f64;
                *a = (0.25 * (2.0 * PI * hz * t).sin()) as f32;
            }
            let end = (s0 + 320).min(audio.len());
            for (k, a) in audio[s0..end].iter_mut().enumerate() {
                let click = 0.7 * (-(k as f64) / 60.0).exp() * if k % 2 == 0 { 1.0 } else { -1.0 };
                *a = (*a as f64 + click).clamp(-1.0, 1.0) as f32;
            }
            beats.push((occ.start as f64 / FPS) as f32);
        }
        MotionSequence {
            fps: FPS,
            poses,
            audio: Some(audio),
            words: Some(words),
            beats: Some(beats),
        }
    }

    /// Random-walk script of exactly `frames` frames.
    pub fn script(&self, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Occurrence> {
        let mut out = Vec::new();
        let mut start = 0;
        let mut mode = rng.random_range(0..self.len());
        while start < cfg.frames {
            let mut len = rng.random_range(cfg.min_mode_frames..=cfg.max_mode_frames);
            if cfg.frames - start < len + cfg.min_mode_frames {
                len = cfg.frames - start;
            }
            out.push(Occurrence {
                mode,
                start,
                frames: len,
                hand: Handedness::draw(rng),
                gain: 1.0 + rng.random_range(-cfg.amplitude_jitter..=cfg.amplitude_jitter),
            });
            start += len;
            let next = rng.random_range(0..self.len() - 1);
            mode = if next >= mode { next + 1 } else { next };
        }
        out
    }
}

/// Generated corpus with its hidden scripts.
#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub sequences: Vec<MotionSequence>,
    pub scripts: Vec<Vec<Occurrence>>,
    pub bank: ModeBank,
}

/// Deterministic per `(seed, sequence index)`.
pub fn synth_corpus(cfg: &SynthConfig, seed: u64) -> Result<SynthCorpus, MotionError> {
    if cfg.min_mode_frames == 0 || cfg.min_mode_frames > cfg.max_mode_frames {
        return Err(MotionError::Config(format!(
            "mode length range [{}, {}] is empty",
            cfg.min_mode_frames, cfg.max_mode_frames
        )));
    }
    let bank = ModeBank::new(cfg.modes, seed)?;
    let mut sequences = Vec::with_capacity(cfg.sequences);
    let mut scripts = Vec::with_capacity(cfg.sequences);
    for s in 0..cfg.sequences {
        let mut rng = stream(seed, "sequence", s as u64);
        let script = bank.script(cfg, &mut rng);
        sequences.push(bank.render(&script));
        scripts.push(script);
    }
    Ok(SynthCorpus { sequences, scripts, bank })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{HashMap, HashSet};

    fn small() -> SynthConfig {
        SynthConfig {
            sequences: 3,
            frames: 160,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = synth_corpus(&small(), 7).unwrap();
        let b = synth_corpus(&small(), 7).unwrap();
        assert_eq!(a.sequences, b.sequences);
        let c = synth_corpus(&small(), 8).unwrap();
        assert_ne!(a.sequences, c.sequences);
    }

    #[test]
    fn rejects_single_mode() {
        let cfg = SynthConfig { modes: 1, ..small() };
        assert!(matches!(synth_corpus(&cfg, 0), Err(MotionError::Config(_))));
    }

    #[test]
    fn handedness_is_hidden_from_speech() {
        let bank = ModeBank::new(8, 3).unwrap();
        let occ = |hand| Occurrence { mode: 2, start: 0, frames: 30, hand, gain: 1.0 };
        let a = bank.render(&[occ(Handedness::Left)]);
        let b = bank.render(&[occ(Handedness::Right)]);
        assert_eq!(a.audio, b.audio);
        assert_eq!(a.words, b.words);
        assert_ne!(a.poses, b.poses);
    }

    #[test]
    fn clicks_sit_on_mode_boundaries() {
        let c = synth_corpus(&small(), 1).unwrap();
        for (seq, script) in c.sequences.iter().zip(&c.scripts) {
            let audio = seq.audio.as_ref().unwrap();
            for occ in script {
                let s0 = occ.start * SAMPLES_PER_FRAME;
                // click energy dominates the first 5 ms of the boundary frame
                let peak = audio[s0..s0 + 80].iter().fold(0.0f32, |m, v| m.max(v.abs()));
                assert!(peak > 0.6, "boundary at frame {}", occ.start);
            }
            let beats = seq.beats.as_ref().unwrap();
            for (b, occ) in beats.iter().zip(script) {
                assert!((*b as f64 * FPS - occ.start as f64).abs() < 1.0);
            }
            assert_eq!(seq.len(), 160);
            seq.validate().unwrap();
        }
    }

    #[test]
    fn every_mode_shows_several_hands() {
        let cfg = SynthConfig { sequences: 20, frames: 400, ..Default::default() };
        let c = synth_corpus(&cfg, 11).unwrap();
        let mut seen: HashMap<usize, HashSet<Handedness>> = HashMap::new();
        let mut count: HashMap<usize, usize> = HashMap::new();
        for occ in c.scripts.iter().flatten() {
            seen.entry(occ.mode).or_default().insert(occ.hand);
            *count.entry(occ.mode).or_default() += 1;
        }
        let total: usize = count.values().sum();
        assert!(total >= 100);
        for (m, hands) in &seen {
            if count[m] >= 10 {
                assert!(hands.len() >= 2, "mode {m}");
            }
        }
    }

    #[test]
    fn motion_rests_at_boundaries() {
        let bank = ModeBank::new(8, 3).unwrap();
        let occ = Occurrence { mode: 0, start: 0, frames: 40, hand: Handedness::Both, gain: 1.0 };
        let next = Occurrence { mode: 1, start: 40, frames: 40, hand: Handedness::Left, gain: 1.0 };
        let seq = bank.render(&[occ, next]);
        let d = |i: usize| -> f32 { seq.frame(i).iter().zip(seq.frame(i + 1)).map(|(a, b)| (a - b).abs()).sum() };
        assert!(d(39) < d(35));
        assert!(d(40) < d(44));
    }
}
