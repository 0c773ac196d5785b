use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{audio_batch, Prior, PriorError};
use crate::motion::rot6d::orthonormalize;
use crate::motion::{GestureClip, MotionSequence, CLIP_FRAMES, FPS, POSE_DIM, SAMPLES_PER_FRAME};
use crate::rng::stream;
use crate::rqvae::RqVae;
use crate::tensor::Graph;

/// Frames shared by consecutive windows in long-form synthesis.
pub const BLEND_FRAMES: usize = 10;
pub const WINDOW_ADVANCE: usize = CLIP_FRAMES - BLEND_FRAMES;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub top_k: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { top_k: 10, seed: 0 }
    }
}

/// Draws from the `k` highest logits renormalized; ties at the cut go to
/// the lower index. `k = 1` is argmax and consumes no randomness.
pub fn sample_top_k(logits: &[f32], k: usize, rng: &mut ChaCha8Rng) -> Result<usize, PriorError> {
    if k == 0 || k > logits.len() {
        return Err(PriorError::Config(format!("top-k of {k} over {} logits", logits.len())));
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    if k == 1 {
        return Ok(order[0]);
    }
    let kept = &order[..k];
    let m = logits[kept[0]];
    let weights: Vec<f64> = kept.iter().map(|&i| ((logits[i] - m) as f64).exp()).collect();
    let dist = WeightedIndex::new(&weights).map_err(|e| PriorError::Config(format!("cannot sample: {e}")))?;
    Ok(kept[dist.sample(rng)])
}

/// Samples one window of tokens for the given speech and decodes it.
pub fn synthesize_window(
    prior: &Prior,
    vae: &RqVae,
    audio: &[f32],
    words: &[u32],
    top_k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<GestureClip, PriorError> {
    prior.layout.check(vae)?;
    let (t_len, dd, w) = (prior.layout.positions, prior.layout.depth, prior.cfg.width);
    if words.len() != CLIP_FRAMES {
        return Err(PriorError::Shape(format!("{} word ids, expected {CLIP_FRAMES}", words.len())));
    }
    let ids: Vec<usize> = words.iter().map(|&i| i as usize).collect();
    let cond = {
        let mut g = Graph::with_params(&prior.params);
        let a = g.constant(audio_batch([audio])?);
        let c = prior.condition(&mut g, a, &ids)?;
        g.value(c).clone()
    };
    let mut codes: Vec<usize> = Vec::with_capacity(t_len * dd);
    for t in 0..t_len {
        let ht = {
            let mut g = Graph::with_params(&prior.params);
            let c = g.constant(cond.clone());
            let h = prior.temporal_context(&mut g, c, &codes, t + 1)?;
            let ht = g.slice(h, 1, t, 1)?;
            g.value(ht).clone().reshaped(&[1, w])?
        };
        for d in 0..dd {
            let mut g = Graph::with_params(&prior.params);
            let h = g.constant(ht.clone());
            let logits = prior.depth_logits(&mut g, h, &codes[t * dd..t * dd + d], d + 1)?;
            let row = g.value(logits).row(d);
            codes.push(sample_top_k(row, top_k, rng)?);
        }
    }
    let mut poses = vae.decode_codes(&codes)?;
    project_rotations(&mut poses)?;
    let mut clip = GestureClip::new(poses).map_err(|e| PriorError::Shape(e.to_string()))?;
    clip.words = Some(words.to_vec());
    Ok(clip)
}

fn project_rotations(poses: &mut [f32]) -> Result<(), PriorError> {
    for j in poses.chunks_mut(6) {
        let v: Vec<f64> = j.iter().map(|&x| x as f64).collect();
        let o = orthonormalize(&v).map_err(|e| PriorError::Shape(e.to_string()))?;
        for (dst, src) in j.iter_mut().zip(o) {
            *dst = src as f32;
        }
    }
    Ok(())
}

/// Weight of the new window at overlap frame `i`.
pub fn blend_weight(i: usize) -> f64 {
    (i + 1) as f64 / (BLEND_FRAMES + 1) as f64
}

/// Linear cross-fade of overlap frame `i` in the six-value channel space,
/// without re-orthonormalization.
pub fn blend_overlap(prev: &[f32], new: &[f32], i: usize) -> Vec<f32> {
    let a = blend_weight(i);
    prev.iter().zip(new).map(|(&p, &n)| ((1.0 - a) * p as f64 + a * n as f64) as f32).collect()
}

/// Gestures for speech of any length ≥ 64 frames: windows advance by 54
/// frames, each sampled from its own stream, and the 10 shared frames are
/// cross-faded. Trailing frames past the last full window are dropped.
pub fn synthesize_long(
    prior: &Prior,
    vae: &RqVae,
    speech: &MotionSequence,
    sampler: &SamplerConfig,
) -> Result<MotionSequence, PriorError> {
    let (audio, words) = match (&speech.audio, &speech.words) {
        (Some(a), Some(w)) => (a, w),
        _ => return Err(PriorError::Shape("speech needs both audio and word tracks".into())),
    };
    let frames = words.len();
    if frames < CLIP_FRAMES {
        return Err(PriorError::TooShort(frames));
    }
    if audio.len() < frames * SAMPLES_PER_FRAME {
        return Err(PriorError::Shape(format!("{} audio samples for {frames} frames", audio.len())));
    }
    let windows = (frames - CLIP_FRAMES) / WINDOW_ADVANCE + 1;
    let mut poses: Vec<f32> = Vec::with_capacity((CLIP_FRAMES + (windows - 1) * WINDOW_ADVANCE) * POSE_DIM);
    for k in 0..windows {
        let s = k * WINDOW_ADVANCE;
        let mut rng = stream(sampler.seed, "window", k as u64);
        let clip = synthesize_window(
            prior,
            vae,
            &audio[s * SAMPLES_PER_FRAME..(s + CLIP_FRAMES) * SAMPLES_PER_FRAME],
            &words[s..s + CLIP_FRAMES],
            sampler.top_k,
            &mut rng,
        )?;
        if k == 0 {
            poses.extend_from_slice(&clip.poses);
            continue;
        }
        for i in 0..BLEND_FRAMES {
            let at = (s + i) * POSE_DIM;
            let mut mixed = blend_overlap(&poses[at..at + POSE_DIM], clip.frame(i), i);
            project_rotations(&mut mixed)?;
            poses[at..at + POSE_DIM].copy_from_slice(&mixed);
        }
        poses.extend_from_slice(&clip.poses[BLEND_FRAMES * POSE_DIM..]);
    }
    let n = poses.len() / POSE_DIM;
    Ok(MotionSequence {
        fps: FPS,
        poses,
        audio: Some(audio[..n * SAMPLES_PER_FRAME].to_vec()),
        words: Some(words[..n].to_vec()),
        beats: speech.beats.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    #[test]
    fn k1_is_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut other = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let l: Vec<f32> = (0..20).map(|_| rng.random_range(-5.0..5.0)).collect();
            let arg = (0..20).max_by(|&a, &b| l[a].total_cmp(&l[b]).then(b.cmp(&a))).unwrap();
            assert_eq!(sample_top_k(&l, 1, &mut other).unwrap(), arg);
        }
        assert_eq!(sample_top_k(&[1.0, 3.0, 3.0], 1, &mut rng).unwrap(), 1);
    }

    #[test]
    fn top3_frequencies_pass_chi_square() {
        let logits = [0.5f32, 2.0, -1.0, 1.5, 1.0, f32::NEG_INFINITY];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut counts = [0usize; 6];
        for _ in 0..20_000 {
            counts[sample_top_k(&logits, 3, &mut rng).unwrap()] += 1;
        }
        let kept = [1usize, 3, 4];
        let z: f64 = kept.iter().map(|&i| (logits[i] as f64).exp()).sum();
        let stat: f64 = kept
            .iter()
            .map(|&i| {
                let e = 20_000.0 * (logits[i] as f64).exp() / z;
                (counts[i] as f64 - e).powi(2) / e
            })
            .sum();
        let p = 1.0 - ChiSquared::new(2.0).unwrap().cdf(stat);
        assert!(p > 0.01, "chi-square {stat}, p {p}");
        assert_eq!(counts[0] + counts[2] + counts[5], 0);
    }

    #[test]
    fn full_k_reaches_every_finite_code() {
        let logits = [0.0f32, 0.1, -0.2, 0.3];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut seen = [false; 4];
        for _ in 0..400 {
            seen[sample_top_k(&logits, 4, &mut rng).unwrap()] = true;
        }
        assert!(seen.iter().all(|&s| s));
        assert!(sample_top_k(&logits, 0, &mut rng).is_err());
        assert!(sample_top_k(&logits, 5, &mut rng).is_err());
    }

    #[test]
    fn ties_at_the_cut_keep_the_lower_index() {
        let logits = [1.0f32, 5.0, 1.0, 1.0];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let i = sample_top_k(&logits, 2, &mut rng).unwrap();
            assert!(i == 0 || i == 1);
        }
    }

    #[test]
    fn blend_examples() {
        assert!((blend_weight(4) - 5.0 / 11.0).abs() < 1e-15);
        let w: Vec<f64> = (0..10).map(blend_weight).collect();
        assert!((w[0] - 1.0 / 11.0).abs() < 1e-15 && (w[9] - 10.0 / 11.0).abs() < 1e-15);
        let mixed = blend_overlap(&[0.0; 6], &[1.0; 6], 4);
        assert!(mixed.iter().all(|&v| (v - 0.454_545_45).abs() < 1e-6));
        let same = [1.0f32, 0.0, 0.0, 0.0, 1.0, 0.0];
        let mut b = blend_overlap(&same, &same, 7);
        project_rotations(&mut b).unwrap();
        assert_eq!(b, same);
    }
}
