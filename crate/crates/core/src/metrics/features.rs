use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::MetricsError;
use crate::motion::{GestureClip, CLIP_FRAMES, POSE_DIM};
use crate::nn::{Builder, Conv1d, ConvTranspose1d, Linear};
use crate::rng::{stream, substream};
use crate::tensor::{AdamW, AdamWConfig, Graph, NdArray, ParamSet, Var};

/// Clips needed to train the feature extractor.
pub const MIN_FEATURE_CLIPS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub width: usize,
    pub feature_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            width: 64,
            feature_dim: 32,
            epochs: 20,
            batch_size: 16,
            lr: 1e-3,
        }
    }
}

const STEPS: usize = 3;
const BOTTOM: usize = CLIP_FRAMES >> STEPS;

/// Convolutional autoencoder over 64-frame clips whose bottleneck vector is
/// the gesture feature.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    pub cfg: FeatureConfig,
    pub params: ParamSet<f32>,
    /// Per-dimension pose mean and one pooled scale.
    pub mean: Vec<f32>,
    pub scale: f32,
    down: Vec<Conv1d>,
    to_feature: Linear,
    from_feature: Linear,
    up: Vec<ConvTranspose1d>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureCurve {
    /// Reconstruction MSE before the first update.
    pub initial: f64,
    /// Mean training MSE of each epoch.
    pub epochs: Vec<f64>,
}

impl FeatureExtractor {
    pub fn new(cfg: FeatureConfig, mean: Vec<f32>, scale: f32, seed: u64) -> Result<Self, MetricsError> {
        if cfg.width == 0 || cfg.feature_dim == 0 {
            return Err(MetricsError::Config("feature extractor needs positive widths".into()));
        }
        if mean.len() != POSE_DIM || !(scale > 0.0) {
            return Err(MetricsError::Config(format!("normalization of {} dims, scale {scale}", mean.len())));
        }
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(substream(seed, "init", 2));
        let mut b = Builder::new(&mut params, &mut rng);
        let w = cfg.width;
        let down = (0..STEPS)
            .map(|i| Conv1d::new(&mut b.sub(&format!("down{i}")), if i == 0 { POSE_DIM } else { w }, w, 4, 2, 1))
            .collect();
        let to_feature = Linear::new(&mut b.sub("to_feature"), w * BOTTOM, cfg.feature_dim, true);
        let from_feature = Linear::new(&mut b.sub("from_feature"), cfg.feature_dim, w * BOTTOM, true);
        let up = (0..STEPS)
            .map(|i| ConvTranspose1d::new(&mut b.sub(&format!("up{i}")), w, if i + 1 == STEPS { POSE_DIM } else { w }, 4, 2, 1))
            .collect();
        Ok(Self {
            cfg,
            params,
            mean,
            scale,
            down,
            to_feature,
            from_feature,
            up,
        })
    }

    fn input(&self, clips: &[&GestureClip]) -> Result<NdArray<f32>, MetricsError> {
        let mut out = vec![0.0f32; clips.len() * POSE_DIM * CLIP_FRAMES];
        for (bi, c) in clips.iter().enumerate() {
            if c.poses.len() != CLIP_FRAMES * POSE_DIM {
                return Err(MetricsError::Shape(format!("clip of {} values, expected 64 frames", c.poses.len())));
            }
            for f in 0..CLIP_FRAMES {
                for d in 0..POSE_DIM {
                    out[(bi * POSE_DIM + d) * CLIP_FRAMES + f] = (c.poses[f * POSE_DIM + d] - self.mean[d]) / self.scale;
                }
            }
        }
        Ok(NdArray::new(&[clips.len(), POSE_DIM, CLIP_FRAMES], out)?)
    }

    fn encode(&self, g: &mut Graph<f32>, x: Var) -> Result<Var, MetricsError> {
        let b = g.shape(x)[0];
        let mut h = x;
        for conv in &self.down {
            h = conv.forward(g, h)?;
            h = g.relu(h);
        }
        let h = g.reshape(h, &[b, self.cfg.width * BOTTOM])?;
        Ok(self.to_feature.forward(g, h)?)
    }

    fn decode(&self, g: &mut Graph<f32>, f: Var) -> Result<Var, MetricsError> {
        let b = g.shape(f)[0];
        let h = self.from_feature.forward(g, f)?;
        let mut h = g.reshape(h, &[b, self.cfg.width, BOTTOM])?;
        for up in &self.up {
            h = g.relu(h);
            h = up.forward(g, h)?;
        }
        Ok(h)
    }

    fn reconstruction_mse(&self, g: &mut Graph<f32>, batch: &[&GestureClip]) -> Result<Var, MetricsError> {
        let x = g.constant(self.input(batch)?);
        let f = self.encode(g, x)?;
        let y = self.decode(g, f)?;
        let d = g.sub(y, x)?;
        let sq = g.mul(d, d)?;
        Ok(g.mean(sq))
    }

    /// One feature vector per clip.
    pub fn features(&self, clips: &[GestureClip]) -> Result<Vec<Vec<f64>>, MetricsError> {
        let mut out = Vec::with_capacity(clips.len());
        for chunk in clips.chunks(64) {
            let refs: Vec<&GestureClip> = chunk.iter().collect();
            let mut g = Graph::with_params(&self.params);
            let x = g.constant(self.input(&refs)?);
            let f = self.encode(&mut g, x)?;
            out.extend(g.value(f).data().chunks(self.cfg.feature_dim).map(|r| r.iter().map(|&v| v as f64).collect()));
        }
        Ok(out)
    }

    pub fn mse(&self, clips: &[GestureClip]) -> Result<f64, MetricsError> {
        let (mut sum, mut n) = (0.0, 0usize);
        for chunk in clips.chunks(64) {
            let refs: Vec<&GestureClip> = chunk.iter().collect();
            let mut g = Graph::with_params(&self.params);
            let l = self.reconstruction_mse(&mut g, &refs)?;
            sum += g.value(l).item() as f64 * chunk.len() as f64;
            n += chunk.len();
        }
        Ok(sum / n as f64)
    }
}

/// Normalization taken from the training clips: per-dimension mean and the
/// pooled standard deviation of all values.
fn normalization(clips: &[GestureClip]) -> (Vec<f32>, f32) {
    let frames = clips.len() * CLIP_FRAMES;
    let mut mean = vec![0.0f64; POSE_DIM];
    for c in clips {
        for (i, &v) in c.poses.iter().enumerate() {
            mean[i % POSE_DIM] += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= frames as f64);
    let mut sq = 0.0f64;
    for c in clips {
        for (i, &v) in c.poses.iter().enumerate() {
            sq += (v as f64 - mean[i % POSE_DIM]).powi(2);
        }
    }
    let scale = (sq / (frames * POSE_DIM) as f64).sqrt().max(1e-3);
    (mean.iter().map(|&m| m as f32).collect(), scale as f32)
}

pub fn train_feature_extractor(
    clips: &[GestureClip],
    cfg: &FeatureConfig,
    seed: u64,
) -> Result<(FeatureExtractor, FeatureCurve), MetricsError> {
    if clips.len() < MIN_FEATURE_CLIPS {
        return Err(MetricsError::TooFew {
            needed: MIN_FEATURE_CLIPS,
            got: clips.len(),
        });
    }
    let (mean, scale) = normalization(clips);
    let mut model = FeatureExtractor::new(cfg.clone(), mean, scale, seed)?;
    let initial = model.mse(clips)?;
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        ..AdamWConfig::default()
    });
    let mut shuffle = stream(seed, "shuffle", 4);
    let mut order: Vec<usize> = (0..clips.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        let (mut sum, mut n) = (0.0, 0usize);
        for idx in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<&GestureClip> = idx.iter().map(|&i| &clips[i]).collect();
            let mut g = Graph::with_params(&model.params);
            let loss = model.reconstruction_mse(&mut g, &batch)?;
            let value = g.value(loss).item() as f64;
            let grads = g.backward(loss)?;
            drop(g);
            opt.step(&mut model.params, &grads)?;
            sum += value;
            n += 1;
        }
        let mse = sum / n as f64;
        info!("feature extractor epoch {epoch}: mse {mse:.4}");
        epochs.push(mse);
    }
    Ok((model, FeatureCurve { initial, epochs }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::{extract_windows, synth_corpus, SynthConfig};

    #[test]
    fn small_corpus_rejected() {
        let clips = vec![GestureClip::new(vec![0.0; CLIP_FRAMES * POSE_DIM]).unwrap(); 99];
        assert!(matches!(
            train_feature_extractor(&clips, &FeatureConfig::default(), 0),
            Err(MetricsError::TooFew { needed: 100, got: 99 })
        ));
    }

    #[test]
    fn training_reduces_error_and_is_seeded() {
        let corpus = synth_corpus(&SynthConfig { sequences: 4, frames: 330, ..Default::default() }, 3).unwrap();
        let clips: Vec<GestureClip> = corpus.sequences.iter().flat_map(extract_windows).collect();
        assert!(clips.len() >= 100);
        let cfg = FeatureConfig {
            width: 16,
            epochs: 3,
            ..Default::default()
        };
        let (a, curve) = train_feature_extractor(&clips, &cfg, 5).unwrap();
        assert!(a.mse(&clips).unwrap() < curve.initial);
        let f = a.features(&clips[..3]).unwrap();
        assert_eq!(f.len(), 3);
        assert!(f.iter().all(|v| v.len() == 32));
        let (b, _) = train_feature_extractor(&clips, &cfg, 5).unwrap();
        let same = a.params.iter().zip(b.params.iter()).all(|(x, y)| x.2 == y.2);
        assert!(same);
    }
}
