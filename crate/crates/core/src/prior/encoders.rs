use serde::{Deserialize, Serialize};

use crate::motion::{CLIP_FRAMES, CLIP_SAMPLES};
use crate::nn::{BatchNorm1d, Builder, Conv1d, Embedding, Linear, TemporalBlock};
use crate::tensor::{kernels::conv_out_len, Graph, NdArray, Real, Var};

use super::PriorError;

/// Strided 1-D convolutions from raw 16 kHz audio to frame-rate features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AudioEncoderConfig {
    /// Output channels of each stage; the last is the feature width.
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub strides: Vec<usize>,
    pub paddings: Vec<usize>,
    pub slope: f64,
}

impl Default for AudioEncoderConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 64, 32],
            kernel: 15,
            strides: vec![4, 5, 6, 7],
            paddings: vec![1600, 0, 2, 2],
            slope: 0.3,
        }
    }
}

impl AudioEncoderConfig {
    pub fn desk() -> Self {
        Self {
            channels: vec![4, 8, 16, 32],
            ..Self::default()
        }
    }

    /// Length after each stage for `samples` input samples.
    pub fn stage_lengths(&self, samples: usize) -> Option<Vec<usize>> {
        let mut out = Vec::with_capacity(self.strides.len());
        let mut len = samples;
        for (&s, &p) in self.strides.iter().zip(&self.paddings) {
            len = conv_out_len(len, self.kernel, s, p, 1)?;
            out.push(len);
        }
        Some(out)
    }

    pub fn feature_dim(&self) -> usize {
        *self.channels.last().unwrap_or(&0)
    }

    fn validate(&self) -> Result<(), PriorError> {
        let n = self.channels.len();
        if n == 0 || self.strides.len() != n || self.paddings.len() != n {
            return Err(PriorError::Config("audio encoder needs matching channel, stride and padding lists".into()));
        }
        match self.stage_lengths(CLIP_SAMPLES) {
            Some(l) if *l.last().unwrap() == CLIP_FRAMES => Ok(()),
            other => Err(PriorError::Config(format!(
                "audio stages map {CLIP_SAMPLES} samples to {other:?}, need {CLIP_FRAMES} steps"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AudioEncoder {
    convs: Vec<Conv1d>,
    norms: Vec<BatchNorm1d>,
    slope: f64,
}

impl AudioEncoder {
    pub fn new<T: Real>(b: &mut Builder<T>, cfg: &AudioEncoderConfig) -> Result<Self, PriorError> {
        cfg.validate()?;
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut cin = 1;
        for (i, &c) in cfg.channels.iter().enumerate() {
            convs.push(Conv1d::new(&mut b.sub(&format!("conv{i}")), cin, c, cfg.kernel, cfg.strides[i], cfg.paddings[i]));
            if i + 1 < cfg.channels.len() {
                norms.push(BatchNorm1d::new(&mut b.sub(&format!("norm{i}")), c, 1e-5, 0.1));
            }
            cin = c;
        }
        Ok(Self {
            convs,
            norms,
            slope: cfg.slope,
        })
    }

    /// `[batch, 1, 51200]` → `[batch, C₁, 64]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, audio: Var) -> Result<Var, PriorError> {
        let s = g.shape(audio);
        if s.len() != 3 || s[1] != 1 || s[2] != CLIP_SAMPLES {
            return Err(PriorError::Shape(format!("audio window {s:?}, expected [batch, 1, {CLIP_SAMPLES}]")));
        }
        let mut h = audio;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(g, h)?;
            if let Some(norm) = self.norms.get(i) {
                h = norm.forward(g, h)?;
                h = g.leaky_relu(h, self.slope);
            }
        }
        Ok(h)
    }
}

/// Word embedding followed by a causal temporal convolutional network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextEncoderConfig {
    pub embed_dim: usize,
    pub blocks: usize,
    pub kernel: usize,
    pub dropout: f64,
    pub out_dim: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 300,
            blocks: 8,
            kernel: 2,
            dropout: 0.1,
            out_dim: 32,
        }
    }
}

impl TextEncoderConfig {
    pub fn desk() -> Self {
        Self {
            embed_dim: 32,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    embedding: Embedding,
    blocks: Vec<TemporalBlock>,
    decoder: Linear,
    vocab: usize,
    dropout: f64,
}

impl TextEncoder {
    pub fn new<T: Real>(b: &mut Builder<T>, cfg: &TextEncoderConfig, vocab: usize) -> Self {
        let e = cfg.embed_dim;
        let blocks = (0..cfg.blocks)
            .map(|i| TemporalBlock::new(&mut b.sub(&format!("tcn{i}")), e, e, cfg.kernel, 1 << i, cfg.dropout))
            .collect();
        Self {
            embedding: Embedding::new(&mut b.sub("embedding"), vocab, e),
            blocks,
            decoder: Linear::new(&mut b.sub("decoder"), e, cfg.out_dim, true),
            vocab,
            dropout: cfg.dropout,
        }
    }

    /// `batch × frames` word ids → `[batch, C₂, frames]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ids: &[usize], batch: usize) -> Result<Var, PriorError> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab) {
            return Err(PriorError::UnknownWord { id: bad, vocab: self.vocab });
        }
        if batch == 0 || ids.len() % batch != 0 {
            return Err(PriorError::Shape(format!("{} word ids for batch {batch}", ids.len())));
        }
        let frames = ids.len() / batch;
        let e = self.embedding.forward(g, ids)?;
        let e = g.reshape(e, &[batch, frames, self.embedding.dim])?;
        let mut h = g.permute(e, &[0, 2, 1])?;
        for blk in &self.blocks {
            h = blk.forward(g, h)?;
        }
        let h = g.permute(h, &[0, 2, 1])?;
        let h = self.decoder.forward(g, h)?;
        let h = g.dropout(h, self.dropout);
        Ok(g.permute(h, &[0, 2, 1])?)
    }
}

/// Channel concatenation `[audio ‖ text]`, both `[batch, C, frames]`.
pub fn build_condition<T: Real>(g: &mut Graph<T>, audio: Var, text: Var) -> Result<Var, PriorError> {
    let (a, t) = (g.shape(audio), g.shape(text));
    if a.len() != 3 || t.len() != 3 || a[0] != t[0] || a[2] != t[2] {
        return Err(PriorError::Shape(format!("audio features {a:?} and text features {t:?} do not align")));
    }
    Ok(g.concat(&[audio, text], 1)?)
}

/// Audio windows as a `[batch, 1, samples]` array.
pub fn audio_batch<'a>(windows: impl IntoIterator<Item = &'a [f32]>) -> Result<NdArray<f32>, PriorError> {
    let mut data = Vec::new();
    let mut n = 0;
    for w in windows {
        if w.len() != CLIP_SAMPLES {
            return Err(PriorError::Shape(format!("audio window of {} samples, expected {CLIP_SAMPLES}", w.len())));
        }
        data.extend_from_slice(w);
        n += 1;
    }
    Ok(NdArray::new(&[n, 1, CLIP_SAMPLES], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamSet;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn audio_stage_lengths() {
        let cfg = AudioEncoderConfig::default();
        assert_eq!(cfg.stage_lengths(51_200).unwrap(), vec![13_597, 2_717, 452, 64]);
    }

    #[test]
    fn audio_features_are_64_by_32() {
        let mut ps = ParamSet::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = AudioEncoder::new(&mut Builder::new(&mut ps, &mut rng), &AudioEncoderConfig::desk()).unwrap();
        let mut g = Graph::with_params(&ps);
        let x = g.constant(NdArray::zeros(&[1, 1, CLIP_SAMPLES]));
        let y = enc.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(y), &[1, 32, 64]);
        assert!(g.value(y).is_finite());
        let again = enc.forward(&mut g, x).unwrap();
        assert_eq!(g.value(y), g.value(again));

        let short = g.constant(NdArray::zeros(&[1, 1, 51_000]));
        assert!(matches!(enc.forward(&mut g, short), Err(PriorError::Shape(_))));
    }

    #[test]
    fn text_features_are_causal() {
        let mut ps = ParamSet::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = TextEncoder::new(&mut Builder::new(&mut ps, &mut rng), &TextEncoderConfig::desk(), 9);
        let mut g = Graph::with_params(&ps);
        let ids: Vec<usize> = (0..64).map(|i| i % 9).collect();
        let mut other = ids.clone();
        other[40] = (other[40] + 3) % 9;
        let a = enc.forward(&mut g, &ids, 1).unwrap();
        let b = enc.forward(&mut g, &other, 1).unwrap();
        assert_eq!(g.shape(a), &[1, 32, 64]);
        let (va, vb) = (g.value(a).data(), g.value(b).data());
        let mut changed_after = false;
        for c in 0..32 {
            for f in 0..64 {
                let (x, y) = (va[c * 64 + f], vb[c * 64 + f]);
                if f < 40 {
                    assert_eq!(x, y, "channel {c} frame {f}");
                } else if x != y {
                    changed_after = true;
                }
            }
        }
        assert!(changed_after);
        let pad = enc.forward(&mut g, &[0; 64], 1).unwrap();
        assert!(g.value(pad).is_finite());
        assert!(matches!(enc.forward(&mut g, &[9; 64], 1), Err(PriorError::UnknownWord { id: 9, .. })));
    }

    #[test]
    fn condition_puts_audio_first() {
        let mut g: Graph<f32> = Graph::new();
        let a = g.constant(NdArray::full(&[1, 32, 64], 1.0));
        let t = g.constant(NdArray::full(&[1, 32, 64], 2.0));
        let c = build_condition(&mut g, a, t).unwrap();
        assert_eq!(g.shape(c), &[1, 64, 64]);
        let v = g.value(c).data();
        assert!(v[..32 * 64].iter().all(|&x| x == 1.0));
        assert!(v[32 * 64..].iter().all(|&x| x == 2.0));
        let short = g.constant(NdArray::full(&[1, 32, 60], 2.0));
        assert!(build_condition(&mut g, a, short).is_err());
    }
}
