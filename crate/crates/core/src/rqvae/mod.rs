//! Gesture-token learning: a convolutional autoencoder whose bottleneck is
//! quantized by a residual stack of lookups into one shared codebook.

mod codebook;
mod net;
mod train;

pub use codebook::{rq_dequantize, rq_dequantize_prefix, rq_quantize, CodeStack, Codebook};
pub use net::{AutoencoderConfig, Decoder, Encoder};
pub use train::{evaluate, train_stage1, EpochReport, ReconstructionReport, Stage1Config};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::motion::{DatasetStats, GestureClip, CLIP_FRAMES, POSE_DIM};
use crate::nn::Builder;
use crate::rng::substream;
use crate::tensor::{Graph, NdArray, ParamSet, Real, TensorError, Var};

#[derive(Debug, thiserror::Error)]
pub enum RqVaeError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("code index {index} outside codebook of {size} (+ padding)")]
    CodeOutOfRange { index: usize, size: usize },
    #[error("training diverged at epoch {epoch}, step {step}: loss is {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },
    #[error("no training clips")]
    Empty,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Which cumulative quantizations the commitment term anchors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Commitment {
    /// Every prefix sum `ẑ(≤d)`, `d = 1..D`.
    PerDepth,
    /// Only the full sum `ẑ(≤D)`.
    Final,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantizerConfig {
    pub depth: usize,
    pub codebook_size: usize,
    pub beta: f64,
    pub ema_decay: f32,
    pub ema_eps: f32,
    /// Codes used fewer times than this per reset period are replaced.
    pub dead_threshold: u32,
    pub reset_period: usize,
    pub commitment: Commitment,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            codebook_size: 256,
            beta: 0.25,
            ema_decay: 0.99,
            ema_eps: 1e-5,
            dead_threshold: 1,
            reset_period: 256,
            commitment: Commitment::PerDepth,
        }
    }
}

impl QuantizerConfig {
    pub fn validate(&self) -> Result<(), RqVaeError> {
        if self.depth == 0 || self.codebook_size < 2 {
            return Err(RqVaeError::Config(format!(
                "need depth ≥ 1 and at least 2 codes, got depth {} with {} codes",
                self.depth, self.codebook_size
            )));
        }
        if !(0.0..1.0).contains(&self.ema_decay) || self.reset_period == 0 {
            return Err(RqVaeError::Config("EMA decay must be in [0, 1) and reset period positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeConfig {
    pub autoencoder: AutoencoderConfig,
    pub quantizer: QuantizerConfig,
}

impl VaeConfig {
    pub fn desk() -> Self {
        Self {
            autoencoder: AutoencoderConfig::desk(),
            quantizer: QuantizerConfig {
                reset_period: 20,
                ..QuantizerConfig::default()
            },
        }
    }

    pub fn tokens_per_clip(&self) -> usize {
        CLIP_FRAMES / self.autoencoder.reduction
    }
}

/// Loss value and its two parts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub total: Var,
    pub reconstruction: Var,
    pub commitment: Var,
}

/// Variance-normalized reconstruction error plus `β` times the commitment
/// of the encoder output `z` to each detached quantization in `quantized`.
/// Both terms are per-element means so neither scales with the widths.
///
/// `x` and `x_hat` are `[batch, P, frames]`, `inv_var` is `[1, P, 1]`,
/// `z` and every entry of `quantized` are `[batch, p, T]`.
pub fn vae_loss<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    x_hat: Var,
    inv_var: Var,
    z: Var,
    quantized: &[Var],
    beta: f64,
) -> Result<LossParts, TensorError> {
    let e = g.sub(x_hat, x)?;
    let e2 = g.mul(e, e)?;
    let weighted = g.mul_bcast(e2, inv_var)?;
    let reconstruction = g.mean(weighted);
    let mut commitment = None;
    for &q in quantized {
        let q = g.detach(q);
        let d = g.sub(z, q)?;
        let d2 = g.mul(d, d)?;
        let s = g.mean(d2);
        commitment = Some(match commitment {
            None => s,
            Some(c) => g.add(c, s)?,
        });
    }
    let commitment = match commitment {
        Some(c) => c,
        None => g.constant(NdArray::scalar(T::zero())),
    };
    let weighted_commit = g.scale(commitment, beta);
    let total = g.add(reconstruction, weighted_commit)?;
    Ok(LossParts {
        total,
        reconstruction,
        commitment,
    })
}

/// Stage-1 model: encoder, shared residual codebook, decoder and the
/// dataset statistics used to normalize poses.
#[derive(Clone, Debug)]
pub struct RqVae {
    pub cfg: VaeConfig,
    pub params: ParamSet<f32>,
    encoder: Encoder,
    decoder: Decoder,
    pub codebook: Codebook,
    pub stats: DatasetStats,
}

/// Reorders `[batch, C, T]` values to position-major rows `[batch·T, C]`.
pub(crate) fn channels_last(v: &NdArray<f32>) -> Vec<f32> {
    let s = v.shape();
    let (b, c, t) = (s[0], s[1], s[2]);
    let mut out = vec![0.0; b * c * t];
    for bi in 0..b {
        for ci in 0..c {
            for ti in 0..t {
                out[(bi * t + ti) * c + ci] = v.data()[(bi * c + ci) * t + ti];
            }
        }
    }
    out
}

/// Inverse of [`channels_last`].
pub(crate) fn channels_first(rows: &[f32], b: usize, c: usize, t: usize) -> NdArray<f32> {
    let mut out = vec![0.0; b * c * t];
    for bi in 0..b {
        for ti in 0..t {
            for ci in 0..c {
                out[(bi * c + ci) * t + ti] = rows[(bi * t + ti) * c + ci];
            }
        }
    }
    NdArray::new(&[b, c, t], out).expect("consistent sizes")
}

impl RqVae {
    pub fn new(cfg: VaeConfig, stats: DatasetStats, seed: u64) -> Result<Self, RqVaeError> {
        cfg.autoencoder.validate()?;
        cfg.quantizer.validate()?;
        if stats.mean.len() != cfg.autoencoder.input_dim || stats.var.len() != cfg.autoencoder.input_dim {
            return Err(RqVaeError::Shape(format!(
                "statistics cover {} dims, model expects {}",
                stats.var.len(),
                cfg.autoencoder.input_dim
            )));
        }
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(substream(seed, "init", 0));
        let mut b = Builder::new(&mut params, &mut rng);
        let encoder = Encoder::new(&mut b.sub("encoder"), &cfg.autoencoder)?;
        let decoder = Decoder::new(&mut b.sub("decoder"), &cfg.autoencoder)?;
        let q = &cfg.quantizer;
        let scale = 1.0 / q.codebook_size as f32;
        let mut codebook = Codebook::random(q.codebook_size, cfg.autoencoder.latent_dim, scale, &mut rng)?;
        codebook.eps = q.ema_eps;
        Ok(Self {
            cfg,
            params,
            encoder,
            decoder,
            codebook,
            stats,
        })
    }

    pub fn depth(&self) -> usize {
        self.cfg.quantizer.depth
    }

    pub fn latent_dim(&self) -> usize {
        self.cfg.autoencoder.latent_dim
    }

    /// Normalized `[batch, P, frames]` input from frame-major clips.
    pub fn input(&self, clips: &[&GestureClip]) -> NdArray<f32> {
        let frames = clips[0].poses.len() / POSE_DIM;
        let mut out = vec![0.0f32; clips.len() * POSE_DIM * frames];
        for (bi, c) in clips.iter().enumerate() {
            for f in 0..frames {
                for d in 0..POSE_DIM {
                    let v = (c.poses[f * POSE_DIM + d] - self.stats.mean[d]) / self.stats.var[d].sqrt();
                    out[(bi * POSE_DIM + d) * frames + f] = v;
                }
            }
        }
        NdArray::new(&[clips.len(), POSE_DIM, frames], out).expect("consistent sizes")
    }

    fn std_and_mean<T: Real>(&self, g: &mut Graph<T>) -> Result<(Var, Var), TensorError> {
        let p = POSE_DIM;
        let std: Vec<f64> = self.stats.var.iter().map(|&v| (v as f64).sqrt()).collect();
        let mean: Vec<f64> = self.stats.mean.iter().map(|&m| m as f64).collect();
        let s = g.constant(NdArray::from_f64(&[1, p, 1], &std)?);
        let m = g.constant(NdArray::from_f64(&[1, p, 1], &mean)?);
        Ok((s, m))
    }

    pub fn inv_var<T: Real>(&self, g: &mut Graph<T>) -> Result<Var, TensorError> {
        let iv: Vec<f64> = self.stats.var.iter().map(|&v| 1.0 / v as f64).collect();
        Ok(g.constant(NdArray::from_f64(&[1, POSE_DIM, 1], &iv)?))
    }

    /// Encoder output `[batch, p, T]` for a normalized input.
    pub fn encode(&self, g: &mut Graph<f32>, x_norm: Var) -> Result<Var, TensorError> {
        self.encoder.forward(g, x_norm)
    }

    /// Decoder output in raw pose units, `[batch, P, frames]`.
    pub fn decode(&self, g: &mut Graph<f32>, zq: Var) -> Result<Var, TensorError> {
        let y = self.decoder.forward(g, zq)?;
        let (s, m) = self.std_and_mean(g)?;
        let y = g.mul_bcast(y, s)?;
        g.add_bcast(y, m)
    }

    /// Encoder latents of each clip, position-major `T × p`.
    pub fn latents(&self, clips: &[GestureClip]) -> Result<Vec<Vec<f32>>, RqVaeError> {
        let mut out = Vec::with_capacity(clips.len());
        for chunk in clips.chunks(32) {
            let refs: Vec<&GestureClip> = chunk.iter().collect();
            let mut g = Graph::with_params(&self.params);
            let x = g.constant(self.input(&refs));
            let z = self.encode(&mut g, x)?;
            let rows = channels_last(g.value(z));
            let per = rows.len() / chunk.len();
            out.extend(rows.chunks(per).map(|r| r.to_vec()));
        }
        Ok(out)
    }

    /// Gesture tokens of each clip.
    pub fn tokenize(&self, clips: &[GestureClip]) -> Result<Vec<CodeStack>, RqVaeError> {
        self.latents(clips)?
            .iter()
            .map(|z| rq_quantize(z, &self.codebook, self.depth()))
            .collect()
    }

    /// Frame-major poses decoded from position-major codes, `depth` per
    /// position. A full clip has `T` positions; shorter stacks decode to
    /// `s` frames per position.
    pub fn decode_codes(&self, codes: &[usize]) -> Result<Vec<f32>, RqVaeError> {
        let d = self.depth();
        if codes.is_empty() || codes.len() % d != 0 {
            return Err(RqVaeError::Shape(format!("{} codes do not fill positions of depth {d}", codes.len())));
        }
        let t = codes.len() / d;
        let zq = rq_dequantize(codes, d, &self.codebook)?;
        let mut g = Graph::with_params(&self.params);
        let z = g.constant(channels_first(&zq, 1, self.latent_dim(), t));
        let y = self.decode(&mut g, z)?;
        Ok(channels_last(g.value(y)))
    }

    /// Encode, quantize and decode each clip.
    pub fn reconstruct(&self, clips: &[GestureClip]) -> Result<Vec<Vec<f32>>, RqVaeError> {
        self.tokenize(clips)?.iter().map(|s| self.decode_codes(&s.codes)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Init;

    #[test]
    fn loss_examples() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(NdArray::zeros(&[1, 2, 4]));
        let xh = g.constant(NdArray::full(&[1, 2, 4], 1.0));
        let iv = g.constant(NdArray::full(&[1, 2, 1], 0.25));
        let z = g.constant(NdArray::full(&[1, 3, 2], 0.5));
        let l = vae_loss(&mut g, x, xh, iv, z, &[z], 0.25).unwrap();
        assert!((g.value(l.reconstruction).item() - 0.25).abs() < 1e-12);
        assert_eq!(g.value(l.commitment).item(), 0.0);

        let l0 = vae_loss(&mut g, x, x, iv, z, &[z, z], 0.25).unwrap();
        assert_eq!(g.value(l0.total).item(), 0.0);

        let q = g.constant(NdArray::zeros(&[1, 3, 2]));
        let a = vae_loss(&mut g, x, xh, iv, z, &[q], 0.25).unwrap();
        let b = vae_loss(&mut g, x, xh, iv, z, &[q], 0.5).unwrap();
        assert_eq!(g.value(a.commitment).item(), g.value(b.commitment).item());
        let ca = g.value(a.total).item() - g.value(a.reconstruction).item();
        let cb = g.value(b.total).item() - g.value(b.reconstruction).item();
        assert!((cb - 2.0 * ca).abs() < 1e-12);
        assert!((g.value(a.commitment).item() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn straight_through_passes_decoder_gradient_to_encoder_output() {
        let cfg = AutoencoderConfig {
            widths: vec![4, 4],
            reduction: 2,
            groups: 2,
            attn_blocks: 0,
            ..AutoencoderConfig::desk()
        };
        let mut ps: ParamSet<f64> = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dec = Decoder::new(&mut Builder::new(&mut ps, &mut rng), &AutoencoderConfig { latent_dim: 3, input_dim: 5, ..cfg }).unwrap();
        let mut zps: ParamSet<f64> = ParamSet::new();
        let zid = zps.init("z", &[1, 3, 4], Init::Normal(1.0), &mut rng);
        let zvals = zps.get(zid).clone();
        let cb = Codebook::random(8, 3, 1.0, &mut rng).unwrap();
        let rows: Vec<f32> = (0..4).flat_map(|t| (0..3).map(move |c| (t, c))).map(|(t, c)| zvals.data()[c * 4 + t] as f32).collect();
        let stack = rq_quantize(&rows, &cb, 2).unwrap();
        let prefixes: Vec<NdArray<f64>> = (1..=2)
            .map(|d| channels_first(&rq_dequantize_prefix(&stack.codes, 2, d, &cb).unwrap(), 1, 3, 4).cast())
            .collect();
        let beta = 0.25;

        let mut g = Graph::with_params(&ps);
        let z = g.leaf(zvals.clone(), true);
        let zq = g.constant(prefixes[1].clone());
        let diff = g.sub(zq, z).unwrap();
        let diff = g.detach(diff);
        let st = g.add(z, diff).unwrap();
        let y = dec.forward(&mut g, st).unwrap();
        let x = g.constant(NdArray::zeros(&[1, 5, 8]));
        let iv = g.constant(NdArray::full(&[1, 5, 1], 1.0));
        let qs: Vec<Var> = prefixes.iter().map(|p| g.constant(p.clone())).collect();
        let l = vae_loss(&mut g, x, y, iv, z, &qs, beta).unwrap();
        let grads = g.backward(l.total).unwrap();
        let gz = grads.of(z).unwrap();
        let gst = grads.of(st).unwrap();
        let i = 5;
        let analytic: f64 = prefixes.iter().map(|p| 2.0 * beta * (zvals.data()[i] - p.data()[i]) / 12.0).sum();
        assert!((gz.data()[i] - (gst.data()[i] + analytic)).abs() < 1e-10);

        // central difference of the loss with codes held fixed isolates
        // the commitment part
        let loss_at = |v: f64| {
            let mut zv = zvals.clone();
            zv.data_mut()[i] = v;
            let mut g = Graph::with_params(&ps);
            let z = g.constant(zv);
            // the straight-through value is the quantized latent itself
            let st = g.constant(prefixes[1].clone());
            let y = dec.forward(&mut g, st).unwrap();
            let x = g.constant(NdArray::zeros(&[1, 5, 8]));
            let iv = g.constant(NdArray::full(&[1, 5, 1], 1.0));
            let qs: Vec<Var> = prefixes.iter().map(|p| g.constant(p.clone())).collect();
            let l = vae_loss(&mut g, x, y, iv, z, &qs, beta).unwrap();
            g.value(l.total).item()
        };
        let h = 1e-6;
        let fd_commit = (loss_at(zvals.data()[i] + h) - loss_at(zvals.data()[i] - h)) / (2.0 * h);
        assert!((fd_commit - analytic).abs() < 1e-6, "{fd_commit} vs {analytic}");
    }
}
