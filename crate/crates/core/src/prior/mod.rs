//! Speech-conditioned autoregressive prior over gesture-token stacks.
//!
//! A temporal transformer summarizes the token stacks of earlier positions
//! together with the audio and text condition; a depth transformer then
//! predicts the residual codes of the current position one level at a time.

mod encoders;
mod sample;
mod train;

pub use encoders::{audio_batch, build_condition, AudioEncoder, AudioEncoderConfig, TextEncoder, TextEncoderConfig};
pub use sample::{
    blend_overlap, blend_weight, sample_top_k, synthesize_long, synthesize_window, SamplerConfig, BLEND_FRAMES,
    WINDOW_ADVANCE,
};
pub use train::{token_windows, train_stage2, validation_nll, Stage2Config, Stage2Report, TokenWindow};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::motion::CLIP_FRAMES;
use crate::nn::{Builder, Embedding, LayerNorm, Linear, SelfAttnBlock};
use crate::rng::substream;
use crate::rqvae::{RqVae, RqVaeError};
use crate::tensor::{Graph, Init, NdArray, ParamId, ParamSet, Real, TensorError, Var};

#[derive(Debug, thiserror::Error)]
pub enum PriorError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("word id {id} outside vocabulary of {vocab}")]
    UnknownWord { id: usize, vocab: usize },
    #[error("code index {index} outside codebook of {size} (+ padding)")]
    CodeOutOfRange { index: usize, size: usize },
    #[error("prior and token model disagree: {0}")]
    Incompatible(String),
    #[error("speech of {0} frames is shorter than one 64-frame window")]
    TooShort(usize),
    #[error("training diverged at epoch {epoch}, step {step}: loss is {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },
    #[error("no training windows")]
    Empty,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Tokens(#[from] RqVaeError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    pub width: usize,
    pub heads: usize,
    pub temporal_blocks: usize,
    pub depth_blocks: usize,
    pub dropout: f64,
    pub audio: AudioEncoderConfig,
    pub text: TextEncoderConfig,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            width: 256,
            heads: 8,
            temporal_blocks: 8,
            depth_blocks: 4,
            dropout: 0.1,
            audio: AudioEncoderConfig::default(),
            text: TextEncoderConfig::default(),
        }
    }
}

impl PriorConfig {
    pub fn desk() -> Self {
        Self {
            width: 64,
            heads: 4,
            temporal_blocks: 2,
            depth_blocks: 1,
            audio: AudioEncoderConfig::desk(),
            text: TextEncoderConfig::desk(),
            ..Self::default()
        }
    }
}

/// Token grid a prior was built for; must agree with the token model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    /// Token positions per 64-frame window.
    pub positions: usize,
    pub depth: usize,
    pub codebook_size: usize,
    pub vocab: usize,
}

impl TokenLayout {
    pub fn of(vae: &RqVae, vocab: usize) -> Self {
        Self {
            positions: vae.cfg.tokens_per_clip(),
            depth: vae.depth(),
            codebook_size: vae.codebook.size(),
            vocab,
        }
    }

    pub fn check(&self, vae: &RqVae) -> Result<(), PriorError> {
        let other = Self::of(vae, self.vocab);
        if *self != other {
            return Err(PriorError::Incompatible(format!(
                "prior expects {}×{} tokens over {} codes, token model gives {}×{} over {}",
                self.positions, self.depth, self.codebook_size, other.positions, other.depth, other.codebook_size
            )));
        }
        Ok(())
    }

    pub fn padding(&self) -> usize {
        self.codebook_size
    }
}

/// Stage-2 model.
#[derive(Clone, Debug)]
pub struct Prior {
    pub cfg: PriorConfig,
    pub layout: TokenLayout,
    pub params: ParamSet<f32>,
    audio: AudioEncoder,
    text: TextEncoder,
    cond_proj: Linear,
    start: ParamId,
    pos_time: ParamId,
    pos_depth: ParamId,
    tokens: Embedding,
    temporal: Vec<SelfAttnBlock>,
    depth: Vec<SelfAttnBlock>,
    head_norm: LayerNorm,
    head: Linear,
}

impl Prior {
    pub fn new(cfg: PriorConfig, layout: TokenLayout, seed: u64) -> Result<Self, PriorError> {
        if cfg.width == 0 || cfg.heads == 0 || cfg.width % cfg.heads != 0 {
            return Err(PriorError::Config(format!("width {} not divisible into {} heads", cfg.width, cfg.heads)));
        }
        if layout.positions == 0 || CLIP_FRAMES % layout.positions != 0 || layout.depth == 0 || layout.vocab == 0 {
            return Err(PriorError::Config(format!("unusable token layout {layout:?}")));
        }
        let w = cfg.width;
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(substream(seed, "init", 1));
        let mut b = Builder::new(&mut params, &mut rng);
        let audio = AudioEncoder::new(&mut b.sub("audio"), &cfg.audio)?;
        let text = TextEncoder::new(&mut b.sub("text"), &cfg.text, layout.vocab);
        let cond_dim = cfg.audio.feature_dim() + cfg.text.out_dim;
        let cond_proj = Linear::new(&mut b.sub("cond_proj"), cond_dim, w, true);
        let start = b.param("start", &[w], Init::Normal(0.02));
        let pos_time = b.param("pos_time", &[layout.positions, w], Init::Normal(0.02));
        let pos_depth = b.param("pos_depth", &[layout.depth, w], Init::Normal(0.02));
        let tokens = Embedding::new(&mut b.sub("tokens"), layout.codebook_size + 1, w);
        let temporal = (0..cfg.temporal_blocks)
            .map(|i| SelfAttnBlock::new(&mut b.sub(&format!("temporal{i}")), w, cfg.heads, cfg.dropout))
            .collect();
        let depth = (0..cfg.depth_blocks)
            .map(|i| SelfAttnBlock::new(&mut b.sub(&format!("depth{i}")), w, cfg.heads, cfg.dropout))
            .collect();
        let head_norm = LayerNorm::new(&mut b.sub("head_norm"), w, 1e-5);
        let head = Linear::new(&mut b.sub("head"), w, layout.codebook_size + 1, true);
        Ok(Self {
            cfg,
            layout,
            params,
            audio,
            text,
            cond_proj,
            start,
            pos_time,
            pos_depth,
            tokens,
            temporal,
            depth,
            head_norm,
            head,
        })
    }

    fn check_codes(&self, codes: &[usize]) -> Result<(), PriorError> {
        let n = self.layout.codebook_size;
        match codes.iter().find(|&&c| c > n) {
            Some(&index) => Err(PriorError::CodeOutOfRange { index, size: n }),
            None => Ok(()),
        }
    }

    /// Audio `[batch, 1, 51200]` → `[batch, C₁, 64]`.
    pub fn encode_audio<T: Real>(&self, g: &mut Graph<T>, audio: Var) -> Result<Var, PriorError> {
        self.audio.forward(g, audio)
    }

    /// `batch × 64` word ids → `[batch, C₂, 64]`.
    pub fn encode_text<T: Real>(&self, g: &mut Graph<T>, words: &[usize], batch: usize) -> Result<Var, PriorError> {
        self.text.forward(g, words, batch)
    }

    /// Condition features `[batch, C₁+C₂, 64]` pooled to token rate and
    /// projected: `[batch, T, width]`.
    pub fn condition_tokens<T: Real>(&self, g: &mut Graph<T>, cond: Var) -> Result<Var, PriorError> {
        let s = g.shape(cond).to_vec();
        let (b, c, f) = (s[0], s[1], s[2]);
        let t = self.layout.positions;
        if f != CLIP_FRAMES {
            return Err(PriorError::Shape(format!("condition has {f} frames, expected {CLIP_FRAMES}")));
        }
        let x = g.reshape(cond, &[b, c, t, f / t])?;
        let x = g.mean_axis(x, 3)?;
        let x = g.permute(x, &[0, 2, 1])?;
        Ok(self.cond_proj.forward(g, x)?)
    }

    /// Speech of each window → projected token-rate condition.
    pub fn condition<T: Real>(&self, g: &mut Graph<T>, audio: Var, words: &[usize]) -> Result<Var, PriorError> {
        let b = g.shape(audio)[0];
        let a = self.encode_audio(g, audio)?;
        let t = self.encode_text(g, words, b)?;
        let fc = build_condition(g, a, t)?;
        self.condition_tokens(g, fc)
    }

    fn embed_codes<T: Real>(&self, g: &mut Graph<T>, codes: &[usize], shape: &[usize]) -> Result<Var, PriorError> {
        let e = self.tokens.forward(g, codes)?;
        Ok(g.reshape(e, shape)?)
    }

    /// Contexts `h` for the first `len` positions, `[batch, len, width]`.
    ///
    /// `cond` is `[batch, T, width]`; `prev` holds the stacks of positions
    /// `0..len-1`, batch-major `batch × (len−1) × D`.
    pub fn temporal_context<T: Real>(&self, g: &mut Graph<T>, cond: Var, prev: &[usize], len: usize) -> Result<Var, PriorError> {
        let (w, dd) = (self.cfg.width, self.layout.depth);
        let b = g.shape(cond)[0];
        if len == 0 || len > self.layout.positions || prev.len() != b * (len - 1) * dd {
            return Err(PriorError::Shape(format!("{} prefix codes for batch {b}, length {len}", prev.len())));
        }
        self.check_codes(prev)?;
        let start = g.param(self.start);
        let start = g.reshape(start, &[1, 1, w])?;
        let zeros = g.constant(NdArray::zeros(&[b, 1, w]));
        let mut u = g.add_bcast(zeros, start)?;
        if len > 1 {
            let e = self.embed_codes(g, prev, &[b, len - 1, dd, w])?;
            let summed = g.mean_axis(e, 2)?;
            let summed = g.scale(summed, dd as f64);
            u = g.concat(&[u, summed], 1)?;
        }
        let pos = g.param(self.pos_time);
        let pos = g.slice(pos, 0, 0, len)?;
        let pos = g.reshape(pos, &[1, len, w])?;
        let u = g.add_bcast(u, pos)?;
        let c = g.slice(cond, 1, 0, len)?;
        let mut h = g.add(u, c)?;
        for blk in &self.temporal {
            h = blk.forward(g, h)?;
        }
        Ok(h)
    }

    /// Masked logits `[m, levels, N+1]` for depths `1..=levels` at `m`
    /// positions with contexts `h [m, width]` and the first `levels−1` codes
    /// of each position in `partial` (`m × (levels−1)`).
    pub fn depth_logits<T: Real>(&self, g: &mut Graph<T>, h: Var, partial: &[usize], levels: usize) -> Result<Var, PriorError> {
        let w = self.cfg.width;
        let m = g.shape(h)[0];
        if levels == 0 || levels > self.layout.depth || partial.len() != m * (levels - 1) {
            return Err(PriorError::Shape(format!("{} partial codes for {m} positions at {levels} levels", partial.len())));
        }
        self.check_codes(partial)?;
        let first = g.reshape(h, &[m, 1, w])?;
        let v = if levels > 1 {
            let k = levels - 1;
            let e = self.embed_codes(g, partial, &[m, k, w])?;
            // running sums over depth via an upper-triangular ones matrix
            let tri: Vec<f64> = (0..k * k).map(|i| if i / k <= i % k { 1.0 } else { 0.0 }).collect();
            let tri = g.constant(NdArray::from_f64(&[k, k], &tri)?);
            let et = g.permute(e, &[0, 2, 1])?;
            let cum = g.matmul(et, tri)?;
            let cum = g.permute(cum, &[0, 2, 1])?;
            g.concat(&[first, cum], 1)?
        } else {
            first
        };
        let pos = g.param(self.pos_depth);
        let pos = g.slice(pos, 0, 0, levels)?;
        let pos = g.reshape(pos, &[1, levels, w])?;
        let mut x = g.add_bcast(v, pos)?;
        for blk in &self.depth {
            x = blk.forward(g, x)?;
        }
        let x = self.head_norm.forward(g, x)?;
        let logits = self.head.forward(g, x)?;
        Ok(g.mask_last(logits, &[self.layout.padding()])?)
    }

    /// Teacher-forced logits for full stacks: `[batch·T·D, N+1]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, cond: Var, codes: &[usize]) -> Result<Var, PriorError> {
        let (t, dd, w) = (self.layout.positions, self.layout.depth, self.cfg.width);
        let b = g.shape(cond)[0];
        if codes.len() != b * t * dd {
            return Err(PriorError::Shape(format!("{} codes for batch {b} of {t}×{dd} stacks", codes.len())));
        }
        let prev: Vec<usize> = (0..b).flat_map(|bi| codes[bi * t * dd..(bi * t + t - 1) * dd].iter().copied()).collect();
        let h = self.temporal_context(g, cond, &prev, t)?;
        let h = g.reshape(h, &[b * t, w])?;
        let partial: Vec<usize> = codes.chunks(dd).flat_map(|s| s[..dd - 1].iter().copied()).collect();
        let logits = self.depth_logits(g, h, &partial, dd)?;
        Ok(g.reshape(logits, &[b * t * dd, self.layout.codebook_size + 1])?)
    }
}

/// Mean negative log-likelihood of `targets` under row-wise `logits`.
pub fn nll_loss<T: Real>(g: &mut Graph<T>, logits: Var, targets: &[usize]) -> Result<Var, TensorError> {
    let lp = g.log_softmax(logits);
    g.nll(lp, targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny() -> Prior {
        let cfg = PriorConfig {
            width: 16,
            heads: 2,
            temporal_blocks: 2,
            depth_blocks: 2,
            dropout: 0.0,
            ..PriorConfig::desk()
        };
        let layout = TokenLayout {
            positions: 16,
            depth: 4,
            codebook_size: 8,
            vocab: 5,
        };
        let mut p = Prior::new(cfg, layout, 3).unwrap();
        // spread the embeddings so causality probes see real changes
        let id = p.params.id("tokens.weight").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for v in p.params.get_mut(id) {
            *v = rng.random_range(-1.0..1.0);
        }
        p
    }

    fn random_codes(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
        (0..n).map(|_| rng.random_range(0..k)).collect()
    }

    fn cond(p: &Prior, g: &mut Graph<f32>, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f32> = (0..16 * p.cfg.width).map(|_| rng.random_range(-1.0..1.0)).collect();
        g.constant(NdArray::new(&[1, 16, p.cfg.width], v).unwrap())
    }

    #[test]
    fn temporal_context_is_causal() {
        let p = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let codes = random_codes(&mut rng, 15 * 4, 8);
        let mut other = codes.clone();
        // position index 5 (0-based) feeds contexts from position 6 on
        for d in 0..4 {
            other[5 * 4 + d] = (other[5 * 4 + d] + 1) % 8;
        }
        let mut g = Graph::with_params(&p.params);
        let c = cond(&p, &mut g, 2);
        let a = p.temporal_context(&mut g, c, &codes, 16).unwrap();
        let b = p.temporal_context(&mut g, c, &other, 16).unwrap();
        assert_eq!(g.shape(a), &[1, 16, 16]);
        let (va, vb) = (g.value(a).data().to_vec(), g.value(b).data().to_vec());
        let w = 16;
        assert_eq!(va[..6 * w], vb[..6 * w]);
        assert_ne!(va[6 * w..7 * w], vb[6 * w..7 * w]);

        let base = p.temporal_context(&mut g, c, &[], 1).unwrap();
        assert_eq!(g.shape(base), &[1, 1, 16]);
        assert_eq!(g.value(base).data(), &va[..w]);
    }

    #[test]
    fn depth_logits_are_causal_and_masked() {
        let p = tiny();
        let mut g = Graph::with_params(&p.params);
        let h = cond(&p, &mut g, 5);
        let h = g.reshape(h, &[16, 16]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let partial = random_codes(&mut rng, 16 * 3, 8);
        let mut other = partial.clone();
        for m in 0..16 {
            other[m * 3 + 1] = (other[m * 3 + 1] + 1) % 8;
        }
        let a = p.depth_logits(&mut g, h, &partial, 4).unwrap();
        let b = p.depth_logits(&mut g, h, &other, 4).unwrap();
        assert_eq!(g.shape(a), &[16, 4, 9]);
        let (va, vb) = (g.value(a).data().to_vec(), g.value(b).data().to_vec());
        for m in 0..16 {
            for d in 0..4 {
                let row = |v: &[f32]| v[(m * 4 + d) * 9..(m * 4 + d + 1) * 9].to_vec();
                // the changed code sits at level 2 and feeds level 3 on
                if d <= 1 {
                    assert_eq!(row(&va), row(&vb));
                }
                assert_eq!(row(&va)[8], f32::NEG_INFINITY);
            }
        }
        let probs = g.softmax(a);
        for row in g.value(probs).data().chunks(9) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
            assert_eq!(row[8], 0.0);
        }
        let one = p.depth_logits(&mut g, h, &[], 1).unwrap();
        assert_eq!(&g.value(one).data()[..9], &va[..9]);
    }

    #[test]
    fn teacher_forcing_matches_term_by_term_likelihood() {
        let p = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let codes = random_codes(&mut rng, 16 * 4, 8);
        let mut g = Graph::with_params(&p.params);
        let c = cond(&p, &mut g, 8);
        let logits = p.forward(&mut g, c, &codes).unwrap();
        let loss = nll_loss(&mut g, logits, &codes).unwrap();
        let batched = g.value(loss).item() as f64;

        let mut total = 0.0f64;
        for t in 0..16 {
            let h = p.temporal_context(&mut g, c, &codes[..t * 4], t + 1).unwrap();
            let ht = g.slice(h, 1, t, 1).unwrap();
            let ht = g.reshape(ht, &[1, 16]).unwrap();
            for d in 0..4 {
                let l = p.depth_logits(&mut g, ht, &codes[t * 4..t * 4 + d], d + 1).unwrap();
                let row = &g.value(l).data()[d * 9..(d + 1) * 9];
                let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
                let z: f64 = row.iter().map(|&v| (v as f64 - m).exp()).sum();
                total -= row[codes[t * 4 + d]] as f64 - m - z.ln();
            }
        }
        assert!((total / 64.0 - batched).abs() < 1e-5, "{} vs {batched}", total / 64.0);
    }

    #[test]
    fn nll_examples() {
        let mut g: Graph<f64> = Graph::new();
        let uniform = g.constant(NdArray::zeros(&[3, 256]));
        let l = nll_loss(&mut g, uniform, &[0, 17, 255]).unwrap();
        assert!((g.value(l).item() - 256f64.ln()).abs() < 1e-12);

        let mut peaked = vec![0.0; 2 * 4];
        peaked[1] = 60.0;
        peaked[4 + 3] = 60.0;
        let x = g.constant(NdArray::new(&[2, 4], peaked).unwrap());
        let l = nll_loss(&mut g, x, &[1, 3]).unwrap();
        assert!(g.value(l).item() < 1e-20);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let raw: Vec<f64> = (0..5 * 7).map(|_| rng.random_range(-3.0..3.0)).collect();
        let targets = [0, 6, 3, 2, 5];
        let x = g.constant(NdArray::new(&[5, 7], raw.clone()).unwrap());
        let l = nll_loss(&mut g, x, &targets).unwrap();
        let oracle: f64 = raw
            .chunks(7)
            .zip(targets)
            .map(|(r, t)| r.iter().map(|v| v.exp()).sum::<f64>().ln() - r[t])
            .sum::<f64>()
            / 5.0;
        assert!((g.value(l).item() - oracle).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_codes() {
        let p = tiny();
        let mut g = Graph::with_params(&p.params);
        let c = cond(&p, &mut g, 1);
        assert!(matches!(p.temporal_context(&mut g, c, &[9, 0, 0, 0], 2), Err(PriorError::CodeOutOfRange { index: 9, .. })));
    }
}
