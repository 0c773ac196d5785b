use serde::{Deserialize, Serialize};

use crate::nn::{Builder, Conv1d, ConvAttnBlock, ConvTranspose1d, GroupNorm, ResnetBlock};
use crate::tensor::{Graph, Real, TensorError, Var};

use super::RqVaeError;

/// Shape of the convolutional autoencoder around the bottleneck.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutoencoderConfig {
    pub input_dim: usize,
    /// Channel width per resolution level, finest first.
    pub widths: Vec<usize>,
    /// Temporal reduction factor: 1, 2 or 4.
    pub reduction: usize,
    pub res_blocks: usize,
    pub attn_blocks: usize,
    pub groups: usize,
    pub dropout: f64,
    pub latent_dim: usize,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 126,
            widths: vec![64, 128, 256],
            reduction: 4,
            res_blocks: 2,
            attn_blocks: 3,
            groups: 32,
            dropout: 0.0,
            latent_dim: 64,
        }
    }
}

impl AutoencoderConfig {
    /// Small widths that train in minutes on one core.
    pub fn desk() -> Self {
        Self {
            widths: vec![32, 64, 64],
            res_blocks: 1,
            attn_blocks: 1,
            groups: 8,
            ..Self::default()
        }
    }

    pub fn stages(&self) -> usize {
        self.reduction.trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<(), RqVaeError> {
        if !matches!(self.reduction, 1 | 2 | 4) {
            return Err(RqVaeError::Config(format!("reduction factor must be 1, 2 or 4, got {}", self.reduction)));
        }
        if self.widths.len() < self.stages() + 1 || self.widths.contains(&0) {
            return Err(RqVaeError::Config(format!(
                "{} levels cannot hold {} downsampling stages",
                self.widths.len(),
                self.stages()
            )));
        }
        if self.input_dim == 0 || self.latent_dim == 0 {
            return Err(RqVaeError::Config("input and latent widths must be positive".into()));
        }
        Ok(())
    }

    /// Latent length for `frames` input frames.
    pub fn latent_len(&self, frames: usize) -> Result<usize, RqVaeError> {
        if frames % self.reduction != 0 {
            return Err(RqVaeError::Shape(format!("{frames} frames not divisible by reduction {}", self.reduction)));
        }
        Ok(frames / self.reduction)
    }
}

type Res = Result<Var, TensorError>;

#[derive(Clone, Debug)]
enum Block {
    Res(ResnetBlock),
    Attn(ConvAttnBlock),
    Down(Conv1d),
    Up(ConvTranspose1d),
}

impl Block {
    fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Res {
        match self {
            Block::Res(b) => b.forward(g, x),
            Block::Attn(b) => b.forward(g, x),
            Block::Down(c) => c.forward(g, x),
            Block::Up(c) => c.forward(g, x),
        }
    }
}

#[derive(Clone, Debug)]
struct Tower {
    conv_in: Conv1d,
    blocks: Vec<Block>,
    norm_out: GroupNorm,
    conv_out: Conv1d,
}

impl Tower {
    fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Res {
        let mut h = self.conv_in.forward(g, x)?;
        for b in &self.blocks {
            h = b.forward(g, h)?;
        }
        let h = self.norm_out.forward(g, h)?;
        let h = g.relu(h);
        self.conv_out.forward(g, h)
    }
}

/// `[batch, input_dim, frames]` → `[batch, latent_dim, frames / reduction]`.
#[derive(Clone, Debug)]
pub struct Encoder(Tower);

impl Encoder {
    pub fn new<T: Real>(b: &mut Builder<T>, cfg: &AutoencoderConfig) -> Result<Self, RqVaeError> {
        cfg.validate()?;
        let conv_in = Conv1d::new(&mut b.sub("conv_in"), cfg.input_dim, cfg.widths[0], 3, 1, 1);
        let mut blocks = Vec::new();
        let mut c = cfg.widths[0];
        for (level, &w) in cfg.widths.iter().enumerate() {
            for _ in 0..cfg.res_blocks {
                let i = blocks.len();
                blocks.push(Block::Res(ResnetBlock::new(&mut b.sub(&format!("block{i}")), c, w, cfg.groups, cfg.dropout)));
                c = w;
            }
            if level < cfg.stages() {
                let i = blocks.len();
                blocks.push(Block::Down(Conv1d::new(&mut b.sub(&format!("block{i}")), c, c, 3, 2, 1)));
            }
        }
        for _ in 0..cfg.attn_blocks {
            let i = blocks.len();
            blocks.push(Block::Attn(ConvAttnBlock::new(&mut b.sub(&format!("block{i}")), c, cfg.groups)));
            blocks.push(Block::Res(ResnetBlock::new(&mut b.sub(&format!("block{}", i + 1)), c, c, cfg.groups, cfg.dropout)));
        }
        let norm_out = GroupNorm::new(&mut b.sub("norm_out"), cfg.groups.min(c), c, 1e-6);
        let conv_out = Conv1d::new(&mut b.sub("conv_out"), c, cfg.latent_dim, 3, 1, 1);
        Ok(Self(Tower {
            conv_in,
            blocks,
            norm_out,
            conv_out,
        }))
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Res {
        self.0.forward(g, x)
    }
}

/// `[batch, latent_dim, T]` → `[batch, input_dim, T · reduction]`.
#[derive(Clone, Debug)]
pub struct Decoder(Tower);

impl Decoder {
    pub fn new<T: Real>(b: &mut Builder<T>, cfg: &AutoencoderConfig) -> Result<Self, RqVaeError> {
        cfg.validate()?;
        let top = *cfg.widths.last().unwrap();
        let conv_in = Conv1d::new(&mut b.sub("conv_in"), cfg.latent_dim, top, 3, 1, 1);
        let mut blocks = Vec::new();
        let mut c = top;
        let mut push = |blocks: &mut Vec<Block>, f: &mut dyn FnMut(&mut Builder<T>) -> Block| {
            let i = blocks.len();
            let blk = f(&mut b.sub(&format!("block{i}")));
            blocks.push(blk);
        };
        push(&mut blocks, &mut |b| Block::Res(ResnetBlock::new(b, top, top, cfg.groups, cfg.dropout)));
        for _ in 0..cfg.attn_blocks {
            push(&mut blocks, &mut |b| Block::Attn(ConvAttnBlock::new(b, top, cfg.groups)));
        }
        for level in (0..cfg.widths.len()).rev() {
            let w = cfg.widths[level];
            for _ in 0..cfg.res_blocks + 1 {
                let cin = c;
                push(&mut blocks, &mut |b| Block::Res(ResnetBlock::new(b, cin, w, cfg.groups, cfg.dropout)));
                c = w;
            }
            if level >= 1 && level <= cfg.stages() {
                push(&mut blocks, &mut |b| Block::Up(ConvTranspose1d::new(b, w, w, 4, 2, 1)));
            }
        }
        let norm_out = GroupNorm::new(&mut b.sub("norm_out"), cfg.groups.min(c), c, 1e-6);
        let conv_out = Conv1d::new(&mut b.sub("conv_out"), c, cfg.input_dim, 3, 1, 1);
        Ok(Self(Tower {
            conv_in,
            blocks,
            norm_out,
            conv_out,
        }))
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, z: Var) -> Res {
        self.0.forward(g, z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{NdArray, ParamSet};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(reduction: usize) -> (ParamSet<f32>, Encoder, Decoder) {
        let cfg = AutoencoderConfig {
            reduction,
            ..AutoencoderConfig::desk()
        };
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = Builder::new(&mut ps, &mut rng);
        let enc = Encoder::new(&mut b.sub("encoder"), &cfg).unwrap();
        let dec = Decoder::new(&mut b.sub("decoder"), &cfg).unwrap();
        (ps, enc, dec)
    }

    #[test]
    fn latent_lengths_follow_reduction() {
        for (s, t) in [(4, 16), (2, 32)] {
            let (ps, enc, dec) = build(s);
            let mut g = Graph::with_params(&ps);
            let x = g.constant(NdArray::zeros(&[1, 126, 64]));
            let z = enc.forward(&mut g, x).unwrap();
            assert_eq!(g.shape(z), &[1, 64, t]);
            assert!(g.value(z).is_finite());
            let y = dec.forward(&mut g, z).unwrap();
            assert_eq!(g.shape(y), &[1, 126, 64]);
        }
    }

    #[test]
    fn rejects_bad_reduction() {
        let cfg = AutoencoderConfig {
            reduction: 3,
            ..AutoencoderConfig::desk()
        };
        assert!(cfg.validate().is_err());
        assert!(AutoencoderConfig::desk().latent_len(66).is_err());
    }
}
