//! Versioned little-endian checkpoint container with a SHA-256 trailer.
//!
//! Layout: `GTKC`, version `u16`, component tag (`u8` length + ASCII),
//! config echo (`u32` length + UTF-8), blob count `u32`, then per blob a
//! `u16`-length name, `u8` rank, `u32` dims and `f32` values, and finally
//! the 32-byte digest of everything before it.

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::config::RunConfig;
use crate::metrics::FeatureExtractor;
use crate::motion::DatasetStats;
use crate::prior::{Prior, TokenLayout};
use crate::rqvae::RqVae;
use crate::tensor::{NdArray, ParamSet};

pub const MAGIC: &[u8; 4] = b"GTKC";
pub const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    Vae,
    Prior,
    Features,
}

impl Component {
    pub fn tag(self) -> &'static str {
        match self {
            Component::Vae => "vae",
            Component::Prior => "prior",
            Component::Features => "feat",
        }
    }

    fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "vae" => Some(Component::Vae),
            "prior" => Some(Component::Prior),
            "feat" => Some(Component::Features),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint: {0}")]
    Format(String),
    #[error("checkpoint digest mismatch")]
    Digest,
    #[error("checkpoint holds a `{found}` component, expected `{expected}`")]
    Component { expected: &'static str, found: &'static str },
    #[error("checkpoint does not fit the model: {0}")]
    Mismatch(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub component: Component,
    /// Resolved run configuration the component was built with.
    pub config: String,
    pub blobs: Vec<Blob>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| CheckpointError::Format("truncated".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn text(&mut self, n: usize) -> Result<String, CheckpointError> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Format("invalid UTF-8".into()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let tag = self.component.tag();
        out.push(tag.len() as u8);
        out.extend_from_slice(tag.as_bytes());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&(self.blobs.len() as u32).to_le_bytes());
        for b in &self.blobs {
            out.extend_from_slice(&(b.name.len() as u16).to_le_bytes());
            out.extend_from_slice(b.name.as_bytes());
            out.push(b.shape.len() as u8);
            for &d in &b.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &b.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() + 32 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::Format("not a GTKC checkpoint".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(CheckpointError::Digest);
        }
        let mut r = Reader { bytes: body, at: 4 };
        let version = r.u16()?;
        if version != VERSION {
            return Err(CheckpointError::Format(format!("unsupported version {version}")));
        }
        let n = r.u8()? as usize;
        let tag = r.text(n)?;
        let component = Component::from_tag(&tag).ok_or_else(|| CheckpointError::Format(format!("unknown component `{tag}`")))?;
        let n = r.u32()? as usize;
        let config = r.text(n)?;
        let count = r.u32()? as usize;
        let mut blobs = Vec::new();
        for _ in 0..count {
            let n = r.u16()? as usize;
            let name = r.text(n)?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|l| l.checked_mul(4))
                .ok_or_else(|| CheckpointError::Format(format!("blob `{name}` too large")))?;
            let data = r
                .take(len)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            blobs.push(Blob { name, shape, data });
        }
        if r.at != body.len() {
            return Err(CheckpointError::Format("trailing bytes".into()));
        }
        Ok(Self { component, config, blobs })
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    pub fn run_config(&self) -> Result<RunConfig, CheckpointError> {
        RunConfig::from_toml(&self.config).map_err(|e| CheckpointError::Format(format!("config echo: {e}")))
    }

    fn expect(&self, c: Component) -> Result<(), CheckpointError> {
        if self.component != c {
            return Err(CheckpointError::Component {
                expected: c.tag(),
                found: self.component.tag(),
            });
        }
        Ok(())
    }

    fn blob(&self, name: &str) -> Result<&Blob, CheckpointError> {
        self.blobs
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| CheckpointError::Mismatch(format!("missing blob `{name}`")))
    }

    fn values(&self, name: &str, len: usize) -> Result<&[f32], CheckpointError> {
        let b = self.blob(name)?;
        if b.data.len() != len {
            return Err(CheckpointError::Mismatch(format!("blob `{name}` has {} values, expected {len}", b.data.len())));
        }
        Ok(&b.data)
    }

    pub fn from_vae(vae: &RqVae, config: &RunConfig) -> Self {
        let cb = &vae.codebook;
        let mut blobs = param_blobs(&vae.params);
        blobs.push(vector("codebook.vectors", vec![cb.size(), cb.dim()], cb.vectors()[..cb.size() * cb.dim()].to_vec()));
        blobs.push(vector("codebook.counts", vec![cb.size()], cb.counts.clone()));
        blobs.push(vector("codebook.sums", vec![cb.size(), cb.dim()], cb.sums.clone()));
        blobs.push(vector("codebook.usage", vec![cb.size()], cb.usage.iter().map(|&u| u as f32).collect()));
        blobs.push(vector("stats.mean", vec![vae.stats.mean.len()], vae.stats.mean.clone()));
        blobs.push(vector("stats.var", vec![vae.stats.var.len()], vae.stats.var.clone()));
        Self {
            component: Component::Vae,
            config: config.to_toml(),
            blobs,
        }
    }

    pub fn to_vae(&self) -> Result<RqVae, CheckpointError> {
        self.expect(Component::Vae)?;
        let cfg = self.run_config()?;
        let dim = cfg.vae.autoencoder.input_dim;
        let stats = DatasetStats {
            mean: self.values("stats.mean", dim)?.to_vec(),
            var: self.values("stats.var", dim)?.to_vec(),
            floor: crate::motion::VARIANCE_FLOOR,
        };
        let mut vae = RqVae::new(cfg.vae.clone(), stats, 0).map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
        let reserved = 6;
        load_params(&mut vae.params, self, reserved)?;
        let (n, d) = (vae.codebook.size(), vae.codebook.dim());
        vae.codebook
            .set_vectors(self.values("codebook.vectors", n * d)?)
            .map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
        vae.codebook.counts = self.values("codebook.counts", n)?.to_vec();
        vae.codebook.sums = self.values("codebook.sums", n * d)?.to_vec();
        vae.codebook.usage = self.values("codebook.usage", n)?.iter().map(|&u| u as u32).collect();
        Ok(vae)
    }

    pub fn from_prior(prior: &Prior, config: &RunConfig) -> Self {
        let l = &prior.layout;
        let mut blobs = param_blobs(&prior.params);
        let layout = [l.positions, l.depth, l.codebook_size, l.vocab].map(|v| v as f32).to_vec();
        blobs.push(vector("layout", vec![4], layout));
        Self {
            component: Component::Prior,
            config: config.to_toml(),
            blobs,
        }
    }

    pub fn to_prior(&self) -> Result<Prior, CheckpointError> {
        self.expect(Component::Prior)?;
        let cfg = self.run_config()?;
        let l = self.values("layout", 4)?;
        let layout = TokenLayout {
            positions: l[0] as usize,
            depth: l[1] as usize,
            codebook_size: l[2] as usize,
            vocab: l[3] as usize,
        };
        let mut prior = Prior::new(cfg.prior.clone(), layout, 0).map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
        load_params(&mut prior.params, self, 1)?;
        Ok(prior)
    }

    pub fn from_features(fx: &FeatureExtractor, config: &RunConfig) -> Self {
        let mut blobs = param_blobs(&fx.params);
        blobs.push(vector("norm.mean", vec![fx.mean.len()], fx.mean.clone()));
        blobs.push(vector("norm.scale", vec![1], vec![fx.scale]));
        Self {
            component: Component::Features,
            config: config.to_toml(),
            blobs,
        }
    }

    pub fn to_features(&self) -> Result<FeatureExtractor, CheckpointError> {
        self.expect(Component::Features)?;
        let cfg = self.run_config()?;
        let mean = self.blob("norm.mean")?.data.clone();
        let scale = self.values("norm.scale", 1)?[0];
        let mut fx = FeatureExtractor::new(cfg.features.clone(), mean, scale, 0).map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
        load_params(&mut fx.params, self, 2)?;
        Ok(fx)
    }
}

fn vector(name: &str, shape: Vec<usize>, data: Vec<f32>) -> Blob {
    Blob {
        name: name.into(),
        shape,
        data,
    }
}

fn param_blobs(params: &ParamSet<f32>) -> Vec<Blob> {
    params
        .iter()
        .map(|(_, name, v)| vector(&format!("param.{name}"), v.shape().to_vec(), v.data().to_vec()))
        .collect()
}

/// Overwrites every parameter from its `param.` blob; `extra` is the number
/// of non-parameter blobs the component carries.
fn load_params(params: &mut ParamSet<f32>, ck: &Checkpoint, extra: usize) -> Result<(), CheckpointError> {
    let ids: Vec<_> = params.ids().collect();
    if ck.blobs.len() != ids.len() + extra {
        return Err(CheckpointError::Mismatch(format!(
            "{} blobs for a model with {} parameters",
            ck.blobs.len(),
            ids.len()
        )));
    }
    for id in ids {
        let name = format!("param.{}", params.name(id));
        let b = ck.blob(&name)?;
        let value = NdArray::new(&b.shape, b.data.clone()).map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
        params.set(id, value).map_err(|e| CheckpointError::Mismatch(format!("`{name}`: {e}")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::FeatureConfig;
    use crate::motion::POSE_DIM;
    use crate::rqvae::VaeConfig;

    fn small_vae() -> (RqVae, RunConfig) {
        let mut cfg = RunConfig::desk();
        cfg.vae = VaeConfig::desk();
        cfg.vae.quantizer.codebook_size = 16;
        let mut vae = RqVae::new(cfg.vae.clone(), DatasetStats::uniform(0.1), 3).unwrap();
        vae.codebook.usage[2] = 7;
        vae.codebook.counts[1] = 0.25;
        (vae, cfg)
    }

    #[test]
    fn vae_round_trip_is_bitwise() {
        let (vae, cfg) = small_vae();
        let ck = Checkpoint::from_vae(&vae, &cfg);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        let again = Checkpoint::from_vae(&back.to_vae().unwrap(), &back.run_config().unwrap());
        assert_eq!(again.to_bytes(), bytes);
        let loaded = back.to_vae().unwrap();
        assert_eq!(loaded.codebook, vae.codebook);
        assert_eq!(loaded.stats, vae.stats);
    }

    #[test]
    fn feature_round_trip() {
        let cfg = RunConfig::desk();
        let fx = FeatureExtractor::new(FeatureConfig::default(), vec![0.5; POSE_DIM], 0.3, 9).unwrap();
        let ck = Checkpoint::from_features(&fx, &cfg);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap().to_features().unwrap();
        assert_eq!(Checkpoint::from_features(&back, &cfg).to_bytes(), ck.to_bytes());
    }

    #[test]
    fn corruption_is_detected() {
        let (vae, cfg) = small_vae();
        let mut bytes = Checkpoint::from_vae(&vae, &cfg).to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::Digest)));
        assert!(Checkpoint::from_bytes(&bytes[..40]).is_err());
        assert!(Checkpoint::from_bytes(b"GTKMxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxx").is_err());
    }

    #[test]
    fn wrong_component_or_shape_rejected() {
        let (vae, cfg) = small_vae();
        let ck = Checkpoint::from_vae(&vae, &cfg);
        assert!(matches!(ck.to_prior(), Err(CheckpointError::Component { .. })));
        let mut other = cfg.clone();
        other.vae.quantizer.codebook_size = 32;
        let mut swapped = ck.clone();
        swapped.config = other.to_toml();
        assert!(matches!(swapped.to_vae(), Err(CheckpointError::Mismatch(_))));
    }
}
