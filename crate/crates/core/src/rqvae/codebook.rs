use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::RqVaeError;

/// Shared residual codebook: `size` selectable codes plus one frozen
/// all-zero padding row stored at index `size`.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    size: usize,
    dim: usize,
    /// `(size + 1) × dim`, padding row last.
    vectors: Vec<f32>,
    /// EMA running assignment count per code.
    pub counts: Vec<f32>,
    /// EMA running vector sum per code, `size × dim`.
    pub sums: Vec<f32>,
    /// Assignments since the last dead-code sweep.
    pub usage: Vec<u32>,
    pub eps: f32,
}

impl Codebook {
    pub fn from_vectors(size: usize, dim: usize, codes: &[f32]) -> Result<Self, RqVaeError> {
        if size < 2 || dim == 0 {
            return Err(RqVaeError::Config(format!("codebook needs at least 2 codes of width ≥ 1, got {size}×{dim}")));
        }
        if codes.len() != size * dim {
            return Err(RqVaeError::Shape(format!("{} values for a {size}×{dim} codebook", codes.len())));
        }
        let mut vectors = codes.to_vec();
        vectors.extend(std::iter::repeat_n(0.0, dim));
        Ok(Self {
            size,
            dim,
            vectors,
            counts: vec![1.0; size],
            sums: codes.to_vec(),
            usage: vec![0; size],
            eps: 1e-5,
        })
    }

    /// Codes drawn uniformly from `[-scale, scale]`.
    pub fn random(size: usize, dim: usize, scale: f32, rng: &mut ChaCha8Rng) -> Result<Self, RqVaeError> {
        let codes: Vec<f32> = (0..size * dim).map(|_| rng.random_range(-scale..=scale)).collect();
        Self::from_vectors(size, dim, &codes)
    }

    /// Number of selectable codes.
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn padding_index(&self) -> usize {
        self.size
    }

    pub fn code(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    /// All rows including padding.
    pub fn vectors(&self) -> &[f32] {
        &self.vectors
    }

    /// Replaces all selectable codes; the padding row stays zero.
    pub fn set_vectors(&mut self, codes: &[f32]) -> Result<(), RqVaeError> {
        if codes.len() != self.size * self.dim {
            return Err(RqVaeError::Shape(format!("{} values for a {}×{} codebook", codes.len(), self.size, self.dim)));
        }
        self.vectors[..codes.len()].copy_from_slice(codes);
        Ok(())
    }

    /// Index of the closest non-padding code; ties go to the lowest index.
    pub fn nearest(&self, v: &[f32]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for i in 0..self.size {
            let d: f64 = self.code(i).iter().zip(v).map(|(&e, &x)| (x as f64 - e as f64).powi(2)).sum();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    /// `counts ← γ·counts + (1−γ)·n`, `sums ← γ·sums + (1−γ)·Σv`,
    /// `code ← sums / (counts + eps)` for every code.
    pub fn ema_update<'a>(&mut self, assignments: impl IntoIterator<Item = (usize, &'a [f32])>, gamma: f32) {
        let d = self.dim;
        let mut n = vec![0.0f32; self.size];
        let mut s = vec![0.0f32; self.size * d];
        for (i, v) in assignments {
            n[i] += 1.0;
            for (a, &x) in s[i * d..(i + 1) * d].iter_mut().zip(v) {
                *a += x;
            }
        }
        for i in 0..self.size {
            self.counts[i] = gamma * self.counts[i] + (1.0 - gamma) * n[i];
            let denom = self.counts[i] + self.eps;
            for k in 0..d {
                let j = i * d + k;
                self.sums[j] = gamma * self.sums[j] + (1.0 - gamma) * s[j];
                self.vectors[j] = self.sums[j] / denom;
            }
        }
    }

    pub fn record_usage(&mut self, codes: &[usize]) {
        for &c in codes {
            if c < self.size {
                self.usage[c] += 1;
            }
        }
    }

    /// Overwrites codes used fewer than `threshold` times since the last
    /// sweep with random rows of `latents` and clears the counters.
    /// Returns how many codes were reset.
    pub fn reset_dead_codes(&mut self, latents: &[f32], threshold: u32, rng: &mut ChaCha8Rng) -> usize {
        let d = self.dim;
        let rows = latents.len() / d;
        if rows == 0 {
            return 0;
        }
        let mut reset = 0;
        for i in 0..self.size {
            if self.usage[i] < threshold {
                let r = rng.random_range(0..rows);
                let v = &latents[r * d..(r + 1) * d];
                self.vectors[i * d..(i + 1) * d].copy_from_slice(v);
                self.sums[i * d..(i + 1) * d].copy_from_slice(v);
                self.counts[i] = 1.0;
                reset += 1;
            }
        }
        self.usage.iter_mut().for_each(|u| *u = 0);
        reset
    }
}

/// Residual codes for `t` positions at `depth` levels.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeStack {
    pub positions: usize,
    pub depth: usize,
    /// Position-major `positions × depth`.
    pub codes: Vec<usize>,
    /// Residual after each level, `positions × depth × dim`.
    pub residuals: Vec<f32>,
}

impl CodeStack {
    pub fn at(&self, t: usize, d: usize) -> usize {
        self.codes[t * self.depth + d]
    }

    pub fn residual(&self, t: usize, d: usize, dim: usize) -> &[f32] {
        let o = (t * self.depth + d) * dim;
        &self.residuals[o..o + dim]
    }
}

/// Quantizes each row of `z` (`positions × dim`) with the shared codebook,
/// `depth` times on successive residuals.
pub fn rq_quantize(z: &[f32], cb: &Codebook, depth: usize) -> Result<CodeStack, RqVaeError> {
    let dim = cb.dim();
    if depth == 0 {
        return Err(RqVaeError::Config("quantization depth must be at least 1".into()));
    }
    if z.len() % dim != 0 {
        return Err(RqVaeError::Shape(format!("{} latent values are not rows of width {dim}", z.len())));
    }
    let positions = z.len() / dim;
    let mut codes = Vec::with_capacity(positions * depth);
    let mut residuals = Vec::with_capacity(positions * depth * dim);
    for row in z.chunks(dim) {
        let mut r = row.to_vec();
        for _ in 0..depth {
            let k = cb.nearest(&r);
            for (x, &e) in r.iter_mut().zip(cb.code(k)) {
                *x -= e;
            }
            codes.push(k);
            residuals.extend_from_slice(&r);
        }
    }
    Ok(CodeStack {
        positions,
        depth,
        codes,
        residuals,
    })
}

/// Sum of the first `levels` code vectors at every position; the padding
/// index contributes zero.
pub fn rq_dequantize_prefix(codes: &[usize], depth: usize, levels: usize, cb: &Codebook) -> Result<Vec<f32>, RqVaeError> {
    let dim = cb.dim();
    if depth == 0 || codes.len() % depth != 0 || levels > depth {
        return Err(RqVaeError::Shape(format!("{} codes at depth {depth}, {levels} levels", codes.len())));
    }
    let mut out = vec![0.0f32; codes.len() / depth * dim];
    for (t, stack) in codes.chunks(depth).enumerate() {
        for &k in &stack[..levels] {
            if k > cb.padding_index() {
                return Err(RqVaeError::CodeOutOfRange { index: k, size: cb.size() });
            }
            for (o, &e) in out[t * dim..(t + 1) * dim].iter_mut().zip(cb.code(k)) {
                *o += e;
            }
        }
    }
    Ok(out)
}

pub fn rq_dequantize(codes: &[usize], depth: usize, cb: &Codebook) -> Result<Vec<f32>, RqVaeError> {
    rq_dequantize_prefix(codes, depth, depth, cb)
}
