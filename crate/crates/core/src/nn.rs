//! Layers assembled from the substrate ops. Each layer owns only
//! [`ParamId`]s; values live in a [`ParamSet`] and are bound per graph.

use rand_chacha::ChaCha8Rng;

use crate::tensor::{Graph, Init, NdArray, ParamId, ParamSet, Real, TensorError, Var};

type Res = Result<Var, TensorError>;

/// Creates parameters under a dotted name prefix.
pub struct Builder<'a, T: Real> {
    ps: &'a mut ParamSet<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Real> Builder<'a, T> {
    pub fn new(ps: &'a mut ParamSet<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            ps,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> Builder<'_, T> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Builder {
            ps: self.ps,
            rng: self.rng,
            prefix,
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        self.ps.init(&full, shape, init, self.rng)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamId,
    b: Option<ParamId>,
    out: usize,
}

impl Linear {
    pub fn new<T: Real>(b: &mut Builder<T>, inp: usize, out: usize, bias: bool) -> Self {
        let w = b.param("weight", &[inp, out], Init::Normal(0.02));
        let bias = bias.then(|| b.param("bias", &[out], Init::Zeros));
        Self { w, b: bias, out }
    }

    /// `x [.., in]` → `[.., out]`
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Res {
        let w = g.param(self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            None => Ok(y),
            Some(b) => {
                let rank = g.shape(y).len();
                let mut shape = vec![1; rank];
                shape[rank - 1] = self.out;
                let b = g.param(b);
                let b = g.reshape(b, &shape)?;
                g.add_bcast(y, b)
            }
        }
    }
}

fn channel_bias<T: Real>(g: &mut Graph<T>, x: Var, b: ParamId) -> Res {
    let c = g.shape(x)[1];
    let b = g.param(b);
    let b = g.reshape(b, &[1, c, 1])?;
    g.add_bcast(x, b)
}

#[derive(Clone, Debug)]
pub struct Conv1d {
    w: ParamId,
    b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl Conv1d {
    pub fn new<T: Real>(b: &mut Builder<T>, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self::dilated(b, cin, cout, k, stride, pad, 1)
    }

    pub fn dilated<T: Real>(
        b: &mut Builder<T>,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        dilation: usize,
    ) -> Self {
        let w = b.param("weight", &[cout, cin, k], Init::KaimingUniform { fan_in: cin * k });
        let bias = Some(b.param("bias", &[cout], Init::Zeros));
        Self {
            w,
            b: bias,
            stride,
            pad,
            dilation,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Res {
        let w = g.param(self.w);
        let y = g.conv1d(x, w, self.stride, self.pad, self.dilation)?;
        match self.b {
            Some(b) => channel_bias(g, y, b),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose1d {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl ConvTranspose1d {
    pub fn new<T: Real>(b: &mut Builder<T>, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        let w = b.param("weight", &[cin, cout, k], Init::KaimingUniform { fan_in: cout * k });
        let bias = b.param("bias", &[cout], Init::Zeros);
        Self { w, b: bias, stride, pad }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Res {
        let w = g.param(self.w);
        let y = g.conv_transpose1d(x, w, self.stride, self.pad)?;
        channel_bias(g, y, self.b)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    groups: usize,
    eps: f64,
    gamma: ParamId,
    beta: ParamId,
}

impl GroupNorm {
    pub fn new<T: Real>(b: &mut Builder<T>, groups: usize, channels: usize, eps: f64) -> Self {
        Self {
            groups,
            eps,
            gamma: b.param("weight", &[channels], Init::Ones),
            beta: b.param("bias", &[channels], Init::Zeros),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Res {
        let c = g.shape(x)[1];
        let y = g.group_norm(x, self.groups, self.eps)?;
        let gamma = g.param(self.gamma);
        let gamma = g.reshape(gamma, &[1, c, 1])?;
        let y = g.mul_bcast(y, gamma)?;
        channel_bias(g, y, self.beta)
    }
}

/// Per-channel normalization over batch and time with running statistics
/// for evaluation.
#[derive(Clone, Debug)]
pub struct BatchNorm1d {
    eps: f64,
    momentum: f64,
    gamma: ParamId,
    beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm1d {
    pub fn new<T: Real>(b: &mut Builder<T>, channels: usize, eps: f64, momentum: f64) -> Self {
        let running_mean = b.param("running_mean", &[channels], Init::Zeros);
        let running_var = b.param("running_var", &[channels], Init::Ones);
        b.ps.set_trainable(running_mean, false);
        b.ps.set_trainable(running_var, false);
        Self {
            eps,
            momentum,
            gamma: b.param("weight", &[channels], Init::Ones),
            beta: b.param("bias", &[channels], Init::Zeros),
            running_mean,
            running_var,
        }
    }

    /// `x [b, c, len]`. Training graphs normalize with batch statistics and
    /// queue the running-statistic update; evaluation graphs use the
    /// running statistics.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Res {
        let s = g.shape(x).to_vec();
        let (b, c, l) = (s[0], s[1], s[2]);
        let y = if g.is_train() {
            let (mean, var) = {
                let d = g.value(x).data();
                let n = (b * l) as f64;
                let mut mean = vec![0.0f64; c];
                let mut sq = vec![0.0f64; c];
                for bi in 0..b {
                    for ci in 0..c {
                        for v in &d[(bi * c + ci) * l..(bi * c + ci + 1) * l] {
                            mean[ci] += v.f64();
                        }
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n);
                for bi in 0..b {
                    for ci in 0..c {
                        for v in &d[(bi * c + ci) * l..(bi * c + ci + 1) * l] {
                            sq[ci] += (v.f64() - mean[ci]).powi(2);
                        }
                    }
                }
                let unbiased: Vec<f64> = sq.iter().map(|q| q / (n - 1.0).max(1.0)).collect();
                (mean, unbiased)
            };
            let rm = g.param(self.running_mean);
            let rv = g.param(self.running_var);
            let m = self.momentum;
            let new_mean = g.value(rm).data().iter().zip(&mean).map(|(&r, &v)| T::of((1.0 - m) * r.f64() + m * v)).collect();
            let new_var = g.value(rv).data().iter().zip(&var).map(|(&r, &v)| T::of((1.0 - m) * r.f64() + m * v)).collect();
            g.record_running(self.running_mean, new_mean);
            g.record_running(self.running_var, new_var);

            let t = g.permute(x, &[1, 0, 2])?;
            let t = g.reshape(t, &[1, c, b * l])?;
            let t = g.group_norm(t, c, self.eps)?;
            let t = g.reshape(t, &[c, b, l])?;
            g.permute(t, &[1, 0, 2])?
        } else {
            let rm = g.param(self.running_mean);
            let rv = g.param(self.running_var);
            let shift: Vec<f64> = g.value(rm).data().iter().map(|v| -v.f64()).collect();
            let scale: Vec<f64> = g.value(rv).data().iter().map(|v| 1.0 / (v.f64() + self.eps).sqrt()).collect();
            let shift = g.constant(NdArray::from_f64(&[1, c, 1], &shift)?);
            let scale = g.constant(NdArray::from_f64(&[1, c, 1], &scale)?);
            let y = g.add_bcast(x, shift)?;
            g.mul_bcast(y, scale)?
        };
        let gamma = g.param(self.gamma);
        let gamma = g.reshape(gamma, &[1, c, 1])?;
        let y = g.mul_bcast(y, gamma)?;
        channel_bias(g, y, self.beta)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    eps: f64,
    gamma: ParamId,
    beta: ParamId,
    width: usize,
}

impl LayerNorm {
    pub fn new<T: Real>(b: &mut Builder<T>, width: usize, eps: f64) -> Self {
        Self {
            eps,
            gamma: b.param("weight", &[width], Init::Ones),
            beta: b.param("bias", &[width], Init::Zeros),
            width,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Res {
        let rank = g.shape(x).len();
        let mut shape = vec![1; rank];
        shape[rank - 1] = self.width;
        let y = g.layer_norm(x, self.eps);
        let gamma = g.param(self.gamma);
        let gamma = g.reshape(gamma, &shape)?;
        let y = g.mul_bcast(y, gamma)?;
        let beta = g.param(self.beta);
        let beta = g.reshape(beta, &shape)?;
        g.add_bcast(y, beta)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub dim: usize,
}

impl Embedding {
    pub fn new<T: Real>(b: &mut Builder<T>, n: usize, dim: usize) -> Self {
        Self {
            table: b.param("weight", &[n, dim], Init::Normal(0.02)),
            dim,
        }
    }

    /// `ids` → `[ids.len(), dim]`
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ids: &[usize]) -> Res {
        let t = g.param(self.table);
        g.embedding(t, ids)
    }
}

/// Norm → ReLU → conv → norm → ReLU → dropout → conv, plus a shortcut
/// (1×1 conv when the width changes).
#[derive(Clone, Debug)]
pub struct ResnetBlock {
    norm1: GroupNorm,
    conv1: Conv1d,
    norm2: GroupNorm,
    conv2: Conv1d,
    shortcut: Option<Conv1d>,
    dropout: f64,
}

impl ResnetBlock {
    pub fn new<T: Real>(b: &mut Builder<T>, cin: usize, cout: usize, groups: usize, dropout: f64) -> Self {
        Self {
            norm1: GroupNorm::new(&mut b.sub("norm1"), groups.min(cin), cin, 1e-6),
            conv1: Conv1d::new(&mut b.sub("conv1"), cin, cout, 3, 1, 1),
            norm2: GroupNorm::new(&mut b.sub("norm2"), groups.min(cout), cout, 1e-6),
            conv2: Conv1d::new(&mut b.sub("conv2"), cout, cout, 3, 1, 1),
            shortcut: (cin != cout).then(|| Conv1d::new(&mut b.sub("nin_shortcut"), cin, cout, 1, 1, 0)),
            dropout,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Res {
        let h = self.norm1.forward(g, x)?;
        let h = g.relu(h);
        let h = self.conv1.forward(g, h)?;
        let h = self.norm2.forward(g, h)?;
        let h = g.relu(h);
        let h = g.dropout(h, self.dropout);
        let h = self.conv2.forward(g, h)?;
        let skip = match &self.shortcut {
            Some(c) => c.forward(g, x)?,
            None => x,
        };
        g.add(skip, h)
    }
}

/// Single-head self-attention across time for `[b, c, len]` feature maps.
#[derive(Clone, Debug)]
pub struct ConvAttnBlock {
    norm: GroupNorm,
    q: Conv1d,
    k: Conv1d,
    v: Conv1d,
    proj_out: Conv1d,
}

impl ConvAttnBlock {
    pub fn new<T: Real>(b: &mut Builder<T>, c: usize, groups: usize) -> Self {
        Self {
            norm: GroupNorm::new(&mut b.sub("norm"), groups.min(c), c, 1e-6),
            q: Conv1d::new(&mut b.sub("q"), c, c, 1, 1, 0),
            k: Conv1d::new(&mut b.sub("k"), c, c, 1, 1, 0),
            v: Conv1d::new(&mut b.sub("v"), c, c, 1, 1, 0),
            proj_out: Conv1d::new(&mut b.sub("proj_out"), c, c, 1, 1, 0),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Res {
        let h = self.norm.forward(g, x)?;
        let q = self.q.forward(g, h)?;
        let k = self.k.forward(g, h)?;
        let v = self.v.forward(g, h)?;
        let q = g.transpose(q, 1, 2)?;
        let k = g.transpose(k, 1, 2)?;
        let v = g.transpose(v, 1, 2)?;
        let a = g.attention(q, k, v, false)?;
        let a = g.transpose(a, 1, 2)?;
        let a = self.proj_out.forward(g, a)?;
        g.add(x, a)
    }
}

/// Pre-norm transformer block: causal multi-head self-attention and a
/// ReLU MLP, each with a residual connection.
#[derive(Clone, Debug)]
pub struct SelfAttnBlock {
    ln1: LayerNorm,
    ln2: LayerNorm,
    key: Linear,
    query: Linear,
    value: Linear,
    proj: Linear,
    fc: Linear,
    fc_out: Linear,
    heads: usize,
    width: usize,
    dropout: f64,
}

impl SelfAttnBlock {
    pub fn new<T: Real>(b: &mut Builder<T>, width: usize, heads: usize, dropout: f64) -> Self {
        assert!(heads > 0 && width % heads == 0, "width {width} not divisible by {heads} heads");
        let mut attn = b.sub("attn");
        let key = Linear::new(&mut attn.sub("key"), width, width, true);
        let query = Linear::new(&mut attn.sub("query"), width, width, true);
        let value = Linear::new(&mut attn.sub("value"), width, width, true);
        let proj = Linear::new(&mut attn.sub("proj"), width, width, true);
        Self {
            ln1: LayerNorm::new(&mut b.sub("ln1"), width, 1e-5),
            ln2: LayerNorm::new(&mut b.sub("ln2"), width, 1e-5),
            key,
            query,
            value,
            proj,
            fc: Linear::new(&mut b.sub("mlp.fc"), width, 4 * width, true),
            fc_out: Linear::new(&mut b.sub("mlp.proj"), 4 * width, width, true),
            heads,
            width,
            dropout,
        }
    }

    fn split_heads<T: Real>(&self, g: &mut Graph<T>, x: Var, b: usize, t: usize) -> Res {
        let dh = self.width / self.heads;
        let x = g.reshape(x, &[b, t, self.heads, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[b * self.heads, t, dh])
    }

    /// `x [b, t, width]`, causal over `t`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Res {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.width {
            return Err(TensorError::Shape {
                op: "SelfAttnBlock",
                detail: format!("expected [b, t, {}], got {s:?}", self.width),
            });
        }
        let (b, t) = (s[0], s[1]);
        let h = self.ln1.forward(g, x)?;
        let q = self.query.forward(g, h)?;
        let k = self.key.forward(g, h)?;
        let v = self.value.forward(g, h)?;
        let q = self.split_heads(g, q, b, t)?;
        let k = self.split_heads(g, k, b, t)?;
        let v = self.split_heads(g, v, b, t)?;
        let a = g.attention(q, k, v, true)?;
        let a = g.reshape(a, &[b, self.heads, t, self.width / self.heads])?;
        let a = g.permute(a, &[0, 2, 1, 3])?;
        let a = g.reshape(a, &[b, t, self.width])?;
        let a = self.proj.forward(g, a)?;
        let a = g.dropout(a, self.dropout);
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, x)?;
        let h = self.fc.forward(g, h)?;
        let h = g.relu(h);
        let h = self.fc_out.forward(g, h)?;
        let h = g.dropout(h, self.dropout);
        g.add(x, h)
    }
}

/// Causal dilated residual block of a temporal convolutional network.
#[derive(Clone, Debug)]
pub struct TemporalBlock {
    conv1: Conv1d,
    conv2: Conv1d,
    downsample: Option<Conv1d>,
    chomp: usize,
    dropout: f64,
}

impl TemporalBlock {
    pub fn new<T: Real>(b: &mut Builder<T>, cin: usize, cout: usize, kernel: usize, dilation: usize, dropout: f64) -> Self {
        let pad = (kernel - 1) * dilation;
        Self {
            conv1: Conv1d::dilated(&mut b.sub("conv1"), cin, cout, kernel, 1, pad, dilation),
            conv2: Conv1d::dilated(&mut b.sub("conv2"), cout, cout, kernel, 1, pad, dilation),
            downsample: (cin != cout).then(|| Conv1d::new(&mut b.sub("downsample"), cin, cout, 1, 1, 0)),
            chomp: pad,
            dropout,
        }
    }

    fn chomped<T: Real>(&self, g: &mut Graph<T>, x: Var, len: usize) -> Res {
        if self.chomp == 0 {
            return Ok(x);
        }
        g.slice(x, 2, 0, len)
    }

    /// `x [b, c, len]` → `[b, c_out, len]`; output at `t` sees inputs `≤ t`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Res {
        let len = g.shape(x)[2];
        let h = self.conv1.forward(g, x)?;
        let h = self.chomped(g, h, len)?;
        let h = g.relu(h);
        let h = g.dropout(h, self.dropout);
        let h = self.conv2.forward(g, h)?;
        let h = self.chomped(g, h, len)?;
        let h = g.relu(h);
        let h = g.dropout(h, self.dropout);
        let res = match &self.downsample {
            Some(d) => d.forward(g, x)?,
            None => x,
        };
        let y = g.add(h, res)?;
        Ok(g.relu(y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck;
    use rand::{Rng, SeedableRng};

    fn rand_arr(rng: &mut ChaCha8Rng, shape: &[usize]) -> NdArray<f64> {
        let n = shape.iter().product();
        NdArray::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn attention_block_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut ps = ParamSet::<f64>::new();
        let block = {
            let mut b = Builder::new(&mut ps, &mut rng);
            SelfAttnBlock::new(&mut b.sub("blk"), 8, 2, 0.0)
        };
        // larger weights than the 0.02 init so the check exercises curvature
        for id in ps.ids().collect::<Vec<_>>() {
            for v in ps.get_mut(id) {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        let x = rand_arr(&mut rng, &[2, 3, 8]);
        let (err, n) = gradcheck::check(&ps, &[x], None, &|g, v| block.forward(g, v[0])).unwrap();
        assert!(n > 500);
        assert!(err <= 1e-4, "max relative error {err}");
    }

    #[test]
    fn resnet_and_conv_attention_blocks_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut ps = ParamSet::<f64>::new();
        let (res, att) = {
            let mut b = Builder::new(&mut ps, &mut rng);
            (ResnetBlock::new(&mut b.sub("res"), 2, 4, 2, 0.0), ConvAttnBlock::new(&mut b.sub("att"), 4, 2))
        };
        let x = rand_arr(&mut rng, &[1, 2, 5]);
        let (err, _) = gradcheck::check(&ps, &[x], None, &|g, v| {
            let h = res.forward(g, v[0])?;
            att.forward(g, h)
        })
        .unwrap();
        assert!(err <= 1e-4, "max relative error {err}");
    }

    #[test]
    fn batch_norm_uses_batch_statistics_in_training() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut ps = ParamSet::<f64>::new();
        let bn = BatchNorm1d::new(&mut Builder::new(&mut ps, &mut rng), 3, 1e-5, 0.1);
        let x = rand_arr(&mut rng, &[2, 3, 6]);
        let (err, _) = gradcheck::check(&ps, std::slice::from_ref(&x), Some(1), &|g, v| bn.forward(g, v[0])).unwrap();
        assert!(err <= 1e-4, "max relative error {err}");

        let mut g = Graph::with_params(&ps).train_mode(1);
        let xv = g.constant(x.clone());
        let y = bn.forward(&mut g, xv).unwrap();
        let y = g.value(y).clone();
        for c in 0..3 {
            let vals: Vec<f64> = (0..2).flat_map(|b| y.data()[(b * 3 + c) * 6..(b * 3 + c + 1) * 6].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / 12.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 12.0;
            assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-3);
        }
        let updates = g.running_updates().to_vec();
        drop(g);
        assert_eq!(updates.len(), 2);
        ps.apply_running(&updates);
        let channel0: Vec<f64> = (0..2).flat_map(|b| x.data()[b * 18..b * 18 + 6].to_vec()).collect();
        let want = 0.1 * channel0.iter().sum::<f64>() / 12.0;
        assert!((ps.get(bn.running_mean).data()[0] - want).abs() < 1e-12);

        // evaluation applies the stored statistics
        let mut g = Graph::with_params(&ps);
        let xv = g.constant(x.clone());
        let y = bn.forward(&mut g, xv).unwrap();
        let rm = ps.get(bn.running_mean).data()[1];
        let rv = ps.get(bn.running_var).data()[1];
        let expect = (x.data()[6] - rm) / (rv + 1e-5).sqrt();
        assert!((g.value(y).data()[6] - expect).abs() < 1e-12);
        assert!(g.running_updates().is_empty());
    }

    #[test]
    fn temporal_block_is_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParamSet::<f64>::new();
        let blk = {
            let mut b = Builder::new(&mut ps, &mut rng);
            TemporalBlock::new(&mut b, 3, 4, 2, 4, 0.0)
        };
        let x1 = rand_arr(&mut rng, &[1, 3, 12]);
        let mut x2 = x1.clone();
        for c in 0..3 {
            x2.data_mut()[c * 12 + 9] += 1.0;
        }
        let mut g = Graph::with_params(&ps);
        let a = g.constant(x1);
        let b = g.constant(x2);
        let ya = blk.forward(&mut g, a).unwrap();
        let yb = blk.forward(&mut g, b).unwrap();
        assert_eq!(g.shape(ya), &[1, 4, 12]);
        for c in 0..4 {
            let ra = &g.value(ya).data()[c * 12..c * 12 + 9];
            let rb = &g.value(yb).data()[c * 12..c * 12 + 9];
            assert_eq!(ra, rb);
        }
    }
}
