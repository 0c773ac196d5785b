use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::array::strides;
use super::kernels::{self, col2im, conv_out_len, gemm_nn, gemm_nt, gemm_tn, im2col};
use super::{NdArray, ParamId, ParamSet, Real, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBcast(Var, Var),
    MulBcast(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Conv1d { x: Var, w: Var, stride: usize, pad: usize, dilation: usize },
    ConvT1d { x: Var, w: Var, stride: usize, pad: usize },
    Normalize { x: Var, chunk: usize, rstd: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    Softmax(Var),
    LogSoftmax(Var),
    Nll { logp: Var, targets: Vec<usize> },
    Relu(Var),
    LeakyRelu(Var, T),
    Dropout(Var, Vec<T>),
    Sum(Var),
    Mean(Var),
    MeanAxis { x: Var, axis: usize },
    Attention { q: Var, k: Var, v: Var, probs: Vec<T> },
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    MaskLast { x: Var, cols: Vec<usize> },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: NdArray<T>,
    op: Op<T>,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Define-by-run tape. Every op evaluates eagerly and records what the
/// reverse pass needs; [`Graph::backward`] replays the tape in reverse.
pub struct Graph<'p, T: Real> {
    nodes: Vec<Node<T>>,
    params: Option<&'p ParamSet<T>>,
    param_vars: HashMap<ParamId, Var>,
    train: bool,
    rng: ChaCha8Rng,
    running: Vec<(ParamId, Vec<T>)>,
}

/// Result of a reverse pass.
pub struct Gradients<T> {
    nodes: Vec<Option<NdArray<T>>>,
    params: BTreeMap<ParamId, NdArray<T>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for a node; `None` when the loss does not depend on it.
    pub fn of(&self, v: Var) -> Option<&NdArray<T>> {
        self.nodes[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&NdArray<T>> {
        self.params.get(&id)
    }

    pub fn params(&self) -> &BTreeMap<ParamId, NdArray<T>> {
        &self.params
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|g| g.is_finite())
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<(), TensorError> {
    if a != b {
        return Err(TensorError::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

/// Calls `f(x_index, y_index)` for every element of `x` where `y` is broadcast
/// to `xshape` (same rank, every `y` extent 1 or equal).
fn for_each_bcast(xshape: &[usize], yshape: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = xshape.len();
    let ys = strides(yshape);
    let ystr: Vec<usize> = (0..rank).map(|i| if yshape[i] == 1 { 0 } else { ys[i] }).collect();
    let inner = xshape[rank - 1];
    let inner_step = ystr[rank - 1];
    let outer: usize = xshape[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank];
    let mut xi = 0;
    for _ in 0..outer {
        let base: usize = (0..rank - 1).map(|a| idx[a] * ystr[a]).sum();
        for j in 0..inner {
            f(xi, base + j * inner_step);
            xi += 1;
        }
        for a in (0..rank - 1).rev() {
            idx[a] += 1;
            if idx[a] < xshape[a] {
                break;
            }
            idx[a] = 0;
        }
    }
}

fn softmax_rows<T: Real>(x: &[T], w: usize, out: &mut [T]) {
    for (xr, yr) in x.chunks(w).zip(out.chunks_mut(w)) {
        let m = xr.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut s = T::zero();
        for (y, &v) in yr.iter_mut().zip(xr) {
            *y = (v - m).exp();
            s += *y;
        }
        for y in yr.iter_mut() {
            *y /= s;
        }
    }
}

impl<'p, T: Real> Graph<'p, T> {
    /// A graph without parameters, in evaluation mode.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: None,
            param_vars: HashMap::new(),
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
            running: Vec::new(),
        }
    }

    pub fn with_params(params: &'p ParamSet<T>) -> Self {
        Self {
            params: Some(params),
            ..Self::new()
        }
    }

    /// Enables training mode (dropout active) with a seeded dropout stream.
    pub fn train_mode(mut self, seed: u64) -> Self {
        self.train = true;
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    /// Queues a new value for a non-trainable running statistic; apply
    /// with [`ParamSet::apply_running`] after the step.
    pub fn record_running(&mut self, id: ParamId, value: Vec<T>) {
        self.running.push((id, value));
    }

    pub fn running_updates(&self) -> &[(ParamId, Vec<T>)] {
        &self.running
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &NdArray<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: NdArray<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf; `requires_grad` leaves receive gradients in [`Gradients::of`].
    pub fn leaf(&mut self, value: NdArray<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: NdArray<T>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf bound to a stored parameter; created once per graph.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let ps = self.params.expect("graph has no parameter set");
        let v = self.leaf(ps.get(id).clone(), ps.trainable(id));
        self.nodes[v.0].param = Some(id);
        self.param_vars.insert(id, v);
        v
    }

    /// Stop-gradient: same value, no gradient flows back through the result.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        same_shape("sub", self.shape(a), self.shape(b))?;
        let mut out = self.value(a).clone();
        for (o, &y) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o -= y;
        }
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        same_shape("mul", self.shape(a), self.shape(b))?;
        let mut out = self.value(a).clone();
        for (o, &y) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= y;
        }
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    fn check_bcast(&self, op: &'static str, x: Var, y: Var) -> Result<(), TensorError> {
        let (xs, ys) = (self.shape(x), self.shape(y));
        if xs.len() != ys.len() || xs.iter().zip(ys).any(|(&a, &b)| b != 1 && b != a) {
            return Err(TensorError::shape(op, format!("cannot broadcast {ys:?} to {xs:?}")));
        }
        Ok(())
    }

    /// `x + y` with `y` broadcast along its unit extents.
    pub fn add_bcast(&mut self, x: Var, y: Var) -> Result<Var, TensorError> {
        self.check_bcast("add_bcast", x, y)?;
        let mut out = self.value(x).clone();
        let yv = self.value(y).data();
        {
            let od = out.data_mut();
            for_each_bcast(self.shape(x), self.shape(y), |i, j| od[i] += yv[j]);
        }
        Ok(self.push(out, Op::AddBcast(x, y), &[x, y]))
    }

    /// `x ⊙ y` with `y` broadcast along its unit extents.
    pub fn mul_bcast(&mut self, x: Var, y: Var) -> Result<Var, TensorError> {
        self.check_bcast("mul_bcast", x, y)?;
        let mut out = self.value(x).clone();
        let yv = self.value(y).data();
        {
            let od = out.data_mut();
            for_each_bcast(self.shape(x), self.shape(y), |i, j| od[i] *= yv[j]);
        }
        Ok(self.push(out, Op::MulBcast(x, y), &[x, y]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c), &[x])
    }

    /// `[.., m, k] · [k, n]` (shared right operand) or `[b, m, k] · [b, k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || TensorError::shape("matmul", format!("{ash:?} x {bsh:?}"));
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(err());
        }
        let k = ash[ash.len() - 1];
        let m = ash[ash.len() - 2];
        if bsh.len() == 2 {
            if bsh[0] != k {
                return Err(err());
            }
            let n = bsh[1];
            let rows = self.value(a).len() / k;
            let mut out = vec![T::zero(); rows * n];
            gemm_nn(rows, k, n, self.value(a).data(), self.value(b).data(), &mut out);
            let mut shape = ash.clone();
            *shape.last_mut().unwrap() = n;
            let out = NdArray::new(&shape, out)?;
            return Ok(self.push(out, Op::MatMul(a, b), &[a, b]));
        }
        if bsh.len() != 3 || ash.len() != 3 || ash[0] != bsh[0] || bsh[1] != k {
            return Err(err());
        }
        let (batch, n) = (ash[0], bsh[2]);
        let mut out = vec![T::zero(); batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for bi in 0..batch {
            gemm_nn(
                m,
                k,
                n,
                &ad[bi * m * k..(bi + 1) * m * k],
                &bd[bi * k * n..(bi + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        let out = NdArray::new(&[batch, m, n], out)?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::shape("permute", format!("{shape:?} by {perm:?}")));
        }
        let (s, d) = kernels::permute(self.value(x).data(), &shape, perm);
        let out = NdArray::new(&s, d)?;
        Ok(self.push(out, Op::Permute(x, perm.to_vec()), &[x]))
    }

    pub fn transpose(&mut self, x: Var, a: usize, b: usize) -> Result<Var, TensorError> {
        let mut perm: Vec<usize> = (0..self.shape(x).len()).collect();
        if a >= perm.len() || b >= perm.len() {
            return Err(TensorError::shape("transpose", format!("axes {a},{b} of {:?}", self.shape(x))));
        }
        perm.swap(a, b);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let out = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// 1-D convolution: `x [b, c_in, len]`, `w [c_out, c_in, k]`.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, pad: usize, dilation: usize) -> Result<Var, TensorError> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let err = || TensorError::shape("conv1d", format!("input {xs:?}, kernel {ws:?}, stride {stride}, pad {pad}"));
        if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[1] || stride == 0 || dilation == 0 {
            return Err(err());
        }
        let (b, cin, len) = (xs[0], xs[1], xs[2]);
        let (cout, k) = (ws[0], ws[2]);
        let lout = conv_out_len(len, k, stride, pad, dilation).ok_or_else(err)?;
        let mut cols = vec![T::zero(); cin * k * lout];
        let mut out = vec![T::zero(); b * cout * lout];
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        for bi in 0..b {
            im2col(&xd[bi * cin * len..(bi + 1) * cin * len], cin, len, k, stride, pad, dilation, lout, &mut cols);
            gemm_nn(cout, cin * k, lout, wd, &cols, &mut out[bi * cout * lout..(bi + 1) * cout * lout]);
        }
        let out = NdArray::new(&[b, cout, lout], out)?;
        Ok(self.push(out, Op::Conv1d { x, w, stride, pad, dilation }, &[x, w]))
    }

    /// Transposed 1-D convolution: `x [b, c_in, len]`, `w [c_in, c_out, k]`;
    /// output length `(len − 1)·stride − 2·pad + k`.
    pub fn conv_transpose1d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var, TensorError> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let err = || TensorError::shape("conv_transpose1d", format!("input {xs:?}, kernel {ws:?}, stride {stride}, pad {pad}"));
        if xs.len() != 3 || ws.len() != 3 || xs[0] == 0 || xs[1] != ws[0] || stride == 0 {
            return Err(err());
        }
        let (b, cin, len) = (xs[0], xs[1], xs[2]);
        let (cout, k) = (ws[1], ws[2]);
        let full = (len - 1) * stride + k;
        if full <= 2 * pad {
            return Err(err());
        }
        let lout = full - 2 * pad;
        let mut cols = vec![T::zero(); cout * k * len];
        let mut out = vec![T::zero(); b * cout * lout];
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        for bi in 0..b {
            cols.iter_mut().for_each(|c| *c = T::zero());
            gemm_tn(cout * k, cin, len, wd, &xd[bi * cin * len..(bi + 1) * cin * len], &mut cols);
            col2im(&cols, cout, lout, k, stride, pad, 1, len, &mut out[bi * cout * lout..(bi + 1) * cout * lout]);
        }
        let out = NdArray::new(&[b, cout, lout], out)?;
        Ok(self.push(out, Op::ConvT1d { x, w, stride, pad }, &[x, w]))
    }

    fn normalize(&mut self, x: Var, chunk: usize, eps: f64) -> Var {
        let eps = T::of(eps);
        let xv = self.value(x);
        let n = T::of(chunk as f64);
        let mut out = xv.clone();
        let mut rstd = Vec::with_capacity(xv.len() / chunk);
        for c in out.data_mut().chunks_mut(chunk) {
            let mean = c.iter().copied().sum::<T>() / n;
            let var = c.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let r = T::one() / (var + eps).sqrt();
            for v in c.iter_mut() {
                *v = (*v - mean) * r;
            }
            rstd.push(r);
        }
        self.push(out, Op::Normalize { x, chunk, rstd }, &[x])
    }

    /// Group normalization of `x [b, c, len]` without the affine stage.
    pub fn group_norm(&mut self, x: Var, groups: usize, eps: f64) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || groups == 0 || s[1] % groups != 0 {
            return Err(TensorError::shape("group_norm", format!("{s:?} into {groups} groups")));
        }
        Ok(self.normalize(x, s[1] / groups * s[2], eps))
    }

    /// Layer normalization over the last axis without the affine stage.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let w = *self.shape(x).last().unwrap();
        self.normalize(x, w, eps)
    }

    /// Row lookup: `table [n, d]` → `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || ids.is_empty() {
            return Err(TensorError::shape("embedding", format!("table {ts:?}, {} ids", ids.len())));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= ts[0]) {
            return Err(TensorError::shape("embedding", format!("id {bad} out of range for table {ts:?}")));
        }
        let tv = self.value(table);
        let d = ts[1];
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(tv.row(i));
        }
        let out = NdArray::new(&[ids.len(), d], out)?;
        Ok(self.push(out, Op::Embedding { table, ids: ids.to_vec() }, &[table]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let w = *xv.shape().last().unwrap();
        let mut out = xv.clone();
        softmax_rows(xv.data(), w, out.data_mut());
        self.push(out, Op::Softmax(x), &[x])
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let w = *xv.shape().last().unwrap();
        let mut out = xv.clone();
        for r in out.data_mut().chunks_mut(w) {
            let m = r.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let lse = m + r.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            for v in r.iter_mut() {
                *v -= lse;
            }
        }
        self.push(out, Op::LogSoftmax(x), &[x])
    }

    /// Mean negative log-likelihood of `targets` under row-wise log-probs `[m, n]`.
    pub fn nll(&mut self, logp: Var, targets: &[usize]) -> Result<Var, TensorError> {
        let s = self.shape(logp).to_vec();
        if s.len() != 2 || s[0] != targets.len() || targets.iter().any(|&t| t >= s[1]) {
            return Err(TensorError::shape("nll", format!("log-probs {s:?}, {} targets", targets.len())));
        }
        let lv = self.value(logp);
        let total: T = targets.iter().enumerate().map(|(i, &t)| -lv.data()[i * s[1] + t]).sum();
        let out = NdArray::scalar(total / T::of(targets.len() as f64));
        Ok(self.push(out, Op::Nll { logp, targets: targets.to_vec() }, &[logp]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::of(slope);
        let out = self.value(x).map(|v| if v > T::zero() { v } else { v * s });
        self.push(out, Op::LeakyRelu(x, s), &[x])
    }

    /// Inverted dropout; identity outside training mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if !self.train || p <= 0.0 {
            return x;
        }
        let keep = T::of(1.0 / (1.0 - p));
        let n = self.value(x).len();
        let mask: Vec<T> = (0..n)
            .map(|_| if self.rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let mut out = self.value(x).clone();
        for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        self.push(out, Op::Dropout(x, mask), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = NdArray::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = NdArray::scalar(v.sum() / T::of(v.len() as f64));
        self.push(out, Op::Mean(x), &[x])
    }

    /// Mean over one axis; the axis is removed (rank-1 inputs keep shape `[1]`).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(TensorError::shape("mean_axis", format!("axis {axis} of {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let n = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let xd = self.value(x).data();
        let inv = T::of(1.0 / n as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..n {
                let src = &xd[(o * n + a) * inner..(o * n + a + 1) * inner];
                for (d, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let mut shape: Vec<usize> = s.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &d)| d).collect();
        if shape.is_empty() {
            shape.push(1);
        }
        let out = NdArray::new(&shape, out)?;
        Ok(self.push(out, Op::MeanAxis { x, axis }, &[x]))
    }

    /// Scaled dot-product attention over `[b, t, d]` queries and `[b, s, d]`
    /// keys/values; `causal` masks keys after each query position.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, causal: bool) -> Result<Var, TensorError> {
        let (qs, ks, vs) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        if qs.len() != 3 || ks != vs || ks.len() != 3 || qs[0] != ks[0] || qs[2] != ks[2] || (causal && qs[1] != ks[1]) {
            return Err(TensorError::shape("attention", format!("q {qs:?}, k {ks:?}, v {vs:?}")));
        }
        let (b, t, d) = (qs[0], qs[1], qs[2]);
        let s = ks[1];
        let scale = T::of(1.0 / (d as f64).sqrt());
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); b * t * s];
        let mut out = vec![T::zero(); b * t * d];
        for bi in 0..b {
            let p = &mut probs[bi * t * s..(bi + 1) * t * s];
            gemm_nt(t, d, s, &qd[bi * t * d..(bi + 1) * t * d], &kd[bi * s * d..(bi + 1) * s * d], p);
            for i in 0..t {
                let row = &mut p[i * s..(i + 1) * s];
                for (j, r) in row.iter_mut().enumerate() {
                    *r = if causal && j > i { T::neg_infinity() } else { *r * scale };
                }
            }
            let raw = p.to_vec();
            softmax_rows(&raw, s, p);
            gemm_nn(t, s, d, p, &vd[bi * s * d..(bi + 1) * s * d], &mut out[bi * t * d..(bi + 1) * t * d]);
        }
        let out = NdArray::new(&[b, t, d], out)?;
        Ok(self.push(out, Op::Attention { q, k, v, probs }, &[q, k, v]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = self.shape(xs[0]).to_vec();
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len() || axis >= s.len() || (0..s.len()).any(|i| i != axis && s[i] != first[i]) {
                return Err(TensorError::shape("concat", format!("{first:?} with {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let w = self.shape(x)[axis] * inner;
                out.extend_from_slice(&self.value(x).data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let out = NdArray::new(&shape, out)?;
        Ok(self.push(out, Op::Concat { xs: xs.to_vec(), axis }, xs))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(TensorError::shape("slice", format!("[{start}, {}) of axis {axis} in {s:?}", start + len)));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&xd[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let out = NdArray::new(&shape, out)?;
        Ok(self.push(out, Op::Slice { x, axis, start }, &[x]))
    }

    /// Sets the given positions of the last axis to −∞ (logit mask).
    pub fn mask_last(&mut self, x: Var, cols: &[usize]) -> Result<Var, TensorError> {
        let w = *self.shape(x).last().unwrap();
        if cols.iter().any(|&c| c >= w) {
            return Err(TensorError::shape("mask_last", format!("columns {cols:?} of width {w}")));
        }
        let mut out = self.value(x).clone();
        for r in out.data_mut().chunks_mut(w) {
            for &c in cols {
                r[c] = T::neg_infinity();
            }
        }
        Ok(self.push(out, Op::MaskLast { x, cols: cols.to_vec() }, &[x]))
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(TensorError::NotScalar(ls.to_vec()));
        }
        let mut grads: Vec<Option<NdArray<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(NdArray::full(ls, T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut params = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(id), true) = (node.param, node.needs_grad) {
                let g = grads[i].clone().unwrap_or_else(|| NdArray::zeros(node.value.shape()));
                params.insert(id, g);
            }
        }
        Ok(Gradients { nodes: grads, params })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop(&self, i: usize, g: &NdArray<T>, grads: &mut [Option<NdArray<T>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let gd = g.data();
        // Accumulates `delta` into the gradient slot of `v`.
        let mut acc = |v: Var, delta: NdArray<T>| match &mut grads[v.0] {
            Some(e) => e.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        };
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.clone());
                }
                if self.wants(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.clone());
                }
                if self.wants(*b) {
                    acc(*b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let mut d = g.clone();
                    d.data_mut().iter_mut().zip(val(*b).data()).for_each(|(x, &y)| *x *= y);
                    acc(*a, d);
                }
                if self.wants(*b) {
                    let mut d = g.clone();
                    d.data_mut().iter_mut().zip(val(*a).data()).for_each(|(x, &y)| *x *= y);
                    acc(*b, d);
                }
            }
            Op::AddBcast(x, yv) => {
                if self.wants(*x) {
                    acc(*x, g.clone());
                }
                if self.wants(*yv) {
                    let mut d = NdArray::zeros(val(*yv).shape());
                    let dd = d.data_mut();
                    for_each_bcast(g.shape(), val(*yv).shape(), |a, b| dd[b] += gd[a]);
                    acc(*yv, d);
                }
            }
            Op::MulBcast(x, yv) => {
                let (xv, yvv) = (val(*x), val(*yv));
                if self.wants(*x) {
                    let mut d = g.clone();
                    let dd = d.data_mut();
                    let yd = yvv.data();
                    for_each_bcast(g.shape(), yvv.shape(), |a, b| dd[a] *= yd[b]);
                    acc(*x, d);
                }
                if self.wants(*yv) {
                    let mut d = NdArray::zeros(yvv.shape());
                    let dd = d.data_mut();
                    let xd = xv.data();
                    for_each_bcast(g.shape(), yvv.shape(), |a, b| dd[b] += gd[a] * xd[a]);
                    acc(*yv, d);
                }
            }
            Op::Scale(x, c) => {
                if self.wants(*x) {
                    acc(*x, g.map(|v| v * *c));
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let ash = av.shape();
                let k = ash[ash.len() - 1];
                if bv.rank() == 2 {
                    let n = bv.shape()[1];
                    let rows = av.len() / k;
                    if self.wants(*a) {
                        let mut d = vec![T::zero(); av.len()];
                        gemm_nt(rows, n, k, gd, bv.data(), &mut d);
                        acc(*a, NdArray::new(ash, d).unwrap());
                    }
                    if self.wants(*b) {
                        let mut d = vec![T::zero(); bv.len()];
                        gemm_tn(k, rows, n, av.data(), gd, &mut d);
                        acc(*b, NdArray::new(bv.shape(), d).unwrap());
                    }
                } else {
                    let (batch, m, n) = (ash[0], ash[1], bv.shape()[2]);
                    if self.wants(*a) {
                        let mut d = vec![T::zero(); av.len()];
                        for bi in 0..batch {
                            gemm_nt(m, n, k, &gd[bi * m * n..(bi + 1) * m * n], &bv.data()[bi * k * n..(bi + 1) * k * n], &mut d[bi * m * k..(bi + 1) * m * k]);
                        }
                        acc(*a, NdArray::new(ash, d).unwrap());
                    }
                    if self.wants(*b) {
                        let mut d = vec![T::zero(); bv.len()];
                        for bi in 0..batch {
                            gemm_tn(k, m, n, &av.data()[bi * m * k..(bi + 1) * m * k], &gd[bi * m * n..(bi + 1) * m * n], &mut d[bi * k * n..(bi + 1) * k * n]);
                        }
                        acc(*b, NdArray::new(bv.shape(), d).unwrap());
                    }
                }
            }
            Op::Permute(x, perm) => {
                if self.wants(*x) {
                    let inv = kernels::inverse_perm(perm);
                    let (s, d) = kernels::permute(gd, g.shape(), &inv);
                    acc(*x, NdArray::new(&s, d).unwrap());
                }
            }
            Op::Reshape(x) => {
                if self.wants(*x) {
                    acc(*x, g.clone().reshaped(val(*x).shape()).unwrap());
                }
            }
            Op::Conv1d { x, w, stride, pad, dilation } => {
                let (xv, wv) = (val(*x), val(*w));
                let (b, cin, len) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let (cout, k) = (wv.shape()[0], wv.shape()[2]);
                let lout = y.shape()[2];
                let mut cols = vec![T::zero(); cin * k * lout];
                let mut gcols = vec![T::zero(); cin * k * lout];
                let mut gw = vec![T::zero(); wv.len()];
                let mut gx = vec![T::zero(); if self.wants(*x) { xv.len() } else { 0 }];
                for bi in 0..b {
                    let gb = &gd[bi * cout * lout..(bi + 1) * cout * lout];
                    if self.wants(*w) {
                        im2col(&xv.data()[bi * cin * len..(bi + 1) * cin * len], cin, len, k, *stride, *pad, *dilation, lout, &mut cols);
                        gemm_nt(cout, lout, cin * k, gb, &cols, &mut gw);
                    }
                    if self.wants(*x) {
                        gcols.iter_mut().for_each(|c| *c = T::zero());
                        gemm_tn(cin * k, cout, lout, wv.data(), gb, &mut gcols);
                        col2im(&gcols, cin, len, k, *stride, *pad, *dilation, lout, &mut gx[bi * cin * len..(bi + 1) * cin * len]);
                    }
                }
                if self.wants(*w) {
                    acc(*w, NdArray::new(wv.shape(), gw).unwrap());
                }
                if self.wants(*x) {
                    acc(*x, NdArray::new(xv.shape(), gx).unwrap());
                }
            }
            Op::ConvT1d { x, w, stride, pad } => {
                let (xv, wv) = (val(*x), val(*w));
                let (b, cin, len) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let (cout, k) = (wv.shape()[1], wv.shape()[2]);
                let lout = y.shape()[2];
                let mut gcols = vec![T::zero(); cout * k * len];
                let mut gw = vec![T::zero(); wv.len()];
                let mut gx = vec![T::zero(); if self.wants(*x) { xv.len() } else { 0 }];
                for bi in 0..b {
                    im2col(&gd[bi * cout * lout..(bi + 1) * cout * lout], cout, lout, k, *stride, *pad, 1, len, &mut gcols);
                    if self.wants(*x) {
                        gemm_nn(cin, cout * k, len, wv.data(), &gcols, &mut gx[bi * cin * len..(bi + 1) * cin * len]);
                    }
                    if self.wants(*w) {
                        gemm_nt(cin, len, cout * k, &xv.data()[bi * cin * len..(bi + 1) * cin * len], &gcols, &mut gw);
                    }
                }
                if self.wants(*w) {
                    acc(*w, NdArray::new(wv.shape(), gw).unwrap());
                }
                if self.wants(*x) {
                    acc(*x, NdArray::new(xv.shape(), gx).unwrap());
                }
            }
            Op::Normalize { x, chunk, rstd } => {
                if self.wants(*x) {
                    let n = T::of(*chunk as f64);
                    let mut d = g.clone();
                    for ((dc, yc), &r) in d.data_mut().chunks_mut(*chunk).zip(y.data().chunks(*chunk)).zip(rstd) {
                        let mg = dc.iter().copied().sum::<T>() / n;
                        let mgy = dc.iter().zip(yc).map(|(&a, &b)| a * b).sum::<T>() / n;
                        for (dv, &yv) in dc.iter_mut().zip(yc) {
                            *dv = r * (*dv - mg - yv * mgy);
                        }
                    }
                    acc(*x, d);
                }
            }
            Op::Embedding { table, ids } => {
                if self.wants(*table) {
                    let tv = val(*table);
                    let dim = tv.shape()[1];
                    let mut d = NdArray::zeros(tv.shape());
                    let dd = d.data_mut();
                    for (r, &id) in ids.iter().enumerate() {
                        for (a, &b) in dd[id * dim..(id + 1) * dim].iter_mut().zip(&gd[r * dim..(r + 1) * dim]) {
                            *a += b;
                        }
                    }
                    acc(*table, d);
                }
            }
            Op::Softmax(x) => {
                if self.wants(*x) {
                    let w = *y.shape().last().unwrap();
                    let mut d = g.clone();
                    for (dr, yr) in d.data_mut().chunks_mut(w).zip(y.data().chunks(w)) {
                        let s: T = dr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for (dv, &yv) in dr.iter_mut().zip(yr) {
                            *dv = yv * (*dv - s);
                        }
                    }
                    acc(*x, d);
                }
            }
            Op::LogSoftmax(x) => {
                if self.wants(*x) {
                    let w = *y.shape().last().unwrap();
                    let mut d = g.clone();
                    for (dr, yr) in d.data_mut().chunks_mut(w).zip(y.data().chunks(w)) {
                        let s: T = dr.iter().copied().sum();
                        for (dv, &yv) in dr.iter_mut().zip(yr) {
                            *dv -= yv.exp() * s;
                        }
                    }
                    acc(*x, d);
                }
            }
            Op::Nll { logp, targets } => {
                if self.wants(*logp) {
                    let lv = val(*logp);
                    let w = lv.shape()[1];
                    let mut d = NdArray::zeros(lv.shape());
                    let s = gd[0] / T::of(targets.len() as f64);
                    for (r, &t) in targets.iter().enumerate() {
                        d.data_mut()[r * w + t] -= s;
                    }
                    acc(*logp, d);
                }
            }
            Op::Relu(x) => {
                if self.wants(*x) {
                    let mut d = g.clone();
                    d.data_mut().iter_mut().zip(val(*x).data()).for_each(|(a, &b)| {
                        if b <= T::zero() {
                            *a = T::zero()
                        }
                    });
                    acc(*x, d);
                }
            }
            Op::LeakyRelu(x, s) => {
                if self.wants(*x) {
                    let mut d = g.clone();
                    d.data_mut().iter_mut().zip(val(*x).data()).for_each(|(a, &b)| {
                        if b <= T::zero() {
                            *a *= *s
                        }
                    });
                    acc(*x, d);
                }
            }
            Op::Dropout(x, mask) => {
                if self.wants(*x) {
                    let mut d = g.clone();
                    d.data_mut().iter_mut().zip(mask).for_each(|(a, &m)| *a *= m);
                    acc(*x, d);
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    acc(*x, NdArray::full(val(*x).shape(), gd[0]));
                }
            }
            Op::Mean(x) => {
                if self.wants(*x) {
                    let xv = val(*x);
                    acc(*x, NdArray::full(xv.shape(), gd[0] / T::of(xv.len() as f64)));
                }
            }
            Op::MeanAxis { x, axis } => {
                if self.wants(*x) {
                    let s = val(*x).shape();
                    let outer: usize = s[..*axis].iter().product();
                    let n = s[*axis];
                    let inner: usize = s[axis + 1..].iter().product();
                    let inv = T::of(1.0 / n as f64);
                    let mut d = Vec::with_capacity(val(*x).len());
                    for o in 0..outer {
                        for _ in 0..n {
                            d.extend(gd[o * inner..(o + 1) * inner].iter().map(|&v| v * inv));
                        }
                    }
                    acc(*x, NdArray::new(s, d).unwrap());
                }
            }
            Op::Attention { q, k, v, probs } => {
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let (b, t, dm) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
                let s = kv.shape()[1];
                let scale = T::of(1.0 / (dm as f64).sqrt());
                let mut gq = vec![T::zero(); qv.len()];
                let mut gk = vec![T::zero(); kv.len()];
                let mut gv = vec![T::zero(); vv.len()];
                let mut gp = vec![T::zero(); t * s];
                for bi in 0..b {
                    let p = &probs[bi * t * s..(bi + 1) * t * s];
                    let go = &gd[bi * t * dm..(bi + 1) * t * dm];
                    let vb = &vv.data()[bi * s * dm..(bi + 1) * s * dm];
                    gemm_tn(s, t, dm, p, go, &mut gv[bi * s * dm..(bi + 1) * s * dm]);
                    gp.iter_mut().for_each(|x| *x = T::zero());
                    gemm_nt(t, dm, s, go, vb, &mut gp);
                    for i in 0..t {
                        let pr = &p[i * s..(i + 1) * s];
                        let gr = &mut gp[i * s..(i + 1) * s];
                        let dotp: T = pr.iter().zip(gr.iter()).map(|(&a, &b)| a * b).sum();
                        for (gv_, &pv) in gr.iter_mut().zip(pr) {
                            *gv_ = pv * (*gv_ - dotp) * scale;
                        }
                    }
                    gemm_nn(t, s, dm, &gp, &kv.data()[bi * s * dm..(bi + 1) * s * dm], &mut gq[bi * t * dm..(bi + 1) * t * dm]);
                    gemm_tn(s, t, dm, &gp, &qv.data()[bi * t * dm..(bi + 1) * t * dm], &mut gk[bi * s * dm..(bi + 1) * s * dm]);
                }
                if self.wants(*q) {
                    acc(*q, NdArray::new(qv.shape(), gq).unwrap());
                }
                if self.wants(*k) {
                    acc(*k, NdArray::new(kv.shape(), gk).unwrap());
                }
                if self.wants(*v) {
                    acc(*v, NdArray::new(vv.shape(), gv).unwrap());
                }
            }
            Op::Concat { xs, axis } => {
                let s = y.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let mut off = 0;
                for &x in xs {
                    let xs_ = val(x).shape();
                    let w = xs_[*axis] * inner;
                    if self.wants(x) {
                        let mut d = Vec::with_capacity(val(x).len());
                        for o in 0..outer {
                            let base = o * s[*axis] * inner + off;
                            d.extend_from_slice(&gd[base..base + w]);
                        }
                        acc(x, NdArray::new(xs_, d).unwrap());
                    }
                    off += w;
                }
            }
            Op::Slice { x, axis, start } => {
                if self.wants(*x) {
                    let xs_ = val(*x).shape();
                    let outer: usize = xs_[..*axis].iter().product();
                    let inner: usize = xs_[axis + 1..].iter().product();
                    let len = y.shape()[*axis];
                    let mut d = NdArray::zeros(xs_);
                    let dd = d.data_mut();
                    for o in 0..outer {
                        let base = (o * xs_[*axis] + start) * inner;
                        dd[base..base + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                    }
                    acc(*x, d);
                }
            }
            Op::MaskLast { x, cols } => {
                if self.wants(*x) {
                    let w = *y.shape().last().unwrap();
                    let mut d = g.clone();
                    for r in d.data_mut().chunks_mut(w) {
                        for &c in cols {
                            r[c] = T::zero();
                        }
                    }
                    acc(*x, d);
                }
            }
        }
    }
}

impl<T: Real> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(shape: &[usize], v: &[f64]) -> NdArray<f64> {
        NdArray::from_f64(shape, v).unwrap()
    }

    #[test]
    fn conv1d_identity_kernel() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(arr(&[1, 1, 3], &[1.0, 2.0, 3.0]));
        let w = g.constant(arr(&[1, 1, 1], &[1.0]));
        let y = g.conv1d(x, w, 1, 0, 1).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn conv1d_stride_two() {
        // direct sliding dot product: [1+2, 3+4]
        let mut g = Graph::<f64>::new();
        let x = g.constant(arr(&[1, 1, 4], &[1.0, 2.0, 3.0, 4.0]));
        let w = g.constant(arr(&[1, 1, 2], &[1.0, 1.0]));
        let y = g.conv1d(x, w, 2, 0, 1).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 7.0]);
    }

    #[test]
    fn conv1d_shape_error_names_op() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(NdArray::zeros(&[1, 2, 4]));
        let w = g.constant(NdArray::zeros(&[1, 3, 2]));
        let e = g.conv1d(x, w, 1, 0, 1).unwrap_err();
        assert!(e.to_string().contains("conv1d"), "{e}");
        assert!(e.to_string().contains("[1, 2, 4]"), "{e}");
    }

    #[test]
    fn conv_transpose_doubles_length() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(NdArray::full(&[2, 3, 16], 1.0));
        let w = g.constant(NdArray::full(&[3, 5, 4], 0.1));
        let y = g.conv_transpose1d(x, w, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[2, 5, 32]);
    }

    #[test]
    fn softmax_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(NdArray::zeros(&[4]));
        let y = g.softmax(x);
        assert_eq!(g.value(y).data(), &[0.25; 4]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(arr(&[2], &[1.0, 2.0]), true);
        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq);
        let gr = g.backward(l).unwrap();
        assert_eq!(gr.of(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn relu_flat_region_has_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(arr(&[1], &[-1.0]), true);
        let y = g.relu(x);
        let l = g.sum(y);
        let gr = g.backward(l).unwrap();
        assert_eq!(gr.of(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(arr(&[2], &[1.0, 2.0]), true);
        assert!(matches!(g.backward(x), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(arr(&[2], &[1.0, 2.0]), true);
        let d = g.detach(x);
        let y = g.mul(x, d).unwrap();
        let l = g.sum(y);
        let gr = g.backward(l).unwrap();
        // d/dx [x · sg(x)] = sg(x)
        assert_eq!(gr.of(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(arr(&[1], &[3.0]), true);
        let a = g.scale(x, 2.0);
        let b = g.scale(x, 5.0);
        let s = g.add(a, b).unwrap();
        let l = g.sum(s);
        let gr = g.backward(l).unwrap();
        assert_eq!(gr.of(x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn normalization_of_constant_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(NdArray::full(&[2, 4, 3], 5.0));
        let y = g.group_norm(x, 2, 1e-6).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        let z = g.layer_norm(x, 1e-5);
        assert!(g.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dropout_eval_is_identity() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(arr(&[3], &[1.0, 2.0, 3.0]));
        assert_eq!(g.dropout(x, 0.5), x);
    }

    #[test]
    fn dropout_train_scales_kept_units() {
        let mut g = Graph::<f64>::new().train_mode(1);
        let x = g.constant(NdArray::full(&[1000], 1.0));
        let y = g.dropout(x, 0.25);
        let vals = g.value(y).data();
        assert!(vals.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-12));
        let kept = vals.iter().filter(|&&v| v > 0.0).count();
        assert!((650..850).contains(&kept), "{kept}");
    }

    #[test]
    fn causal_attention_ignores_future() {
        let mut g = Graph::<f64>::new();
        let mk = |g: &mut Graph<f64>, last: f64| {
            let mut d: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
            d[11] = last;
            g.constant(arr(&[1, 4, 3], &d))
        };
        let a = mk(&mut g, 0.0);
        let b = mk(&mut g, 9.0);
        let ya = g.attention(a, a, a, true).unwrap();
        let yb = g.attention(b, b, b, true).unwrap();
        assert_eq!(&g.value(ya).data()[..9], &g.value(yb).data()[..9]);
    }

    #[test]
    fn logit_mask_is_neg_infinity() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(NdArray::zeros(&[2, 3]));
        let y = g.mask_last(x, &[2]).unwrap();
        assert_eq!(g.value(y).data()[2], f64::NEG_INFINITY);
        let p = g.softmax(y);
        assert_eq!(g.value(p).data()[..3], [0.5, 0.5, 0.0]);
    }
}
