//! Central finite-difference verification of the reverse pass (64-bit).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, NdArray, ParamSet, TensorError, Var};

pub const STEP: f64 = 1e-5;

/// Worst relative error observed for one op.
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub op: &'static str,
    pub max_rel_error: f64,
    pub checked: usize,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub entries: Vec<OpCheck>,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn get(&self, op: &str) -> Option<&OpCheck> {
        self.entries.iter().find(|e| e.op == op)
    }
}

/// `|a − n| / max(|a|, |n|, 1e-3)`; the floor keeps vanishing gradients
/// from turning rounding noise into large ratios.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

type Build<'a> = dyn Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var, TensorError> + 'a;

/// Compares reverse-mode gradients of `sum(f(inputs, params) ⊙ R)` for a
/// fixed random `R` against central differences, over every input element
/// and every trainable parameter value. `dropout_seed` fixes dropout masks
/// across evaluations when set.
pub fn check(
    params: &ParamSet<f64>,
    inputs: &[NdArray<f64>],
    dropout_seed: Option<u64>,
    f: &Build<'_>,
) -> Result<(f64, usize), TensorError> {
    let mut weights: Option<NdArray<f64>> = None;
    let mut eval = |ps: &ParamSet<f64>, xs: &[NdArray<f64>], with_grad: bool| -> Result<(f64, Option<(Vec<NdArray<f64>>, Vec<NdArray<f64>>)>), TensorError> {
        let mut g = Graph::with_params(ps);
        if let Some(s) = dropout_seed {
            g = g.train_mode(s);
        }
        let vars: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone(), true)).collect();
        let y = f(&mut g, &vars)?;
        let w = weights.get_or_insert_with(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
            let n = g.value(y).len();
            NdArray::new(g.shape(y), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        });
        let wv = g.constant(w.clone());
        let prod = g.mul(y, wv)?;
        let loss = g.sum(prod);
        let value = g.value(loss).item();
        if !with_grad {
            return Ok((value, None));
        }
        let grads = g.backward(loss)?;
        let gx = vars
            .iter()
            .zip(xs)
            .map(|(&v, x)| grads.of(v).cloned().unwrap_or_else(|| NdArray::zeros(x.shape())))
            .collect();
        let gp = ps
            .ids()
            .map(|id| grads.param(id).cloned().unwrap_or_else(|| NdArray::zeros(ps.get(id).shape())))
            .collect();
        Ok((value, Some((gx, gp))))
    };

    let (_, grads) = eval(params, inputs, true)?;
    let (gx, gp) = grads.unwrap();
    let mut worst = 0.0f64;
    let mut count = 0;
    for (i, x) in inputs.iter().enumerate() {
        for j in 0..x.len() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] += STEP;
            let (fp, _) = eval(params, &xs, false)?;
            xs[i].data_mut()[j] -= 2.0 * STEP;
            let (fm, _) = eval(params, &xs, false)?;
            let numeric = (fp - fm) / (2.0 * STEP);
            worst = worst.max(rel_error(gx[i].data()[j], numeric));
            count += 1;
        }
    }
    for id in params.ids().filter(|&id| params.trainable(id)) {
        for j in 0..params.get(id).len() {
            let mut ps = params.clone();
            ps.get_mut(id)[j] += STEP;
            let (fp, _) = eval(&ps, inputs, false)?;
            ps.get_mut(id)[j] -= 2.0 * STEP;
            let (fm, _) = eval(&ps, inputs, false)?;
            let numeric = (fp - fm) / (2.0 * STEP);
            worst = worst.max(rel_error(gp[id.index()].data()[j], numeric));
            count += 1;
        }
    }
    Ok((worst, count))
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> NdArray<f64> {
    let n = shape.iter().product();
    NdArray::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Random values bounded away from zero, for ops with a kink at the origin.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> NdArray<f64> {
    random(rng, shape).map(|v| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v })
}

/// Runs every op of the forward suite on random small shapes.
pub fn gradient_check(seed: u64) -> Result<GradCheckReport, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let none = ParamSet::<f64>::new();
    let mut report = GradCheckReport::default();
    let mut run = |op: &'static str, inputs: Vec<NdArray<f64>>, dropout: Option<u64>, f: &Build<'_>| -> Result<(), TensorError> {
        let (e, n) = check(&none, &inputs, dropout, f)?;
        report.entries.push(OpCheck { op, max_rel_error: e, checked: n });
        Ok(())
    };
    let r = &mut rng;

    run("matmul", vec![random(r, &[3, 4]), random(r, &[4, 5])], None, &|g, v| g.matmul(v[0], v[1]))?;
    run("matmul_batched", vec![random(r, &[2, 3, 4]), random(r, &[2, 4, 2])], None, &|g, v| g.matmul(v[0], v[1]))?;
    run("linear", vec![random(r, &[2, 3, 4]), random(r, &[4, 3]), random(r, &[1, 1, 3])], None, &|g, v| {
        let y = g.matmul(v[0], v[1])?;
        g.add_bcast(y, v[2])
    })?;
    run("conv1d", vec![random(r, &[2, 3, 9]), random(r, &[4, 3, 3])], None, &|g, v| g.conv1d(v[0], v[1], 2, 1, 1))?;
    run("conv1d_dilated", vec![random(r, &[1, 2, 10]), random(r, &[2, 2, 2])], None, &|g, v| g.conv1d(v[0], v[1], 1, 2, 2))?;
    run("conv_transpose1d", vec![random(r, &[2, 3, 5]), random(r, &[3, 2, 4])], None, &|g, v| g.conv_transpose1d(v[0], v[1], 2, 1))?;
    run("group_norm", vec![random(r, &[2, 4, 3])], None, &|g, v| g.group_norm(v[0], 2, 1e-6))?;
    run("layer_norm", vec![random(r, &[3, 5])], None, &|g, v| Ok(g.layer_norm(v[0], 1e-5)))?;
    run("embedding", vec![random(r, &[5, 3])], None, &|g, v| g.embedding(v[0], &[4, 0, 4, 2]))?;
    run("positional_embedding", vec![random(r, &[2, 4, 3]), random(r, &[6, 3])], None, &|g, v| {
        let pos = g.embedding(v[1], &[0, 1, 2, 3])?;
        let pos = g.reshape(pos, &[1, 4, 3])?;
        g.add_bcast(v[0], pos)
    })?;
    run("softmax", vec![random(r, &[3, 4])], None, &|g, v| Ok(g.softmax(v[0])))?;
    run("log_softmax_nll", vec![random(r, &[3, 5])], None, &|g, v| {
        let lp = g.log_softmax(v[0]);
        g.nll(lp, &[1, 4, 0])
    })?;
    run("relu", vec![away_from_zero(r, &[4, 3])], None, &|g, v| Ok(g.relu(v[0])))?;
    run("leaky_relu", vec![away_from_zero(r, &[4, 3])], None, &|g, v| Ok(g.leaky_relu(v[0], 0.3)))?;
    run("dropout_train", vec![random(r, &[4, 5])], Some(seed), &|g, v| Ok(g.dropout(v[0], 0.3)))?;
    run("dropout_eval", vec![random(r, &[4, 5])], None, &|g, v| Ok(g.dropout(v[0], 0.3)))?;
    run("add", vec![random(r, &[2, 3]), random(r, &[2, 3])], None, &|g, v| g.add(v[0], v[1]))?;
    run("sub", vec![random(r, &[2, 3]), random(r, &[2, 3])], None, &|g, v| g.sub(v[0], v[1]))?;
    run("mul", vec![random(r, &[2, 3]), random(r, &[2, 3])], None, &|g, v| g.mul(v[0], v[1]))?;
    run("add_bcast", vec![random(r, &[2, 3, 4]), random(r, &[1, 3, 1])], None, &|g, v| g.add_bcast(v[0], v[1]))?;
    run("mul_bcast", vec![random(r, &[2, 3, 4]), random(r, &[1, 3, 1])], None, &|g, v| g.mul_bcast(v[0], v[1]))?;
    run("scale", vec![random(r, &[3])], None, &|g, v| Ok(g.scale(v[0], -2.5)))?;
    run("sum", vec![random(r, &[2, 3])], None, &|g, v| Ok(g.sum(v[0])))?;
    run("mean", vec![random(r, &[2, 3])], None, &|g, v| Ok(g.mean(v[0])))?;
    run("mean_axis", vec![random(r, &[2, 3, 4])], None, &|g, v| g.mean_axis(v[0], 1))?;
    run("attention_causal", vec![random(r, &[2, 4, 3]), random(r, &[2, 4, 3]), random(r, &[2, 4, 3])], None, &|g, v| {
        g.attention(v[0], v[1], v[2], true)
    })?;
    run("attention", vec![random(r, &[1, 3, 2]), random(r, &[1, 5, 2]), random(r, &[1, 5, 2])], None, &|g, v| {
        g.attention(v[0], v[1], v[2], false)
    })?;
    run("concat", vec![random(r, &[2, 2, 3]), random(r, &[2, 1, 3])], None, &|g, v| g.concat(&[v[0], v[1]], 1))?;
    run("slice", vec![random(r, &[2, 5, 2])], None, &|g, v| g.slice(v[0], 1, 1, 3))?;
    run("permute", vec![random(r, &[2, 3, 4])], None, &|g, v| g.permute(v[0], &[2, 0, 1]))?;
    run("transpose", vec![random(r, &[2, 3, 4])], None, &|g, v| g.transpose(v[0], 1, 2))?;
    run("reshape", vec![random(r, &[2, 6])], None, &|g, v| g.reshape(v[0], &[3, 4]))?;
    run("logit_mask", vec![random(r, &[2, 4])], None, &|g, v| {
        let m = g.mask_last(v[0], &[3])?;
        Ok(g.log_softmax(m))
    })?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_is_exact() {
        let r = gradient_check(0).unwrap();
        assert!(r.get("matmul").unwrap().max_rel_error <= 1e-8);
        assert!(r.get("linear").unwrap().max_rel_error <= 1e-8);
    }

    #[test]
    fn eval_dropout_matches_identity_exactly() {
        let none = ParamSet::<f64>::new();
        let x = NdArray::from_f64(&[3], &[0.2, -0.4, 0.9]).unwrap();
        let (e, _) = check(&none, &[x], None, &|g, v| Ok(g.dropout(v[0], 0.5))).unwrap();
        assert!(e < 1e-9);
    }
}
