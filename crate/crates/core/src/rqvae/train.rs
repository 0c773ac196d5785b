use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{channels_first, channels_last, rq_dequantize_prefix, rq_quantize, vae_loss, Commitment, RqVae, RqVaeError};
use crate::motion::GestureClip;
use crate::rng::{stream, substream};
use crate::tensor::{AdamW, AdamWConfig, Graph, NdArray};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: AdamWConfig,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: 128,
            optim: AdamWConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub loss: f64,
    /// Variance-normalized mean squared error.
    pub nmse: f64,
    /// Mean absolute pose error in raw units.
    pub l1: f64,
    /// Fraction of codes selected at least once during the epoch.
    pub usage: f64,
    pub resets: usize,
}

/// Trains `model` in place. On a non-finite loss the step is abandoned and
/// the model keeps the weights of the last good step.
pub fn train_stage1(
    model: &mut RqVae,
    clips: &[GestureClip],
    cfg: &Stage1Config,
    seed: u64,
) -> Result<Vec<EpochReport>, RqVaeError> {
    if clips.is_empty() {
        return Err(RqVaeError::Empty);
    }
    let frames = clips[0].poses.len() / crate::motion::POSE_DIM;
    let t = model.cfg.autoencoder.latent_len(frames)?;
    let q = model.cfg.quantizer.clone();
    let dim = model.latent_dim();
    let mut opt = AdamW::new(cfg.optim.clone());
    let mut shuffle = stream(seed, "shuffle", 0);
    let mut reset_rng = stream(seed, "reset", 0);
    let mut order: Vec<usize> = (0..clips.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        let (mut loss_sum, mut nmse_sum, mut l1_sum, mut batches) = (0.0, 0.0, 0.0, 0usize);
        let mut used = vec![false; q.codebook_size];
        let mut resets = 0;
        for idx in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<&GestureClip> = idx.iter().map(|&i| &clips[i]).collect();
            let b = batch.len();
            let raw = raw_input(&batch);
            let mut g = Graph::with_params(&model.params).train_mode(substream(seed, "dropout", step as u64));
            let x_norm = g.constant(model.input(&batch));
            let x = g.constant(raw);
            let z = model.encode(&mut g, x_norm)?;
            let z_rows = channels_last(g.value(z));
            if step == 0 {
                // seed every code from encoder outputs
                resets += model.codebook.reset_dead_codes(&z_rows, u32::MAX, &mut reset_rng);
            }
            let stack = rq_quantize(&z_rows, &model.codebook, q.depth)?;
            let levels: Vec<usize> = match q.commitment {
                Commitment::PerDepth => (1..=q.depth).collect(),
                Commitment::Final => vec![q.depth],
            };
            let mut prefixes = Vec::with_capacity(levels.len());
            for &d in &levels {
                let p = rq_dequantize_prefix(&stack.codes, q.depth, d, &model.codebook)?;
                prefixes.push(g.constant(channels_first(&p, b, dim, t)));
            }
            let zq = *prefixes.last().unwrap();
            let gap = g.sub(zq, z)?;
            let gap = g.detach(gap);
            let st = g.add(z, gap)?;
            let x_hat = model.decode(&mut g, st)?;
            let inv_var = model.inv_var(&mut g)?;
            let parts = vae_loss(&mut g, x, x_hat, inv_var, z, &prefixes, q.beta)?;
            let loss = g.value(parts.total).item() as f64;
            if !loss.is_finite() {
                return Err(RqVaeError::Diverged { epoch, step, loss });
            }
            let grads = g.backward(parts.total)?;
            let nmse = g.value(parts.reconstruction).item() as f64;
            let l1 = mean_abs_diff(g.value(x).data(), g.value(x_hat).data());
            drop(g);
            opt.step(&mut model.params, &grads)?;

            // the input to level d is the residual left by level d−1
            let (stack_ref, rows_ref) = (&stack, &z_rows);
            let assignments = (0..stack.positions).flat_map(|p| {
                (0..q.depth).map(move |d| {
                    let (stack, z_rows) = (stack_ref, rows_ref);
                    let input = if d == 0 {
                        &z_rows[p * dim..(p + 1) * dim]
                    } else {
                        stack.residual(p, d - 1, dim)
                    };
                    (stack.at(p, d), input)
                })
            });
            model.codebook.ema_update(assignments, q.ema_decay);
            model.codebook.record_usage(&stack.codes);
            for &c in &stack.codes {
                used[c] = true;
            }
            step += 1;
            if step % q.reset_period == 0 {
                resets += model.codebook.reset_dead_codes(&z_rows, q.dead_threshold, &mut reset_rng);
            }
            loss_sum += loss;
            nmse_sum += nmse;
            l1_sum += l1;
            batches += 1;
        }
        let n = batches as f64;
        let report = EpochReport {
            epoch,
            loss: loss_sum / n,
            nmse: nmse_sum / n,
            l1: l1_sum / n,
            usage: used.iter().filter(|&&u| u).count() as f64 / q.codebook_size as f64,
            resets,
        };
        info!(
            "stage1 epoch {epoch}: loss {:.4} nmse {:.4} l1 {:.4} usage {:.3}",
            report.loss, report.nmse, report.l1, report.usage
        );
        history.push(report);
    }
    Ok(history)
}

fn raw_input(batch: &[&GestureClip]) -> NdArray<f32> {
    let p = crate::motion::POSE_DIM;
    let frames = batch[0].poses.len() / p;
    let rows: Vec<f32> = batch.iter().flat_map(|c| c.poses.iter().copied()).collect();
    channels_first(&rows, batch.len(), p, frames)
}

fn mean_abs_diff(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / a.len() as f64
}

/// Reconstruction quality through the full quantized path.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionReport {
    pub nmse: f64,
    pub l1: f64,
    pub usage: f64,
}

pub fn evaluate(model: &RqVae, clips: &[GestureClip]) -> Result<ReconstructionReport, RqVaeError> {
    if clips.is_empty() {
        return Err(RqVaeError::Empty);
    }
    let stacks = model.tokenize(clips)?;
    let mut used = vec![false; model.codebook.size()];
    let (mut se, mut ae, mut n) = (0.0, 0.0, 0usize);
    let p = crate::motion::POSE_DIM;
    for (clip, stack) in clips.iter().zip(&stacks) {
        for &c in &stack.codes {
            used[c] = true;
        }
        let rec = model.decode_codes(&stack.codes)?;
        for (i, (x, y)) in clip.poses.iter().zip(&rec).enumerate() {
            let e = (x - y) as f64;
            se += e * e / model.stats.var[i % p] as f64;
            ae += e.abs();
            n += 1;
        }
    }
    Ok(ReconstructionReport {
        nmse: se / n as f64,
        l1: ae / n as f64,
        usage: used.iter().filter(|&&u| u).count() as f64 / used.len() as f64,
    })
}
