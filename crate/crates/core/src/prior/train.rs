use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{audio_batch, nll_loss, Prior, PriorError};
use crate::motion::{GestureClip, MotionSequence, CLIP_FRAMES, POSE_DIM, SAMPLES_PER_FRAME, WINDOW_STEP};
use crate::rng::{stream, substream};
use crate::rqvae::RqVae;
use crate::tensor::{AdamW, AdamWConfig, Graph};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: AdamWConfig,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            epochs: 1000,
            batch_size: 32,
            optim: AdamWConfig::default(),
        }
    }
}

/// A training window: where its speech lives and the tokens of its motion.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenWindow {
    pub sequence: usize,
    pub start: usize,
    /// Position-major `T × D` codes.
    pub codes: Vec<usize>,
}

/// Tokenizes every 64-frame window (step 10) of sequences that carry speech.
pub fn token_windows(vae: &RqVae, sequences: &[MotionSequence]) -> Result<Vec<TokenWindow>, PriorError> {
    let mut out = Vec::new();
    for (si, seq) in sequences.iter().enumerate() {
        if seq.audio.is_none() || seq.words.is_none() || seq.len() < CLIP_FRAMES {
            continue;
        }
        let starts: Vec<usize> = (0..=(seq.len() - CLIP_FRAMES) / WINDOW_STEP).map(|k| k * WINDOW_STEP).collect();
        let clips: Vec<GestureClip> = starts
            .iter()
            .map(|&s| GestureClip::new(seq.poses[s * POSE_DIM..(s + CLIP_FRAMES) * POSE_DIM].to_vec()))
            .collect::<Result<_, _>>()
            .map_err(|e| PriorError::Shape(e.to_string()))?;
        for (stack, &start) in vae.tokenize(&clips)?.into_iter().zip(&starts) {
            out.push(TokenWindow {
                sequence: si,
                start,
                codes: stack.codes,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Report {
    pub epoch: usize,
    /// Mean teacher-forced negative log-likelihood per token, in nats.
    pub nll: f64,
}

fn batch_nll(
    prior: &Prior,
    g: &mut Graph<f32>,
    sequences: &[MotionSequence],
    batch: &[&TokenWindow],
) -> Result<crate::tensor::Var, PriorError> {
    let audio = audio_batch(batch.iter().map(|w| {
        let a = sequences[w.sequence].audio.as_ref().expect("windows carry audio");
        &a[w.start * SAMPLES_PER_FRAME..(w.start + CLIP_FRAMES) * SAMPLES_PER_FRAME]
    }))?;
    let words: Vec<usize> = batch
        .iter()
        .flat_map(|w| {
            let ws = sequences[w.sequence].words.as_ref().expect("windows carry words");
            ws[w.start..w.start + CLIP_FRAMES].iter().map(|&i| i as usize)
        })
        .collect();
    let codes: Vec<usize> = batch.iter().flat_map(|w| w.codes.iter().copied()).collect();
    let a = g.constant(audio);
    let cond = prior.condition(g, a, &words)?;
    let logits = prior.forward(g, cond, &codes)?;
    Ok(nll_loss(g, logits, &codes)?)
}

/// Teacher-forced training on frozen tokens. On a non-finite loss the step
/// is abandoned and the prior keeps its last good weights.
pub fn train_stage2(
    prior: &mut Prior,
    sequences: &[MotionSequence],
    windows: &[TokenWindow],
    cfg: &Stage2Config,
    seed: u64,
) -> Result<Vec<Stage2Report>, PriorError> {
    if windows.is_empty() {
        return Err(PriorError::Empty);
    }
    let mut opt = AdamW::new(cfg.optim.clone());
    let mut shuffle = stream(seed, "shuffle", 2);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        let (mut sum, mut n) = (0.0, 0usize);
        for idx in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<&TokenWindow> = idx.iter().map(|&i| &windows[i]).collect();
            let mut g = Graph::with_params(&prior.params).train_mode(substream(seed, "dropout", step as u64));
            let loss = batch_nll(prior, &mut g, sequences, &batch)?;
            let value = g.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(PriorError::Diverged { epoch, step, loss: value });
            }
            let grads = g.backward(loss)?;
            let running = g.running_updates().to_vec();
            drop(g);
            opt.step(&mut prior.params, &grads)?;
            prior.params.apply_running(&running);
            sum += value;
            n += 1;
            step += 1;
        }
        let report = Stage2Report {
            epoch,
            nll: sum / n as f64,
        };
        info!("stage2 epoch {epoch}: nll {:.4}", report.nll);
        history.push(report);
    }
    Ok(history)
}

/// Mean per-token negative log-likelihood in evaluation mode.
pub fn validation_nll(prior: &Prior, sequences: &[MotionSequence], windows: &[TokenWindow]) -> Result<f64, PriorError> {
    if windows.is_empty() {
        return Err(PriorError::Empty);
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for chunk in windows.chunks(32) {
        let batch: Vec<&TokenWindow> = chunk.iter().collect();
        let mut g = Graph::with_params(&prior.params);
        let loss = batch_nll(prior, &mut g, sequences, &batch)?;
        sum += g.value(loss).item() as f64 * chunk.len() as f64;
        n += chunk.len();
    }
    Ok(sum / n as f64)
}
