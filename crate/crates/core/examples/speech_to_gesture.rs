//! Trains both stages at desk scale, then synthesizes gestures for speech
//! the models never saw and writes them as a motion file.
//!
//! Takes a few minutes; `EPOCHS1` and `EPOCHS2` shorten or lengthen it.

use gesture_tokens::metrics::beat_consistency;
use gesture_tokens::motion::{dataset_stats, extract_windows, io, synth_corpus, SynthConfig};
use gesture_tokens::prior::{
    synthesize_long, token_windows, train_stage2, validation_nll, Prior, PriorConfig, SamplerConfig, Stage2Config,
    TokenLayout,
};
use gesture_tokens::rqvae::{train_stage1, RqVae, Stage1Config, VaeConfig};
use gesture_tokens::tensor::AdamWConfig;

fn env_or(key: &str, default: usize) -> usize {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let corpus = synth_corpus(&SynthConfig { sequences: 14, ..SynthConfig::default() }, 5)?;
    let (train, held_out) = corpus.sequences.split_at(12);
    let clips: Vec<_> = train.iter().flat_map(extract_windows).collect();

    let mut vae = RqVae::new(VaeConfig::desk(), dataset_stats(&clips)?, 5)?;
    let s1 = Stage1Config {
        epochs: env_or("EPOCHS1", 30),
        batch_size: 16,
        optim: AdamWConfig { lr: 2e-3, ..Default::default() },
    };
    let last = train_stage1(&mut vae, &clips, &s1, 5)?.pop();
    if let Some(r) = last {
        println!("stage 1: l1 {:.4}, codebook usage {:.2}", r.l1, r.usage);
    }

    let windows = token_windows(&vae, train)?;
    let mut prior = Prior::new(PriorConfig::desk(), TokenLayout::of(&vae, corpus.bank.vocab_size()), 5)?;
    let s2 = Stage2Config {
        epochs: env_or("EPOCHS2", 20),
        batch_size: 16,
        optim: AdamWConfig { lr: 1e-3, ..Default::default() },
    };
    for r in train_stage2(&mut prior, train, &windows, &s2, 5)? {
        println!("stage 2 epoch {:>2}: nll {:.3}", r.epoch, r.nll);
    }
    let held_windows = token_windows(&vae, held_out)?;
    println!("held-out nll {:.3}", validation_nll(&prior, held_out, &held_windows)?);

    let speech = &held_out[0];
    let audio_beats: Vec<f64> = speech.beats.iter().flatten().map(|&t| t as f64).collect();
    for seed in 0..3 {
        let motion = synthesize_long(&prior, &vae, speech, &SamplerConfig { top_k: 10, seed })?;
        let beat = beat_consistency(&motion, &audio_beats, 0.1)?;
        let path = std::env::temp_dir().join(format!("speech_to_gesture_{seed}.gtkm"));
        std::fs::write(&path, io::to_bytes(&motion))?;
        println!(
            "seed {seed}: {} frames, beat consistency {:.3}, written to {}",
            motion.len(),
            beat.score,
            path.display()
        );
    }
    Ok(())
}
