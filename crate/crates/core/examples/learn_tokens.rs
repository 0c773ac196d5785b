//! Learns a gesture-token codebook on a synthetic corpus and reports
//! reconstruction error and codebook usage per epoch.
//!
//! `EPOCHS` and `LR` override the defaults.

use gesture_tokens::motion::{dataset_stats, extract_windows, synth_corpus, SynthConfig};
use gesture_tokens::rqvae::{evaluate, train_stage1, RqVae, Stage1Config, VaeConfig};
use gesture_tokens::tensor::AdamWConfig;

fn env_or<T: std::str::FromStr>(key: &str, default: T) -> T {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let epochs = env_or("EPOCHS", 5);
    let lr = env_or("LR", 2e-3);
    let corpus = synth_corpus(&SynthConfig { sequences: 12, ..SynthConfig::default() }, 1)?;
    let clips: Vec<_> = corpus.sequences.iter().flat_map(extract_windows).collect();
    let stats = dataset_stats(&clips)?;
    let mut model = RqVae::new(VaeConfig::desk(), stats, 1)?;
    println!("{} clips, {} parameters", clips.len(), model.params.num_values());

    let cfg = Stage1Config {
        epochs,
        batch_size: 16,
        optim: AdamWConfig { lr, ..Default::default() },
    };
    let t0 = std::time::Instant::now();
    for r in train_stage1(&mut model, &clips, &cfg, 1)? {
        println!(
            "epoch {:>3}  loss {:.4}  nmse {:.4}  l1 {:.4}  usage {:.2}  resets {:>3}  ({:.0}s)",
            r.epoch,
            r.loss,
            r.nmse,
            r.l1,
            r.usage,
            r.resets,
            t0.elapsed().as_secs_f64()
        );
    }
    let rep = evaluate(&model, &clips)?;
    println!("eval nmse {:.4} l1 {:.4} usage {:.2}", rep.nmse, rep.l1, rep.usage);

    let tokens = model.tokenize(&clips[..1])?;
    println!("first clip as {}×{} tokens:", tokens[0].positions, tokens[0].depth);
    for row in tokens[0].codes.chunks(tokens[0].depth) {
        print!("{row:?} ");
    }
    println!();
    Ok(())
}
