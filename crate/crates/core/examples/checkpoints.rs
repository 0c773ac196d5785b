//! Layered run configuration and checkpoint files.

use gesture_tokens::cli::{Checkpoint, RunConfig};
use gesture_tokens::motion::{dataset_stats, extract_windows, synth_corpus};
use gesture_tokens::rqvae::RqVae;

const FILE: &str = r#"
seed = 42

[vae.quantizer]
depth = 2
"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // built-in preset, then a config file, then command-line style overrides
    let overrides = ["corpus.sequences=3".to_string(), "vae.quantizer.codebook_size=64".to_string()];
    let cfg = RunConfig::resolve(&RunConfig::desk(), Some(FILE), &overrides)?;
    println!("seed {}, depth {}, {} codes", cfg.seed, cfg.vae.quantizer.depth, cfg.vae.quantizer.codebook_size);
    assert!(RunConfig::resolve(&cfg, None, &["vae.quantizer.dept=3".into()]).is_err());

    let corpus = synth_corpus(&cfg.corpus, cfg.seed)?;
    let clips: Vec<_> = corpus.sequences.iter().flat_map(extract_windows).collect();
    let vae = RqVae::new(cfg.vae.clone(), dataset_stats(&clips)?, cfg.seed)?;

    let ck = Checkpoint::from_vae(&vae, &cfg);
    let bytes = ck.to_bytes();
    println!("checkpoint: {} bytes, {} blobs, sha256 {}", bytes.len(), ck.blobs.len(), &ck.digest()[..16]);
    let loaded = Checkpoint::from_bytes(&bytes)?;
    let restored = loaded.to_vae()?;
    println!("restored tokens match: {}", restored.tokenize(&clips[..4])? == vae.tokenize(&clips[..4])?);
    println!("stored config matches: {}", loaded.run_config()? == cfg);

    let mut corrupt = bytes.clone();
    corrupt[bytes.len() / 2] ^= 1;
    println!("flipped bit: {}", Checkpoint::from_bytes(&corrupt).unwrap_err());
    Ok(())
}
