use gesture_tokens::cli::{Checkpoint, RunConfig};
use gesture_tokens::motion::{dataset_stats, extract_windows, rot6d, synth_corpus, GestureClip, SynthConfig, POSE_DIM};
use gesture_tokens::prior::{
    synthesize_long, token_windows, train_stage2, validation_nll, Prior, PriorConfig, SamplerConfig, Stage2Config,
    TokenLayout, WINDOW_ADVANCE,
};
use gesture_tokens::rqvae::{train_stage1, RqVae, Stage1Config, VaeConfig};
use gesture_tokens::tensor::AdamWConfig;
use gesture_tokens::motion::MotionSequence;

fn tiny_corpus(seed: u64) -> (Vec<MotionSequence>, Vec<GestureClip>, usize) {
    let corpus = synth_corpus(&SynthConfig { sequences: 3, frames: 240, ..SynthConfig::default() }, seed).unwrap();
    let clips = corpus.sequences.iter().flat_map(extract_windows).collect();
    (corpus.sequences, clips, corpus.bank.vocab_size())
}

fn small_vae() -> VaeConfig {
    let mut cfg = VaeConfig::desk();
    cfg.quantizer.codebook_size = 32;
    cfg
}

fn stage1(clips: &[GestureClip], epochs: usize) -> (RqVae, Vec<f64>) {
    let mut vae = RqVae::new(small_vae(), dataset_stats(clips).unwrap(), 3).unwrap();
    let cfg = Stage1Config {
        epochs,
        batch_size: 8,
        optim: AdamWConfig { lr: 2e-3, ..Default::default() },
    };
    let losses = train_stage1(&mut vae, clips, &cfg, 3).unwrap().iter().map(|r| r.loss).collect();
    (vae, losses)
}

#[test]
fn stage1_is_reproducible_and_learns() {
    let (_, clips, _) = tiny_corpus(1);
    let (a, losses) = stage1(&clips, 4);
    let (b, again) = stage1(&clips, 4);
    assert_eq!(losses, again);
    let cfg = RunConfig::default();
    assert_eq!(Checkpoint::from_vae(&a, &cfg).to_bytes(), Checkpoint::from_vae(&b, &cfg).to_bytes());
    assert!(losses.last().unwrap() < &losses[0], "{losses:?}");
}

#[test]
fn stage2_learns_and_synthesizes_valid_motion() {
    let (seqs, clips, vocab) = tiny_corpus(2);
    let (vae, _) = stage1(&clips, 2);
    let windows = token_windows(&vae, &seqs).unwrap();
    assert_eq!(windows.len(), clips.len());
    let layout = TokenLayout::of(&vae, vocab);
    let cfg = Stage2Config {
        epochs: 3,
        batch_size: 8,
        optim: AdamWConfig { lr: 1e-3, ..Default::default() },
    };
    let train = |seed| {
        let mut prior = Prior::new(PriorConfig::desk(), layout, seed).unwrap();
        let before = validation_nll(&prior, &seqs, &windows).unwrap();
        let reports = train_stage2(&mut prior, &seqs, &windows, &cfg, seed).unwrap();
        (prior, before, reports)
    };
    let (prior, before, reports) = train(4);
    let (_, _, again) = train(4);
    assert_eq!(reports, again);
    let after = validation_nll(&prior, &seqs, &windows).unwrap();
    assert!(after < before, "nll {before} -> {after}");

    let out = synthesize_long(&prior, &vae, &seqs[0], &SamplerConfig { top_k: 5, seed: 9 }).unwrap();
    let windows_fit = (seqs[0].len() - 64) / WINDOW_ADVANCE;
    assert_eq!(out.len(), 64 + windows_fit * WINDOW_ADVANCE);
    assert_eq!(out.words.as_ref().unwrap().len(), out.len());
    for j in out.poses.chunks(6).step_by(37) {
        let v: Vec<f64> = j.iter().map(|&x| x as f64).collect();
        let m = rot6d::decode(&v).unwrap();
        assert!((m.determinant() - 1.0).abs() < 1e-4);
    }
    assert_eq!(out.poses.len() % POSE_DIM, 0);
}
