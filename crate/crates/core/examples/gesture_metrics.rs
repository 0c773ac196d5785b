//! Objective metrics on ground-truth motion, a perturbed copy and noise.
//!
//! A feature autoencoder is trained on one part of the corpus. The other
//! part is the reference, and each candidate set is scored against it.

use gesture_tokens::metrics::{
    beat_consistency, diversity, evaluate_motion, fgd, fit_gaussian, train_feature_extractor, wrist_speed_ratio,
    FeatureConfig, MetricConfig,
};
use gesture_tokens::motion::{extract_windows, rot6d, synth_corpus, MotionSequence, SynthConfig, FPS, POSE_DIM};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise_like(seq: &MotionSequence, rng: &mut ChaCha8Rng) -> MotionSequence {
    let mut poses = Vec::with_capacity(seq.poses.len());
    for _ in 0..seq.poses.len() / 6 {
        let v: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = rot6d::orthonormalize(&v).unwrap_or([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        poses.extend(r.map(|x| x as f32));
    }
    MotionSequence { poses, ..seq.clone() }
}

fn delayed(seq: &MotionSequence, frames: usize) -> MotionSequence {
    let mut poses = seq.poses[..frames * POSE_DIM].to_vec();
    poses.extend_from_slice(&seq.poses[..seq.poses.len() - frames * POSE_DIM]);
    MotionSequence { poses, ..seq.clone() }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let corpus = synth_corpus(&SynthConfig { sequences: 12, ..SynthConfig::default() }, 9)?;
    let (train, rest) = corpus.sequences.split_at(8);
    let (reference, candidates) = rest.split_at(2);
    let clips: Vec<_> = train.iter().flat_map(extract_windows).collect();
    let cfg = FeatureConfig { epochs: 10, ..FeatureConfig::default() };
    let (extractor, curve) = train_feature_extractor(&clips, &cfg, 9)?;
    println!("feature autoencoder mse {:.4} → {:.4}", curve.initial, curve.epochs.last().copied().unwrap_or(f64::NAN));

    let ref_stats = fit_gaussian(&extractor.features(&reference.iter().flat_map(extract_windows).collect::<Vec<_>>())?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let sets: [(&str, Vec<MotionSequence>); 3] = [
        ("ground truth", candidates.to_vec()),
        ("delayed 0.5 s", candidates.iter().map(|s| delayed(s, (FPS / 2.0) as usize)).collect()),
        ("noise", candidates.iter().map(|s| noise_like(s, &mut rng)).collect()),
    ];
    for (name, set) in &sets {
        let stats = fit_gaussian(&extractor.features(&set.iter().flat_map(extract_windows).collect::<Vec<_>>())?)?;
        let seq = &set[0];
        let beats: Vec<f64> = seq.beats.iter().flatten().map(|&t| t as f64).collect();
        let beat = beat_consistency(seq, &beats, 0.1)?;
        println!(
            "{name:>14}: fgd {:>8.3}  diversity {:.3}  beat {:.3} (mean gap {:.3}s)  wrist ratio {:.2}",
            fgd(&stats, &ref_stats)?,
            diversity(seq, 40)?,
            beat.score,
            beat.mean_distance,
            wrist_speed_ratio(seq, &reference[0])?
        );
    }

    let report = evaluate_motion(&extractor, reference, candidates, &MetricConfig::default(), "")?;
    print!("{}", report.to_text());
    Ok(())
}
