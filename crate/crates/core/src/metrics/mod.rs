//! Objective gesture metrics: Fréchet distance over learned clip features,
//! segment diversity, audio/motion beat consistency and wrist speed.

mod features;
mod frechet;
mod kinematics;

pub use features::{train_feature_extractor, FeatureConfig, FeatureCurve, FeatureExtractor, MIN_FEATURE_CLIPS};
pub use frechet::{fgd, fit_gaussian, GaussianStats};
pub use kinematics::{
    arm_speed, beat_consistency, beat_score, diversity, kinematic_beats, wrist_speed, wrist_speed_ratio, BeatScore,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::motion::{extract_windows, GestureClip, MotionSequence};
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("need at least {needed} samples, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("dimension mismatch: {left} vs {right}")]
    Dimension { left: usize, right: usize },
    #[error("reference motion has zero wrist speed")]
    ZeroReference,
    #[error("invalid metric configuration: {0}")]
    Config(String),
    #[error("shape: {0}")]
    Shape(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    /// Diversity segment length in frames.
    pub segment_len: usize,
    /// Beat kernel width in seconds.
    pub beat_sigma: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            segment_len: 40,
            beat_sigma: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub fgd: f64,
    pub diversity: f64,
    pub beat_consistency: f64,
    /// Mean raw distance from kinematic to nearest audio beat, in seconds.
    pub beat_distance: f64,
    pub wrist_speed_ratio: f64,
    pub reference_clips: usize,
    pub synth_clips: usize,
    pub synth_sequences: usize,
    /// Resolved configuration the report was produced with.
    pub config: String,
}

impl MetricReport {
    /// `key: value` lines followed by the configuration echo.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.rows() {
            s.push_str(&format!("{k}: {v}\n"));
        }
        s.push_str("config:\n");
        for line in self.config.lines() {
            s.push_str(&format!("  {line}\n"));
        }
        s
    }

    /// Tab-separated header and one row.
    pub fn to_tsv(&self) -> String {
        let rows = self.rows();
        let head: Vec<&str> = rows.iter().map(|r| r.0).collect();
        let vals: Vec<String> = rows.iter().map(|r| r.1.clone()).collect();
        format!("{}\n{}\n", head.join("\t"), vals.join("\t"))
    }

    fn rows(&self) -> Vec<(&'static str, String)> {
        vec![
            ("fgd", format!("{:.6}", self.fgd)),
            ("diversity", format!("{:.6}", self.diversity)),
            ("beat_consistency", format!("{:.6}", self.beat_consistency)),
            ("beat_distance", format!("{:.6}", self.beat_distance)),
            ("wrist_speed_ratio", format!("{:.6}", self.wrist_speed_ratio)),
            ("reference_clips", self.reference_clips.to_string()),
            ("synth_clips", self.synth_clips.to_string()),
            ("synth_sequences", self.synth_sequences.to_string()),
        ]
    }
}

fn windows(seqs: &[MotionSequence]) -> Vec<GestureClip> {
    seqs.iter().flat_map(extract_windows).collect()
}

fn total_wrist_speed(seqs: &[MotionSequence]) -> Result<f64, MetricsError> {
    let mut sum = 0.0;
    let mut frames = 0usize;
    for s in seqs {
        sum += wrist_speed(s)? * (s.len() - 1) as f64;
        frames += s.len() - 1;
    }
    Ok(sum / frames.max(1) as f64)
}

/// Scores synthesized sequences against reference motion. Beat consistency
/// uses each synthesized sequence's own audio beats.
pub fn evaluate_motion(
    extractor: &FeatureExtractor,
    reference: &[MotionSequence],
    synth: &[MotionSequence],
    cfg: &MetricConfig,
    config_echo: &str,
) -> Result<MetricReport, MetricsError> {
    if synth.is_empty() || reference.is_empty() {
        return Err(MetricsError::TooFew { needed: 1, got: 0 });
    }
    let (ref_clips, syn_clips) = (windows(reference), windows(synth));
    let a = fit_gaussian(&extractor.features(&ref_clips)?)?;
    let b = fit_gaussian(&extractor.features(&syn_clips)?)?;
    let fgd = fgd(&a, &b)?;
    let mut div = 0.0;
    let (mut beat, mut dist, mut beat_n) = (0.0, 0.0, 0usize);
    for s in synth {
        div += diversity(s, cfg.segment_len)?;
        let beats: Vec<f64> = s.beats.iter().flatten().map(|&t| t as f64).collect();
        let score = beat_consistency(s, &beats, cfg.beat_sigma)?;
        beat += score.score;
        if score.kinematic_beats > 0 {
            dist += score.mean_distance;
            beat_n += 1;
        }
    }
    let reference_speed = total_wrist_speed(reference)?;
    if reference_speed == 0.0 {
        return Err(MetricsError::ZeroReference);
    }
    let n = synth.len() as f64;
    Ok(MetricReport {
        fgd,
        diversity: div / n,
        beat_consistency: beat / n,
        beat_distance: if beat_n > 0 { dist / beat_n as f64 } else { f64::INFINITY },
        wrist_speed_ratio: total_wrist_speed(synth)? / reference_speed,
        reference_clips: ref_clips.len(),
        synth_clips: syn_clips.len(),
        synth_sequences: synth.len(),
        config: config_echo.to_string(),
    })
}
