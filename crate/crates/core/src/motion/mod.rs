//! Pose representation, skeleton, windowing and the synthetic corpus.

pub mod io;
pub mod rot6d;
pub mod sequence;
pub mod skeleton;
pub mod synth;

pub use sequence::{
    dataset_stats, extract_windows, resample_20fps, DatasetStats, GestureClip, MotionSequence, CLIP_FRAMES,
    CLIP_SAMPLES, FPS, PAD_WORD, SAMPLES_PER_FRAME, SAMPLE_RATE, VARIANCE_FLOOR, WINDOW_STEP,
};
pub use skeleton::{SkeletonSpec, JOINTS, POSE_DIM, ROT_DIM};
pub use synth::{synth_corpus, Handedness, ModeBank, Occurrence, SynthConfig, SynthCorpus};

#[derive(Debug, thiserror::Error)]
pub enum MotionError {
    #[error("not a proper rotation (orthogonality error {orthogonality:.3e}, det {det:.6})")]
    NotRotation { orthogonality: f64, det: f64 },
    #[error("degenerate rotation encoding: {0}")]
    Degenerate(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("source frame rate {0} fps is below 20 fps")]
    FrameRate(f64),
    #[error("need at least {needed} clips, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("invalid generator settings: {0}")]
    Config(String),
    #[error("malformed motion file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
