//! Discrete gesture tokens for co-speech gesture synthesis.
//!
//! Two trainable stages share a small from-scratch numeric substrate:
//!
//! 1. [`rqvae`]: a convolutional autoencoder with a residual-quantized
//!    bottleneck learns a codebook of gesture tokens from 64-frame pose clips.
//! 2. [`prior`]: a temporal transformer plus depth transformer model the
//!    token stacks autoregressively, conditioned on speech audio and text;
//!    top-k sampling turns one speech input into many plausible gestures.
//!
//! [`motion`] holds pose encoding, windowing and the synthetic corpus,
//! [`metrics`] the objective evaluation, and [`cli`] the command surface and
//! file formats behind the `gtk` binary.

pub mod cli;
pub mod metrics;
pub mod motion;
pub mod nn;
pub mod prior;
pub mod rng;
pub mod rqvae;
pub mod tensor;
