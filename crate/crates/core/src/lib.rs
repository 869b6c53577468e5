//! Boundary-predicting soft pooling for self-supervised speech
//! representation learning.

pub mod alignloss;
pub mod diffcore;
pub mod dsp;
pub mod encoder;
pub mod eval;
pub mod fsutil;
pub mod rng;
pub mod softpool;
pub mod synth;
pub mod trainer;
