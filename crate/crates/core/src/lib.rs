//! Detecting synthesized images from the internal behavior of a frozen CNN.
//!
//! A backbone network is traced on each image; per-layer activation
//! thresholds fit on a training set turn each trace into a small vector of
//! activated-neuron counts, and a compact MLP classifies that vector as real
//! or fake.

// test oracles index by position on purpose
#![cfg_attr(test, allow(clippy::needless_range_loop))]

pub mod backbone;
pub mod classifier;
pub mod coverage;
pub mod dataset;
pub mod image;
pub mod metrics;
pub mod perturb;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod tensor;
