//! Continuous sign language recognition on synthetic motion data.
//!
//! The crate bundles a small dense-tensor autodiff engine, a
//! convolutional-recurrent recognizer built around orientation-decoupled
//! long-term motion features, CTC and self-distillation losses with greedy
//! decoding and WER scoring, a deterministic synthetic dataset generator,
//! and a command-line training/evaluation harness.

// index-heavy numeric kernels: strided loops read better with explicit
// indices
#![allow(clippy::needless_range_loop)]
#![allow(clippy::manual_memcpy)]

pub mod data;
pub mod harness;
pub mod kvfile;
pub mod loss;
pub mod model;
pub mod rng;
pub mod tensor;
