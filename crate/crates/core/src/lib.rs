//! Bi-encoder training for extreme multi-label retrieval with auxiliary
//! pair classifiers, threshold-consistent margins and coverage-oriented
//! evaluation.
//!
//! Everything runs on a small hand-written reverse-mode tape
//! ([`diffmath`]) so every gradient can be checked against finite
//! differences.

pub mod data_io;
pub mod diffmath;
pub mod encoder;
pub mod evaluation;
pub mod gradsuite;
pub mod losses;
pub mod mining;
pub mod model;
pub mod pair_reps;
pub mod trainer;
