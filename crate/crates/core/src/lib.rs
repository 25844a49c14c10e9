//! Multi-source acoustic localization built on Euclidean distance matrices.
//!
//! The crate estimates 3D source positions (spatially distributed arrays) and
//! directions of arrival (compact arrays) from candidate TDOAs extracted with
//! GCC-PHAT. The search over candidate combinations is driven by the
//! eigenvalues of Gram matrices derived from EDMs: for positions a single
//! distance variable per combination is scanned, for DOAs no continuous
//! search is needed at all. SRP-PHAT grid searches are provided as baselines,
//! together with a deterministic scenario simulator and an evaluation
//! harness.
//!
//! Coordinates follow one convention throughout: a [`MicArray`] stores
//! centroid-centered microphone positions, and every estimator returns
//! results in that centered frame. TDOAs between microphone `m` and the
//! reference microphone are `(d_m - d_ref) / c`, i.e. positive when `m` is
//! farther from the source.
//!
//! With the default `parallel` feature the per-combination searches, SRP grid
//! evaluations and experiment batches run on rayon; without it every loop
//! runs sequentially and produces identical results.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod doa;
mod error;
pub mod eval;
pub mod linalg;
mod par;
pub mod pipeline;
pub mod position;
pub mod signal;
pub mod sim;
pub mod srp;
pub mod tdoa;
pub mod wav;

pub use error::{Error, Result};
pub use linalg::{Edm, GramEval, MicArray, ProcrustesMap};
pub use nalgebra;
pub use par::is_parallel;

/// Speed of sound used when nothing else is configured, in m/s.
pub const DEFAULT_SPEED_OF_SOUND: f64 = 343.0;
