//! Reference-based image super-resolution.
//!
//! The crate bundles the pixel toolkit ([`imaging`]), perspective-pair
//! augmentation ([`geometry`]), dataset handling ([`data`]), dense
//! correspondence ([`matching`]), a small reverse-mode autodiff engine
//! ([`tensor`]), the alignment/selection network ([`network`]), the
//! reciprocal two-pass trainer ([`training`]) and the benchmark runner
//! ([`eval`]).

pub mod error;
pub mod data;
pub mod geometry;
pub mod imaging;
pub mod matching;
pub mod tensor;
pub mod network;
pub mod checkpoint;
pub mod config;
pub mod training;
pub mod eval;
pub mod selftest;

pub use error::{Error, Result};
