//! Noise-robust Koopman models for control-affine systems.
//!
//! The pipeline: simulate a ground-truth system ([`systems`]), build noisy
//! training data ([`datagen`]), learn an encoder together with forward and
//! backward linear operators ([`lifting`], [`training`]), fold the two
//! operators into a reduced-bias model ([`operator`]), and use that model
//! for open-loop prediction or receding-horizon tracking ([`mpc`]).
//! [`bench`] holds the metrics and comparison harnesses and [`persist`]
//! the on-disk formats.

pub mod bench;
pub mod datagen;
pub mod error;
pub mod lifting;
pub mod mpc;
pub mod numerics;
pub mod operator;
pub mod persist;
pub mod seed;
pub mod systems;
pub mod training;

pub use error::{Error, Result};
pub use numerics::Mat;
