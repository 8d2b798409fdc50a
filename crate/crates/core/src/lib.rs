//! Adversarial self-supervised learning (ASSL) for semi-supervised
//! skeleton-based action recognition.
//!
//! The crate is organised bottom-up:
//!
//! * [`data`]: skeleton sequences, JSON-lines I/O, stratified label splits,
//!   frame sampling, masking and a synthetic motion corpus.
//! * [`tape`]: a small reverse-mode autodiff tape over `f64` matrices.
//! * [`nn`] / [`models`]: recurrent encoder/decoder, translation layer,
//!   classifier, aggregation perceptron and discriminator.
//! * [`neighborhood`]: feature bank, exact KNN, attention-weighted local
//!   centres and positive-neighbour selection.
//! * [`losses`]: every objective term and the composed total loss.
//! * [`baselines`]: pseudo-labels, VAT, entropy minimisation and S4L.
//! * [`gradcheck`]: finite-difference verification of tape gradients.
//! * [`trainer`]: batching, the alternating min-max step, experiments,
//!   evaluation, ablations and embedding export.

pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod models;
pub mod neighborhood;
pub mod nn;
pub mod optim;
pub mod plot;
pub mod seed;
pub mod tape;
pub mod trainer;

pub use error::{Error, Result};
