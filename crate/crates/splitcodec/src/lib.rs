//! Learned lossy codec for intermediate representations of decoder-only
//! transformers.
//!
//! Split inference runs the first `S` transformer blocks on one device and
//! the rest on another. In between, the latent is quantized and entropy-coded
//! against a learned model: a causal analysis network produces a low-rate
//! hyper-prior, a factorized density codes the hyper-prior, and a causal
//! synthesis network maps the decoded hyper-prior to per-element Gaussian
//! parameters that drive a range coder over the latent. Training minimizes
//! task distortion plus a rate penalty scaled by a Lagrangian weight.
//!
//! The crate also carries the two baseline entropy models used for
//! benchmarking (a Fourier-basis hyper-prior density and a direct-access
//! autoregressive model), a DEFLATE comparison path, a two-process wire
//! protocol, and estimators for the complexity quantities that track rate:
//! empirical Rademacher complexity, a Krylov estimate of the covariance
//! log-determinant, and power-iteration Lipschitz constants.

pub mod error;
pub mod scalar;
pub mod tensor;

pub mod quant;

pub use error::{CodecError, Result};
pub use scalar::{Real, Scalar, PROB_FLOOR, SIGMA_MIN};
