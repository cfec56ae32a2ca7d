//! Minimal reverse-mode differentiable tensor engine.
//!
//! A `Tape` records a dynamic graph of `ArrayD`-valued nodes as the forward
//! pass runs; `backward` replays it in reverse. Everything is single-threaded
//! per tape and deterministic: the per-row loops in attention and layer norm
//! accumulate in a fixed order, which is what makes prefix re-computation
//! bit-identical to full-sequence computation (see the pipeline tests).

mod ops;
mod tape;

pub mod gradcheck;
pub mod optim;

pub use gradcheck::{grad_check, GradReport};
pub use optim::{clip_grad_norm, lr_schedule, AdamW, OptimizerState};
pub use tape::{Gradients, Tape, Var};
