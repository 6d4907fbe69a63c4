//! Sparse Modular Activation and SeqBoat sequence models.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`], [`fft`], [`autodiff`]: a small double-precision tensor engine
//!   with define-by-run reverse-mode differentiation and FFT causal convolution.
//! - [`routing`]: the latent configurator, compress/extract, and confidence-weighted aggregation.
//! - [`ssm`]: the multi-dimensional damped EMA in convolution and recurrent form.
//! - [`gau`]: the gated attention unit with full, windowed, and streaming attention.
//! - [`model`]: SeqBoat layers and stacks, parallel and streaming execution, checkpoints.
//! - [`train`], [`tasks`]: optimisation, losses, gradient checking, synthetic tasks.
//! - [`analysis`], [`cli`]: activation traces, attention spans, FLOP benchmarks, commands.

pub mod analysis;
pub mod autodiff;
pub mod cli;
pub mod config;
pub mod error;
pub mod fft;
pub mod gau;
pub mod model;
pub mod params;
pub mod routing;
pub mod ssm;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
