//! Token-merge tokenization and generation toolkit.
//!
//! The crate implements the full mechanism stack of a merge-based visual
//! tokenizer and its autoregressive decoders at desk scale:
//!
//! * [`numerics`] — dense matrix kernels, biased/masked attention, and a
//!   seeded counter-based random stream shared by everything else.
//! * [`tome`] — token merging by bipartite soft matching, with ancestry
//!   tracked in a binary source matrix and per-token size counters.
//! * [`lfq`] — lookup-free quantization onto `{-1,+1}^d` with codebook
//!   usage statistics and the commitment/entropy loss terms.
//! * [`recovery`] — the source-recovery decoder that predicts cluster
//!   assignments from quantized tokens, plus deterministic token expansion.
//! * [`align`] — global alignment loss against a frozen stub teacher.
//! * [`toymodel`] — a deterministic random-weight causal transformer with an
//!   explicit KV-cache interface, used as the generation substrate.
//! * [`mergear`] — duplicate-aware raster decoding with KV-cache
//!   compression, position ledger, and the dedup causal mask.
//! * [`randgen`] — random-order decoding with position-instruction tokens
//!   and recovery-based token expansion.
//! * [`sampler`] — discrete exponential / truncated Gaussian merge-ratio
//!   samplers and the version-specific kept-token mappings.
//!
//! All core math is generic over the scalar type through [`Scalar`];
//! pipelines default to `f32` (see the [`Mat`] alias) while reductions
//! accumulate in the scalar's wider accumulator type.

pub mod acceptance;
pub mod align;
pub mod error;
pub mod io;
pub mod lfq;
pub mod mergear;
pub mod numerics;
pub mod randgen;
pub mod recovery;
pub mod sampler;
pub mod tome;
pub mod toymodel;

pub use error::{Error, Result};
pub use numerics::{Matrix, RandomStream, Scalar};

/// Default pipeline element type.
pub type Mat = Matrix<f32>;
/// Double-precision variant, used mainly by gradient checks.
pub type Mat64 = Matrix<f64>;
