//! Decomposed transformer question answering, desk scale.
//!
//! The crate trains a small span-extraction encoder over a token pair
//! `(question, passage)` and then splits its stack at layer `k`: the lower
//! `k` layers run over question and passage separately, so passage
//! representations can be computed once, stored, and reused across queries,
//! while the upper layers still attend across the joined pair. Supporting
//! pieces: a reverse-mode tape with FLOP instrumentation ([`tensor`]), the
//! full and decomposed encoders ([`encoder`], [`decomposed`]), a binary
//! passage-representation store ([`cache`]), distillation-style fine-tuning
//! and loss-weight search ([`training`]), analytic cost meters ([`metering`])
//! and representation-geometry probes ([`analysis`]).

pub mod analysis;
pub mod cache;
pub mod data;
pub mod decomposed;
pub mod encoder;
pub mod error;
pub mod metering;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Precision, Tensor};
