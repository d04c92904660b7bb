//! Few-shot action recognition over precomputed frame and prompt embeddings.
//!
//! The episode pipeline is: input normalization and positional embedding,
//! motion refinement ([`hsmr`]), prompt-conditioned fusion ([`spm`]),
//! prototype/anchor modulation ([`padm`]) and a softmax over negated sequence
//! distances ([`distances`]). [`engine`] wires these together for training and
//! evaluation on episodes drawn from a [`dataset`] store.

pub mod config;
pub mod dataset;
pub mod distances;
pub mod engine;
pub mod error;
pub mod fusion;
pub mod gradsuite;
pub mod grouping;
pub mod hsmr;
pub mod padm;
pub mod spm;

pub use error::{Error, ErrorKind, Result};
