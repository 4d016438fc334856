//! Concept unlearning for small conditional denoising diffusion models.
//!
//! The crate trains a conditional DDPM on synthetic 2-D concept distributions, then
//! erases one concept by adversarially aligning its one-step denoised outputs with an
//! anchor concept while projecting away gradient components that conflict with a
//! retaining loss. Distribution-level metrics quantify erasure, retention, and
//! generalisation to an unseen synonym condition.

pub mod concepts;
pub mod diffusion;
pub mod doco;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod harness;
pub mod numgrad;
pub mod util;

pub use error::{Error, Result};
