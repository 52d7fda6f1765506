//! Text-aware single-image specular highlight removal.
//!
//! The crate covers the whole pipeline: synthesizing paired highlight/clean
//! text images ([`synthgen`]), the two-stage detection + removal networks
//! and their patch discriminator ([`nets`]), the composite training
//! objective ([`losses`]), the optimization loop ([`trainer`]), and the
//! OCR-driven measurement set ([`evaluator`]).

pub mod error;
pub mod evaluator;
pub mod imaging;
pub mod nets;
pub mod losses;
pub mod optim;
pub mod tensorio;
pub mod trainer;
pub mod synthgen;

pub use error::{Error, ErrorClass, Result};
