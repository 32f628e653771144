//! Text-image machine translation with a global view of the whole image and
//! local, reading-ordered slices of its text regions.
//!
//! The crate is organised by stage:
//!
//! * [`imaging`] loads, downsamples and crops images and counts patch tokens.
//! * [`regions`] orders detected text boxes and merges them into slices.
//! * [`prompt`] builds the per-slice prompt with a bounded replay window.
//! * [`orchestrator`] drives a translation backend over one image or a batch.
//! * [`metrics`] computes BLEU, visual-token counts and timing statistics.
//! * [`glod`] curates a global-local training corpus.
//! * [`refmodel`] is a small trainable reference model with region-aware
//!   cross-attention.
//! * [`synth`] renders synthetic text images with known ground truth.
//! * [`http`] adapts the external service contracts to HTTP endpoints.
//! * [`cli`] implements the `glotran` command line.

pub mod cli;
pub mod config;
pub mod glod;
pub mod http;
pub mod imaging;
pub mod metrics;
pub mod orchestrator;
pub mod prompt;
pub mod refmodel;
pub mod regions;
pub mod synth;
