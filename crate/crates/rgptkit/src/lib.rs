//! rgptkit: a desk-scale toolkit for region-level vision-language modelling.
//!
//! The pipeline turns an image plus a set of region annotations into a
//! conversation a small autoregressive decoder can be trained on:
//!
//! 1. [`backbone`] prepares an image (scale to fit, pad to square) and encodes
//!    it into a low-resolution feature grid with a frozen, seeded projection.
//! 2. [`features`] upsamples that grid four-fold, pools it per region
//!    ([`features::pool::mask_pool`]) and globally
//!    ([`features::pool::adaptive_pool`]), and projects both through a shared
//!    two-layer connector into the decoder's embedding space.
//! 3. [`sequence`] assembles chat turns into token/slot sequences where
//!    literal `⟨regionN⟩` markers become region-feature slots, with a loss
//!    mask that supervises assistant responses only.
//! 4. [`model`] holds the end-to-end trainable pipeline: forward, backward,
//!    staged optimization (refinement + connector first, decoder later),
//!    greedy/sampled generation, and candidate scoring.
//! 5. [`datasets`], [`recap`], and [`eval`] cover data ingestion with
//!    deterministic per-class/per-image sampling caps, a two-stage
//!    region recaptioning pipeline with a resumable journal, and the four
//!    evaluation protocols (classification, captioning, referring
//!    comprehension, object-probing).
//!
//! Everything numeric is `f64` and fully deterministic given the configured
//! seed; no call path reads ambient entropy.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod features;
pub mod model;
pub mod recap;
pub mod region;
pub mod seed;
pub mod sequence;
pub mod tokenize;

pub mod nn;

pub use error::{Error, Result};
pub use nn::Activation;
