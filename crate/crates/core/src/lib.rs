//! Activation steering for a small vision-language transformer.
//!
//! The crate implements the full pipeline behind trusted-intervention
//! experiments at desk scale:
//!
//! - [`scene`] generates synthetic annotated patch-grid images and balanced
//!   yes/no object-presence QA datasets (random / popular / adversarial
//!   negative sampling), with an optional language-prior skew.
//! - [`model`] is a from-scratch decoder-only transformer over concatenated
//!   visual and text tokens, with per-head activation capture and per-head
//!   additive bias hooks, plus a deterministic training loop.
//! - [`corrupt`] applies forward-diffusion Gaussian noising to whole images
//!   or to annotated object regions.
//! - [`shiftvec`] builds trusted/untrusted pairs, extracts last-token
//!   per-head activations and reduces them to mean shift vectors.
//! - [`probes`] fits one linear max-margin classifier per attention head
//!   (2-fold CV at the pair level) and selects the top-K heads.
//! - [`steer`] composes shift vectors, head sets and intensities into the
//!   additive head bias used during inference.
//! - [`evalkit`] computes confusion-matrix metrics, runs evaluations and the
//!   hyperparameter grid search, and benchmarks inference latency.
//!
//! Everything is deterministic under a seed: batch work fans out through
//! [`par`] (rayon when the `parallel` feature is enabled, plain iterators
//! otherwise) and always reduces in input order.

pub mod artifact;
pub mod corrupt;
pub mod error;
pub mod evalkit;
pub mod model;
pub mod numerics;
pub mod par;
pub mod probes;
pub mod scene;
pub mod shiftvec;
pub mod steer;
pub mod vocab;

pub use error::{Error, Result};
