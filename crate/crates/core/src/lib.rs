//! Concept alignment for prototypical-part image classifiers.
//!
//! A prototype bank holds one kernel per channel and a non-negative class
//! head. This crate finds prototypes whose most activated patches fall into
//! two dissimilar groups, splits such a prototype into two channels trained
//! on the separate concepts, and measures the effect on part purity and
//! accuracy. A synthetic generator provides banks with known entanglement.

pub mod bundle;
pub mod detect;
pub mod error;
pub mod exec;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod split;
pub mod synth;

pub use error::{Error, Result};
pub use exec::Execution;
pub use model::{
    classify, corpus_activations, patch_activations, pool_activations, ActivationVector, Corpus,
    ImageRecord, Location, PatchRecord, PrototypeBank,
};
