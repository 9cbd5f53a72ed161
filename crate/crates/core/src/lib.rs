//! Controllable cue generation for play scripts.
//!
//! The crate is organised by pipeline stage:
//!
//! * [`corpus`] parses raw scripts into dialogue and cue lines.
//! * [`textmodel`] is a small decoder-only transformer with an explicit
//!   key/value past and reverse-mode gradients.
//! * [`attributes`] holds the attribute models: linear heads over hidden
//!   states, bag-of-words topics derived from LDA, and emotion labels.
//! * [`steering`] perturbs the key/value past toward an attribute.
//! * [`evalsuite`] implements the similarity and diversity metrics.
//! * [`synthetic`] generates a small two-style corpus for experiments.

pub mod container;
pub mod corpus;
pub mod textmodel;
pub mod attributes;
pub mod steering;
pub mod evalsuite;
pub mod synthetic;
