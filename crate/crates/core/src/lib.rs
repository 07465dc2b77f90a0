//! Probing harness for document-level information-extraction representations.
//!
//! The pipeline reads an annotated corpus ([`corpus`]), pairs it with stored
//! encoder activations ([`embedstore`]), derives labelled probing datasets
//! ([`taskgen`]), trains attention-pooled probes on them ([`probe`]) and
//! sweeps tasks, layers and seeds into result tables ([`runner`]).

pub mod corpus;
pub mod embedstore;
pub mod features;
pub mod probe;
pub mod runner;
pub mod taskgen;
