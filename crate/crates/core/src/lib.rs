//! Dual-level knowledge graph retrieval for domain question answering.
//!
//! The general knowledge base pairs a chapter tree of snippets with a triple
//! graph; mapping tables tie triples to snippets (M1) and to case reasoning
//! chains (M2). See the crate README for the command-line workflow.

pub mod corpus;
pub mod engine;
pub mod evalkit;
pub mod ids;
pub mod kg;
pub mod personalize;
pub mod providers;
pub mod retrieval;
pub mod store;
