//! Long-term persona memory for multi-session dialogue.
//!
//! The crate is `no_std` with `alloc`. It holds the data model, the
//! contradiction graph and its refinement loop, retrieval, prompt rendering
//! and evaluation metrics. Provider traits abstract every model call; the
//! [`mock`] module has deterministic implementations for tests and dry runs.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod contradiction;
pub mod expansion;
pub mod generation;
pub mod ingest;
pub mod memory;
pub mod metrics;
pub mod mock;
pub mod persona;
pub mod prompt;
pub mod provider;
pub mod refinery;

pub use contradiction::{build_graph, ContradictionGraph, GraphOptions, PairScoreCache, ThresholdMode, DEFAULT_MU};
pub use memory::{apply_policy, retrieve, MemoryEvent, MemoryStore, Policy};
pub use persona::{Persona, PersonaFactory, PersonaId, RelationType, Speaker, Strategy};
pub use provider::{ChatProvider, CommonsenseProvider, EmbeddingProvider, NliProvider, ProviderError};
pub use refinery::{run_algorithm1, Refiner};
