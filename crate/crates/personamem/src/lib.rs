//! Persona long-term memory runner: corpus loading, providers, the
//! evaluation pipeline and report writing on top of `personamem-core`.

pub mod config;
pub mod corpus;
pub mod http;
pub mod journal;
pub mod pipeline;
pub mod providers;
pub mod report;
pub mod run;
