//! Command-line driver around `sves-core`.
//!
//! Verbs: `sft` trains and decomposes the adapters, `align` runs the
//! distributed search over singular-value deltas, `worker` serves jobs for
//! a socket coordinator, `bench` runs optimizer benchmarks and
//! `plot-data` merges metrics from several runs.

pub mod align;
pub mod artifacts;
pub mod bench;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod plot;
pub mod sft;
pub mod worker;

pub use config::RunConfig;
pub use error::CliError;
