//! File formats and the experiment harness around `fwdedit-core`:
//! binary checkpoints, corpus JSONL, TOML run configs, CSV/JSON outputs
//! with manifests, and the `fwdedit` command line tool.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod corpus_io;
pub mod error;
pub mod output;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::RunConfig;
pub use error::{FwdError, Result};
