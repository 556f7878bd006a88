//! Library side of the `ddescent` executable: the run configuration document
//! and one function per subcommand.

pub mod commands;
pub mod config;

pub use commands::{cmd_ingest, cmd_plot, cmd_repro, cmd_sweep, cmd_synth, dry_run, exit_code};
pub use config::{EvalTarget, Overrides, RunConfig};
