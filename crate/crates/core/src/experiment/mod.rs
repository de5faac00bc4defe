//! Config loading and the commands behind the CLI.

mod commands;
mod config;

pub use commands::{
    ablate, cmd_ablate, cmd_calibrate, cmd_compare, cmd_plan, cmd_run, cmd_window, execute,
    prepare, run_baseline, window_sweep, AblateParam, PreparedRun, RunOutcome, WindowPoint,
};
pub use config::{apply_override, ExperimentConfig, Mode, TauCMode};
