//! Experiment orchestration for the `chaoslab` binary: configuration parsing
//! and the canned recipes.

pub mod config;
pub mod recipes;

pub use config::{parse_config, ConfigError, ConfigErrors, ExperimentConfig};
pub use recipes::{run_recipe, Audit, Inputs, Outcome, Recipe, Status};

/// Process exit code for an error: 2 for configuration problems, 3 for
/// numerical failures, 1 for I/O and anything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigErrors>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<chaoslab::Error>() {
            return match e {
                chaoslab::Error::Io(_) => 1,
                e if e.is_numerical() => 3,
                _ => 2,
            };
        }
    }
    1
}

pub const EXIT_AUDIT: i32 = 4;
