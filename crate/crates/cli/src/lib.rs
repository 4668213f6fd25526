//! Operator surface for the detection toolkit: dataset synthesis, training,
//! evaluation, inference, and the ablation matrix.

pub mod ablate;
pub mod commands;
pub mod config;

use tagdet_core::error::Error;

/// Process exit code for an error: 1 usage/config, 2 missing input,
/// 3 numeric fault.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::MissingInput(_) => 2,
        Error::Numeric { .. } => 3,
        _ => 1,
    }
}
