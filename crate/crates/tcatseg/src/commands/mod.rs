//! Command implementations behind the thin CLI binary: synthetic data
//! generation, training, evaluation, gradient checking, and superpoint
//! dumps. Each command is deterministic given its flags and seed.

pub mod eval;
pub mod grad_check;
pub mod synth;
pub mod train;

pub use eval::{cmd_dump_tcp, cmd_eval, EvalOptions, EvalOutcome};
pub use grad_check::{cmd_grad_check, GradCheckOptions, GradCheckOutcome};
pub use synth::{cmd_synth, SynthOptions};
pub use train::{cmd_train, TrainOptions, TrainOutcome};

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Cloud files of a directory in sorted (deterministic) order.
pub fn list_cloud_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map_or(false, |x| x == "cloud"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Validation(format!(
            "no .cloud files in {}",
            dir.display()
        )));
    }
    Ok(files)
}
