//! Run directory layout (version 1):
//!
//! ```text
//! run.json           layout version, run kind, training-split positive rate
//! config.json        resolved run configuration
//! seed               the run seed
//! metrics.csv        per-epoch validation rows and a final test row
//! final.{json,bin}   student after the last epoch
//! best.{json,bin}    best-validation-AUC student
//! teacher.{json,bin} final teacher (teacher/student runs)
//! pool_history.csv   per-epoch pool members (dynamic pool runs)
//! state/             resumable training state (teacher/student runs)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::failure::Failure;

pub const LAYOUT_VERSION: u32 = 1;
pub const RUN_INFO: &str = "run.json";
pub const CONFIG: &str = "config.json";
pub const SEED: &str = "seed";
pub const METRICS: &str = "metrics.csv";
pub const FINAL: &str = "final";
pub const BEST: &str = "best";
pub const TEACHER: &str = "teacher";
pub const POOL_HISTORY: &str = "pool_history.csv";
pub const STATE: &str = "state";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub layout_version: u32,
    /// `baseline`, `static` or `dynamic`.
    pub kind: String,
    pub train_positive_rate: f64,
}

pub fn create(out: &Path) -> Result<PathBuf, Failure> {
    fs::create_dir_all(out).map_err(|e| Failure::io(out, e))?;
    Ok(out.to_path_buf())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Failure::io(path, e))
}

pub fn write_header(dir: &Path, info: &RunInfo, cfg: &RunConfig) -> Result<(), Failure> {
    write_json(&dir.join(RUN_INFO), info)?;
    write_json(&dir.join(CONFIG), cfg)?;
    let seed = dir.join(SEED);
    fs::write(&seed, format!("{}\n", cfg.seed)).map_err(|e| Failure::io(&seed, e))
}

pub fn read_info(dir: &Path) -> Result<RunInfo, Failure> {
    let path = dir.join(RUN_INFO);
    let text = fs::read_to_string(&path).map_err(|e| Failure::io(&path, e))?;
    let info: RunInfo = serde_json::from_str(&text)?;
    if info.layout_version != LAYOUT_VERSION {
        return Err(Failure::new(
            "run_dir",
            format!(
                "{}: unsupported layout version {}",
                dir.display(),
                info.layout_version
            ),
        ));
    }
    Ok(info)
}
