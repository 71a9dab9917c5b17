use std::path::Path;

use sgee_core::montecarlo::StudyConfig;

use crate::CliError;

/// Reads a study configuration: a `[sim]` table mirroring the simulation
/// design and an optional `[fit]` table. Unknown or mistyped keys are
/// reported with their location.
pub fn load_study_config(path: &Path) -> Result<StudyConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
    let cfg: StudyConfig =
        toml::from_str(&text).map_err(|e| CliError::Input(format!("invalid config {}: {e}", path.display())))?;
    cfg.sim.check().map_err(|e| CliError::Input(format!("invalid config {}: {e}", path.display())))?;
    Ok(cfg)
}
