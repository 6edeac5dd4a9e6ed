//! `manifest.json`: the record written into every output directory.
//!
//! It holds no timestamps or host details, so running the same command twice
//! into the same directory leaves every file, the manifest included, byte
//! identical. `argv` is the fully resolved command line (defaults filled in)
//! that `hetattr rerun` replays.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TOOL: &str = "hetattr";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub manifest_version: u32,
    pub tool: String,
    pub tool_version: String,
    pub command: String,
    pub argv: Vec<String>,
    /// Resolved options of the command.
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub output_dir: PathBuf,
    /// Files written next to the manifest, relative to `output_dir`, sorted.
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(CliError::io(path))?;
        let m: RunManifest = serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        if m.manifest_version != MANIFEST_VERSION || m.tool != TOOL {
            return Err(CliError::Validation(format!(
                "{}: not a {TOOL} manifest version {MANIFEST_VERSION}",
                path.display()
            )));
        }
        Ok(m)
    }

    pub fn write(&self) -> Result<(), CliError> {
        let path = self.output_dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(&path, text).map_err(CliError::io(path))
    }
}
