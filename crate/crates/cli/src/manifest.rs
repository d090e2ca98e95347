use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Complete,
    Failed,
}

/// Timing fields; excluded when comparing manifests of identical runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WallClock {
    pub started_unix_ms: u64,
    pub elapsed_seconds: Option<f64>,
}

/// Record of one command invocation. Written with status `running` before
/// any result file, then rewritten when the command ends.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    /// Input path -> hex sha256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub status: RunStatus,
    pub wall_clock: WallClock,
    #[serde(skip)]
    started: Option<Instant>,
    #[serde(skip)]
    path: PathBuf,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::new(crate::error::EXIT_IO, format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl RunManifest {
    /// Create `out_dir`, hash the inputs (and each labels sidecar that
    /// exists), and write the manifest.
    pub fn begin(
        out_dir: &Path,
        command: &str,
        config: serde_json::Value,
        seeds: Vec<u64>,
        inputs: &[&Path],
        outputs: &[&str],
    ) -> Result<Self, CliError> {
        let mut digests = BTreeMap::new();
        for &input in inputs {
            digests.insert(input.display().to_string(), sha256_file(input)?);
            let sidecar = wfc_core::io::labels_path(input);
            if sidecar.exists() {
                digests.insert(sidecar.display().to_string(), sha256_file(&sidecar)?);
            }
        }
        fs::create_dir_all(out_dir)?;
        let started_unix_ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_millis() as u64);
        let manifest = RunManifest {
            command: command.to_string(),
            config,
            seeds,
            inputs: digests,
            outputs: outputs.iter().map(|o| out_dir.join(o).display().to_string()).collect(),
            status: RunStatus::Running,
            wall_clock: WallClock {
                started_unix_ms,
                elapsed_seconds: None,
            },
            started: Some(Instant::now()),
            path: out_dir.join(MANIFEST_FILE),
        };
        manifest.write()?;
        Ok(manifest)
    }

    pub fn finish(&mut self, status: RunStatus) -> Result<(), CliError> {
        self.status = status;
        self.wall_clock.elapsed_seconds = self.started.map(|s| s.elapsed().as_secs_f64());
        self.write()
    }

    fn write(&self) -> Result<(), CliError> {
        let tmp = self.path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(self)?)?;
        fs::rename(&tmp, &self.path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let mut m: RunManifest = serde_json::from_slice(&fs::read(path)?)?;
        m.path = path.to_path_buf();
        Ok(m)
    }

    /// The manifest without its timing fields, for determinism checks.
    pub fn comparable(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("manifest serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("wall_clock");
        }
        v
    }
}
