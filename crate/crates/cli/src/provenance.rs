use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

/// Identifies the run that produced an output file.
#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    /// SHA-256 of the effective configuration serialized as JSON.
    pub config_sha256: String,
    pub seed: u64,
}

impl Provenance {
    pub fn new(command: &'static str, config: &RunConfig) -> Result<Self> {
        let canonical = serde_json::to_vec(config)?;
        let digest = Sha256::digest(&canonical);
        Ok(Self {
            tool: "fieldstat",
            version: env!("CARGO_PKG_VERSION"),
            command,
            config_sha256: digest.iter().map(|b| format!("{b:02x}")).collect(),
            seed: config.seed,
        })
    }

    fn csv_header(&self) -> String {
        format!(
            "# {} {} {}\n# config_sha256: {}\n# seed: {}\n",
            self.tool, self.version, self.command, self.config_sha256, self.seed
        )
    }
}

#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    provenance: &'a Provenance,
    #[serde(flatten)]
    body: &'a T,
}

/// Writes `body` as pretty JSON with a `provenance` field.
pub fn write_json<T: Serialize>(path: &Path, prov: &Provenance, body: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(&Stamped {
        provenance: prov,
        body,
    })?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// Writes a comma-delimited table preceded by `#` provenance lines.
pub fn write_csv<F>(path: &Path, prov: &Provenance, fill: F) -> Result<()>
where
    F: FnOnce(&mut Vec<u8>) -> fieldstat::Result<()>,
{
    let mut bytes = prov.csv_header().into_bytes();
    fill(&mut bytes)?;
    let mut file =
        std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    file.write_all(&bytes)
        .with_context(|| format!("writing {}", path.display()))
}
