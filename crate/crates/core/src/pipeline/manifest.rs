//! Run manifest: which files each stage produced, with content digests.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_SCHEMA: &str = "qndsim-manifest/1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TIMINGS_FILE: &str = "timings.json";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path relative to the output directory.
    pub path: String,
    pub schema: String,
    pub sha256: String,
    pub bytes: u64,
}

impl ManifestEntry {
    pub fn describe(out_dir: &Path, name: &str, schema: &str) -> Result<Self> {
        let data = std::fs::read(out_dir.join(name))?;
        Ok(Self {
            path: name.to_string(),
            schema: schema.to_string(),
            sha256: hex::encode(Sha256::digest(&data).as_slice()),
            bytes: data.len() as u64,
        })
    }
}

/// Stage outputs of one configuration. Wall-clock timings are kept in
/// memory and written to a separate file so the manifest itself is
/// reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub tool_version: String,
    pub config_hash: String,
    pub stages: BTreeMap<String, Vec<ManifestEntry>>,
    #[serde(skip)]
    pub timings_s: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(config_hash: &str) -> Self {
        Self {
            schema: MANIFEST_SCHEMA.into(),
            tool_version: TOOL_VERSION.into(),
            config_hash: config_hash.into(),
            stages: BTreeMap::new(),
            timings_s: BTreeMap::new(),
        }
    }

    /// Loads the manifest in `out_dir` if it belongs to the same
    /// configuration and tool version; otherwise starts afresh.
    pub fn load_or_new(out_dir: &Path, config_hash: &str) -> Result<Self> {
        let path = out_dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Self::new(config_hash));
        }
        let text = std::fs::read_to_string(&path)?;
        match serde_json::from_str::<Self>(&text) {
            Ok(m)
                if m.schema == MANIFEST_SCHEMA
                    && m.config_hash == config_hash
                    && m.tool_version == TOOL_VERSION =>
            {
                let mut m = m;
                if let Ok(t) = std::fs::read_to_string(out_dir.join(TIMINGS_FILE)) {
                    m.timings_s = serde_json::from_str(&t).unwrap_or_default();
                }
                Ok(m)
            }
            _ => Ok(Self::new(config_hash)),
        }
    }

    pub fn record(&mut self, stage: &str, entries: Vec<ManifestEntry>, seconds: f64) {
        self.stages.insert(stage.to_string(), entries);
        self.timings_s.insert(stage.to_string(), seconds);
    }

    pub fn files(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.stages.values().flatten()
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(out_dir.join(MANIFEST_FILE), text)?;
        let mut t = serde_json::to_string_pretty(&self.timings_s)?;
        t.push('\n');
        std::fs::write(out_dir.join(TIMINGS_FILE), t)?;
        Ok(())
    }

    /// Checks that every listed file exists with the recorded digest.
    pub fn verify(&self, out_dir: &Path) -> Result<()> {
        for e in self.files() {
            let path = out_dir.join(&e.path);
            if !path.exists() {
                return Err(Error::MissingArtifact(path));
            }
            let now = ManifestEntry::describe(out_dir, &e.path, &e.schema)?;
            if now.sha256 != e.sha256 {
                return Err(Error::StaleInput { path, reason: "content digest changed".into() });
            }
        }
        Ok(())
    }
}
