//! Run manifests: one JSON file per command under `<out>/manifests/`,
//! listing what the command read and wrote with SHA-256 checksums.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Option<PathBuf>,
    pub seed: u64,
    pub paper_scale: bool,
    /// SHA-256 of the resolved configuration as TOML.
    pub config_sha256: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
}

pub fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

pub fn manifest_path(out: &Path, command: &str) -> PathBuf {
    out.join("manifests").join(format!("{command}.json"))
}

impl RunManifest {
    pub fn load(out: &Path, command: &str) -> Result<Self> {
        let path = manifest_path(out, command);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn write(&self, out: &Path) -> Result<PathBuf> {
        let path = manifest_path(out, &self.command);
        fs::create_dir_all(path.parent().expect("manifest has a parent"))
            .with_context(|| format!("creating {}", path.display()))?;
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

/// Resolves an upstream artifact: it must be listed in the producing
/// command's manifest and still match the recorded checksum.
pub fn require(out: &Path, producer: &str, rel: &str) -> Result<(PathBuf, Artifact)> {
    let path = out.join(rel);
    let hint = format!("run `mciprog {producer}` with the same --out first");
    let manifest = match RunManifest::load(out, producer) {
        Ok(m) => m,
        Err(_) => bail!("missing {rel}: no `{producer}` run found in {}; {hint}", out.display()),
    };
    let Some(recorded) = manifest.outputs.iter().find(|a| a.path == rel) else {
        bail!("missing {rel}: not produced by the last `{producer}` run; {hint}");
    };
    if !path.exists() {
        bail!("missing {rel}; {hint}");
    }
    let actual = file_sha256(&path)?;
    if actual != recorded.sha256 {
        bail!("{rel} changed since `{producer}` wrote it; re-run `mciprog {producer}`");
    }
    Ok((path, recorded.clone()))
}
