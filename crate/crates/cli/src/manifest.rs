//! Per-stage run manifests: what went in, what came out, and with which
//! configuration.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use saeaudit::io::{sha256_file, sha256_hex};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const RUN_MANIFEST: &str = "run-manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub tool_version: String,
    pub config_hash: String,
    /// The configuration slice the stage consumed.
    pub config: Value,
    /// Input path to sha256.
    pub inputs: BTreeMap<String, String>,
    /// Output path, relative to the stage dir, to sha256.
    pub outputs: BTreeMap<String, String>,
}

pub fn config_hash(stage: &str, config: &Value) -> String {
    let canonical = serde_json::to_string(&serde_json::json!({"stage": stage, "config": config}))
        .expect("config serializes");
    sha256_hex(canonical.as_bytes())
}

impl StageManifest {
    pub fn read(stage_dir: &Path) -> Option<Self> {
        let bytes = std::fs::read(stage_dir.join(RUN_MANIFEST)).ok()?;
        serde_json::from_slice(&bytes).ok()
    }

    pub fn write(&self, stage_dir: &Path) -> Result<()> {
        let path = stage_dir.join(RUN_MANIFEST);
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))
    }

    /// True when every recorded output is still present and unchanged.
    pub fn outputs_intact(&self, stage_dir: &Path) -> bool {
        self.outputs
            .iter()
            .all(|(rel, sha)| sha256_file(&stage_dir.join(rel)).is_ok_and(|s| &s == sha))
    }
}

/// Hashes every regular file under `dir`, keyed by its `/`-separated path
/// relative to `dir`, skipping the run manifest.
pub fn hash_tree(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).with_context(|| format!("listing {}", d.display()))? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let rel = path.strip_prefix(dir).expect("under dir");
            let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            if key == RUN_MANIFEST {
                continue;
            }
            out.insert(key, sha256_file(&path)?);
        }
    }
    Ok(out)
}
