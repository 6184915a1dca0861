use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use crate::Failure;

pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Identity and layout of one run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub deterministic: bool,
    pub device: String,
    pub dataset: Option<PathBuf>,
    /// Relative paths of the files this run writes.
    pub layout: Vec<String>,
}

impl RunManifest {
    pub fn new(run_dir: &Path, command: &str, seed: u64) -> Self {
        Self {
            run_id: run_dir.file_name().map_or_else(|| "run".to_string(), |n| n.to_string_lossy().into_owned()),
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            deterministic: true,
            device: "cpu".to_string(),
            dataset: None,
            layout: Vec::new(),
        }
    }

    pub fn write(&self, run_dir: &Path) -> anyhow::Result<()> {
        let path = run_dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self)?).with_context(|| format!("writing {}", path.display()))
    }
}

/// `explicit` when given, otherwise the first unused `root/stem[-k]`.
/// The directory is created empty.
pub fn fresh_dir(explicit: Option<&Path>, root: &Path, stem: &str) -> Result<PathBuf, Failure> {
    let dir = match explicit {
        Some(p) => {
            if p.exists() && std::fs::read_dir(p).map(|mut d| d.next().is_some()).unwrap_or(true) {
                return Err(Failure::usage(format!("{} already exists and is not empty", p.display())));
            }
            p.to_path_buf()
        }
        None => {
            let mut candidate = root.join(stem);
            let mut k = 2;
            while candidate.exists() {
                candidate = root.join(format!("{stem}-{k}"));
                k += 1;
            }
            candidate
        }
    };
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display())).map_err(Failure::Runtime)?;
    Ok(dir)
}

/// A directory stem safe on every filesystem.
pub fn slug(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}
