//! Reproducibility record written next to every command's outputs.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct InputFile {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunRecord<'a, C: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub core_version: &'static str,
    pub command: &'a str,
    pub config: &'a C,
    pub inputs: Vec<InputFile>,
    pub status: &'a str,
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// Writes `run.json` into `out_dir`. No timestamps, so identical runs give
/// identical records.
pub fn write<C: Serialize>(
    out_dir: &Path,
    command: &str,
    config: &C,
    inputs: &[&Path],
    status: &str,
) -> Result<()> {
    let inputs = inputs
        .iter()
        .map(|p| {
            Ok(InputFile {
                path: p.to_path_buf(),
                sha256: hash_file(p)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let rec = RunRecord {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        core_version: glyph_align::VERSION,
        command,
        config,
        inputs,
        status,
    };
    let path = out_dir.join("run.json");
    std::fs::write(&path, serde_json::to_string_pretty(&rec)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}
