//! Run manifests and all-or-nothing output files.

use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tempfile::NamedTempFile;

pub const MANIFEST_FORMAT: &str = "linkwerk-run-manifest";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RunManifest {
    pub format: String,
    pub tool: String,
    pub tool_version: String,
    pub command: String,
    pub args: Vec<String>,
    /// sha256 of the canonical JSON of the effective configuration.
    pub config_digest: String,
    pub seeds: Vec<u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub started_at: String,
    pub finished_at: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn digest_file(path: &Path) -> std::io::Result<FileDigest> {
    Ok(FileDigest { path: path.display().to_string(), sha256: sha256_hex(&std::fs::read(path)?) })
}

fn stamp(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Millis, true)
}

/// Outputs staged next to their targets; nothing becomes visible until
/// [`Outputs::commit`], and dropping without commit removes the temps.
pub struct Outputs {
    staged: Vec<(NamedTempFile, PathBuf)>,
}

impl Outputs {
    pub fn new() -> Self {
        Outputs { staged: Vec::new() }
    }

    pub fn stage(&mut self, target: &Path, bytes: &[u8]) -> std::io::Result<()> {
        let dir = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let mut tmp = NamedTempFile::new_in(dir)?;
        tmp.write_all(bytes)?;
        tmp.as_file().sync_all()?;
        self.staged.push((tmp, target.to_path_buf()));
        Ok(())
    }

    pub fn commit(self) -> std::io::Result<Vec<FileDigest>> {
        let mut out = Vec::new();
        for (tmp, target) in self.staged {
            tmp.persist(&target).map_err(|e| e.error)?;
            out.push(digest_file(&target)?);
        }
        Ok(out)
    }
}

impl Default for Outputs {
    fn default() -> Self {
        Self::new()
    }
}

pub struct ManifestBuilder {
    m: RunManifest,
}

impl ManifestBuilder {
    pub fn start(command: &str, args: Vec<String>) -> Self {
        ManifestBuilder {
            m: RunManifest {
                format: MANIFEST_FORMAT.into(),
                tool: "linkwerk".into(),
                tool_version: env!("CARGO_PKG_VERSION").into(),
                command: command.into(),
                args,
                config_digest: sha256_hex(b"null"),
                seeds: Vec::new(),
                inputs: Vec::new(),
                outputs: Vec::new(),
                started_at: stamp(Utc::now()),
                finished_at: String::new(),
            },
        }
    }

    pub fn config<T: Serialize>(&mut self, cfg: &T) {
        let canonical = serde_json::to_vec(&serde_json::to_value(cfg).expect("config serializes")).expect("value");
        self.m.config_digest = sha256_hex(&canonical);
    }

    pub fn seed(&mut self, s: u64) {
        self.m.seeds.push(s);
    }

    pub fn input(&mut self, path: &Path) -> std::io::Result<()> {
        self.m.inputs.push(digest_file(path)?);
        Ok(())
    }

    /// Commits `outputs` together with `<primary>.manifest.json`.
    pub fn finish(mut self, outputs: Outputs, primary: &Path) -> std::io::Result<RunManifest> {
        let digests = outputs.commit()?;
        self.m.outputs = digests;
        self.m.finished_at = stamp(Utc::now());
        let path = manifest_path(primary);
        let mut extra = Outputs::new();
        let mut text = serde_json::to_string_pretty(&self.m).expect("manifest serializes");
        text.push('\n');
        extra.stage(&path, text.as_bytes())?;
        extra.commit()?;
        Ok(self.m)
    }
}

pub fn manifest_path(primary: &Path) -> PathBuf {
    let mut s = primary.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}
