//! Atomic file output, content hashes and provenance records.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::FeatureCorpus;

/// Writes `bytes` to `path` through a temporary file in the same directory
/// followed by a rename, creating parent directories as needed.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(std::io::Error::other)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Content hash of a corpus: header fields, shot layout and every feature
/// value in storage order.
pub fn corpus_hash(corpus: &FeatureCorpus) -> String {
    let mut h = Sha256::new();
    h.update((corpus.dim as u64).to_le_bytes());
    h.update((corpus.modality_split as u64).to_le_bytes());
    h.update(corpus.window.frames.to_le_bytes());
    h.update(corpus.window.stride.to_le_bytes());
    h.update(corpus.fps.to_le_bytes());
    h.update(corpus.split.as_str().as_bytes());
    for scene in &corpus.scenes {
        h.update((scene.scene_id.len() as u64).to_le_bytes());
        h.update(scene.scene_id.as_bytes());
        for sf in &scene.shots {
            h.update(sf.shot.shot_id.to_le_bytes());
            h.update(sf.shot.start_frame.to_le_bytes());
            h.update(sf.shot.end_frame.to_le_bytes());
            for x in sf.features.as_slice() {
                h.update(x.to_le_bytes());
            }
        }
    }
    hex::encode(h.finalize())
}

/// Sidecar record describing how an output was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config: serde_json::Value,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub corpus_hashes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_hash: Option<String>,
}

impl Provenance {
    pub fn new(command: &str, seed: u64, config: serde_json::Value) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").to_owned(),
            version: env!("CARGO_PKG_VERSION").to_owned(),
            command: command.to_owned(),
            seed,
            config,
            corpus_hashes: Vec::new(),
            model_hash: None,
        }
    }

    /// `<file>.provenance.json` next to `output`.
    pub fn sidecar_path(output: &Path) -> PathBuf {
        let mut name = output
            .file_name()
            .map(|n| n.to_os_string())
            .unwrap_or_default();
        name.push(".provenance.json");
        output.with_file_name(name)
    }

    pub fn write_beside(&self, output: &Path) -> std::io::Result<()> {
        write_json_atomic(&Self::sidecar_path(output), self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nested/out.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        let leftovers = std::fs::read_dir(p.parent().unwrap()).unwrap().count();
        assert_eq!(leftovers, 1);
    }

    #[test]
    fn sidecar_name() {
        let p = Provenance::sidecar_path(Path::new("a/b/report.csv"));
        assert_eq!(p, Path::new("a/b/report.csv.provenance.json"));
    }
}
