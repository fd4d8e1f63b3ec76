//! Output files and the per-command manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{io_err, CliResult};

pub const MANIFEST: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn to_pretty_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    write_bytes(path, to_pretty_json(value).as_bytes())
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = std::io::BufWriter::new(file);
    for r in rows {
        let line = serde_json::to_string(r).expect("serializable");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

#[derive(Serialize)]
struct ArtifactEntry {
    file: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a, S: Serialize> {
    command: &'a str,
    config_hash: &'a str,
    settings: &'a S,
    artifacts: Vec<ArtifactEntry>,
}

/// Record every artifact of a command with its digest. Contains nothing
/// time-dependent, so identical runs produce identical manifests.
pub fn write_manifest<S: Serialize>(
    dir: &Path,
    command: &str,
    config_hash: &str,
    settings: &S,
    files: &[PathBuf],
) -> CliResult<()> {
    let mut artifacts = Vec::new();
    for f in files {
        let bytes = fs::read(f).map_err(io_err(f))?;
        artifacts.push(ArtifactEntry {
            file: f
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = Manifest {
        command,
        config_hash,
        settings,
        artifacts,
    };
    write_json(&dir.join(MANIFEST), &manifest)
}

/// Hash of a settings value's canonical JSON.
pub fn settings_hash<S: Serialize>(settings: &S) -> String {
    sha256_hex(serde_json::to_string(settings).expect("serializable").as_bytes())
}
