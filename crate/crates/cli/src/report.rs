use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize)]
pub struct InputFile {
    pub role: &'static str,
    pub path: PathBuf,
    /// SHA-256 over `"blob <len>\0" + bytes`, as git hashes blobs.
    pub blob_sha256: String,
}

pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_input(role: &'static str, path: &Path, bytes: &[u8]) -> InputFile {
    InputFile {
        role,
        path: path.to_path_buf(),
        blob_sha256: blob_hash(bytes),
    }
}

/// The only run-dependent part of a report.
#[derive(Debug, Serialize)]
pub struct Timestamp {
    pub utc: String,
    pub wall_clock_seconds: f64,
}

#[derive(Debug, Serialize)]
pub struct Report {
    pub command: String,
    pub config: Value,
    pub inputs: Vec<InputFile>,
    /// Hash of the concatenated input hashes.
    pub content_hash: String,
    pub result: Value,
    pub timestamp: Timestamp,
}

impl Report {
    pub fn new(command: String, config: Value, inputs: Vec<InputFile>, result: Value, wall: Duration) -> Self {
        let joined: String = inputs.iter().map(|i| i.blob_sha256.as_str()).collect::<Vec<_>>().join("\n");
        Report {
            command,
            config,
            content_hash: blob_hash(joined.as_bytes()),
            inputs,
            result,
            timestamp: Timestamp {
                utc: chrono::Utc::now().to_rfc3339(),
                wall_clock_seconds: wall.as_secs_f64(),
            },
        }
    }

    pub fn emit(&self, out: Option<&Path>) -> std::io::Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("report values are finite JSON");
        text.push('\n');
        match out {
            Some(path) => std::fs::write(path, text),
            None => std::io::stdout().write_all(text.as_bytes()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_is_git_style() {
        // `printf 'hello\n' | git hash-object --object-format=sha256 --stdin`
        assert_eq!(
            blob_hash(b"hello\n"),
            "2cf8d83d9ee29543b34a87727421fdecb7e3f3a183d337639025de576db9ebb4"
        );
        assert_ne!(blob_hash(b""), blob_hash(b" "));
    }
}
