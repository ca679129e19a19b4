use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use unlearn_core::{CoreError, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
const LOCK_FILE: &str = ".manifest.lock";

/// One append-only row per pipeline stage invocation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRow {
    pub stage: String,
    /// Seconds of wall time the stage took.
    pub wall_secs: f64,
    /// Effective configuration echoed for provenance.
    pub config: serde_json::Value,
    /// Input paths with their content hashes, when hashed.
    pub inputs: Vec<(String, String)>,
    /// Output paths relative to the manifest directory.
    pub outputs: Vec<String>,
}

struct LockGuard {
    path: PathBuf,
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn acquire_lock(dir: &Path) -> Result<LockGuard> {
    let path = dir.join(LOCK_FILE);
    for _ in 0..500 {
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => return Ok(LockGuard { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                std::thread::sleep(std::time::Duration::from_millis(10));
            }
            Err(e) => return Err(e.into()),
        }
    }
    Err(CoreError::Io(std::io::Error::new(
        std::io::ErrorKind::TimedOut,
        format!("could not take the manifest lock in {}", dir.display()),
    )))
}

/// Appends one row under an exclusive file lock.
pub fn append_row(dir: &Path, row: &ManifestRow) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let _guard = acquire_lock(dir)?;
    use std::io::Write;
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(dir.join(MANIFEST_FILE))?;
    writeln!(file, "{}", serde_json::to_string(row)?)?;
    Ok(())
}

pub fn read_rows(dir: &Path) -> Result<Vec<ManifestRow>> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut rows = Vec::new();
    for line in std::fs::read_to_string(path)?.lines() {
        rows.push(serde_json::from_str(line)?);
    }
    Ok(rows)
}

/// Files under `dir` that no manifest row claims as an output.
/// The manifest itself and its lock are exempt.
pub fn orphans(dir: &Path) -> Result<Vec<PathBuf>> {
    let rows = read_rows(dir)?;
    let mut claimed: BTreeSet<PathBuf> = BTreeSet::new();
    for row in &rows {
        for out in &row.outputs {
            claimed.insert(dir.join(out));
        }
    }
    let mut found = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(current) = stack.pop() {
        for entry in std::fs::read_dir(&current)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
                if name == MANIFEST_FILE || name == LOCK_FILE {
                    continue;
                }
                if !claimed.contains(&path) {
                    found.push(path);
                }
            }
        }
    }
    found.sort();
    Ok(found)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(outputs: &[&str]) -> ManifestRow {
        ManifestRow {
            stage: "test".into(),
            wall_secs: 0.0,
            config: serde_json::json!({}),
            inputs: vec![],
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn rows_append_and_read_back() {
        let dir = tempfile::tempdir().unwrap();
        append_row(dir.path(), &row(&["a.txt"])).unwrap();
        append_row(dir.path(), &row(&["b.txt"])).unwrap();
        let rows = read_rows(dir.path()).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].outputs, vec!["b.txt"]);
    }

    #[test]
    fn orphan_scan_flags_unclaimed_files() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("claimed.bin"), b"x").unwrap();
        std::fs::write(dir.path().join("stray.bin"), b"y").unwrap();
        append_row(dir.path(), &row(&["claimed.bin"])).unwrap();
        let found = orphans(dir.path()).unwrap();
        assert_eq!(found.len(), 1);
        assert!(found[0].ends_with("stray.bin"));
    }
}
