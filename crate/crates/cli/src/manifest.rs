//! Run manifest, file checksums and the output-directory lock.

use arnold_core::config::Stage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

pub const MANIFEST: &str = "manifest.json";
pub const LOCK: &str = ".arnold.lock";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ran,
    Cached,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub status: Status,
    /// sha256 of the stage's canonical inputs.
    pub key: String,
    pub seconds: f64,
    pub outputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    /// sha256 of the config file bytes.
    pub config_hash: String,
    pub config_path: String,
    pub stages: Vec<StageRecord>,
    pub files: Vec<FileRecord>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> io::Result<(String, u64)> {
    let mut f = File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    let mut n_total = 0u64;
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        n_total += n as u64;
        h.update(&buf[..n]);
    }
    Ok((h.finalize().iter().map(|b| format!("{b:02x}")).collect(), n_total))
}

impl RunManifest {
    pub fn load(dir: &Path) -> Option<RunManifest> {
        let text = fs::read_to_string(dir.join(MANIFEST)).ok()?;
        serde_json::from_str(&text).ok()
    }

    pub fn record(&self, stage: Stage) -> Option<&StageRecord> {
        self.stages.iter().find(|r| r.stage == stage)
    }

    /// Replaces the record of the same stage, keeping stages in pipeline order.
    pub fn upsert(&mut self, rec: StageRecord) {
        self.stages.retain(|r| r.stage != rec.stage);
        self.stages.push(rec);
        self.stages.sort_by_key(|r| r.stage);
    }

    /// Recomputes the file registry from the outputs of every recorded stage.
    pub fn refresh_files(&mut self, dir: &Path) -> io::Result<()> {
        let mut paths: Vec<&String> = self.stages.iter().flat_map(|r| &r.outputs).collect();
        paths.sort();
        paths.dedup();
        let mut files = Vec::with_capacity(paths.len());
        for p in paths {
            let (sha256, bytes) = file_sha256(&dir.join(p))?;
            files.push(FileRecord { path: p.clone(), sha256, bytes });
        }
        self.files = files;
        Ok(())
    }

    /// Every listed file exists and matches its checksum; returns the offending paths.
    pub fn validate(&self, dir: &Path) -> Vec<String> {
        self.files
            .iter()
            .filter(|f| !matches!(file_sha256(&dir.join(&f.path)), Ok((h, n)) if h == f.sha256 && n == f.bytes))
            .map(|f| f.path.clone())
            .collect()
    }

    /// A stage's outputs are still on disk with the recorded checksums.
    pub fn outputs_intact(&self, dir: &Path, rec: &StageRecord) -> bool {
        rec.outputs.iter().all(|p| match self.files.iter().find(|f| &f.path == p) {
            Some(f) => matches!(file_sha256(&dir.join(p)), Ok((h, _)) if h == f.sha256),
            None => false,
        })
    }

    pub fn save(&self, dir: &Path) -> io::Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(io::Error::other)?;
        fs::write(dir.join(MANIFEST), text + "\n")
    }
}

/// Exclusive ownership of an output directory for the lifetime of the value.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> io::Result<DirLock> {
        let path = dir.join(LOCK);
        let mut f = OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            if e.kind() == io::ErrorKind::AlreadyExists {
                io::Error::new(e.kind(), format!("{} exists: another run owns this directory (remove the file if it is stale)", path.display()))
            } else {
                e
            }
        })?;
        writeln!(f, "{}", std::process::id())?;
        Ok(DirLock { path })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> PathBuf {
        let d = std::env::temp_dir().join(format!("arnold-manifest-{name}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&d);
        fs::create_dir_all(&d).unwrap();
        d
    }

    #[test]
    fn sha256_of_known_input() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn checksums_detect_edits() {
        let d = tmp("edit");
        fs::write(d.join("a.csv"), "x\n1\n").unwrap();
        let mut m = RunManifest { tool_version: "0".into(), config_hash: "h".into(), config_path: "c".into(), stages: vec![], files: vec![] };
        m.upsert(StageRecord { stage: Stage::Melnikov, status: Status::Ran, key: "k".into(), seconds: 0.0, outputs: vec!["a.csv".into()], message: None });
        m.refresh_files(&d).unwrap();
        assert!(m.validate(&d).is_empty());
        assert!(m.outputs_intact(&d, &m.stages[0]));
        fs::write(d.join("a.csv"), "x\n2\n").unwrap();
        assert_eq!(m.validate(&d), vec!["a.csv".to_string()]);
        assert!(!m.outputs_intact(&d, &m.stages[0]));
        fs::remove_dir_all(&d).unwrap();
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let d = tmp("lock");
        let a = DirLock::acquire(&d).unwrap();
        assert!(DirLock::acquire(&d).is_err());
        drop(a);
        assert!(DirLock::acquire(&d).is_ok());
        fs::remove_dir_all(&d).unwrap();
    }

    #[test]
    fn upsert_keeps_pipeline_order() {
        let mut m = RunManifest { tool_version: "0".into(), config_hash: "h".into(), config_path: "c".into(), stages: vec![], files: vec![] };
        for st in [Stage::Chain, Stage::Model, Stage::Chain] {
            m.upsert(StageRecord { stage: st, status: Status::Ran, key: String::new(), seconds: 0.0, outputs: vec![], message: None });
        }
        assert_eq!(m.stages.iter().map(|r| r.stage).collect::<Vec<_>>(), vec![Stage::Model, Stage::Chain]);
    }
}
