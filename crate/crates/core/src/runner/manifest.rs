//! Run manifest: what ran, with which inputs, and what it produced.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::spectral::JobSeeds;

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn config_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum JobStatus {
    Completed,
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: String,
    pub status: JobStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seeds: Option<JobSeeds>,
    pub artifacts: Vec<String>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub master_seed: u64,
    pub software_version: String,
    pub jobs: Vec<JobRecord>,
    /// Files written by the finalizer.
    pub artifacts: Vec<String>,
    pub warnings: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, config_bytes: &[u8], master_seed: u64) -> Self {
        Self {
            command: command.into(),
            config_hash: config_hash(config_bytes),
            master_seed,
            software_version: env!("CARGO_PKG_VERSION").into(),
            jobs: Vec::new(),
            artifacts: Vec::new(),
            warnings: Vec::new(),
        }
    }

    pub fn failed_jobs(&self) -> usize {
        self.jobs
            .iter()
            .filter(|j| matches!(j.status, JobStatus::Failed { .. }))
            .count()
    }
}

/// Owns the manifest file and rewrites it after every appended record.
#[derive(Debug)]
pub struct ManifestWriter {
    pub manifest: RunManifest,
    path: PathBuf,
}

impl ManifestWriter {
    pub fn create(dir: &Path, manifest: RunManifest) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let w = Self {
            manifest,
            path: dir.join(MANIFEST_FILE),
        };
        w.flush()?;
        Ok(w)
    }

    pub fn push_job(&mut self, record: JobRecord) -> Result<()> {
        self.manifest.jobs.push(record);
        self.flush()
    }

    pub fn push_artifact(&mut self, name: impl Into<String>) -> Result<()> {
        self.manifest.artifacts.push(name.into());
        self.flush()
    }

    pub fn flush(&self) -> Result<()> {
        let tmp = self.path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(&self.manifest)?)?;
        fs::rename(&tmp, &self.path)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_sha256_hex() {
        assert_eq!(
            config_hash(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn writer_persists_each_record() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = ManifestWriter::create(dir.path(), RunManifest::new("meanfield", b"{}", 3)).unwrap();
        w.push_job(JobRecord {
            id: "r0".into(),
            status: JobStatus::Failed { error: "boom".into() },
            seeds: None,
            artifacts: vec![],
            seconds: 0.0,
        })
        .unwrap();
        let back: RunManifest =
            serde_json::from_slice(&fs::read(dir.path().join(MANIFEST_FILE)).unwrap()).unwrap();
        assert_eq!(back.jobs.len(), 1);
        assert_eq!(back.failed_jobs(), 1);
    }
}
