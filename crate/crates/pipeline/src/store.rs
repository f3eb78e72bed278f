use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{parse_jsonl, to_jsonl};
use crate::PipelineError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub file: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRef {
    pub source: Option<String>,
    pub sha256: String,
    pub reports: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunCounts {
    pub reports: usize,
    pub succeeded: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub corpus: CorpusRef,
    pub prompt_mode: String,
    pub profile: serde_json::Value,
    /// Model and host only; credentials never reach the manifest.
    pub endpoint: String,
    pub seed: u64,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub counts: RunCounts,
    pub artifacts: BTreeMap<String, Artifact>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// One directory per run. Artifacts are written to a temporary file and
/// renamed into place, so a manifest never names a partial file.
#[derive(Debug, Clone)]
pub struct RunStore {
    dir: PathBuf,
}

impl RunStore {
    /// Creates `base/run_id`. Fails when that run already has a manifest.
    pub fn create(base: &Path, run_id: &str) -> Result<Self, PipelineError> {
        if run_id.is_empty() || run_id.contains(['/', '\\']) || run_id.starts_with('.') {
            return Err(PipelineError::Store(format!("invalid run id {run_id:?}")));
        }
        let dir = base.join(run_id);
        if dir.join(MANIFEST_FILE).exists() {
            return Err(PipelineError::Store(format!("run {run_id} already exists")));
        }
        fs::create_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;
        Ok(RunStore { dir })
    }

    pub fn open(dir: &Path) -> Result<Self, PipelineError> {
        if !dir.join(MANIFEST_FILE).is_file() {
            return Err(PipelineError::Store(format!("{} has no manifest", dir.display())));
        }
        Ok(RunStore { dir: dir.to_path_buf() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    fn write_atomic(&self, file: &str, bytes: &[u8]) -> Result<Artifact, PipelineError> {
        let target = self.path(file);
        let tmp = self.path(&format!(".{file}.tmp"));
        let mut handle = fs::File::create(&tmp).map_err(|e| PipelineError::io(&tmp, e))?;
        handle.write_all(bytes).map_err(|e| PipelineError::io(&tmp, e))?;
        handle.sync_all().map_err(|e| PipelineError::io(&tmp, e))?;
        drop(handle);
        fs::rename(&tmp, &target).map_err(|e| PipelineError::io(&target, e))?;
        Ok(Artifact {
            file: file.to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        })
    }

    pub fn write_jsonl<T: Serialize>(&self, file: &str, rows: &[T]) -> Result<Artifact, PipelineError> {
        self.write_atomic(file, to_jsonl(rows).as_bytes())
    }

    pub fn write_json<T: Serialize>(&self, file: &str, value: &T) -> Result<Artifact, PipelineError> {
        let mut text = serde_json::to_string_pretty(value).expect("value serializes");
        text.push('\n');
        self.write_atomic(file, text.as_bytes())
    }

    /// Digest of a file written outside the store helpers, such as the
    /// exchange log.
    pub fn seal(&self, file: &str) -> Result<Artifact, PipelineError> {
        let path = self.path(file);
        let bytes = fs::read(&path).map_err(|e| PipelineError::io(&path, e))?;
        Ok(Artifact {
            file: file.to_string(),
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
        })
    }

    pub fn read_jsonl<T: DeserializeOwned>(&self, file: &str) -> Result<Vec<T>, PipelineError> {
        let path = self.path(file);
        let text = fs::read_to_string(&path).map_err(|e| PipelineError::io(&path, e))?;
        parse_jsonl(&text, &path)
    }

    pub fn read_json<T: DeserializeOwned>(&self, file: &str) -> Result<T, PipelineError> {
        let path = self.path(file);
        let text = fs::read_to_string(&path).map_err(|e| PipelineError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Parse {
            path,
            line: e.line(),
            message: e.to_string(),
        })
    }

    /// Reads an artifact named in the manifest after checking its digest.
    pub fn read_artifact<T: DeserializeOwned>(
        &self,
        manifest: &RunManifest,
        name: &str,
    ) -> Result<Vec<T>, PipelineError> {
        let artifact = manifest
            .artifacts
            .get(name)
            .ok_or_else(|| PipelineError::Store(format!("run has no {name} artifact")))?;
        self.check(name, artifact)?;
        self.read_jsonl(&artifact.file)
    }

    fn check(&self, name: &str, artifact: &Artifact) -> Result<(), PipelineError> {
        let path = self.path(&artifact.file);
        let bytes = fs::read(&path).map_err(|e| PipelineError::io(&path, e))?;
        if sha256_hex(&bytes) != artifact.sha256 {
            return Err(PipelineError::Digest { name: name.into() });
        }
        Ok(())
    }

    pub fn write_manifest(&self, manifest: &RunManifest) -> Result<(), PipelineError> {
        for (name, artifact) in &manifest.artifacts {
            self.check(name, artifact)?;
        }
        self.write_json(MANIFEST_FILE, manifest).map(|_| ())
    }

    pub fn load_manifest(&self) -> Result<RunManifest, PipelineError> {
        self.read_json(MANIFEST_FILE)
    }

    /// Every artifact exists and hashes to its recorded digest.
    pub fn verify(&self, manifest: &RunManifest) -> Result<(), PipelineError> {
        for (name, artifact) in &manifest.artifacts {
            self.check(name, artifact)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(artifacts: BTreeMap<String, Artifact>) -> RunManifest {
        RunManifest {
            run_id: "r1".into(),
            corpus: CorpusRef {
                source: None,
                sha256: sha256_hex(b""),
                reports: 0,
            },
            prompt_mode: "cot".into(),
            profile: serde_json::json!({}),
            endpoint: "m@h".into(),
            seed: 0,
            started_at: "t".into(),
            finished_at: None,
            counts: RunCounts::default(),
            artifacts,
        }
    }

    #[test]
    fn artifacts_round_trip_and_detect_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let store = RunStore::create(dir.path(), "r1").unwrap();
        let art = store.write_jsonl("rows.jsonl", &[1, 2, 3]).unwrap();
        assert_eq!(art.sha256, sha256_hex(b"1\n2\n3\n"));
        let m = manifest(BTreeMap::from([("rows".to_string(), art)]));
        store.write_manifest(&m).unwrap();
        let reopened = RunStore::open(store.dir()).unwrap();
        let loaded = reopened.load_manifest().unwrap();
        assert_eq!(loaded, m);
        assert_eq!(reopened.read_artifact::<i32>(&loaded, "rows").unwrap(), [1, 2, 3]);
        assert!(!store.path(".rows.jsonl.tmp").exists());

        fs::write(store.path("rows.jsonl"), "1\n2\n4\n").unwrap();
        assert!(matches!(reopened.verify(&loaded), Err(PipelineError::Digest { .. })));
        assert!(reopened.read_artifact::<i32>(&loaded, "rows").is_err());
        assert!(RunStore::create(dir.path(), "r1").is_err());
    }

    #[test]
    fn manifest_refuses_missing_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let store = RunStore::create(dir.path(), "r2").unwrap();
        let ghost = Artifact {
            file: "ghost.jsonl".into(),
            sha256: sha256_hex(b""),
            bytes: 0,
        };
        assert!(store
            .write_manifest(&manifest(BTreeMap::from([("ghost".to_string(), ghost)])))
            .is_err());
        assert!(!store.path(MANIFEST_FILE).exists());
        assert!(RunStore::create(dir.path(), "../x").is_err());
    }
}
