//! Run manifests: every command records its arguments, seeds, and the
//! fingerprints of the files it read and wrote, next to its primary
//! artifact.

use crate::error::Result;
use crate::fingerprint::{fingerprint_bytes, fnv1a64};
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, Serialize)]
pub struct ArtifactRef {
    pub path: String,
    pub fingerprint: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    /// Stable hash of command plus arguments; artifacts made by the same
    /// invocation share it.
    pub run_id: String,
    pub command: String,
    pub args: BTreeMap<String, String>,
    pub seeds: Vec<u64>,
    pub inputs: Vec<ArtifactRef>,
    pub outputs: Vec<ArtifactRef>,
}

impl RunManifest {
    pub fn new(command: &str, args: BTreeMap<String, String>, seeds: Vec<u64>) -> Self {
        let mut id_src = command.to_string();
        for (k, v) in &args {
            id_src.push_str(&format!("|{k}={v}"));
        }
        for s in &seeds {
            id_src.push_str(&format!("|seed={s}"));
        }
        RunManifest {
            run_id: format!("{:016x}", fnv1a64(id_src.as_bytes())),
            command: command.into(),
            args,
            seeds,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn record_input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path)?;
        self.inputs.push(ArtifactRef {
            path: path.display().to_string(),
            fingerprint: fingerprint_bytes(&bytes),
        });
        Ok(())
    }

    pub fn record_output(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path)?;
        self.outputs.push(ArtifactRef {
            path: path.display().to_string(),
            fingerprint: fingerprint_bytes(&bytes),
        });
        Ok(())
    }

    /// Write `<primary>.manifest.json` beside the primary artifact.
    pub fn save_beside(&self, primary: &Path) -> Result<PathBuf> {
        let mut name = primary.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        let path = primary.with_file_name(name);
        let text = serde_json::to_string_pretty(self).expect("manifest serialization");
        std::fs::write(&path, text + "\n")?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_id_depends_on_args() {
        let mut a = BTreeMap::new();
        a.insert("x".to_string(), "1".to_string());
        let m1 = RunManifest::new("train", a.clone(), vec![1]);
        let m2 = RunManifest::new("train", a.clone(), vec![2]);
        assert_ne!(m1.run_id, m2.run_id);
        let m3 = RunManifest::new("train", a, vec![1]);
        assert_eq!(m1.run_id, m3.run_id);
    }

    #[test]
    fn manifest_written_beside_artifact() {
        let dir = std::env::temp_dir().join("genreg_manifest_test");
        std::fs::create_dir_all(&dir).unwrap();
        let primary = dir.join("out.json");
        std::fs::write(&primary, "{}").unwrap();
        let mut m = RunManifest::new("demo", BTreeMap::new(), vec![]);
        m.record_output(&primary).unwrap();
        let path = m.save_beside(&primary).unwrap();
        assert!(path.ends_with("out.json.manifest.json"));
        let text = std::fs::read_to_string(path).unwrap();
        assert!(text.contains("fnv64:"));
        std::fs::remove_dir_all(&dir).ok();
    }
}
