use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::Paths;
use crate::training::EpochLog;
use crate::{Error, Result};

/// A file identified by its logical path (`corpus/...`, `checkpoints/...`,
/// `reports/...`) and content hash. Logical paths keep manifests identical
/// across output locations.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub path: String,
    pub sha256: String,
}

/// Record of one stage execution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub config_hash: String,
    pub inputs: Vec<ArtifactRef>,
    pub outputs: Vec<ArtifactRef>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub curve: Vec<EpochLog>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_epoch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_metric: Option<f64>,
    #[serde(default)]
    pub summary: BTreeMap<String, serde_json::Value>,
    /// Reference to this manifest file itself; filled in after writing.
    #[serde(skip)]
    pub self_ref: Option<ArtifactRef>,
}

impl StageManifest {
    pub fn new(stage: impl Into<String>, config_hash: &str) -> Self {
        StageManifest {
            stage: stage.into(),
            config_hash: config_hash.to_string(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            curve: Vec::new(),
            selected_epoch: None,
            selected_metric: None,
            summary: BTreeMap::new(),
            self_ref: None,
        }
    }

    pub fn note<V: Serialize>(&mut self, key: &str, value: V) {
        let v = serde_json::to_value(value).expect("summary values serialize");
        self.summary.insert(key.to_string(), v);
    }

    /// The stage's primary output.
    pub fn output(&self) -> &ArtifactRef {
        &self.outputs[0]
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Maps logical artifact paths onto the configured directories.
#[derive(Debug, Clone)]
pub struct Layout {
    pub corpus: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Layout {
    pub fn new(paths: &Paths) -> Self {
        Layout {
            corpus: paths.corpus.clone(),
            checkpoints: paths.checkpoints.clone(),
            reports: paths.reports.clone(),
        }
    }

    pub fn resolve(&self, logical: &str) -> Result<PathBuf> {
        let (root, rest) = logical
            .split_once('/')
            .ok_or_else(|| Error::invalid(format!("not a logical artifact path: {logical}")))?;
        let base = match root {
            "corpus" => &self.corpus,
            "checkpoints" => &self.checkpoints,
            "reports" => &self.reports,
            _ => return Err(Error::invalid(format!("unknown artifact root in {logical}"))),
        };
        Ok(base.join(rest))
    }

    /// Hash an existing artifact.
    pub fn reference(&self, logical: &str) -> Result<ArtifactRef> {
        let path = self.resolve(logical)?;
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Ok(ArtifactRef {
            path: logical.to_string(),
            sha256: sha256_hex(&bytes),
        })
    }

    pub fn manifest_path(&self, stage: &str) -> String {
        let root = match stage {
            "gen-data" | "gen-noisy" => "corpus",
            s if s.starts_with("build-cnrl") => "corpus",
            s if s.starts_with("eval") || s == "pipeline" => "reports",
            _ => "checkpoints",
        };
        format!("{root}/manifests/{stage}.json")
    }

    /// Load the manifest a stage left behind, or explain which stage to run.
    pub fn load_manifest(&self, stage: &str) -> Result<StageManifest> {
        let logical = self.manifest_path(stage);
        let path = self.resolve(&logical)?;
        if !path.exists() {
            return Err(Error::precondition(format!(
                "missing output of stage `{stage}` ({}); run it first",
                path.display()
            )));
        }
        let mut m = StageManifest::load(&path)?;
        m.self_ref = Some(self.reference(&logical)?);
        Ok(m)
    }
}

/// Files written by a stage. They go to temporary names and are renamed into
/// place only on `commit`, so a failed stage leaves nothing behind and keeps
/// earlier outputs intact.
pub struct Staging<'a> {
    layout: &'a Layout,
    pending: Vec<(PathBuf, PathBuf)>,
    refs: BTreeMap<String, String>,
}

impl<'a> Staging<'a> {
    pub fn new(layout: &'a Layout) -> Self {
        Staging {
            layout,
            pending: Vec::new(),
            refs: BTreeMap::new(),
        }
    }

    pub fn write(&mut self, logical: &str, bytes: &[u8]) -> Result<ArtifactRef> {
        let dest = self.layout.resolve(logical)?;
        if let Some(dir) = dest.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut tmp = dest.clone().into_os_string();
        tmp.push(".partial");
        let tmp = PathBuf::from(tmp);
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        self.pending.push((tmp, dest));
        let sha256 = sha256_hex(bytes);
        self.refs.insert(logical.to_string(), sha256.clone());
        Ok(ArtifactRef {
            path: logical.to_string(),
            sha256,
        })
    }

    pub fn write_json<T: Serialize>(&mut self, logical: &str, value: &T) -> Result<ArtifactRef> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(logical, &bytes)
    }

    /// Write the manifest listing every staged file, then move everything
    /// into place.
    pub fn commit(mut self, mut manifest: StageManifest) -> Result<StageManifest> {
        for (path, sha256) in &self.refs {
            if !manifest.outputs.iter().any(|o| &o.path == path) {
                manifest.outputs.push(ArtifactRef {
                    path: path.clone(),
                    sha256: sha256.clone(),
                });
            }
        }
        let logical = self.layout.manifest_path(&manifest.stage);
        let self_ref = self.write_json(&logical, &manifest)?;
        for (tmp, dest) in std::mem::take(&mut self.pending) {
            std::fs::rename(&tmp, &dest).map_err(|e| Error::io(&dest, e))?;
        }
        manifest.self_ref = Some(self_ref);
        Ok(manifest)
    }
}

impl Drop for Staging<'_> {
    fn drop(&mut self) {
        for (tmp, _) in &self.pending {
            let _ = std::fs::remove_file(tmp);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout(root: &Path) -> Layout {
        Layout::new(&Paths::under(root))
    }

    fn files_under(dir: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        if let Ok(rd) = std::fs::read_dir(dir) {
            for e in rd.flatten() {
                let p = e.path();
                if p.is_dir() {
                    out.extend(files_under(&p));
                } else {
                    out.push(p);
                }
            }
        }
        out
    }

    #[test]
    fn dropped_staging_leaves_no_files() {
        let dir = tempfile::tempdir().unwrap();
        let l = layout(dir.path());
        {
            let mut s = Staging::new(&l);
            s.write("checkpoints/a.bin", b"abc").unwrap();
        }
        assert!(files_under(dir.path()).is_empty());
    }

    #[test]
    fn commit_lists_every_file() {
        let dir = tempfile::tempdir().unwrap();
        let l = layout(dir.path());
        let mut s = Staging::new(&l);
        let a = s.write("checkpoints/a.bin", b"abc").unwrap();
        s.write("checkpoints/b.bin", b"def").unwrap();
        let mut m = StageManifest::new("finetune", "h");
        m.outputs.push(a.clone());
        let m = s.commit(m).unwrap();
        assert_eq!(m.output(), &a);
        assert_eq!(m.outputs.len(), 2);
        assert_eq!(files_under(dir.path()).len(), 3);
        let loaded = l.load_manifest("finetune").unwrap();
        assert_eq!(loaded.outputs, m.outputs);
        assert_eq!(l.reference("checkpoints/b.bin").unwrap().sha256, sha256_hex(b"def"));
        assert!(l.resolve("elsewhere/x").is_err());
    }
}
