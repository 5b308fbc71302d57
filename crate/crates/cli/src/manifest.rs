//! Output directory bookkeeping. Every file a command writes goes through
//! [`Workspace::write`], which records it in `manifest.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::exit::Failure;

pub const MANIFEST: &str = "manifest.json";
pub const TOOL: &str = env!("CARGO_PKG_NAME");
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub sha256: String,
    pub bytes: u64,
    /// Command that wrote the file.
    pub stage: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub tool_version: String,
    pub config_digest: String,
    pub config: RunConfig,
    pub created_unix: u64,
    pub updated_unix: u64,
    /// Completion time of each command.
    pub stages: BTreeMap<String, u64>,
    /// Keyed by path relative to the output directory.
    pub artifacts: BTreeMap<String, Artifact>,
    pub corpus_digests: BTreeMap<String, String>,
    /// Content digests of the vector bundles, independent of file layout.
    pub bundle_digests: BTreeMap<String, String>,
    /// Digest over every report artifact; equal for reruns of one config.
    pub report_digest: String,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl RunManifest {
    fn new(cfg: &RunConfig) -> Self {
        let t = now();
        RunManifest {
            tool: TOOL.into(),
            tool_version: VERSION.into(),
            config_digest: cfg.digest(),
            config: cfg.clone(),
            created_unix: t,
            updated_unix: t,
            stages: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            corpus_digests: BTreeMap::new(),
            bundle_digests: BTreeMap::new(),
            report_digest: String::new(),
        }
    }

    pub fn load(root: &Path) -> Result<Option<Self>> {
        let path = root.join(MANIFEST);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let m = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok(Some(m))
    }

    fn refresh_report_digest(&mut self) {
        let mut h = Sha256::new();
        for (path, a) in self.artifacts.iter().filter(|(p, _)| p.starts_with("reports/")) {
            h.update(path.as_bytes());
            h.update([0]);
            h.update(a.sha256.as_bytes());
            h.update([b'\n']);
        }
        self.report_digest = hex::encode(h.finalize());
    }
}

pub struct Workspace {
    root: PathBuf,
    manifest: RunManifest,
    stage: String,
}

impl Workspace {
    /// Opens the output directory for `cfg`. With `fresh`, files recorded by
    /// an earlier run are removed first; otherwise an existing manifest must
    /// have been produced under the same config.
    pub fn open(cfg: &RunConfig, fresh: bool) -> Result<Self> {
        let root = cfg.paths.out_dir.clone();
        let previous = RunManifest::load(&root)?;
        let manifest = match previous {
            Some(old) if fresh => {
                for rel in old.artifacts.keys() {
                    let p = root.join(rel);
                    if p.exists() {
                        std::fs::remove_file(&p).with_context(|| format!("removing {}", p.display()))?;
                    }
                }
                RunManifest::new(cfg)
            }
            Some(old) if old.config_digest != cfg.digest() => {
                return Err(Failure::config(format!(
                    "{} was produced under a different config; rerun `gen` or `all`",
                    root.display()
                ))
                .into());
            }
            Some(old) => old,
            None => RunManifest::new(cfg),
        };
        Ok(Workspace {
            root,
            manifest,
            stage: String::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    /// Starts a command: files it wrote on an earlier invocation are removed
    /// so none can outlive their entry.
    pub fn begin(&mut self, stage: &str) -> Result<()> {
        self.stage = stage.to_string();
        let stale: Vec<String> = self
            .manifest
            .artifacts
            .iter()
            .filter(|(_, a)| a.stage == stage)
            .map(|(p, _)| p.clone())
            .collect();
        for rel in stale {
            let p = self.root.join(&rel);
            if p.exists() {
                std::fs::remove_file(&p).with_context(|| format!("removing {}", p.display()))?;
            }
            self.manifest.artifacts.remove(&rel);
        }
        self.manifest.stages.remove(stage);
        self.commit()
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.path(rel);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.manifest.artifacts.insert(
            rel.to_string(),
            Artifact {
                sha256: sha256_hex(bytes),
                bytes: bytes.len() as u64,
                stage: self.stage.clone(),
            },
        );
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(rel, &bytes)
    }

    /// Path of an input recorded by an earlier command, checked against its
    /// recorded digest.
    pub fn require(&self, rel: &str, producer: &str) -> Result<PathBuf> {
        let path = self.path(rel);
        let Some(a) = self.manifest.artifacts.get(rel) else {
            return Err(Failure::missing(format!("{} not found; run `repe {producer}` first", path.display())).into());
        };
        let bytes = std::fs::read(&path)
            .map_err(|_| Failure::missing(format!("{} is recorded but absent; rerun `repe {producer}`", path.display())))?;
        if sha256_hex(&bytes) != a.sha256 {
            return Err(Failure::missing(format!(
                "{} changed since `repe {producer}` wrote it; rerun it",
                path.display()
            ))
            .into());
        }
        Ok(path)
    }

    pub fn has(&self, rel: &str) -> bool {
        self.manifest.artifacts.contains_key(rel)
    }

    pub fn note_corpus(&mut self, name: &str, digest: String) {
        self.manifest.corpus_digests.insert(name.to_string(), digest);
    }

    pub fn note_bundle(&mut self, name: &str, digest: String) {
        self.manifest.bundle_digests.insert(name.to_string(), digest);
    }

    /// Marks the current command complete and rewrites the manifest.
    pub fn finish(&mut self) -> Result<()> {
        self.manifest.stages.insert(self.stage.clone(), now());
        self.commit()
    }

    fn commit(&mut self) -> Result<()> {
        self.manifest.updated_unix = now();
        self.manifest.refresh_report_digest();
        std::fs::create_dir_all(&self.root).with_context(|| format!("creating {}", self.root.display()))?;
        let mut bytes = serde_json::to_vec_pretty(&self.manifest)?;
        bytes.push(b'\n');
        let path = self.root.join(MANIFEST);
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

/// Problems with `root`: files not in the manifest, recorded files that are
/// missing, and digest mismatches. Empty when consistent.
pub fn audit(root: &Path) -> Result<Vec<String>> {
    let Some(m) = RunManifest::load(root)? else {
        return Ok(vec![format!("no {MANIFEST} in {}", root.display())]);
    };
    let mut problems = Vec::new();
    let mut on_disk = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root)?.to_string_lossy().replace('\\', "/");
                if rel != MANIFEST {
                    on_disk.push(rel);
                }
            }
        }
    }
    for rel in &on_disk {
        match m.artifacts.get(rel) {
            None => problems.push(format!("orphan: {rel}")),
            Some(a) => {
                if sha256_hex(&std::fs::read(root.join(rel))?) != a.sha256 {
                    problems.push(format!("digest mismatch: {rel}"));
                }
            }
        }
    }
    for rel in m.artifacts.keys() {
        if !on_disk.contains(rel) {
            problems.push(format!("missing: {rel}"));
        }
    }
    problems.sort();
    Ok(problems)
}
