//! Trace manifests (which archive holds which class/image/level) and the
//! run manifest written alongside every report.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use rscope_core::encoder::ActivationTrace;
use rscope_core::store::decode_archive;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{validation, PipelineError, Result};

pub const TRACE_MANIFEST: &str = "manifest.json";
pub const RUN_MANIFEST: &str = "run_manifest.json";

/// One archive listed in a trace manifest. `path` is relative to the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TraceEntry {
    pub class: String,
    pub image: String,
    #[serde(default)]
    pub mask: usize,
    pub level: String,
    pub path: String,
}

impl TraceEntry {
    /// Identifies the (image, mask) sample independently of perturbation.
    pub fn sample(&self) -> String {
        format!("{}#m{}", self.image, self.mask)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TraceManifest {
    pub traces: Vec<TraceEntry>,
}

impl TraceManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(TRACE_MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| validation(format!("{}: {e}", path.display())))?;
        let mut m: TraceManifest =
            serde_json::from_str(&text).map_err(|e| validation(format!("{}: {e}", path.display())))?;
        m.traces.sort();
        Ok(m)
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let mut sorted = self.clone();
        sorted.traces.sort();
        let path = dir.join(TRACE_MANIFEST);
        let text = serde_json::to_string_pretty(&sorted).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| PipelineError::io(&path, e))?;
        Ok(path)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone)]
pub struct LoadedTrace {
    pub entry: TraceEntry,
    pub trace: ActivationTrace,
    pub digest: String,
}

/// Every trace of a manifest, parsed and checked up front.
#[derive(Debug, Clone)]
pub struct TraceSet {
    pub dir: PathBuf,
    pub traces: Vec<LoadedTrace>,
}

impl TraceSet {
    /// Reads and validates every archive before returning; any failure is a
    /// validation error naming the archive.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = TraceManifest::load(dir)?;
        if manifest.traces.is_empty() {
            return Err(validation(format!("{} lists no traces", dir.join(TRACE_MANIFEST).display())));
        }
        let mut seen = BTreeMap::new();
        for e in &manifest.traces {
            if let Some(prev) = seen.insert((e.sample(), e.level.clone()), &e.path) {
                return Err(validation(format!("`{}` and `{}` both hold {} at level {}", prev, e.path, e.sample(), e.level)));
            }
        }
        let traces = manifest
            .traces
            .par_iter()
            .map(|entry| {
                let path = dir.join(&entry.path);
                let bytes = fs::read(&path).map_err(|e| validation(format!("{}: {e}", path.display())))?;
                let archive = decode_archive(&bytes).map_err(|e| validation(format!("{}: {e}", path.display())))?;
                let trace =
                    ActivationTrace::from_archive(&archive).map_err(|e| validation(format!("{}: {e}", path.display())))?;
                Ok(LoadedTrace { entry: entry.clone(), trace, digest: sha256_hex(&bytes) })
            })
            .collect::<Result<Vec<_>>>()?;

        let first = &traces[0];
        let shape = |t: &ActivationTrace| (t.num_layers(), t.num_heads(), t.embed_dim(), t.head_dim());
        for t in &traces {
            if shape(&t.trace) != shape(&first.trace) {
                return Err(validation(format!(
                    "{}: layers/heads/dims {:?} differ from {:?} in {}",
                    t.entry.path,
                    shape(&t.trace),
                    shape(&first.trace),
                    first.entry.path
                )));
            }
        }
        Ok(TraceSet { dir: dir.to_path_buf(), traces })
    }

    pub fn clean(&self) -> impl Iterator<Item = &LoadedTrace> {
        self.traces.iter().filter(|t| t.entry.level == "clean")
    }

    pub fn num_layers(&self) -> usize {
        self.traces[0].trace.num_layers()
    }

    pub fn num_heads(&self) -> usize {
        self.traces[0].trace.num_heads()
    }

    /// Perturbation levels present, in manifest order of first appearance
    /// after sorting by level rank (clean excluded).
    pub fn levels(&self) -> Vec<String> {
        let mut levels: Vec<String> = self.traces.iter().map(|t| t.entry.level.clone()).filter(|l| l != "clean").collect();
        levels.sort_by(|a, b| level_rank(a).cmp(&level_rank(b)));
        levels.dedup();
        levels
    }

    /// Traces grouped by class, each group ordered by sample.
    pub fn by_class(&self, level: &str) -> BTreeMap<String, Vec<&LoadedTrace>> {
        let mut out: BTreeMap<String, Vec<&LoadedTrace>> = BTreeMap::new();
        for t in self.traces.iter().filter(|t| t.entry.level == level) {
            out.entry(t.entry.class.clone()).or_default().push(t);
        }
        for v in out.values_mut() {
            v.sort_by_key(|t| t.entry.sample());
        }
        out
    }
}

/// Sort key for level labels: clean, blur I..X, occlusion ascending, then
/// anything else alphabetically.
pub fn level_rank(label: &str) -> (u8, u32, String) {
    if label == "clean" {
        return (0, 0, String::new());
    }
    if let Some(l) = label.strip_prefix("blur-") {
        if let Some(i) = rscope_core::perturb::BLUR_PRESETS.iter().position(|p| p.level == l) {
            return (1, i as u32, String::new());
        }
    }
    if let Some(p) = label.strip_prefix("occ-").and_then(|p| p.parse::<u32>().ok()) {
        return (2, p, String::new());
    }
    (3, 0, label.to_string())
}

#[derive(Debug, Clone, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub effective_config: serde_json::Value,
    pub parameters: BTreeMap<String, String>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub warnings: Vec<String>,
}

impl RunManifest {
    pub fn write(&self, out: &Path) -> Result<PathBuf> {
        let path = out.join(RUN_MANIFEST);
        let text = serde_json::to_string_pretty(self).expect("run manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| PipelineError::io(&path, e))?;
        Ok(path)
    }
}
