//! Stage manifests: what each pipeline stage ran with, read, and wrote.
//!
//! Every stage stamps a manifest holding its settings subset plus content
//! hashes of its input and output files. A stage is *fresh* when a manifest
//! exists and every recorded value still matches reality; the pipeline
//! skips fresh stages, and any command consuming another stage's artifacts
//! refuses stale or missing ones with an error naming the stage to rerun.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use deformer_core::{Error, Result};

/// Pipeline stages in dependency order. The cache comes after fine-tuning
/// because the stored representations must be produced by the weights that
/// will serve them.
pub const STAGE_ORDER: [&str; 8] =
    ["data", "teacher", "decompose", "finetune", "cache", "eval", "profile", "analyze"];

/// The subcommand that runs a stage, for actionable error messages.
pub fn command_for(stage: &str) -> &'static str {
    match stage {
        "data" => "gen-data",
        "teacher" => "train-teacher",
        "decompose" => "decompose",
        "finetune" => "finetune",
        "cache" => "encode-cache",
        "eval" => "eval",
        "profile" => "profile",
        "analyze" => "analyze",
        "tune" => "tune",
        other => unreachable!("unknown stage {other}"),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    /// Settings subset the stage's outputs depend on.
    pub settings: BTreeMap<String, String>,
    /// Run-relative path → content hash of every file the stage read.
    pub inputs: BTreeMap<String, String>,
    /// Run-relative path → content hash of every file the stage wrote.
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let digest = hasher.finalize();
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

impl Manifest {
    pub fn new(stage: &str, settings: BTreeMap<String, String>) -> Self {
        Self {
            stage: stage.to_string(),
            settings,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn record_input(&mut self, run_dir: &Path, rel: &str) -> Result<()> {
        let hash = sha256_file(&run_dir.join(rel))?;
        self.inputs.insert(rel.to_string(), hash);
        Ok(())
    }

    pub fn record_output(&mut self, run_dir: &Path, rel: &str) -> Result<()> {
        let hash = sha256_file(&run_dir.join(rel))?;
        self.outputs.insert(rel.to_string(), hash);
        Ok(())
    }

    pub fn path(run_dir: &Path, stage: &str) -> PathBuf {
        run_dir.join("manifests").join(format!("{stage}.json"))
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        let path = Self::path(run_dir, &self.stage);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("serializing {} manifest: {e}", self.stage)))?;
        fs::write(&path, text)?;
        Ok(())
    }

    pub fn load(run_dir: &Path, stage: &str) -> Result<Option<Self>> {
        let path = Self::path(run_dir, stage);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path)?;
        let m = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        Ok(Some(m))
    }
}

/// Whether a stage's recorded world still holds.
#[derive(Debug, Clone)]
pub enum Freshness {
    Fresh,
    /// Never ran (no manifest).
    Missing(String),
    /// Ran, but settings or files have since diverged.
    Stale(String),
}

pub fn freshness(
    run_dir: &Path,
    stage: &str,
    want: &BTreeMap<String, String>,
) -> Result<Freshness> {
    let Some(m) = Manifest::load(run_dir, stage)? else {
        return Ok(Freshness::Missing(format!(
            "the {stage} stage has not run in this run directory"
        )));
    };
    if m.settings != *want {
        let detail = want
            .iter()
            .find_map(|(key, now)| match m.settings.get(key) {
                Some(then) if then != now => Some(format!("{key} was {then}, now {now}")),
                None => Some(format!("{key} was unset, now {now}")),
                _ => None,
            })
            .or_else(|| {
                m.settings
                    .keys()
                    .find(|k| !want.contains_key(*k))
                    .map(|k| format!("{k} is no longer a {stage} setting"))
            })
            .unwrap_or_else(|| "settings differ".into());
        return Ok(Freshness::Stale(format!("{stage} ran under different settings ({detail})")));
    }
    for (kind, files) in [("input", &m.inputs), ("output", &m.outputs)] {
        for (rel, recorded) in files {
            let path = run_dir.join(rel);
            if !path.exists() {
                return Ok(Freshness::Stale(format!("{kind} {rel} of the {stage} stage is gone")));
            }
            if sha256_file(&path)? != *recorded {
                return Ok(Freshness::Stale(format!(
                    "{kind} {rel} changed since the {stage} stage ran"
                )));
            }
        }
    }
    Ok(Freshness::Fresh)
}

/// Gate for consuming another stage's artifacts: missing → dependency
/// error naming the command to run; stale → stale-artifact error naming
/// the command to rerun.
pub fn require_fresh(
    run_dir: &Path,
    stage: &str,
    want: &BTreeMap<String, String>,
) -> Result<()> {
    match freshness(run_dir, stage, want)? {
        Freshness::Fresh => Ok(()),
        Freshness::Missing(why) => Err(Error::Dependency(format!(
            "{why}; run `deformer {}` first",
            command_for(stage)
        ))),
        Freshness::Stale(why) => Err(Error::State(format!(
            "stale artifact: {why}; rerun `deformer {}`",
            command_for(stage)
        ))),
    }
}
