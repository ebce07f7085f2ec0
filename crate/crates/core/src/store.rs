//! Directory-backed run store.
//!
//! Each run lives in `<root>/<run_id>/`. Every file update goes through a
//! temp file and a rename, so readers only ever see whole files.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_json_file, read_jsonl_file, write_json_file, write_jsonl_file};
use crate::model::RunManifest;
use crate::verify::{VerdictSet, VerdictStatus};

pub const MANIFEST: &str = "manifest.json";
pub const SEQUENCES: &str = "sequences.jsonl";
pub const EMBEDDINGS: &str = "embeddings.jsonl";
pub const CLUSTERS: &str = "clusters.jsonl";
pub const VERDICTS: &str = "verdicts.jsonl";
pub const DECISIONS: &str = "decisions.jsonl";
pub const REPORT: &str = "report.json";
/// Model trained inside the run when no checkpoint was supplied.
pub const MODEL: &str = "model.ckpt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Approved,
    Rejected,
    Pending,
}

impl Decision {
    pub fn as_str(self) -> &'static str {
        match self {
            Decision::Approved => "approved",
            Decision::Rejected => "rejected",
            Decision::Pending => "pending",
        }
    }
}

/// One moderator action. The decisions file is an append-only audit trail;
/// the latest record per character is its effective state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SanctionDecision {
    pub character_id: String,
    pub decision: Decision,
    pub moderator_id: String,
    pub decided_at: DateTime<Utc>,
    #[serde(default)]
    pub note: String,
}

pub fn effective_decisions(audit: &[SanctionDecision]) -> BTreeMap<String, SanctionDecision> {
    let mut out = BTreeMap::new();
    for d in audit {
        out.insert(d.character_id.clone(), d.clone());
    }
    out
}

/// Characters with a BOT verdict from a cleanly verified cluster whose
/// latest decision is an approval.
pub fn sanction_list(sets: &[VerdictSet], audit: &[SanctionDecision]) -> Vec<String> {
    let effective = effective_decisions(audit);
    let bots: BTreeSet<&str> = sets
        .iter()
        .filter(|s| s.status == VerdictStatus::Ok)
        .flat_map(|s| &s.verdicts)
        .filter(|v| v.is_bot)
        .map(|v| v.character_id.as_str())
        .collect();
    bots.into_iter()
        .filter(|id| effective.get(*id).is_some_and(|d| d.decision == Decision::Approved))
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub created_at: DateTime<Utc>,
    pub stages: Vec<String>,
    pub complete: bool,
}

#[derive(Debug, Clone)]
pub struct RunStore {
    root: PathBuf,
}

pub fn validate_run_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id.len() <= 128
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("run id {id:?} may only contain letters, digits, '-', '_' and '.'")))
    }
}

impl RunStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(RunStore { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn run_dir(&self, run_id: &str) -> Result<PathBuf> {
        validate_run_id(run_id)?;
        Ok(self.root.join(run_id))
    }

    pub fn path(&self, run_id: &str, file: &str) -> Result<PathBuf> {
        Ok(self.run_dir(run_id)?.join(file))
    }

    pub fn exists(&self, run_id: &str) -> bool {
        self.path(run_id, MANIFEST).is_ok_and(|p| p.is_file())
    }

    pub fn has(&self, run_id: &str, file: &str) -> bool {
        self.path(run_id, file).is_ok_and(|p| p.is_file())
    }

    /// Starts a run by writing its manifest. An existing run is refused
    /// unless `force`, which discards it first.
    pub fn create(&self, manifest: &RunManifest, force: bool) -> Result<()> {
        let dir = self.run_dir(&manifest.run_id)?;
        if dir.exists() {
            if !force {
                return Err(Error::RunExists(manifest.run_id.clone()));
            }
            fs::remove_dir_all(&dir)?;
        }
        fs::create_dir_all(&dir)?;
        self.save_manifest(manifest)
    }

    pub fn manifest(&self, run_id: &str) -> Result<RunManifest> {
        if !self.exists(run_id) {
            return Err(Error::UnknownRun(run_id.to_string()));
        }
        read_json_file(&self.path(run_id, MANIFEST)?)
    }

    pub fn save_manifest(&self, manifest: &RunManifest) -> Result<()> {
        write_json_file(&self.path(&manifest.run_id, MANIFEST)?, manifest)
    }

    pub fn list_runs(&self) -> Result<Vec<RunSummary>> {
        let mut ids: Vec<String> = fs::read_dir(&self.root)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .filter_map(|e| e.file_name().into_string().ok())
            .filter(|id| self.exists(id))
            .collect();
        ids.sort();
        ids.iter()
            .map(|id| {
                let m = self.manifest(id)?;
                Ok(RunSummary {
                    run_id: m.run_id.clone(),
                    created_at: m.created_at,
                    stages: m.stages.iter().filter(|s| s.error.is_none()).map(|s| s.stage.clone()).collect(),
                    complete: self.has(id, REPORT),
                })
            })
            .collect()
    }

    pub fn write_records<T: Serialize>(&self, run_id: &str, file: &str, records: &[T]) -> Result<()> {
        write_jsonl_file(&self.path(run_id, file)?, records)
    }

    pub fn read_records<T: DeserializeOwned>(&self, run_id: &str, file: &str) -> Result<Vec<T>> {
        if !self.exists(run_id) {
            return Err(Error::UnknownRun(run_id.to_string()));
        }
        let path = self.path(run_id, file)?;
        if !path.is_file() {
            return Err(Error::Store(format!("run {run_id} has no {file} yet")));
        }
        read_jsonl_file(&path)
    }

    pub fn write_json<T: Serialize>(&self, run_id: &str, file: &str, value: &T) -> Result<()> {
        write_json_file(&self.path(run_id, file)?, value)
    }

    pub fn read_json<T: DeserializeOwned>(&self, run_id: &str, file: &str) -> Result<T> {
        if !self.exists(run_id) {
            return Err(Error::UnknownRun(run_id.to_string()));
        }
        let path = self.path(run_id, file)?;
        if !path.is_file() {
            return Err(Error::Store(format!("run {run_id} has no {file} yet")));
        }
        read_json_file(&path)
    }

    pub fn decisions(&self, run_id: &str) -> Result<Vec<SanctionDecision>> {
        if !self.has(run_id, DECISIONS) {
            self.manifest(run_id)?;
            return Ok(Vec::new());
        }
        self.read_records(run_id, DECISIONS)
    }

    /// Appends to the audit trail by rewriting the file atomically. Callers
    /// serialize writers per run.
    pub fn append_decision(&self, run_id: &str, decision: SanctionDecision) -> Result<()> {
        let mut audit = self.decisions(run_id)?;
        audit.push(decision);
        self.write_records(run_id, DECISIONS, &audit)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Verdict, VerdictSource};
    use chrono::TimeZone;

    fn manifest(id: &str) -> RunManifest {
        RunManifest {
            run_id: id.into(),
            seed: 1,
            config: serde_json::json!({}),
            created_at: Utc.with_ymd_and_hms(2025, 1, 1, 0, 0, 0).unwrap(),
            input_digest: "x".into(),
            stages: Vec::new(),
        }
    }

    fn decision(id: &str, d: Decision, minute: u32) -> SanctionDecision {
        SanctionDecision {
            character_id: id.into(),
            decision: d,
            moderator_id: "m1".into(),
            decided_at: Utc.with_ymd_and_hms(2025, 1, 2, 0, minute, 0).unwrap(),
            note: String::new(),
        }
    }

    #[test]
    fn create_refuses_existing_unless_forced() {
        let dir = tempfile::tempdir().unwrap();
        let store = RunStore::open(dir.path()).unwrap();
        store.create(&manifest("r1"), false).unwrap();
        store.write_records("r1", SEQUENCES, &[1, 2, 3]).unwrap();
        assert!(matches!(store.create(&manifest("r1"), false), Err(Error::RunExists(_))));
        store.create(&manifest("r1"), true).unwrap();
        assert!(!store.has("r1", SEQUENCES));
        assert_eq!(store.list_runs().unwrap().len(), 1);
    }

    #[test]
    fn unknown_runs_and_bad_ids() {
        let dir = tempfile::tempdir().unwrap();
        let store = RunStore::open(dir.path()).unwrap();
        assert!(matches!(store.manifest("nope"), Err(Error::UnknownRun(_))));
        assert!(matches!(store.decisions("nope"), Err(Error::UnknownRun(_))));
        assert!(store.run_dir("../escape").is_err());
        assert!(store.run_dir(".hidden").is_err());
    }

    #[test]
    fn audit_trail_grows_and_latest_wins() {
        let dir = tempfile::tempdir().unwrap();
        let store = RunStore::open(dir.path()).unwrap();
        store.create(&manifest("r"), false).unwrap();
        store.append_decision("r", decision("a", Decision::Approved, 1)).unwrap();
        store.append_decision("r", decision("b", Decision::Approved, 2)).unwrap();
        store.append_decision("r", decision("a", Decision::Rejected, 3)).unwrap();
        let audit = store.decisions("r").unwrap();
        assert_eq!(audit.len(), 3);
        assert_eq!(effective_decisions(&audit)["a"].decision, Decision::Rejected);

        let bot = |id: &str, is_bot| Verdict {
            character_id: id.into(),
            is_bot,
            confidence: 1.0,
            rationale: String::new(),
            source: VerdictSource::Heuristic,
        };
        let sets = vec![
            VerdictSet { cluster_id: 0, verdicts: vec![bot("a", true), bot("b", true), bot("c", false)], raw_response: String::new(), status: VerdictStatus::Ok, detail: None },
            VerdictSet::review(1, "", "unparseable"),
        ];
        assert_eq!(sanction_list(&sets, &audit), vec!["b".to_string()]);
        // Approving a human or an unverified character never sanctions it.
        let more = [audit.clone(), vec![decision("c", Decision::Approved, 4), decision("z", Decision::Approved, 5)]].concat();
        assert_eq!(sanction_list(&sets, &more), vec!["b".to_string()]);
    }
}
