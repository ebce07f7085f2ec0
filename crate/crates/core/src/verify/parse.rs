//! Strict parsing of the pipe-delimited verdict block.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{Verdict, VerdictSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictStatus {
    Ok,
    NeedsHumanReview,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictSet {
    pub cluster_id: u32,
    /// Ordered by character id; empty unless `status` is ok.
    pub verdicts: Vec<Verdict>,
    pub raw_response: String,
    pub status: VerdictStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl VerdictSet {
    pub fn review(cluster_id: u32, raw_response: impl Into<String>, detail: impl Into<String>) -> Self {
        VerdictSet {
            cluster_id,
            verdicts: Vec::new(),
            raw_response: raw_response.into(),
            status: VerdictStatus::NeedsHumanReview,
            detail: Some(detail.into()),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == VerdictStatus::Ok
    }
}

/// Content of the first fenced block, without an info string.
fn fenced_block(text: &str) -> Option<&str> {
    let start = text.find("```")? + 3;
    let rest = &text[start..];
    let body_start = rest.find('\n')? + 1;
    let body = &rest[body_start..];
    let end = body.find("```")?;
    Some(&body[..end])
}

fn parse_line(line: &str) -> Result<(String, bool, f64, String), String> {
    let parts: Vec<&str> = line.splitn(4, '|').map(str::trim).collect();
    let [id, label, conf, reason] = parts[..] else {
        return Err(format!("expected 4 fields in {line:?}"));
    };
    let is_bot = match label {
        "BOT" => true,
        "HUMAN" => false,
        other => return Err(format!("unknown verdict {other:?}")),
    };
    let confidence: f64 = conf.parse().map_err(|_| format!("bad confidence {conf:?}"))?;
    if !(0.0..=1.0).contains(&confidence) {
        return Err(format!("confidence {confidence} outside [0, 1]"));
    }
    Ok((id.to_string(), is_bot, confidence, reason.to_string()))
}

/// `ok` only when every member appears exactly once with a valid line and no
/// other ids appear; anything else is routed to a human with no verdicts.
pub fn parse_response(cluster_id: u32, text: &str, members: &[String], source: VerdictSource) -> VerdictSet {
    let Some(block) = fenced_block(text) else {
        return VerdictSet::review(cluster_id, text, "no fenced block in response");
    };
    let mut found: BTreeMap<String, Verdict> = BTreeMap::new();
    for line in block.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (id, is_bot, confidence, rationale) = match parse_line(line) {
            Ok(v) => v,
            Err(e) => return VerdictSet::review(cluster_id, text, e),
        };
        if !members.contains(&id) {
            return VerdictSet::review(cluster_id, text, format!("unknown character {id}"));
        }
        if found.contains_key(&id) {
            return VerdictSet::review(cluster_id, text, format!("duplicate character {id}"));
        }
        found.insert(id.clone(), Verdict { character_id: id, is_bot, confidence, rationale, source });
    }
    if let Some(missing) = members.iter().find(|m| !found.contains_key(*m)) {
        return VerdictSet::review(cluster_id, text, format!("missing character {missing}"));
    }
    VerdictSet {
        cluster_id,
        verdicts: found.into_values().collect(),
        raw_response: text.to_string(),
        status: VerdictStatus::Ok,
        detail: None,
    }
}
