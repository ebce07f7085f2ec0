//! Domain types shared by every stage of the pipeline.
//!
//! All types are plain immutable values that serialize to the line-delimited
//! JSON records used by the run store and the HTTP API.

use std::collections::HashMap;
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Level recorded for a character-creation record. Level-up events start at 2.
pub const CREATION_LEVEL: u32 = 1;

/// Maximum number of entries in an interval sequence (levels 1..=50).
pub const MAX_SEQUENCE_LEN: usize = 50;

/// External encoding of the noise label.
pub const NOISE_ID: i64 = -1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelUpEvent {
    pub character_id: String,
    /// Level reached. A record with level 1 marks character creation.
    pub level: u32,
    #[serde(with = "rfc3339_seconds")]
    pub timestamp: DateTime<Utc>,
    pub access_key: String,
    pub paid_boost: bool,
    pub world_id: String,
}

impl LevelUpEvent {
    pub fn is_creation(&self) -> bool {
        self.level == CREATION_LEVEL
    }
}

/// One problem found by [`validate_events`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventIssue {
    DuplicateLevel { character_id: String, level: u32 },
    NonMonotonicTime { character_id: String, level: u32 },
    InvalidLevel { character_id: String, level: u32 },
}

impl fmt::Display for EventIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EventIssue::DuplicateLevel { character_id, level } => {
                write!(f, "DuplicateLevel({character_id}, {level})")
            }
            EventIssue::NonMonotonicTime { character_id, level } => {
                write!(f, "NonMonotonicTime({character_id}, {level})")
            }
            EventIssue::InvalidLevel { character_id, level } => {
                write!(f, "InvalidLevel({character_id}, {level})")
            }
        }
    }
}

/// Sorts events by `(character_id, level)` and checks per-character
/// uniqueness of levels and non-decreasing timestamps in level order.
pub fn validate_events(mut events: Vec<LevelUpEvent>) -> Result<Vec<LevelUpEvent>> {
    events.sort_by(|a, b| {
        a.character_id
            .cmp(&b.character_id)
            .then(a.level.cmp(&b.level))
            .then(a.timestamp.cmp(&b.timestamp))
    });

    let mut issues = Vec::new();
    for (i, ev) in events.iter().enumerate() {
        if ev.level == 0 {
            issues.push(EventIssue::InvalidLevel {
                character_id: ev.character_id.clone(),
                level: ev.level,
            });
        }
        let Some(prev) = i.checked_sub(1).map(|j| &events[j]) else {
            continue;
        };
        if prev.character_id != ev.character_id {
            continue;
        }
        if prev.level == ev.level {
            issues.push(EventIssue::DuplicateLevel {
                character_id: ev.character_id.clone(),
                level: ev.level,
            });
        } else if ev.timestamp < prev.timestamp {
            issues.push(EventIssue::NonMonotonicTime {
                character_id: ev.character_id.clone(),
                level: ev.level,
            });
        }
    }
    issues.dedup();

    if issues.is_empty() {
        Ok(events)
    } else {
        Err(Error::InvalidEvents(issues))
    }
}

/// Minutes spent on each level transition for one character.
///
/// Entry `i` is the time taken to go from the `i`-th recorded level to the
/// next one. When a creation record exists the first entry is the time from
/// creation to level 2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalSequence {
    pub character_id: String,
    pub intervals: Vec<f64>,
    pub max_level: u32,
}

impl IntervalSequence {
    pub fn new(character_id: impl Into<String>, intervals: Vec<f64>, max_level: u32) -> Result<Self> {
        let seq = IntervalSequence {
            character_id: character_id.into(),
            intervals,
            max_level,
        };
        seq.check()?;
        Ok(seq)
    }

    pub fn check(&self) -> Result<()> {
        let reason = if self.intervals.is_empty() {
            Some("empty".to_string())
        } else if self.intervals.len() > MAX_SEQUENCE_LEN {
            Some(format!("length {} exceeds {MAX_SEQUENCE_LEN}", self.intervals.len()))
        } else if let Some(bad) = self.intervals.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            Some(format!("non-positive interval {bad}"))
        } else {
            None
        };
        match reason {
            Some(reason) => Err(Error::InvalidSequence {
                character_id: self.character_id.clone(),
                reason,
            }),
            None => Ok(()),
        }
    }

    pub fn len(&self) -> usize {
        self.intervals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub character_id: String,
    pub vector: Vec<f64>,
    pub model_tag: String,
}

impl Embedding {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn is_finite(&self) -> bool {
        self.vector.iter().all(|v| v.is_finite())
    }
}

/// Cluster id or noise. Encoded externally as a non-negative integer or `-1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ClusterLabel {
    Noise,
    Cluster(u32),
}

impl ClusterLabel {
    pub fn id(self) -> i64 {
        match self {
            ClusterLabel::Noise => NOISE_ID,
            ClusterLabel::Cluster(c) => c as i64,
        }
    }

    pub fn from_id(id: i64) -> Option<Self> {
        match id {
            NOISE_ID => Some(ClusterLabel::Noise),
            c if c >= 0 && c <= u32::MAX as i64 => Some(ClusterLabel::Cluster(c as u32)),
            _ => None,
        }
    }

    pub fn cluster(self) -> Option<u32> {
        match self {
            ClusterLabel::Noise => None,
            ClusterLabel::Cluster(c) => Some(c),
        }
    }

    pub fn is_noise(self) -> bool {
        self == ClusterLabel::Noise
    }
}

impl Serialize for ClusterLabel {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_i64(self.id())
    }
}

impl<'de> Deserialize<'de> for ClusterLabel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let id = i64::deserialize(d)?;
        ClusterLabel::from_id(id)
            .ok_or_else(|| serde::de::Error::custom(format!("invalid cluster id {id}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EpsStrategy {
    Quantile { q: f64 },
    Fixed { value: f64 },
}

impl EpsStrategy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            EpsStrategy::Quantile { q } if !(q > 0.0 && q < 1.0) => {
                Err(Error::InvalidConfig(format!("quantile q={q} must lie in (0, 1)")))
            }
            EpsStrategy::Fixed { value } if !(value > 0.0 && value.is_finite()) => {
                Err(Error::InvalidConfig(format!("fixed eps {value} must be positive")))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for EpsStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EpsStrategy::Quantile { q } => write!(f, "q={q}"),
            EpsStrategy::Fixed { value } if value.fract() == 0.0 => write!(f, "{value:.1}"),
            EpsStrategy::Fixed { value } => write!(f, "{value}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterParams {
    pub min_samples: usize,
    pub eps_strategy: EpsStrategy,
    pub neighbor_k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolved_eps: Option<f64>,
}

impl Default for ClusterParams {
    fn default() -> Self {
        ClusterParams::quantile(0.1)
    }
}

impl ClusterParams {
    pub fn quantile(q: f64) -> Self {
        ClusterParams {
            min_samples: 3,
            eps_strategy: EpsStrategy::Quantile { q },
            neighbor_k: 3,
            resolved_eps: None,
        }
    }

    pub fn fixed(eps: f64) -> Self {
        ClusterParams {
            eps_strategy: EpsStrategy::Fixed { value: eps },
            ..ClusterParams::quantile(0.1)
        }
    }

    pub fn with_resolved(mut self, eps: f64) -> Self {
        self.resolved_eps = Some(eps);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub character_id: String,
    pub cluster_id: ClusterLabel,
    pub params: ClusterParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictSource {
    Llm,
    Heuristic,
    Human,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub character_id: String,
    pub is_bot: bool,
    pub confidence: f64,
    pub rationale: String,
    pub source: VerdictSource,
}

/// Folds `incoming` verdicts into `current`. A human verdict is never
/// replaced by a machine verdict for the same character.
pub fn merge_verdicts(current: &mut Vec<Verdict>, incoming: Vec<Verdict>) {
    let mut index: HashMap<String, usize> = current
        .iter()
        .enumerate()
        .map(|(i, v)| (v.character_id.clone(), i))
        .collect();
    for v in incoming {
        match index.get(&v.character_id) {
            Some(&i) => {
                let held_by_human = current[i].source == VerdictSource::Human;
                if !held_by_human || v.source == VerdictSource::Human {
                    current[i] = v;
                }
            }
            None => {
                index.insert(v.character_id.clone(), current.len());
                current.push(v);
            }
        }
    }
}

/// Completed pipeline stage, recorded in the manifest so runs can resume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub completed_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub created_at: DateTime<Utc>,
    pub input_digest: String,
    #[serde(default)]
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn stage_done(&self, stage: &str) -> bool {
        self.stages.iter().any(|s| s.stage == stage && s.error.is_none())
    }
}

/// RFC 3339 with whole-second precision.
pub mod rfc3339_seconds {
    use chrono::{DateTime, SecondsFormat, Utc};
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(ts: &DateTime<Utc>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&ts.to_rfc3339_opts(SecondsFormat::Secs, true))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DateTime<Utc>, D::Error> {
        let raw = String::deserialize(d)?;
        DateTime::parse_from_rfc3339(&raw)
            .map(|t| t.with_timezone(&Utc))
            .map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn ev(id: &str, level: u32, minute: i64) -> LevelUpEvent {
        LevelUpEvent {
            character_id: id.into(),
            level,
            timestamp: Utc.timestamp_opt(1_735_689_600 + minute * 60, 0).unwrap(),
            access_key: "k".into(),
            paid_boost: false,
            world_id: "w1".into(),
        }
    }

    #[test]
    fn duplicate_level_rejected() {
        let err = validate_events(vec![ev("a", 3, 0), ev("a", 3, 5)]).unwrap_err();
        match err {
            Error::InvalidEvents(issues) => assert_eq!(
                issues,
                vec![EventIssue::DuplicateLevel { character_id: "a".into(), level: 3 }]
            ),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn valid_events_come_back_sorted() {
        let events = vec![ev("b", 2, 0), ev("a", 3, 10), ev("a", 2, 4)];
        let out = validate_events(events.clone()).unwrap();
        assert_eq!(out, vec![events[2].clone(), events[1].clone(), events[0].clone()]);
    }

    #[test]
    fn time_going_backwards_is_rejected() {
        let err = validate_events(vec![ev("a", 4, 20), ev("a", 5, 10)]).unwrap_err();
        let Error::InvalidEvents(issues) = err else { panic!() };
        assert_eq!(
            issues,
            vec![EventIssue::NonMonotonicTime { character_id: "a".into(), level: 5 }]
        );
    }

    #[test]
    fn level_zero_is_invalid() {
        assert!(validate_events(vec![ev("a", 0, 0)]).is_err());
    }

    #[test]
    fn noise_label_encodes_as_minus_one() {
        let json = serde_json::to_string(&ClusterLabel::Noise).unwrap();
        assert_eq!(json, "-1");
        let back: ClusterLabel = serde_json::from_str("4").unwrap();
        assert_eq!(back, ClusterLabel::Cluster(4));
        assert!(serde_json::from_str::<ClusterLabel>("-7").is_err());
    }

    #[test]
    fn sequence_invariants() {
        assert!(IntervalSequence::new("a", vec![], 1).is_err());
        assert!(IntervalSequence::new("a", vec![1.0, 0.0], 3).is_err());
        assert!(IntervalSequence::new("a", vec![1.0; 51], 60).is_err());
        assert!(IntervalSequence::new("a", vec![0.5; 50], 60).is_ok());
    }

    #[test]
    fn human_verdict_is_sticky() {
        let v = |id: &str, bot: bool, source| Verdict {
            character_id: id.into(),
            is_bot: bot,
            confidence: 1.0,
            rationale: String::new(),
            source,
        };
        let mut current = vec![v("a", false, VerdictSource::Human), v("b", true, VerdictSource::Heuristic)];
        merge_verdicts(
            &mut current,
            vec![v("a", true, VerdictSource::Llm), v("b", false, VerdictSource::Llm), v("c", true, VerdictSource::Llm)],
        );
        assert!(!current[0].is_bot);
        assert_eq!(current[0].source, VerdictSource::Human);
        assert!(!current[1].is_bot);
        assert_eq!(current.len(), 3);
    }

    #[test]
    fn timestamps_serialize_at_second_precision() {
        let e = ev("a", 2, 3);
        let json = serde_json::to_string(&e).unwrap();
        assert!(json.contains("\"2025-01-01T00:03:00Z\""), "{json}");
        let back: LevelUpEvent = serde_json::from_str(&json).unwrap();
        assert_eq!(back, e);
    }
}
