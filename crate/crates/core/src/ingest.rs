//! Validated events to capped interval sequences.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{IntervalSequence, LevelUpEvent, CREATION_LEVEL, MAX_SEQUENCE_LEN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestConfig {
    pub cap_level: u32,
    pub min_sequence_length: usize,
    pub exclude_paid_boost: bool,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig { cap_level: 50, min_sequence_length: 10, exclude_paid_boost: true }
    }
}

impl IngestConfig {
    pub fn validate(&self) -> Result<()> {
        let max_len = (self.cap_level as usize).saturating_sub(1);
        if !(2..=MAX_SEQUENCE_LEN as u32 + 1).contains(&self.cap_level) {
            return Err(Error::InvalidConfig(format!("cap_level {} outside 2..=51", self.cap_level)));
        }
        if self.min_sequence_length == 0 || self.min_sequence_length > max_len {
            return Err(Error::InvalidConfig(format!(
                "min_sequence_length {} outside 1..={max_len}",
                self.min_sequence_length
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    MissingLevels,
    PaidBoost,
    NonPositiveInterval,
    TooShort,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub character_id: String,
    pub reason: ExclusionReason,
    pub detail: String,
}

/// Builds one sequence per character from events already passed through
/// [`crate::model::validate_events`]. Characters that cannot be observed
/// reliably are reported in the exclusion list instead.
pub fn build_sequences(
    events: &[LevelUpEvent],
    cfg: &IngestConfig,
) -> (Vec<IntervalSequence>, Vec<Exclusion>) {
    let mut sequences = Vec::new();
    let mut exclusions = Vec::new();
    for group in events.chunk_by(|a, b| a.character_id == b.character_id) {
        match build_one(group, cfg) {
            Ok(seq) => sequences.push(seq),
            Err(ex) => exclusions.push(ex),
        }
    }
    (sequences, exclusions)
}

fn build_one(events: &[LevelUpEvent], cfg: &IngestConfig) -> Result<IntervalSequence, Exclusion> {
    let character_id = events[0].character_id.clone();
    let exclude = |reason, detail: String| Exclusion { character_id: character_id.clone(), reason, detail };

    let max_level = events.iter().map(|e| e.level).max().unwrap_or(CREATION_LEVEL);
    let capped: Vec<&LevelUpEvent> = events.iter().filter(|e| e.level <= cfg.cap_level).collect();

    // Without a creation record the first usable reference is level 2.
    let first = capped.first().map(|e| e.level).unwrap_or(0);
    if first > CREATION_LEVEL + 1 {
        return Err(exclude(ExclusionReason::MissingLevels, format!("first recorded level is {first}")));
    }
    if let Some(w) = capped.windows(2).find(|w| w[1].level != w[0].level + 1) {
        return Err(exclude(
            ExclusionReason::MissingLevels,
            format!("gap between levels {} and {}", w[0].level, w[1].level),
        ));
    }
    if cfg.exclude_paid_boost {
        if let Some(e) = capped.iter().find(|e| e.paid_boost) {
            return Err(exclude(ExclusionReason::PaidBoost, format!("paid boost at level {}", e.level)));
        }
    }

    let mut intervals = Vec::with_capacity(capped.len().saturating_sub(1));
    for w in capped.windows(2) {
        let minutes = (w[1].timestamp - w[0].timestamp).num_milliseconds() as f64 / 60_000.0;
        if minutes <= 0.0 {
            return Err(exclude(
                ExclusionReason::NonPositiveInterval,
                format!("zero-length interval into level {}", w[1].level),
            ));
        }
        intervals.push(minutes);
    }
    if intervals.len() < cfg.min_sequence_length {
        return Err(exclude(
            ExclusionReason::TooShort,
            format!("{} intervals < {}", intervals.len(), cfg.min_sequence_length),
        ));
    }
    IntervalSequence::new(character_id.clone(), intervals, max_level)
        .map_err(|e| exclude(ExclusionReason::NonPositiveInterval, e.to_string()))
}
