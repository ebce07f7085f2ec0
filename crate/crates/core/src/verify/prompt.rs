//! Zero-shot prompt for reviewing one cluster.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::IntervalSequence;

const SYSTEM_TEXT: &str = "You are a game-security analyst for an MMORPG. You review groups of characters \
that an automated detector placed in the same cluster because their leveling behaviour looks alike, and you \
decide which of them were leveled by an automation program.";

const CRITERIA_TEXT: &str = "Sanction criteria. An auto-leveled bot belongs to a group of characters that \
follow one scripted route: their level-up intervals are near-identical across members, level by level, with \
only small random variation. An individually-leveled legitimate character shows idiosyncratic variation: \
pauses, detours, bursts or a different overall pace that the rest of the group does not share. When in doubt, \
treat the character as legitimate; a wrongly sanctioned player costs more than a missed bot.";

const COT_STEPS: [&str; 6] = [
    "a) Read the input: each row is one character and the minutes it took to reach each next level.",
    "b) Compare the level-up intervals of the characters level by level.",
    "c) Check whether the sequences share the same overall shape, including where long and short intervals fall.",
    "d) Identify the group of characters that move in lockstep; these are the bot candidates.",
    "e) Exclude every character whose intervals depart from that group; these are non-bot characters.",
    "f) Produce the final output in the exact format below and nothing else inside the block.",
];

const OUTPUT_FORMAT: &str = "Output format. Reply with one fenced code block (```) containing exactly one line \
per character listed above, each character once, in the form\n\
character_id|BOT|confidence|reason\n\
or\n\
character_id|HUMAN|confidence|reason\n\
where confidence is a number between 0 and 1 and reason is a short phrase without line breaks.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationPrompt {
    pub system_text: String,
    pub criteria_text: String,
    pub cot_steps: Vec<String>,
    pub cluster_payload: String,
    pub output_format_spec: String,
}

impl VerificationPrompt {
    /// The user turn: criteria, steps, payload and reply grammar.
    pub fn user_text(&self) -> String {
        format!(
            "{}\n\nWork through these steps:\n{}\n\nCluster members (character_id: level-up intervals in minutes):\n{}\n{}\n",
            self.criteria_text,
            self.cot_steps.join("\n"),
            self.cluster_payload,
            self.output_format_spec,
        )
    }
}

/// One payload row per member, ordered by character id, intervals to two
/// decimals.
pub fn build_prompt(members: &[&IntervalSequence], min_samples: usize) -> Result<VerificationPrompt> {
    if members.len() < min_samples.max(1) {
        return Err(Error::ClusterTooSmall { need: min_samples.max(1), got: members.len() });
    }
    let mut sorted: Vec<&IntervalSequence> = members.to_vec();
    sorted.sort_by(|a, b| a.character_id.cmp(&b.character_id));
    let mut payload = String::new();
    for s in sorted {
        let values: Vec<String> = s.intervals.iter().map(|v| format!("{v:.2}")).collect();
        payload.push_str(&format!("{}: {}\n", s.character_id, values.join(", ")));
    }
    Ok(VerificationPrompt {
        system_text: SYSTEM_TEXT.into(),
        criteria_text: CRITERIA_TEXT.into(),
        cot_steps: COT_STEPS.iter().map(|s| s.to_string()).collect(),
        cluster_payload: payload,
        output_format_spec: OUTPUT_FORMAT.into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(id: &str, v: &[f64]) -> IntervalSequence {
        IntervalSequence::new(id, v.to_vec(), v.len() as u32 + 1).unwrap()
    }

    #[test]
    fn payload_has_one_row_per_member() {
        let (a, b, c) = (s("c2", &[1.0, 2.345]), s("c1", &[3.0]), s("c3", &[4.0, 5.0]));
        let p = build_prompt(&[&a, &b, &c], 3).unwrap();
        assert_eq!(p.cluster_payload.lines().count(), 3);
        assert!(p.cluster_payload.starts_with("c1: 3.00\nc2: 1.00, 2.35\n"));
    }

    #[test]
    fn deterministic_and_order_free() {
        let (a, b, c) = (s("x", &[1.0]), s("y", &[2.0]), s("z", &[3.0]));
        let p1 = build_prompt(&[&a, &b, &c], 3).unwrap();
        let p2 = build_prompt(&[&c, &a, &b], 3).unwrap();
        assert_eq!(p1.user_text().as_bytes(), p2.user_text().as_bytes());
    }

    #[test]
    fn has_all_steps_and_role() {
        let a = s("x", &[1.0]);
        let p = build_prompt(&[&a], 1).unwrap();
        let text = p.user_text();
        for label in ["a)", "b)", "c)", "d)", "e)", "f)"] {
            assert!(text.contains(label), "{label}");
        }
        assert!(p.system_text.contains("game-security analyst"));
        assert!(text.contains("auto-leveled bot") && text.contains("individually-leveled legitimate"));
        assert!(text.contains("character_id|BOT|confidence|reason"));
    }

    #[test]
    fn too_small() {
        let a = s("x", &[1.0]);
        assert!(matches!(build_prompt(&[&a], 3), Err(Error::ClusterTooSmall { need: 3, got: 1 })));
    }
}
