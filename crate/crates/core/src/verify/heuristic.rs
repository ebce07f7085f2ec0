//! Deterministic offline verifier.
//!
//! A member whose mean interval difference to the rest of its cluster is far
//! above the cluster's typical value is treated as a legitimate player.

use crate::error::{Error, Result};
use crate::model::{IntervalSequence, VerdictSource};
use crate::risk::pairwise_interval_diff;

use super::parse::{parse_response, VerdictSet};

/// Scores above this many median scores are flagged.
pub const MEDIAN_FACTOR: f64 = 3.0;
/// Absolute floor on the flagging threshold, in minutes.
pub const FLOOR_MINUTES: f64 = 5.0;

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// `(is_bot, confidence)` per score, with the cluster median.
pub fn classify_scores(scores: &[f64]) -> (Vec<(bool, f64)>, f64) {
    let m = median(scores);
    let threshold = (MEDIAN_FACTOR * m).max(FLOOR_MINUTES);
    let out = scores
        .iter()
        .map(|&s| {
            let share = s / (s + m + 1e-9);
            if s > threshold {
                (false, share.clamp(0.5, 1.0))
            } else {
                (true, (1.0 - share).clamp(0.5, 1.0))
            }
        })
        .collect();
    (out, m)
}

/// Mean pairwise difference from each member to every other member.
pub fn member_scores(members: &[&IntervalSequence]) -> Result<Vec<f64>> {
    let n = members.len();
    let mut sums = vec![0.0; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = pairwise_interval_diff(members[i], members[j])?;
            sums[i] += d;
            sums[j] += d;
        }
    }
    Ok(sums.into_iter().map(|s| s / (n - 1) as f64).collect())
}

/// Emits its decision in the same reply grammar an LLM would use, so both
/// backends share one parser and one stored shape.
pub fn heuristic_verdict(cluster_id: u32, members: &[&IntervalSequence]) -> Result<VerdictSet> {
    if members.len() < 2 {
        return Err(Error::ClusterTooSmall { need: 2, got: members.len() });
    }
    let mut sorted = members.to_vec();
    sorted.sort_by(|a, b| a.character_id.cmp(&b.character_id));
    let scores = member_scores(&sorted)?;
    let (decisions, m) = classify_scores(&scores);

    let mut block = String::from("```\n");
    for ((seq, (is_bot, conf)), score) in sorted.iter().zip(&decisions).zip(&scores) {
        let label = if *is_bot { "BOT" } else { "HUMAN" };
        block.push_str(&format!(
            "{}|{label}|{conf}|mean interval difference {score:.2} min against cluster median {m:.2} min\n",
            seq.character_id
        ));
    }
    block.push_str("```\n");
    let ids: Vec<String> = sorted.iter().map(|s| s.character_id.clone()).collect();
    Ok(parse_response(cluster_id, &block, &ids, VerdictSource::Heuristic))
}
