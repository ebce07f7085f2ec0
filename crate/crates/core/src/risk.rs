//! Cluster risk metrics and their daily aggregation.
//!
//! `acc_info` is the number of distinct access keys in a cluster. It is a
//! stand-in for an access-homogeneity score: 1 means every member logs in
//! through the same account, and removing members can only lower it.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::cluster::members;
use crate::error::{Error, Result};
use crate::model::{ClusterAssignment, ClusterLabel, IntervalSequence, LevelUpEvent, Verdict};

/// Mean absolute difference over the shared prefix of two sequences.
pub fn interval_diff(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySequence);
    }
    let n = a.len().min(b.len());
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / n as f64)
}

pub fn pairwise_interval_diff(a: &IntervalSequence, b: &IntervalSequence) -> Result<f64> {
    interval_diff(&a.intervals, &b.intervals)
}

/// Distinct access keys among the members; 0 only for an empty cluster.
pub fn cluster_acc_info<'a>(keys: impl IntoIterator<Item = &'a str>) -> f64 {
    keys.into_iter().collect::<BTreeSet<_>>().len() as f64
}

/// Drops characters judged non-bot. Clusters left with fewer than
/// `min_samples` members dissolve to noise.
pub fn apply_verdicts(assignments: &[ClusterAssignment], verdicts: &[Verdict]) -> Vec<ClusterAssignment> {
    let human: BTreeSet<&str> = verdicts.iter().filter(|v| !v.is_bot).map(|v| v.character_id.as_str()).collect();
    let mut out: Vec<ClusterAssignment> = assignments
        .iter()
        .map(|a| {
            let mut a = a.clone();
            if human.contains(a.character_id.as_str()) {
                a.cluster_id = ClusterLabel::Noise;
            }
            a
        })
        .collect();
    let sizes = members(&out);
    for a in &mut out {
        if let Some(c) = a.cluster_id.cluster() {
            if sizes[&c].len() < a.params.min_samples {
                a.cluster_id = ClusterLabel::Noise;
            }
        }
    }
    out
}

/// Per-cluster risk figures over the full membership.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRisk {
    pub cluster_id: u32,
    pub members: Vec<String>,
    pub acc_info: f64,
    pub max_diff: f64,
    pub mean_diff: f64,
    pub active_days: Vec<NaiveDate>,
}

/// Calendar days on which each character produced at least one event.
pub fn active_days(events: &[LevelUpEvent]) -> HashMap<&str, BTreeSet<NaiveDate>> {
    let mut days: HashMap<&str, BTreeSet<NaiveDate>> = HashMap::new();
    for e in events {
        days.entry(e.character_id.as_str()).or_default().insert(e.timestamp.date_naive());
    }
    days
}

pub fn cluster_risks(
    assignments: &[ClusterAssignment],
    sequences: &[IntervalSequence],
    events: &[LevelUpEvent],
) -> Result<Vec<ClusterRisk>> {
    let seqs: HashMap<&str, &IntervalSequence> = sequences.iter().map(|s| (s.character_id.as_str(), s)).collect();
    let mut keys: HashMap<&str, &str> = HashMap::new();
    for e in events {
        keys.entry(e.character_id.as_str()).or_insert(e.access_key.as_str());
    }
    let days = active_days(events);
    let lookup = |id: &str| -> Result<&IntervalSequence> {
        seqs.get(id).copied().ok_or_else(|| Error::InvalidSequence {
            character_id: id.to_string(),
            reason: "clustered character has no interval sequence".into(),
        })
    };

    members(assignments)
        .into_iter()
        .map(|(cluster_id, ids)| {
            let mut diffs = Vec::new();
            for (i, a) in ids.iter().enumerate() {
                for b in &ids[i + 1..] {
                    diffs.push(pairwise_interval_diff(lookup(a)?, lookup(b)?)?);
                }
            }
            let (max_diff, mean_diff) = if diffs.is_empty() {
                (0.0, 0.0)
            } else {
                (diffs.iter().copied().fold(0.0, f64::max), diffs.iter().sum::<f64>() / diffs.len() as f64)
            };
            let acc_info = cluster_acc_info(ids.iter().map(|id| keys.get(id.as_str()).copied().unwrap_or(id.as_str())));
            let active: BTreeSet<NaiveDate> = ids.iter().filter_map(|id| days.get(id.as_str())).flatten().copied().collect();
            Ok(ClusterRisk {
                cluster_id,
                members: ids,
                acc_info,
                max_diff,
                mean_diff,
                active_days: active.into_iter().collect(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayMetrics {
    pub det_count: usize,
    pub acc_info: Option<f64>,
    pub max_avg: Option<f64>,
    pub mean_avg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverallMetrics {
    pub det_count: f64,
    pub acc_info: Option<f64>,
    pub max_avg: Option<f64>,
    pub mean_avg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub per_day: BTreeMap<NaiveDate, DayMetrics>,
    pub overall: OverallMetrics,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Daily metrics over the clusters that survive verification. A cluster is
/// present on a day when any surviving member was active that day; the
/// overall row averages over every day with events, and metric columns
/// average over the days where they are defined.
pub fn compute_report(
    assignments: &[ClusterAssignment],
    verdicts: &[Verdict],
    sequences: &[IntervalSequence],
    events: &[LevelUpEvent],
) -> Result<RiskReport> {
    let surviving = apply_verdicts(assignments, verdicts);
    let risks = cluster_risks(&surviving, sequences, events)?;
    let days = active_days(events);
    let all_days: BTreeSet<NaiveDate> = days.values().flatten().copied().collect();

    let mut per_day = BTreeMap::new();
    for day in all_days {
        let present: Vec<&ClusterRisk> = risks.iter().filter(|r| r.active_days.binary_search(&day).is_ok()).collect();
        let det_count = present
            .iter()
            .flat_map(|r| &r.members)
            .filter(|id| days.get(id.as_str()).is_some_and(|d| d.contains(&day)))
            .count();
        per_day.insert(
            day,
            DayMetrics {
                det_count,
                acc_info: mean(present.iter().map(|r| r.acc_info)),
                max_avg: mean(present.iter().map(|r| r.max_diff)),
                mean_avg: mean(present.iter().map(|r| r.mean_diff)),
            },
        );
    }
    let overall = OverallMetrics {
        det_count: mean(per_day.values().map(|d| d.det_count as f64)).unwrap_or(0.0),
        acc_info: mean(per_day.values().filter_map(|d| d.acc_info)),
        max_avg: mean(per_day.values().filter_map(|d| d.max_avg)),
        mean_avg: mean(per_day.values().filter_map(|d| d.mean_avg)),
    };
    Ok(RiskReport { per_day, overall })
}

/// One row of the comparison table: a clustering setting with or without
/// verification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub eps_strategy: String,
    pub verified: bool,
    pub overall: OverallMetrics,
}

pub fn render_report_table(rows: &[ReportRow]) -> String {
    let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"));
    let mut out = String::from("| eps | verified | #Det | Acc_info | Max_avg | Mean_avg |\n|---|---|---|---|---|---|\n");
    for r in rows {
        let _ = writeln!(
            out,
            "| {} | {} | {:.2} | {} | {} | {} |",
            r.eps_strategy,
            if r.verified { "yes" } else { "no" },
            r.overall.det_count,
            cell(r.overall.acc_info),
            cell(r.overall.max_avg),
            cell(r.overall.mean_avg),
        );
    }
    out
}
