//! Secondary review of clusters by an LLM or by the offline heuristic.
//!
//! Any failure (unreachable backend, unparseable reply, undersized cluster)
//! turns into a `needs_human_review` set with no verdicts, so the affected
//! members are never sanctioned automatically.

mod client;
mod heuristic;
mod parse;
mod prompt;

use std::collections::{BTreeSet, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::cluster::members;
use crate::error::{Error, Result};
use crate::model::{ClusterAssignment, IntervalSequence, Verdict, VerdictSource};

pub use client::{ChatBackend, HttpChatClient, LlmClientConfig, DEFAULT_API_KEY_ENV};
pub use heuristic::{classify_scores, heuristic_verdict, member_scores, FLOOR_MINUTES, MEDIAN_FACTOR};
pub use parse::{parse_response, VerdictSet, VerdictStatus};
pub use prompt::{build_prompt, VerificationPrompt};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum VerifierKind {
    #[default]
    Heuristic,
    Llm,
}

#[derive(Clone, Copy)]
pub enum Verifier<'a> {
    Heuristic,
    Llm { backend: &'a dyn ChatBackend, max_retries: u32 },
}

pub fn verify_cluster(cluster_id: u32, members: &[&IntervalSequence], min_samples: usize, verifier: Verifier<'_>) -> VerdictSet {
    if members.len() < min_samples.max(2) {
        let e = Error::ClusterTooSmall { need: min_samples.max(2), got: members.len() };
        return VerdictSet::review(cluster_id, "", e.to_string());
    }
    match verifier {
        Verifier::Heuristic => {
            heuristic_verdict(cluster_id, members).unwrap_or_else(|e| VerdictSet::review(cluster_id, "", e.to_string()))
        }
        Verifier::Llm { backend, max_retries } => {
            let prompt = match build_prompt(members, min_samples) {
                Ok(p) => p,
                Err(e) => return VerdictSet::review(cluster_id, "", e.to_string()),
            };
            let user = prompt.user_text();
            let ids: Vec<String> = members.iter().map(|m| m.character_id.clone()).collect();
            let mut last = VerdictSet::review(cluster_id, "", "no attempt made");
            for _ in 0..=max_retries {
                last = match backend.complete(&prompt.system_text, &user) {
                    Ok(text) => parse_response(cluster_id, &text, &ids, VerdictSource::Llm),
                    Err(e) => VerdictSet::review(cluster_id, "", e.to_string()),
                };
                if last.is_ok() {
                    break;
                }
            }
            last
        }
    }
}

/// Verifies every cluster with at most `max_in_flight` running at once.
/// Results are ordered by cluster id whatever the completion order.
pub fn verify_clusters(
    assignments: &[ClusterAssignment],
    sequences: &[IntervalSequence],
    verifier: Verifier<'_>,
    max_in_flight: usize,
) -> Result<Vec<VerdictSet>> {
    let seqs: HashMap<&str, &IntervalSequence> = sequences.iter().map(|s| (s.character_id.as_str(), s)).collect();
    let min_samples = assignments.first().map_or(1, |a| a.params.min_samples);
    let mut jobs: Vec<(u32, Vec<&IntervalSequence>)> = Vec::new();
    for (cid, ids) in members(assignments) {
        let group = ids
            .iter()
            .map(|id| {
                seqs.get(id.as_str()).copied().ok_or_else(|| Error::InvalidSequence {
                    character_id: id.clone(),
                    reason: "clustered character has no interval sequence".into(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        jobs.push((cid, group));
    }

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<VerdictSet>>> = Mutex::new(vec![None; jobs.len()]);
    let workers = max_in_flight.max(1).min(jobs.len());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((cid, group)) = jobs.get(i) else { break };
                let set = verify_cluster(*cid, group, min_samples, verifier);
                results.lock().expect("verifier worker panicked")[i] = Some(set);
            });
        }
    });
    Ok(results.into_inner().expect("verifier worker panicked").into_iter().flatten().collect())
}

/// Verdicts from every successfully verified cluster, ordered by character.
pub fn collect_verdicts(sets: &[VerdictSet]) -> Vec<Verdict> {
    let mut out: Vec<Verdict> = sets.iter().filter(|s| s.is_ok()).flat_map(|s| s.verdicts.iter().cloned()).collect();
    out.sort_by(|a, b| a.character_id.cmp(&b.character_id));
    out
}

/// Characters eligible for sanction review: BOT verdicts in clusters that
/// verified cleanly.
pub fn sanction_candidates(sets: &[VerdictSet]) -> BTreeSet<String> {
    collect_verdicts(sets).into_iter().filter(|v| v.is_bot).map(|v| v.character_id).collect()
}

#[cfg(test)]
mod tests {
    use super::client::mock::{completion, serve};
    use super::*;
    use crate::model::{ClusterLabel, ClusterParams};
    use std::sync::atomic::AtomicU32;

    fn s(id: &str, v: &[f64]) -> IntervalSequence {
        IntervalSequence::new(id, v.to_vec(), v.len() as u32 + 1).unwrap()
    }

    fn setup() -> (Vec<ClusterAssignment>, Vec<IntervalSequence>) {
        let mut asg = Vec::new();
        let mut seqs = Vec::new();
        for i in 0..10 {
            let id = format!("c{i:02}");
            let label = if i == 9 { ClusterLabel::Noise } else { ClusterLabel::Cluster(i / 3) };
            asg.push(ClusterAssignment { character_id: id.clone(), cluster_id: label, params: ClusterParams::quantile(0.1) });
            seqs.push(s(&id, &[f64::from(i / 3) + 1.0; 4]));
        }
        (asg, seqs)
    }

    struct Scripted {
        calls: AtomicU32,
        fail_first: u32,
    }

    impl ChatBackend for Scripted {
        fn complete(&self, _: &str, user: &str) -> Result<String> {
            if self.calls.fetch_add(1, Ordering::SeqCst) < self.fail_first {
                return Err(Error::BackendUnreachable("down".into()));
            }
            let ids: Vec<&str> = user.lines().filter_map(|l| l.split_once(": ")).map(|(id, _)| id).filter(|id| id.starts_with('c')).collect();
            Ok(format!("```\n{}\n```", ids.iter().map(|id| format!("{id}|BOT|0.9|same route")).collect::<Vec<_>>().join("\n")))
        }
    }

    #[test]
    fn heuristic_covers_every_cluster_in_order() {
        let (asg, seqs) = setup();
        let sets = verify_clusters(&asg, &seqs, Verifier::Heuristic, 2).unwrap();
        assert_eq!(sets.iter().map(|s| s.cluster_id).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert!(sets.iter().all(|s| s.is_ok() && s.verdicts.len() == 3));
        assert_eq!(sanction_candidates(&sets).len(), 9);
        assert_eq!(sets, verify_clusters(&asg, &seqs, Verifier::Heuristic, 1).unwrap());
    }

    #[test]
    fn retries_then_succeeds() {
        let (asg, seqs) = setup();
        let backend = Scripted { calls: AtomicU32::new(0), fail_first: 2 };
        let sets = verify_clusters(&asg, &seqs, Verifier::Llm { backend: &backend, max_retries: 2 }, 1).unwrap();
        assert!(sets[0].is_ok(), "{:?}", sets[0]);
        assert!(sets[0].verdicts.iter().all(|v| v.source == VerdictSource::Llm));
    }

    #[test]
    fn unreachable_endpoint_routes_everything_to_review() {
        let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let client = HttpChatClient::new(LlmClientConfig {
            endpoint: format!("http://127.0.0.1:{port}/v1/chat/completions"),
            timeout_secs: 2,
            ..LlmClientConfig::default()
        });
        let (asg, seqs) = setup();
        let sets = verify_clusters(&asg, &seqs, Verifier::Llm { backend: &client, max_retries: 1 }, 3).unwrap();
        assert_eq!(sets.len(), 3);
        assert!(sets.iter().all(|s| s.status == VerdictStatus::NeedsHumanReview && s.verdicts.is_empty()));
        assert!(sanction_candidates(&sets).is_empty());
    }

    #[test]
    fn llm_reply_over_http_is_parsed() {
        let (asg, seqs) = setup();
        let reply = "```\nc00|BOT|0.9|a\nc01|HUMAN|0.8|b\nc02|BOT|0.9|c\n```";
        let server = serve(vec![(200, completion("no block here")), (200, completion(reply))]);
        let client = HttpChatClient::new(LlmClientConfig { endpoint: server.url.clone(), timeout_secs: 5, ..LlmClientConfig::default() });
        let only_first: Vec<_> = asg.iter().filter(|a| a.cluster_id == ClusterLabel::Cluster(0)).cloned().collect();
        let sets = verify_clusters(&only_first, &seqs, Verifier::Llm { backend: &client, max_retries: 2 }, 1).unwrap();
        assert!(sets[0].is_ok());
        assert_eq!(sanction_candidates(&sets), ["c00", "c02"].into_iter().map(String::from).collect());
        let prompt: serde_json::Value = serde_json::from_str(&server.bodies.lock().unwrap()[1]).unwrap();
        assert!(prompt["messages"][1]["content"].as_str().unwrap().contains("c01: 1.00, 1.00, 1.00, 1.00"));
    }

    #[test]
    fn undersized_cluster_needs_review() {
        let a = s("a", &[1.0]);
        let set = verify_cluster(4, &[&a], 3, Verifier::Heuristic);
        assert_eq!(set.status, VerdictStatus::NeedsHumanReview);
    }
}
