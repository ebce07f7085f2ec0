//! Embedding-quality harness.
//!
//! Every sequence is corrupted at ten increasing severities. A representation
//! that respects the corruption order places heavier perturbations farther
//! from the original; Kendall's tau between the distances and the severity
//! levels measures how well that ordering is preserved.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embed::{dtw, euclidean, ModelCheckpoint};
use crate::error::{Error, Result};
use crate::model::IntervalSequence;
use crate::rng;

/// Smallest interval a perturbed sequence may contain, in minutes.
pub const MIN_INTERVAL: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbationConfig {
    pub levels: u32,
    pub deletion_rate_per_level: f64,
    pub noise_prob_per_level: f64,
    pub noise_scale_per_level: f64,
    pub seed: u64,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        PerturbationConfig {
            levels: 10,
            deletion_rate_per_level: 0.05,
            noise_prob_per_level: 0.1,
            noise_scale_per_level: 3.0,
            seed: 0,
        }
    }
}

impl PerturbationConfig {
    pub fn deletion_prob(&self, lv: u32) -> f64 {
        self.deletion_rate_per_level * f64::from(lv)
    }

    pub fn noise_prob(&self, lv: u32) -> f64 {
        (self.noise_prob_per_level * f64::from(lv)).min(1.0)
    }

    pub fn noise_range(&self, lv: u32) -> f64 {
        self.noise_scale_per_level * f64::from(lv)
    }

    pub fn swaps(&self, lv: u32) -> usize {
        lv as usize
    }
}

/// Random draws used by [`perturb`]; lets tests script the outcome.
pub trait PerturbRng {
    /// Uniform in `[0, 1)`.
    fn unit(&mut self) -> f64;
    /// Uniform in `[-half_width, half_width)`.
    fn centered(&mut self, half_width: f64) -> f64;
    /// Uniform index in `0..n`.
    fn index(&mut self, n: usize) -> usize;
}

impl<R: Rng> PerturbRng for R {
    fn unit(&mut self) -> f64 {
        self.random::<f64>()
    }

    fn centered(&mut self, half_width: f64) -> f64 {
        if half_width > 0.0 {
            self.random_range(-half_width..half_width)
        } else {
            0.0
        }
    }

    fn index(&mut self, n: usize) -> usize {
        self.random_range(0..n)
    }
}

/// What each stage did, for rate checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PerturbTrace {
    pub original_len: usize,
    pub deleted: usize,
    pub noised: usize,
    pub swaps: usize,
}

pub fn perturb(values: &[f64], lv: u32, cfg: &PerturbationConfig, rng: &mut impl PerturbRng) -> Result<Vec<f64>> {
    perturb_traced(values, lv, cfg, rng).map(|(v, _)| v)
}

/// Deletion, then conditional additive noise, then `lv` index swaps.
pub fn perturb_traced(
    values: &[f64],
    lv: u32,
    cfg: &PerturbationConfig,
    rng: &mut impl PerturbRng,
) -> Result<(Vec<f64>, PerturbTrace)> {
    if !(1..=cfg.levels.min(10)).contains(&lv) {
        return Err(Error::InvalidLevel(lv));
    }
    if values.len() < 2 {
        return Err(Error::TooShort(values.len()));
    }
    let mut trace = PerturbTrace { original_len: values.len(), ..PerturbTrace::default() };

    let p_del = cfg.deletion_prob(lv);
    let mut out: Vec<f64> = values.iter().copied().filter(|_| rng.unit() > p_del).collect();
    trace.deleted = values.len() - out.len();
    if out.is_empty() {
        out.push(values[rng.index(values.len())]);
    }

    let (p_noise, half) = (cfg.noise_prob(lv), cfg.noise_range(lv));
    for v in &mut out {
        if rng.unit() < p_noise {
            *v += rng.centered(half);
            trace.noised += 1;
        }
        *v = v.max(MIN_INTERVAL);
    }

    if out.len() >= 2 {
        for _ in 0..cfg.swaps(lv) {
            let a = rng.index(out.len());
            let mut b = rng.index(out.len() - 1);
            if b >= a {
                b += 1;
            }
            out.swap(a, b);
            trace.swaps += 1;
        }
    }
    Ok((out, trace))
}

/// Kendall's tau-b in `O(n log n)`: sort by `(x, y)`, then count the swaps a
/// merge sort by `y` performs. Returns 0 when either variable is constant.
pub fn kendall_tau(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::LengthMismatch { left: xs.len(), right: ys.len() });
    }
    let n = xs.len();
    if n < 2 {
        return Err(Error::TooShort(n));
    }
    let mut pairs: Vec<(f64, f64)> = xs.iter().copied().zip(ys.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let tied = |runs: Vec<usize>| -> i64 { runs.into_iter().map(|t| (t as i64) * (t as i64 - 1) / 2).sum() };
    let n0 = (n as i64) * (n as i64 - 1) / 2;
    let n1 = tied(run_lengths(&pairs, |a, b| a.0 == b.0));
    let n3 = tied(run_lengths(&pairs, |a, b| a.0 == b.0 && a.1 == b.1));

    let mut ys_sorted: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let swaps = merge_count(&mut ys_sorted);
    let n2 = tied(run_lengths(&ys_sorted, |a, b| a == b));

    let denom = ((n0 - n1) as f64) * ((n0 - n2) as f64);
    if denom <= 0.0 {
        return Ok(0.0);
    }
    let score = (n0 - n1 - n2 + n3 - 2 * swaps) as f64;
    Ok(score / denom.sqrt())
}

fn run_lengths<T>(items: &[T], same: impl Fn(&T, &T) -> bool) -> Vec<usize> {
    items.chunk_by(same).map(<[T]>::len).collect()
}

/// Sorts ascending and returns the number of inversions (strictly greater
/// earlier elements).
fn merge_count(v: &mut [f64]) -> i64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut count = merge_count(&mut v[..mid]) + merge_count(&mut v[mid..]);
    let mut merged = Vec::with_capacity(n);
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j].total_cmp(&v[i]).is_lt() {
            merged.push(v[j]);
            count += (mid - i) as i64;
            j += 1;
        } else {
            merged.push(v[i]);
            i += 1;
        }
    }
    merged.extend_from_slice(&v[i..mid]);
    merged.extend_from_slice(&v[j..n]);
    v.copy_from_slice(&merged);
    count
}

/// Distances from an original sequence to its perturbations, in level order.
pub trait DistanceOracle: Sync {
    fn tag(&self) -> String;
    fn distances(&self, original: &[f64], perturbed: &[Vec<f64>]) -> Result<Vec<f64>>;
}

/// Euclidean distance between embeddings from a learned model.
pub struct EmbeddingDistance<'a>(pub &'a ModelCheckpoint);

impl DistanceOracle for EmbeddingDistance<'_> {
    fn tag(&self) -> String {
        self.0.model_tag.clone()
    }

    fn distances(&self, original: &[f64], perturbed: &[Vec<f64>]) -> Result<Vec<f64>> {
        let base = self.0.embed_values(original)?;
        perturbed
            .iter()
            .map(|p| Ok(euclidean(&base, &self.0.embed_values(p)?)))
            .collect()
    }
}

/// DTW applied directly to the raw sequences.
pub struct DtwDistance;

impl DistanceOracle for DtwDistance {
    fn tag(&self) -> String {
        "dtw".into()
    }

    fn distances(&self, original: &[f64], perturbed: &[Vec<f64>]) -> Result<Vec<f64>> {
        perturbed.iter().map(|p| dtw(original, p)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityScore {
    pub per_character_tau: BTreeMap<String, f64>,
    pub mean_tau: f64,
    pub model_tag: String,
}

/// The perturbation ladder for one character; each level draws from its own
/// stream keyed by `(seed, character_id, lv)`.
pub fn ladder(seq: &IntervalSequence, cfg: &PerturbationConfig) -> Result<Vec<Vec<f64>>> {
    (1..=cfg.levels)
        .map(|lv| {
            let mut rng = rng::stream(cfg.seed, &[seq.character_id.as_bytes(), &lv.to_le_bytes()]);
            perturb(&seq.intervals, lv, cfg, &mut rng)
        })
        .collect()
}

fn score_one(oracle: &dyn DistanceOracle, seq: &IntervalSequence, cfg: &PerturbationConfig) -> Result<f64> {
    let perturbed = ladder(seq, cfg)?;
    let dists = oracle.distances(&seq.intervals, &perturbed)?;
    let levels: Vec<f64> = (1..=cfg.levels).map(f64::from).collect();
    kendall_tau(&dists, &levels)
}

/// Per-character tau between distance and severity, averaged over characters.
/// Characters are scored on worker threads; the result does not depend on
/// scheduling because every random stream is keyed by character and level.
pub fn score_model(oracle: &dyn DistanceOracle, seqs: &[IntervalSequence], cfg: &PerturbationConfig) -> Result<QualityScore> {
    if seqs.is_empty() {
        return Err(Error::InsufficientData { need: 1, got: 0 });
    }
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(seqs.len());
    let chunk = seqs.len().div_ceil(workers);
    let results: Vec<Result<Vec<(String, f64)>>> = std::thread::scope(|s| {
        let handles: Vec<_> = seqs
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|seq| Ok((seq.character_id.clone(), score_one(oracle, seq, cfg)?)))
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("scoring worker panicked")).collect()
    });
    let mut per_character_tau = BTreeMap::new();
    for part in results {
        per_character_tau.extend(part?);
    }
    let mean_tau = per_character_tau.values().sum::<f64>() / per_character_tau.len() as f64;
    Ok(QualityScore { per_character_tau, mean_tau, model_tag: oracle.tag() })
}

/// Markdown table with one column per model and a single tau row.
pub fn render_table(rows: &[(&str, f64)]) -> String {
    let mut out = String::from("| Model |");
    for (name, _) in rows {
        let _ = write!(out, " {name} |");
    }
    out.push_str("\n|---|");
    out.push_str(&"---|".repeat(rows.len()));
    out.push_str("\n| Kendall's Tau |");
    for (_, tau) in rows {
        let _ = write!(out, " {tau:.4} |");
    }
    out.push('\n');
    out
}
