//! DBSCAN over embeddings with a quantile rule for epsilon.

use std::collections::BTreeMap;

use crate::embed::euclidean;
use crate::error::{Error, Result};
use crate::model::{ClusterAssignment, ClusterLabel, ClusterParams, Embedding, EpsStrategy};

/// Floor for a resolved epsilon. A quantile of zero happens when many points
/// coincide; the floor keeps exact duplicates mutually reachable.
pub const MIN_EPS: f64 = 1e-12;

/// Distance from every point to its `k`-th nearest other point.
pub fn kth_neighbor_distances(points: &[&[f64]], k: usize) -> Result<Vec<f64>> {
    if k == 0 || points.len() <= k {
        return Err(Error::TooFewPoints { need: k, got: points.len() });
    }
    let mut row = Vec::with_capacity(points.len() - 1);
    Ok(points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            row.clear();
            row.extend(points.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, q)| euclidean(p, q)));
            row.select_nth_unstable_by(k - 1, f64::total_cmp);
            row[k - 1]
        })
        .collect())
}

/// Lower (type-1) empirical quantile: the value at index `ceil(q * n) - 1` of
/// the ascending sort, clamped to the valid index range.
pub fn lower_quantile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut pos = q * n as f64;
    // `0.1 * 30` is 3.0000000000000004 in binary floating point.
    if (pos - pos.round()).abs() < 1e-9 {
        pos = pos.round();
    }
    let idx = (pos.ceil() as i64 - 1).clamp(0, n as i64 - 1) as usize;
    sorted[idx]
}

pub fn resolve_eps(embeddings: &[Embedding], params: &ClusterParams) -> Result<f64> {
    params.eps_strategy.validate()?;
    match params.eps_strategy {
        EpsStrategy::Fixed { value } => Ok(value),
        EpsStrategy::Quantile { q } => {
            let points: Vec<&[f64]> = embeddings.iter().map(|e| e.vector.as_slice()).collect();
            let dists = kth_neighbor_distances(&points, params.neighbor_k)?;
            Ok(lower_quantile(&dists, q).max(MIN_EPS))
        }
    }
}

/// Cluster labels in the order of `points`. Points must be given in
/// ascending character-id order; ties between clusters are broken by index.
///
/// A point is core when at least `min_samples` points (itself included) lie
/// within `eps`. Core points within `eps` of each other share a cluster; a
/// non-core point within `eps` of a core point joins the cluster of its
/// lowest-index core neighbor. Clusters are numbered by their lowest member.
pub fn dbscan_labels(points: &[&[f64]], eps: f64, min_samples: usize) -> Vec<ClusterLabel> {
    let n = points.len();
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| euclidean(points[i], points[j]) <= eps).collect())
        .collect();
    let core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= min_samples).collect();

    // Expand components of core points.
    let mut component = vec![usize::MAX; n];
    let mut n_components = 0;
    let mut stack = Vec::new();
    for seed in (0..n).filter(|&i| core[i]) {
        if component[seed] != usize::MAX {
            continue;
        }
        component[seed] = n_components;
        stack.push(seed);
        while let Some(p) = stack.pop() {
            for &q in &neighbors[p] {
                if core[q] && component[q] == usize::MAX {
                    component[q] = n_components;
                    stack.push(q);
                }
            }
        }
        n_components += 1;
    }
    for i in (0..n).filter(|&i| !core[i]) {
        if let Some(&c) = neighbors[i].iter().find(|&&j| core[j]) {
            component[i] = component[c];
        }
    }

    // Renumber by lowest member index; components are discovered from the
    // lowest core, but a border point may precede it.
    let mut lowest = vec![usize::MAX; n_components];
    for (i, &c) in component.iter().enumerate() {
        if c != usize::MAX {
            lowest[c] = lowest[c].min(i);
        }
    }
    let mut order: Vec<usize> = (0..n_components).collect();
    order.sort_by_key(|&c| lowest[c]);
    let mut rank = vec![0u32; n_components];
    for (r, &c) in order.iter().enumerate() {
        rank[c] = r as u32;
    }
    component
        .iter()
        .map(|&c| if c == usize::MAX { ClusterLabel::Noise } else { ClusterLabel::Cluster(rank[c]) })
        .collect()
}

/// Clusters embeddings with an already resolved epsilon. The output is
/// sorted by character id and does not depend on input order.
pub fn dbscan(embeddings: &[Embedding], params: &ClusterParams) -> Result<Vec<ClusterAssignment>> {
    let eps = params
        .resolved_eps
        .filter(|e| *e > 0.0)
        .ok_or_else(|| Error::InvalidConfig("dbscan needs a positive resolved eps".into()))?;
    let mut sorted: Vec<&Embedding> = embeddings.iter().collect();
    sorted.sort_by(|a, b| a.character_id.cmp(&b.character_id));
    let points: Vec<&[f64]> = sorted.iter().map(|e| e.vector.as_slice()).collect();
    let labels = dbscan_labels(&points, eps, params.min_samples);
    Ok(sorted
        .iter()
        .zip(labels)
        .map(|(e, cluster_id)| ClusterAssignment { character_id: e.character_id.clone(), cluster_id, params: *params })
        .collect())
}

/// Resolves epsilon and clusters in one step.
pub fn cluster(embeddings: &[Embedding], params: &ClusterParams) -> Result<Vec<ClusterAssignment>> {
    let eps = resolve_eps(embeddings, params)?;
    dbscan(embeddings, &params.with_resolved(eps))
}

/// Members of every non-noise cluster, keyed by cluster id.
pub fn members(assignments: &[ClusterAssignment]) -> BTreeMap<u32, Vec<String>> {
    let mut out: BTreeMap<u32, Vec<String>> = BTreeMap::new();
    for a in assignments {
        if let Some(c) = a.cluster_id.cluster() {
            out.entry(c).or_default().push(a.character_id.clone());
        }
    }
    out
}
