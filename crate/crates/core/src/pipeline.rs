//! End-to-end run: ingest, embed, cluster, verify, report.
//!
//! Every stage reads its inputs from the run store and writes its outputs
//! back before the manifest records it, so an interrupted run resumes from
//! the first stage the manifest does not list as done.

use std::collections::BTreeMap;
use std::path::PathBuf;

use chrono::{NaiveDate, SubsecRound, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::chart::{chart_data, ChartData};
use crate::cluster::{cluster, members};
use crate::embed::{embed_all, train, EncoderConfig, ModelCheckpoint, ModelKind};
use crate::error::{Error, Result};
use crate::ingest::{build_sequences, IngestConfig};
use crate::io::read_events;
use crate::model::{
    validate_events, ClusterAssignment, ClusterParams, Embedding, EpsStrategy, IntervalSequence, LevelUpEvent,
    RunManifest, StageRecord,
};
use crate::risk::{cluster_risks, compute_report, ReportRow, RiskReport};
use crate::store::{RunStore, CLUSTERS, DECISIONS, EMBEDDINGS, MODEL, REPORT, SEQUENCES, VERDICTS};
use crate::verify::{
    collect_verdicts, verify_cluster, verify_clusters, ChatBackend, HttpChatClient, LlmClientConfig, VerdictSet,
    VerdictStatus, Verifier, VerifierKind,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ModelChoice {
    #[default]
    Contrastive,
    Autoencoder,
    Dtw,
}

/// Flat run configuration; every key has a default so a config file only
/// lists what it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub events: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub model: ModelChoice,
    pub cap_level: u32,
    pub min_sequence_length: usize,
    pub exclude_paid_boost: bool,
    pub hidden_dim: usize,
    pub depth: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub mask_prob: f64,
    pub seed: u64,
    pub eps_strategy: EpsStrategy,
    pub min_samples: usize,
    pub neighbor_k: usize,
    pub verifier: VerifierKind,
    pub llm: LlmClientConfig,
    pub max_in_flight: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let ingest = IngestConfig::default();
        let enc = EncoderConfig::default();
        let params = ClusterParams::default();
        PipelineConfig {
            events: None,
            checkpoint: None,
            model: ModelChoice::Contrastive,
            cap_level: ingest.cap_level,
            min_sequence_length: ingest.min_sequence_length,
            exclude_paid_boost: ingest.exclude_paid_boost,
            hidden_dim: enc.hidden_dim,
            depth: enc.depth,
            epochs: enc.epochs,
            batch_size: enc.batch_size,
            learning_rate: enc.learning_rate,
            mask_prob: enc.mask_prob,
            seed: 0,
            eps_strategy: params.eps_strategy,
            min_samples: params.min_samples,
            neighbor_k: params.neighbor_k,
            verifier: VerifierKind::Heuristic,
            llm: LlmClientConfig::default(),
            max_in_flight: 4,
        }
    }
}

impl PipelineConfig {
    pub fn ingest(&self) -> IngestConfig {
        IngestConfig {
            cap_level: self.cap_level,
            min_sequence_length: self.min_sequence_length,
            exclude_paid_boost: self.exclude_paid_boost,
        }
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            hidden_dim: self.hidden_dim,
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            mask_prob: self.mask_prob,
            seed: self.seed,
            ..EncoderConfig::default()
        }
        .with_depth(self.depth)
    }

    pub fn cluster_params(&self) -> ClusterParams {
        ClusterParams {
            min_samples: self.min_samples,
            eps_strategy: self.eps_strategy,
            neighbor_k: self.neighbor_k,
            resolved_eps: None,
        }
    }

    pub fn model_kind(&self) -> Result<ModelKind> {
        match self.model {
            ModelChoice::Contrastive => Ok(ModelKind::Contrastive),
            ModelChoice::Autoencoder => Ok(ModelKind::Autoencoder),
            ModelChoice::Dtw => Err(Error::InvalidConfig(
                "model = dtw produces no embeddings and cannot drive clustering; use it with eval-quality".into(),
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_kind()?;
        if self.events.is_none() {
            return Err(Error::InvalidConfig("events path is required".into()));
        }
        self.ingest().validate()?;
        self.encoder().validate()?;
        self.eps_strategy.validate()?;
        if self.min_samples == 0 || self.neighbor_k == 0 {
            return Err(Error::InvalidConfig("min_samples and neighbor_k must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Embed,
    Cluster,
    Verify,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Ingest, Stage::Embed, Stage::Cluster, Stage::Verify, Stage::Report];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Embed => "embed",
            Stage::Cluster => "cluster",
            Stage::Verify => "verify",
            Stage::Report => "report",
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub run_id: Option<String>,
    pub force: bool,
    pub resume: bool,
    /// Stop cleanly after this stage, leaving a resumable partial run.
    pub stop_after: Option<Stage>,
}

/// Per-cluster view stored in the report, over the membership DBSCAN found.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub cluster_id: u32,
    pub members: Vec<String>,
    pub status: VerdictStatus,
    /// Members the verifier judged human.
    pub excluded: Vec<String>,
    pub acc_info: f64,
    pub max_diff: f64,
    pub mean_diff: f64,
    pub active_days: Vec<NaiveDate>,
}

/// Contents of `report.json`. Holds no run id or wall-clock time, so equal
/// inputs give byte-identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub eps_strategy: EpsStrategy,
    pub resolved_eps: Option<f64>,
    pub min_samples: usize,
    pub verifier: VerifierKind,
    pub model_tag: String,
    pub n_sequences: usize,
    pub n_clustered: usize,
    pub n_clusters: usize,
    pub n_needs_review: usize,
    pub unverified: RiskReport,
    pub verified: RiskReport,
    pub clusters: Vec<ClusterSummary>,
}

impl RunReport {
    pub fn rows(&self) -> Vec<ReportRow> {
        [(false, &self.unverified), (true, &self.verified)]
            .into_iter()
            .map(|(verified, r)| ReportRow {
                eps_strategy: self.eps_strategy.to_string(),
                verified,
                overall: r.overall.clone(),
            })
            .collect()
    }
}

fn digest_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Run id derived from the configuration and the input bytes.
pub fn default_run_id(config: &serde_json::Value, input_digest: &str) -> String {
    let key = format!("{config}\n{input_digest}");
    format!("run-{}", &digest_hex(key.as_bytes())[..12])
}

struct Context<'a> {
    store: &'a RunStore,
    run_id: String,
    cfg: &'a PipelineConfig,
    events: Vec<LevelUpEvent>,
    backend: Option<&'a dyn ChatBackend>,
}

/// Runs (or resumes) the pipeline and returns the run id. Stage failures are
/// recorded in the manifest before the error is returned.
pub fn run_pipeline(
    store: &RunStore,
    cfg: &PipelineConfig,
    opts: &RunOptions,
    backend: Option<&dyn ChatBackend>,
) -> Result<String> {
    cfg.validate()?;
    let events_path = cfg.events.as_ref().expect("validated");
    let input_digest = digest_hex(&std::fs::read(events_path)?);
    let config_json = serde_json::to_value(cfg)?;
    let run_id = opts.run_id.clone().unwrap_or_else(|| default_run_id(&config_json, &input_digest));

    let mut manifest = if store.exists(&run_id) && opts.resume && !opts.force {
        let m = store.manifest(&run_id)?;
        if m.config != config_json || m.input_digest != input_digest {
            return Err(Error::InvalidConfig(format!("run {run_id} was started with a different config or input")));
        }
        m
    } else {
        let m = RunManifest {
            run_id: run_id.clone(),
            seed: cfg.seed,
            config: config_json,
            created_at: Utc::now().trunc_subsecs(0),
            input_digest,
            stages: Vec::new(),
        };
        store.create(&m, opts.force)?;
        m
    };

    let events = validate_events(read_events(events_path)?)?;
    let ctx = Context { store, run_id: run_id.clone(), cfg, events, backend };
    for stage in Stage::ALL {
        if manifest.stage_done(stage.as_str()) {
            continue;
        }
        let outcome = match stage {
            Stage::Ingest => stage_ingest(&ctx),
            Stage::Embed => stage_embed(&ctx),
            Stage::Cluster => stage_cluster(&ctx),
            Stage::Verify => stage_verify(&ctx),
            Stage::Report => stage_report(&ctx),
        };
        manifest.stages.push(StageRecord {
            stage: stage.as_str().into(),
            completed_at: Utc::now().trunc_subsecs(0),
            error: outcome.as_ref().err().map(|e| e.to_string()),
        });
        store.save_manifest(&manifest)?;
        outcome?;
        if opts.stop_after == Some(stage) {
            break;
        }
    }
    Ok(run_id)
}

fn stage_ingest(ctx: &Context<'_>) -> Result<()> {
    let (seqs, _excluded) = build_sequences(&ctx.events, &ctx.cfg.ingest());
    if seqs.is_empty() {
        return Err(Error::InsufficientData { need: 1, got: 0 });
    }
    ctx.store.write_records(&ctx.run_id, SEQUENCES, &seqs)
}

fn load_model(ctx: &Context<'_>, seqs: &[IntervalSequence]) -> Result<ModelCheckpoint> {
    if let Some(path) = &ctx.cfg.checkpoint {
        return ModelCheckpoint::load(path);
    }
    let local = ctx.store.path(&ctx.run_id, MODEL)?;
    if local.is_file() {
        return ModelCheckpoint::load(&local);
    }
    let ckpt = train(ctx.cfg.model_kind()?, seqs, &ctx.cfg.encoder())?;
    ckpt.save(&local)?;
    Ok(ckpt)
}

fn stage_embed(ctx: &Context<'_>) -> Result<()> {
    let seqs: Vec<IntervalSequence> = ctx.store.read_records(&ctx.run_id, SEQUENCES)?;
    let ckpt = load_model(ctx, &seqs)?;
    let embs = embed_all(&ckpt, &seqs, Some(ckpt.dim()))?;
    ctx.store.write_records(&ctx.run_id, EMBEDDINGS, &embs)
}

fn stage_cluster(ctx: &Context<'_>) -> Result<()> {
    let embs: Vec<Embedding> = ctx.store.read_records(&ctx.run_id, EMBEDDINGS)?;
    let assignments = cluster(&embs, &ctx.cfg.cluster_params())?;
    ctx.store.write_records(&ctx.run_id, CLUSTERS, &assignments)
}

fn verify_with<T>(cfg: &PipelineConfig, backend: Option<&dyn ChatBackend>, f: impl FnOnce(Verifier<'_>) -> T) -> T {
    match (cfg.verifier, backend) {
        (VerifierKind::Heuristic, _) => f(Verifier::Heuristic),
        (VerifierKind::Llm, Some(b)) => f(Verifier::Llm { backend: b, max_retries: cfg.llm.max_retries }),
        (VerifierKind::Llm, None) => {
            let client = HttpChatClient::new(cfg.llm.clone());
            f(Verifier::Llm { backend: &client, max_retries: cfg.llm.max_retries })
        }
    }
}

fn stage_verify(ctx: &Context<'_>) -> Result<()> {
    let seqs: Vec<IntervalSequence> = ctx.store.read_records(&ctx.run_id, SEQUENCES)?;
    let assignments: Vec<ClusterAssignment> = ctx.store.read_records(&ctx.run_id, CLUSTERS)?;
    let sets = verify_with(ctx.cfg, ctx.backend, |v| verify_clusters(&assignments, &seqs, v, ctx.cfg.max_in_flight))?;
    ctx.store.write_records(&ctx.run_id, VERDICTS, &sets)?;
    if !ctx.store.has(&ctx.run_id, DECISIONS) {
        ctx.store.write_records::<crate::store::SanctionDecision>(&ctx.run_id, DECISIONS, &[])?;
    }
    Ok(())
}

fn stage_report(ctx: &Context<'_>) -> Result<()> {
    let seqs: Vec<IntervalSequence> = ctx.store.read_records(&ctx.run_id, SEQUENCES)?;
    let assignments: Vec<ClusterAssignment> = ctx.store.read_records(&ctx.run_id, CLUSTERS)?;
    let sets: Vec<VerdictSet> = ctx.store.read_records(&ctx.run_id, VERDICTS)?;
    let embs: Vec<Embedding> = ctx.store.read_records(&ctx.run_id, EMBEDDINGS)?;
    let report = build_report(ctx.cfg, &assignments, &sets, &seqs, &ctx.events, embs.first().map(|e| e.model_tag.clone()))?;
    ctx.store.write_json(&ctx.run_id, REPORT, &report)
}

pub fn build_report(
    cfg: &PipelineConfig,
    assignments: &[ClusterAssignment],
    sets: &[VerdictSet],
    seqs: &[IntervalSequence],
    events: &[LevelUpEvent],
    model_tag: Option<String>,
) -> Result<RunReport> {
    let verdicts = collect_verdicts(sets);
    let by_cluster: BTreeMap<u32, &VerdictSet> = sets.iter().map(|s| (s.cluster_id, s)).collect();
    let clusters = cluster_risks(assignments, seqs, events)?
        .into_iter()
        .map(|r| {
            let set = by_cluster.get(&r.cluster_id);
            ClusterSummary {
                cluster_id: r.cluster_id,
                status: set.map_or(VerdictStatus::NeedsHumanReview, |s| s.status),
                excluded: set
                    .map(|s| s.verdicts.iter().filter(|v| !v.is_bot).map(|v| v.character_id.clone()).collect())
                    .unwrap_or_default(),
                members: r.members,
                acc_info: r.acc_info,
                max_diff: r.max_diff,
                mean_diff: r.mean_diff,
                active_days: r.active_days,
            }
        })
        .collect::<Vec<_>>();
    Ok(RunReport {
        eps_strategy: cfg.eps_strategy,
        resolved_eps: assignments.first().and_then(|a| a.params.resolved_eps),
        min_samples: cfg.min_samples,
        verifier: cfg.verifier,
        model_tag: model_tag.unwrap_or_default(),
        n_sequences: seqs.len(),
        n_clustered: assignments.iter().filter(|a| !a.cluster_id.is_noise()).count(),
        n_clusters: clusters.len(),
        n_needs_review: clusters.iter().filter(|c| c.status == VerdictStatus::NeedsHumanReview).count(),
        unverified: compute_report(assignments, &[], seqs, events)?,
        verified: compute_report(assignments, &verdicts, seqs, events)?,
        clusters,
    })
}

/// Members of one cluster with their sequences and current verdict set.
pub struct ClusterDetail {
    pub cluster_id: u32,
    pub members: Vec<IntervalSequence>,
    pub verdicts: Option<VerdictSet>,
}

pub fn load_cluster(store: &RunStore, run_id: &str, cluster_id: u32) -> Result<ClusterDetail> {
    let assignments: Vec<ClusterAssignment> = store.read_records(run_id, CLUSTERS)?;
    let ids = members(&assignments).remove(&cluster_id).ok_or(Error::UnknownCluster(i64::from(cluster_id)))?;
    let seqs: Vec<IntervalSequence> = store.read_records(run_id, SEQUENCES)?;
    let mut by_id: BTreeMap<String, IntervalSequence> = seqs.into_iter().map(|s| (s.character_id.clone(), s)).collect();
    let members = ids.iter().filter_map(|id| by_id.remove(id)).collect();
    let verdicts = if store.has(run_id, VERDICTS) {
        store.read_records::<VerdictSet>(run_id, VERDICTS)?.into_iter().find(|s| s.cluster_id == cluster_id)
    } else {
        None
    };
    Ok(ClusterDetail { cluster_id, members, verdicts })
}

/// Chart series for one cluster of a stored run.
pub fn emit_chart(store: &RunStore, run_id: &str, cluster_id: u32) -> Result<ChartData> {
    let detail = load_cluster(store, run_id, cluster_id)?;
    let refs: Vec<&IntervalSequence> = detail.members.iter().collect();
    let verdicts = detail.verdicts.map(|s| s.verdicts).unwrap_or_default();
    Ok(chart_data(cluster_id, &refs, &verdicts))
}

/// Re-runs verification for one cluster with the run's own configuration and
/// stores the new verdict set in place of the old one.
pub fn reverify_cluster(
    store: &RunStore,
    run_id: &str,
    cluster_id: u32,
    backend: Option<&dyn ChatBackend>,
) -> Result<VerdictSet> {
    let manifest = store.manifest(run_id)?;
    let cfg: PipelineConfig = serde_json::from_value(manifest.config)?;
    let detail = load_cluster(store, run_id, cluster_id)?;
    let refs: Vec<&IntervalSequence> = detail.members.iter().collect();
    let set = verify_with(&cfg, backend, |v| verify_cluster(cluster_id, &refs, cfg.min_samples, v));
    let mut sets: Vec<VerdictSet> = if store.has(run_id, VERDICTS) { store.read_records(run_id, VERDICTS)? } else { Vec::new() };
    sets.retain(|s| s.cluster_id != cluster_id);
    sets.push(set.clone());
    sets.sort_by_key(|s| s.cluster_id);
    store.write_records(run_id, VERDICTS, &sets)?;
    Ok(set)
}
