//! Command implementations behind the `levelscope` binary, plus the HTTP
//! service.

pub mod service;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use levelscope::cluster::cluster;
use levelscope::embed::{embed_all, train, ModelCheckpoint};
use levelscope::ingest::{build_sequences, Exclusion};
use levelscope::io::{read_events, read_jsonl_file, write_jsonl_file};
use levelscope::pipeline::{run_pipeline, ModelChoice, PipelineConfig, RunOptions, RunReport};
use levelscope::quality::{render_table, score_model, DistanceOracle, DtwDistance, EmbeddingDistance, PerturbationConfig};
use levelscope::risk::render_report_table;
use levelscope::store::{sanction_list, RunStore, REPORT, VERDICTS};
use levelscope::synth::{generate, SynthConfig};
use levelscope::verify::{verify_clusters, HttpChatClient, VerdictSet, Verifier, VerifierKind};
use levelscope::{validate_events, ClusterAssignment, Embedding, EpsStrategy, IntervalSequence};

/// Reads a TOML pipeline config. Relative `events` and `checkpoint` paths
/// resolve against the config file's directory.
pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut cfg: PipelineConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let rebase = |p: &mut Option<PathBuf>| {
        if let Some(inner) = p.as_mut().filter(|p| p.is_relative()) {
            *inner = base.join(&*inner);
        }
    };
    rebase(&mut cfg.events);
    rebase(&mut cfg.checkpoint);
    Ok(cfg)
}

/// `quantile:0.1` or `fixed:2.5`.
pub fn parse_eps(s: &str) -> Result<EpsStrategy> {
    let (kind, value) = s.split_once(':').context("expected quantile:<q> or fixed:<eps>")?;
    let value: f64 = value.trim().parse().with_context(|| format!("bad number in {s:?}"))?;
    let eps = match kind.trim() {
        "quantile" => EpsStrategy::Quantile { q: value },
        "fixed" => EpsStrategy::Fixed { value },
        other => bail!("unknown eps strategy {other:?}"),
    };
    eps.validate()?;
    Ok(eps)
}

pub fn synth(cfg: &SynthConfig, events_out: &Path, truth_out: Option<&Path>) -> Result<usize> {
    let (events, truth) = generate(cfg)?;
    write_jsonl_file(events_out, &events)?;
    if let Some(p) = truth_out {
        write_jsonl_file(p, &truth.records())?;
    }
    Ok(truth.labels.len())
}

pub fn ingest(cfg: &PipelineConfig, events: &Path, out: &Path) -> Result<(Vec<IntervalSequence>, Vec<Exclusion>)> {
    cfg.ingest().validate()?;
    let events = validate_events(read_events(events)?)?;
    let (seqs, excluded) = build_sequences(&events, &cfg.ingest());
    write_jsonl_file(out, &seqs)?;
    Ok((seqs, excluded))
}

pub fn train_model(cfg: &PipelineConfig, sequences: &Path, out: &Path) -> Result<ModelCheckpoint> {
    let seqs: Vec<IntervalSequence> = read_jsonl_file(sequences)?;
    let ckpt = train(cfg.model_kind()?, &seqs, &cfg.encoder())?;
    ckpt.save(out)?;
    Ok(ckpt)
}

pub fn embed(checkpoint: &Path, sequences: &Path, out: &Path) -> Result<usize> {
    let ckpt = ModelCheckpoint::load(checkpoint)?;
    let seqs: Vec<IntervalSequence> = read_jsonl_file(sequences)?;
    let embs = embed_all(&ckpt, &seqs, None)?;
    write_jsonl_file(out, &embs)?;
    Ok(embs.len())
}

pub fn cluster_embeddings(cfg: &PipelineConfig, embeddings: &Path, out: &Path) -> Result<Vec<ClusterAssignment>> {
    let embs: Vec<Embedding> = read_jsonl_file(embeddings)?;
    let assignments = cluster(&embs, &cfg.cluster_params())?;
    write_jsonl_file(out, &assignments)?;
    Ok(assignments)
}

pub fn verify(cfg: &PipelineConfig, sequences: &Path, clusters: &Path, out: &Path) -> Result<Vec<VerdictSet>> {
    let seqs: Vec<IntervalSequence> = read_jsonl_file(sequences)?;
    let assignments: Vec<ClusterAssignment> = read_jsonl_file(clusters)?;
    let sets = match cfg.verifier {
        VerifierKind::Heuristic => verify_clusters(&assignments, &seqs, Verifier::Heuristic, cfg.max_in_flight)?,
        VerifierKind::Llm => {
            let client = HttpChatClient::new(cfg.llm.clone());
            let v = Verifier::Llm { backend: &client, max_retries: cfg.llm.max_retries };
            verify_clusters(&assignments, &seqs, v, cfg.max_in_flight)?
        }
    };
    write_jsonl_file(out, &sets)?;
    Ok(sets)
}

/// Scores every requested model on the same sequences and perturbations.
/// `models` holds `dtw` or checkpoint paths.
pub fn eval_quality(sequences: &Path, models: &[String], pcfg: &PerturbationConfig) -> Result<String> {
    let seqs: Vec<IntervalSequence> = read_jsonl_file(sequences)?;
    let mut scores = Vec::new();
    for m in models {
        let score = if m == "dtw" {
            score_model(&DtwDistance, &seqs, pcfg)?
        } else {
            let ckpt = ModelCheckpoint::load(Path::new(m)).with_context(|| format!("loading checkpoint {m}"))?;
            let oracle = EmbeddingDistance(&ckpt);
            let mut s = score_model(&oracle as &dyn DistanceOracle, &seqs, pcfg)?;
            s.model_tag = ckpt.kind.to_string();
            s
        };
        scores.push(score);
    }
    let cols: Vec<(&str, f64)> = scores.iter().map(|s| (s.model_tag.as_str(), s.mean_tau)).collect();
    Ok(render_table(&cols))
}

pub fn run(store: &RunStore, cfg: &PipelineConfig, opts: &RunOptions) -> Result<String> {
    if cfg.model == ModelChoice::Dtw {
        bail!("model = dtw cannot drive a run; use eval-quality to score it");
    }
    Ok(run_pipeline(store, cfg, opts, None)?)
}

pub fn report_text(store: &RunStore, run_id: &str) -> Result<String> {
    let report: RunReport = store.read_json(run_id, REPORT)?;
    let mut out = render_report_table(&report.rows());
    let _ = writeln!(
        out,
        "\n{} sequences, {} clustered into {} clusters, {} need human review (eps {}, model {})",
        report.n_sequences,
        report.n_clustered,
        report.n_clusters,
        report.n_needs_review,
        report.resolved_eps.map_or("-".to_string(), |e| format!("{e:.4}")),
        report.model_tag,
    );
    Ok(out)
}

/// Approved BOT verdicts, one character id per line.
pub fn sanctions(store: &RunStore, run_id: &str) -> Result<Vec<String>> {
    let sets: Vec<VerdictSet> = store.read_records(run_id, VERDICTS)?;
    Ok(sanction_list(&sets, &store.decisions(run_id)?))
}
