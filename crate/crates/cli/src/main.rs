use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use levelscope::pipeline::{ModelChoice, PipelineConfig, RunOptions, Stage};
use levelscope::quality::PerturbationConfig;
use levelscope::store::RunStore;
use levelscope::synth::SynthConfig;
use levelscope::verify::VerifierKind;
use levelscope_cli::service::{self, ServiceConfig};

#[derive(Parser)]
#[command(name = "levelscope", version, about = "Detect auto-leveling bot farms from level-up logs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArg {
    /// TOML pipeline config; unset keys take their defaults.
    #[arg(long, short)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<PipelineConfig> {
        match &self.config {
            Some(p) => levelscope_cli::load_config(p),
            None => Ok(PipelineConfig::default()),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic event log with planted farms.
    Synth {
        /// TOML synth config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Ground-truth labels as JSON-lines.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Turn an event log into interval sequences.
    Ingest {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an encoder on interval sequences.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        sequences: PathBuf,
        #[arg(long)]
        model: Option<ModelArg>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed sequences with a trained checkpoint.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sequences: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cluster embeddings with DBSCAN.
    Cluster {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        embeddings: PathBuf,
        /// quantile:<q> or fixed:<eps>; overrides the config.
        #[arg(long)]
        eps: Option<String>,
        #[arg(long)]
        min_samples: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score models by how well distance tracks perturbation severity.
    EvalQuality {
        #[arg(long)]
        sequences: PathBuf,
        /// `dtw` or a checkpoint path; repeatable.
        #[arg(long = "model", required = true)]
        models: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Verify clusters.
    Verify {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        sequences: PathBuf,
        #[arg(long)]
        clusters: PathBuf,
        #[arg(long)]
        verifier: Option<VerifierArg>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the whole pipeline into the run store.
    Run {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value = "runs")]
        store: PathBuf,
        #[arg(long)]
        events: Option<PathBuf>,
        #[arg(long)]
        run_id: Option<String>,
        #[arg(long)]
        force: bool,
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        stop_after: Option<StageArg>,
    },
    /// Print a finished run's risk table.
    Report {
        #[arg(long, default_value = "runs")]
        store: PathBuf,
        #[arg(long)]
        run_id: String,
    },
    /// Print approved sanctions for a run, one character per line.
    Sanctions {
        #[arg(long, default_value = "runs")]
        store: PathBuf,
        #[arg(long)]
        run_id: String,
    },
    /// Serve the review API.
    Serve {
        #[arg(long, default_value = "runs")]
        store: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
        /// Environment variable holding the bearer token; no auth when unset.
        #[arg(long)]
        token_env: Option<String>,
        /// Static files for the review console, served under /ui.
        #[arg(long)]
        ui_dir: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ModelArg {
    Contrastive,
    Autoencoder,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum VerifierArg {
    Heuristic,
    Llm,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum StageArg {
    Ingest,
    Embed,
    Cluster,
    Verify,
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Synth { config, seed, out, truth } => {
            let mut cfg: SynthConfig = match config {
                Some(p) => toml::from_str(&std::fs::read_to_string(&p)?).with_context(|| format!("parsing {}", p.display()))?,
                None => SynthConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let n = levelscope_cli::synth(&cfg, &out, truth.as_deref())?;
            eprintln!("wrote {n} characters to {}", out.display());
        }
        Command::Ingest { config, events, out } => {
            let (seqs, excluded) = levelscope_cli::ingest(&config.load()?, &events, &out)?;
            eprintln!("{} sequences, {} characters excluded", seqs.len(), excluded.len());
            for ex in excluded {
                println!("{}", serde_json::to_string(&ex)?);
            }
        }
        Command::Train { config, sequences, model, out } => {
            let mut cfg = config.load()?;
            if let Some(m) = model {
                cfg.model = match m {
                    ModelArg::Contrastive => ModelChoice::Contrastive,
                    ModelArg::Autoencoder => ModelChoice::Autoencoder,
                };
            }
            let ckpt = levelscope_cli::train_model(&cfg, &sequences, &out)?;
            eprintln!("saved {} to {}", ckpt.model_tag, out.display());
        }
        Command::Embed { checkpoint, sequences, out } => {
            let n = levelscope_cli::embed(&checkpoint, &sequences, &out)?;
            eprintln!("wrote {n} embeddings");
        }
        Command::Cluster { config, embeddings, eps, min_samples, out } => {
            let mut cfg = config.load()?;
            if let Some(e) = eps {
                cfg.eps_strategy = levelscope_cli::parse_eps(&e)?;
            }
            if let Some(m) = min_samples {
                cfg.min_samples = m;
            }
            let a = levelscope_cli::cluster_embeddings(&cfg, &embeddings, &out)?;
            let clustered = a.iter().filter(|a| !a.cluster_id.is_noise()).count();
            eprintln!("{clustered} of {} characters clustered", a.len());
        }
        Command::EvalQuality { sequences, models, seed } => {
            let pcfg = PerturbationConfig { seed, ..PerturbationConfig::default() };
            print!("{}", levelscope_cli::eval_quality(&sequences, &models, &pcfg)?);
        }
        Command::Verify { config, sequences, clusters, verifier, out } => {
            let mut cfg = config.load()?;
            if let Some(v) = verifier {
                cfg.verifier = match v {
                    VerifierArg::Heuristic => VerifierKind::Heuristic,
                    VerifierArg::Llm => VerifierKind::Llm,
                };
            }
            let sets = levelscope_cli::verify(&cfg, &sequences, &clusters, &out)?;
            let review = sets.iter().filter(|s| !s.is_ok()).count();
            eprintln!("{} clusters verified, {review} need human review", sets.len());
        }
        Command::Run { config, store, events, run_id, force, resume, stop_after } => {
            let mut cfg = config.load()?;
            if events.is_some() {
                cfg.events = events;
            }
            let opts = RunOptions {
                run_id,
                force,
                resume,
                stop_after: stop_after.map(|s| match s {
                    StageArg::Ingest => Stage::Ingest,
                    StageArg::Embed => Stage::Embed,
                    StageArg::Cluster => Stage::Cluster,
                    StageArg::Verify => Stage::Verify,
                }),
            };
            let store = RunStore::open(store)?;
            let id = levelscope_cli::run(&store, &cfg, &opts)?;
            println!("{id}");
            if stop_after.is_none() {
                eprint!("{}", levelscope_cli::report_text(&store, &id)?);
            }
        }
        Command::Report { store, run_id } => {
            print!("{}", levelscope_cli::report_text(&RunStore::open(store)?, &run_id)?);
        }
        Command::Sanctions { store, run_id } => {
            for id in levelscope_cli::sanctions(&RunStore::open(store)?, &run_id)? {
                println!("{id}");
            }
        }
        Command::Serve { store, bind, token_env, ui_dir } => {
            let token = match token_env {
                Some(var) => Some(std::env::var(&var).with_context(|| format!("{var} is not set"))?),
                None => None,
            };
            let app = service::router(RunStore::open(store)?, ServiceConfig { token, ui_dir, backend: None });
            tokio::runtime::Runtime::new()?.block_on(service::serve(app, &bind))?;
        }
    }
    Ok(())
}
