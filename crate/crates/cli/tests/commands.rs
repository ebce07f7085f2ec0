use levelscope::pipeline::{ModelChoice, PipelineConfig, RunOptions};
use levelscope::quality::PerturbationConfig;
use levelscope::store::RunStore;
use levelscope::synth::SynthConfig;
use levelscope::EpsStrategy;

#[test]
fn eps_flag_parsing() {
    assert_eq!(levelscope_cli::parse_eps("quantile:0.1").unwrap(), EpsStrategy::Quantile { q: 0.1 });
    assert_eq!(levelscope_cli::parse_eps("fixed:2.5").unwrap(), EpsStrategy::Fixed { value: 2.5 });
    for bad in ["0.1", "median:0.5", "quantile:x", "quantile:1.5", "fixed:-1"] {
        assert!(levelscope_cli::parse_eps(bad).is_err(), "{bad}");
    }
}

#[test]
fn config_paths_resolve_against_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(
        &path,
        "events = \"data/events.jsonl\"\nmin_samples = 4\nverifier = \"llm\"\n\n[eps_strategy]\nkind = \"fixed\"\nvalue = 1.5\n\n[llm]\nmodel = \"local\"\n",
    )
    .unwrap();
    let cfg = levelscope_cli::load_config(&path).unwrap();
    assert_eq!(cfg.events.unwrap(), dir.path().join("data/events.jsonl"));
    assert_eq!(cfg.min_samples, 4);
    assert_eq!(cfg.eps_strategy, EpsStrategy::Fixed { value: 1.5 });
    assert_eq!(cfg.llm.model, "local");
    assert_eq!(cfg.llm.api_key_env, PipelineConfig::default().llm.api_key_env);

    std::fs::write(&path, "epoch = 3\n").unwrap();
    assert!(levelscope_cli::load_config(&path).is_err(), "unknown keys are rejected");
}

#[test]
fn staged_commands_match_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let p = |f: &str| dir.path().join(f);
    let synth = SynthConfig { n_farms: 2, farm_size: 4, n_legit: 8, seed: 3, ..SynthConfig::default() };
    assert_eq!(levelscope_cli::synth(&synth, &p("events.jsonl"), Some(&p("truth.jsonl"))).unwrap(), 16);

    let cfg = PipelineConfig {
        events: Some(p("events.jsonl")),
        hidden_dim: 8,
        depth: 2,
        epochs: 2,
        batch_size: 8,
        ..PipelineConfig::default()
    };
    let (seqs, _) = levelscope_cli::ingest(&cfg, &p("events.jsonl"), &p("seq.jsonl")).unwrap();
    assert_eq!(seqs.len(), 16);
    levelscope_cli::train_model(&cfg, &p("seq.jsonl"), &p("m.ckpt")).unwrap();
    assert_eq!(levelscope_cli::embed(&p("m.ckpt"), &p("seq.jsonl"), &p("emb.jsonl")).unwrap(), 16);
    let assignments = levelscope_cli::cluster_embeddings(&cfg, &p("emb.jsonl"), &p("clu.jsonl")).unwrap();
    let sets = levelscope_cli::verify(&cfg, &p("seq.jsonl"), &p("clu.jsonl"), &p("ver.jsonl")).unwrap();

    let store = RunStore::open(p("runs")).unwrap();
    let id = levelscope_cli::run(&store, &cfg, &RunOptions::default()).unwrap();
    let run_clusters: Vec<levelscope::ClusterAssignment> = store.read_records(&id, levelscope::store::CLUSTERS).unwrap();
    let run_sets: Vec<levelscope::verify::VerdictSet> = store.read_records(&id, levelscope::store::VERDICTS).unwrap();
    assert_eq!(assignments, run_clusters);
    assert_eq!(sets, run_sets);

    let text = levelscope_cli::report_text(&store, &id).unwrap();
    assert!(text.starts_with("| eps | verified |"));
    assert!(levelscope_cli::sanctions(&store, &id).unwrap().is_empty());

    let table = levelscope_cli::eval_quality(
        &p("seq.jsonl"),
        &["dtw".to_string(), p("m.ckpt").to_string_lossy().into_owned()],
        &PerturbationConfig::default(),
    )
    .unwrap();
    assert!(table.starts_with("| Model | dtw | contrastive |"), "{table}");

    let dtw = PipelineConfig { model: ModelChoice::Dtw, ..cfg };
    assert!(levelscope_cli::run(&store, &dtw, &RunOptions::default()).is_err());
}
