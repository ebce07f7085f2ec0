use std::path::Path;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use levelscope::io::write_jsonl_file;
use levelscope::pipeline::{run_pipeline, PipelineConfig, RunOptions};
use levelscope::store::RunStore;
use levelscope::synth::{generate, SynthConfig};
use levelscope_cli::service::{router, ServiceConfig};

fn seeded_store(dir: &Path) -> (RunStore, String) {
    let synth = SynthConfig { n_farms: 3, farm_size: 5, n_legit: 15, seed: 11, ..SynthConfig::default() };
    let (events, _) = generate(&synth).unwrap();
    let path = dir.join("events.jsonl");
    write_jsonl_file(&path, &events).unwrap();
    let cfg = PipelineConfig {
        events: Some(path),
        hidden_dim: 8,
        depth: 2,
        epochs: 2,
        batch_size: 8,
        ..PipelineConfig::default()
    };
    let store = RunStore::open(dir.join("runs")).unwrap();
    let id = run_pipeline(&store, &cfg, &RunOptions { run_id: Some("r1".into()), ..RunOptions::default() }, None).unwrap();
    (store, id)
}

fn app(store: RunStore, token: Option<&str>) -> Router {
    router(store, ServiceConfig { token: token.map(str::to_string), ..ServiceConfig::default() })
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, bytes) = call_raw(app, method, uri, body, None).await;
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

async fn call_raw(app: &Router, method: Method, uri: &str, body: Option<Value>, auth: Option<&str>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(a) = auth {
        req = req.header("authorization", a);
    }
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

#[tokio::test]
async fn runs_report_and_cluster_queue() {
    let dir = tempfile::tempdir().unwrap();
    let (store, id) = seeded_store(dir.path());
    let app = app(store, None);

    let (st, runs) = call(&app, Method::GET, "/runs", None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(runs[0]["run_id"], id);
    assert_eq!(runs[0]["complete"], true);

    let (st, report) = call(&app, Method::GET, &format!("/runs/{id}/report"), None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(report["table"].as_array().unwrap().len(), 2);
    assert!(report["n_clusters"].as_u64().unwrap() >= 1);

    let (_, clusters) = call(&app, Method::GET, &format!("/runs/{id}/clusters"), None).await;
    let list = clusters.as_array().unwrap();
    assert!(!list.is_empty());
    // Review-needed clusters first, then ascending acc_info.
    let keys: Vec<(bool, f64)> =
        list.iter().map(|c| (c["status"] != "needs_human_review", c["acc_info"].as_f64().unwrap())).collect();
    assert!(keys.windows(2).all(|w| (!w[0].0 && w[1].0) || (w[0].0 == w[1].0 && w[0].1 <= w[1].1)));
    assert!(list.iter().all(|c| c["resolved"] == false));

    let (_, ok_only) = call(&app, Method::GET, &format!("/runs/{id}/clusters?status=ok"), None).await;
    assert!(ok_only.as_array().unwrap().iter().all(|c| c["status"] == "ok"));
    let day = list[0]["active_days"][0].as_str().unwrap();
    let (_, on_day) = call(&app, Method::GET, &format!("/runs/{id}/clusters?day={day}"), None).await;
    assert!(on_day.as_array().unwrap().iter().any(|c| c["cluster_id"] == list[0]["cluster_id"]));
    let (_, none) = call(&app, Method::GET, &format!("/runs/{id}/clusters?day=1999-01-01"), None).await;
    assert!(none.as_array().unwrap().is_empty());
}

#[tokio::test]
async fn errors_carry_a_json_body() {
    let dir = tempfile::tempdir().unwrap();
    let (store, id) = seeded_store(dir.path());
    let app = app(store, None);
    for (uri, kind) in [
        ("/runs/nope/report".to_string(), "unknown_run"),
        (format!("/runs/{id}/clusters/9999"), "unknown_cluster"),
        (format!("/runs/{id}/clusters/abc/chart"), "unknown_cluster"),
        ("/nowhere".to_string(), "not_found"),
    ] {
        let (st, body) = call(&app, Method::GET, &uri, None).await;
        assert_eq!(st, StatusCode::NOT_FOUND, "{uri}");
        assert_eq!(body["error"], kind, "{uri}");
        assert!(body["detail"].is_string());
    }
    let (st, body) = call(
        &app,
        Method::POST,
        &format!("/runs/{id}/characters/ghost/decision"),
        Some(json!({"decision": "approved"})),
    )
    .await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    assert_eq!(body["error"], "unknown_character");
}

#[tokio::test]
async fn bearer_token_is_enforced() {
    let dir = tempfile::tempdir().unwrap();
    let (store, _) = seeded_store(dir.path());
    let app = app(store, Some("s3cret"));
    let (st, _) = call_raw(&app, Method::GET, "/runs", None, None).await;
    assert_eq!(st, StatusCode::UNAUTHORIZED);
    let (st, _) = call_raw(&app, Method::GET, "/runs", None, Some("Bearer wrong")).await;
    assert_eq!(st, StatusCode::UNAUTHORIZED);
    let (st, _) = call_raw(&app, Method::GET, "/runs", None, Some("Bearer s3cret")).await;
    assert_eq!(st, StatusCode::OK);
}

/// The review console's flow: open a cluster, approve a bot, reject the
/// rest, and read back sanctions and the resolved flag.
#[tokio::test]
async fn review_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (store, id) = seeded_store(dir.path());
    let app = app(store, None);

    let (_, clusters) = call(&app, Method::GET, &format!("/runs/{id}/clusters?status=ok"), None).await;
    let cluster = clusters
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["size"].as_u64().unwrap() > c["excluded"].as_array().unwrap().len() as u64)
        .expect("a verified cluster with bot verdicts")
        .clone();
    let cid = cluster["cluster_id"].as_u64().unwrap();

    let (st, view) = call(&app, Method::GET, &format!("/runs/{id}/clusters/{cid}"), None).await;
    assert_eq!(st, StatusCode::OK);
    let members = view["members"].as_array().unwrap().clone();
    assert_eq!(members.len() as u64, cluster["size"].as_u64().unwrap());
    assert!(members.iter().all(|m| m["decision"] == "pending" && m["verdict"].is_string()));

    let (_, chart) = call(&app, Method::GET, &format!("/runs/{id}/clusters/{cid}/chart"), None).await;
    assert_eq!(view["chart"], chart);
    assert_eq!(chart["series"].as_array().unwrap().len(), members.len());

    let (st, svg) = call_raw(&app, Method::GET, &format!("/runs/{id}/clusters/{cid}/chart.svg"), None, None).await;
    assert_eq!(st, StatusCode::OK);
    let svg = String::from_utf8(svg).unwrap();
    assert_eq!(svg.matches("<polyline").count(), members.len());

    let bot = members.iter().find(|m| m["verdict"] == "BOT").unwrap()["character_id"].as_str().unwrap().to_string();
    let (st, resp) = call(
        &app,
        Method::POST,
        &format!("/runs/{id}/characters/{bot}/decision"),
        Some(json!({"decision": "approved", "note": "same route", "moderator_id": "mod-a", "expected": "pending"})),
    )
    .await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(resp["audit_len"], 1);
    let (_, sanctions) = call(&app, Method::GET, &format!("/runs/{id}/sanctions"), None).await;
    assert_eq!(sanctions["sanctions"], json!([bot.clone()]));
    assert_eq!(sanctions["decisions"][&bot]["moderator_id"], "mod-a");

    // A client that still believes the character is pending is refused.
    let (st, body) = call(
        &app,
        Method::POST,
        &format!("/runs/{id}/characters/{bot}/decision"),
        Some(json!({"decision": "rejected", "expected": "pending"})),
    )
    .await;
    assert_eq!(st, StatusCode::CONFLICT);
    assert_eq!(body["error"], "decision_conflict");

    for m in &members {
        let pid = m["character_id"].as_str().unwrap();
        let (st, _) = call(
            &app,
            Method::POST,
            &format!("/runs/{id}/characters/{pid}/decision"),
            Some(json!({"decision": "rejected", "moderator_id": "mod-b"})),
        )
        .await;
        assert_eq!(st, StatusCode::OK);
    }
    let (_, sanctions) = call(&app, Method::GET, &format!("/runs/{id}/sanctions"), None).await;
    assert_eq!(sanctions["sanctions"], json!([]));
    let (_, clusters) = call(&app, Method::GET, &format!("/runs/{id}/clusters"), None).await;
    let again = clusters.as_array().unwrap().iter().find(|c| c["cluster_id"] == cid).unwrap().clone();
    assert_eq!(again["resolved"], true);

    let (_, history) = call(&app, Method::GET, &format!("/runs/{id}/characters/{bot}/decisions"), None).await;
    let decisions: Vec<&str> = history.as_array().unwrap().iter().map(|d| d["decision"].as_str().unwrap()).collect();
    assert_eq!(decisions, ["approved", "rejected"]);
}

#[tokio::test]
async fn reverify_runs_as_a_task() {
    let dir = tempfile::tempdir().unwrap();
    let (store, id) = seeded_store(dir.path());
    let app = app(store, None);
    let (_, clusters) = call(&app, Method::GET, &format!("/runs/{id}/clusters"), None).await;
    let cid = clusters[0]["cluster_id"].as_u64().unwrap();
    let (_, before) = call(&app, Method::GET, &format!("/runs/{id}/clusters/{cid}"), None).await;

    let (st, task) = call(&app, Method::POST, &format!("/runs/{id}/clusters/{cid}/reverify"), None).await;
    assert_eq!(st, StatusCode::ACCEPTED);
    assert_eq!(task["status"], "pending");
    let tid = task["task_id"].as_str().unwrap().to_string();

    let mut done = Value::Null;
    for _ in 0..200 {
        let (st, t) = call(&app, Method::GET, &format!("/runs/{id}/tasks/{tid}"), None).await;
        assert_eq!(st, StatusCode::OK);
        if t["status"] != "pending" {
            done = t;
            break;
        }
        tokio::time::sleep(Duration::from_millis(25)).await;
    }
    assert_eq!(done["status"], "done", "{done}");
    assert_eq!(done["result"]["cluster_id"], cid);

    // The heuristic is deterministic, so the view is unchanged.
    let (_, after) = call(&app, Method::GET, &format!("/runs/{id}/clusters/{cid}"), None).await;
    assert_eq!(before, after);

    let (st, _) = call(&app, Method::GET, &format!("/runs/other/tasks/{tid}"), None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    let (st, _) = call(&app, Method::POST, &format!("/runs/{id}/clusters/9999/reverify"), None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
}
