mod common;

use std::time::{Duration, Instant};

use axum::http::StatusCode;
use common::*;
use groupfield_core::chain::ChainStep;
use groupfield_core::model::AgentId;
use groupfield_core::scenario::{reference_candidates, ScenarioResult};
use groupfield_core::synthetic::golden_frame;
use serde_json::{json, Value};

fn golden_request(candidates: Value) -> Value {
    json!({ "candidates": candidates, "frame": golden_frame::<f64>().into_frame() })
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn golden_recommendation_and_cache() {
    let s = golden_replay();
    let r = s.router();
    let mut rx = s.subscribe();
    let candidates = serde_json::to_value(reference_candidates(AgentId::from(1u32), AgentId::from(5u32))).unwrap();

    let (code, first) = post(&r, "/scenario", golden_request(candidates.clone())).await;
    assert_eq!(code, StatusCode::OK, "{first}");
    assert_eq!(first["cached"], false);
    let result: ScenarioResult = serde_json::from_value(first["result"].clone()).unwrap();
    assert_eq!(result.recommended, "A");
    assert_eq!(result.follow_up.as_deref(), Some("B"));
    let factor = result.causal_chain.steps.iter().find_map(|s| match s {
        ChainStep::Mechanism { column_factors, .. } => column_factors.first().cloned(),
        _ => None,
    });
    let f = factor.expect("mechanism step names a column factor");
    assert!((f.from - 2.60).abs() < 1e-12 && (f.to - 1.20).abs() < 1e-12, "{f:?}");

    let mut progress = 0;
    let mut done = false;
    while let Ok(m) = rx.try_recv() {
        let v: Value = serde_json::from_str(m.as_str()).unwrap();
        match v["type"].as_str() {
            Some("scenario_progress") => {
                assert_eq!(v["request_id"], first["request_id"]);
                progress += 1;
            }
            Some("scenario_done") => done = v["recommended"] == "A",
            _ => {}
        }
    }
    assert_eq!(progress, 3);
    assert!(done);

    let start = Instant::now();
    let (code, again) = post(&r, "/scenario", golden_request(candidates)).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(again["cached"], true);
    assert_eq!(again["request_id"], first["request_id"]);
    assert_eq!(again["result"], first["result"]);
    assert!(start.elapsed() < Duration::from_millis(500));
}

#[tokio::test]
async fn empty_candidates_give_the_noop_only() {
    let s = golden_replay();
    let mut req = golden_request(json!([]));
    req["overrides"] = json!({ "ensemble_size": 10, "horizon": 30.0 });
    let (code, v) = post(&s.router(), "/scenario", req).await;
    assert_eq!(code, StatusCode::OK, "{v}");
    let result: ScenarioResult = serde_json::from_value(v["result"].clone()).unwrap();
    assert_eq!(result.outcomes.len(), 1);
    assert_eq!(result.recommended, "0");
    assert_eq!(result.params.ensemble_size, 10);
    assert_eq!(result.follow_up, None);
}

#[tokio::test]
async fn invalid_requests_list_their_fields() {
    let s = golden_replay();
    let r = s.router();
    let bad = json!([{
        "id": "X",
        "effects": [{ "target": { "agent": "42" }, "channel": "gesture_setpoint", "value": { "scalar": 0.4 } }]
    }]);
    let (code, e) = post(&r, "/scenario", golden_request(bad)).await;
    assert_eq!(code, StatusCode::UNPROCESSABLE_ENTITY);
    let fields: Vec<&str> = e["issues"].as_array().unwrap().iter().map(|i| i["field"].as_str().unwrap()).collect();
    assert!(!fields.is_empty() && fields.iter().all(|f| f.starts_with("candidates[0].")), "{e}");

    let mut req = golden_request(json!([]));
    req["overrides"] = json!({ "dt": -1.0 });
    let (code, e) = post(&r, "/scenario", req).await;
    assert_eq!(code, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(e["issues"].as_array().is_some_and(|i| !i.is_empty()), "{e}");

    let (code, _) = post(&r, "/scenario", json!({ "candidates": "A" })).await;
    assert_eq!(code, StatusCode::BAD_REQUEST);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn state_answers_during_a_scenario() {
    let s = simulator("stable", 6, 1.0);
    let r = s.router();
    wait_for(|| s.latest().is_some(), Duration::from_secs(5)).await;
    let job = {
        let r = r.clone();
        tokio::spawn(async move {
            let req = json!({ "candidates": [], "overrides": { "ensemble_size": 200, "rng_seed": 99 } });
            post(&r, "/scenario", req).await
        })
    };
    tokio::time::sleep(Duration::from_millis(300)).await;
    let mut worst = Duration::ZERO;
    for _ in 0..10 {
        let start = Instant::now();
        let (code, v) = get(&r, "/state").await;
        worst = worst.max(start.elapsed());
        assert_eq!(code, StatusCode::OK);
        assert_eq!(v["cold_start"], false);
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    assert!(!job.is_finished(), "scenario finished before the measurement ended");
    assert!(worst < Duration::from_millis(50), "worst /state latency {worst:?}");
    let (code, _) = job.await.unwrap();
    assert_eq!(code, StatusCode::OK);
}
