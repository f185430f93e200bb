mod common;

use std::time::Duration;

use axum::http::StatusCode;
use common::*;
use groupfield_core::pipeline::FrameBundle;
use groupfield_service::{Config, Mode, Service, Startup};
use serde_json::json;

#[tokio::test]
async fn cold_start() {
    let s = Service::start(Config::default(), Startup::Idle).unwrap();
    let r = s.router();
    let (code, v) = get(&r, "/state").await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(v["cold_start"], true);
    assert!(v["bundle"].is_null());
    assert_eq!(v["schema_version"], 1);
    let (_, h) = get(&r, "/history").await;
    assert_eq!(h["entries"].as_array().unwrap().len(), 0);
    let (code, e) = post(&r, "/scenario", json!({})).await;
    assert_eq!(code, StatusCode::CONFLICT, "{e}");
    assert!(e["error"].as_str().unwrap().contains("no live frame"));
}

#[tokio::test]
async fn golden_state_after_ingest() {
    let s = golden_replay();
    wait_for(|| s.latest().is_some(), Duration::from_secs(5)).await;
    let (code, v) = get(&s.router(), "/state").await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(v["cold_start"], false);
    let b: FrameBundle<f64> = serde_json::from_value(v["bundle"].clone()).unwrap();
    // one cold frame has no noise level, so R = a1 / (|St| + eps) + a2 * T_norm
    let st: f64 = -2.680278;
    let expected = 0.40 / (st.abs() + 0.10) + 0.35 * (6.8828 / 50.0);
    assert!((b.criticality.r_index - expected).abs() < 0.002, "R = {} vs {expected}", b.criticality.r_index);
    assert!(b.fields.noise.is_none());
    assert_eq!(b.criticality.zone, groupfield_core::criticality::Zone::Green);
    assert!(b.criticality.st_red_flag);
    assert!((b.fields.tension_mean - 6.88).abs() < 0.02);
    assert_eq!(s.status().mode, Mode::Replay);
    assert_eq!(s.status().frames, 1);
}

#[tokio::test]
async fn config_and_history_window() {
    let s = simulator("stable", 2, 20.0);
    wait_for(|| s.status().frames >= 30, Duration::from_secs(10)).await;
    let r = s.router();
    let (code, c) = get(&r, "/config").await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(c["calibration"]["vertical_name"], "negotiation");
    assert_eq!(c["config"]["stream_buffer"], 32);
    assert_eq!(c["status"]["mode"], "simulator");
    assert_eq!(c["status"]["preset"], "stable");

    let (_, all) = get(&r, "/history").await;
    let (_, recent) = get(&r, "/history?window=1").await;
    let all = all["entries"].as_array().unwrap().clone();
    let recent = recent["entries"].as_array().unwrap();
    assert!(all.len() >= 30);
    let last = recent.last().unwrap()["timestamp"].as_f64().unwrap();
    assert!(recent.iter().all(|e| last - e["timestamp"].as_f64().unwrap() <= 1.0));
    assert!(recent.len() >= 4 && recent.len() < all.len());
    let (code, _) = get(&r, "/history?window=-3").await;
    assert_eq!(code, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn control_validation() {
    let replay = golden_replay();
    let r = replay.router();
    let (code, _) = post(&r, "/simulator/control", json!({"command": "load-preset", "preset": "stable"})).await;
    assert_eq!(code, StatusCode::CONFLICT);
    let (code, _) = post(&r, "/simulator/control", json!({"command": "inject-perturbation", "agent": "1", "gesture": 3.2})).await;
    assert_eq!(code, StatusCode::CONFLICT);
    let (code, ack) = post(&r, "/simulator/control", json!({"command": "pause"})).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(ack["status"]["paused"], true);
    let (code, ack) = post(&r, "/simulator/control", json!({"command": "resume"})).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(ack["command"], "resume");
    assert_eq!(ack["status"]["paused"], false);

    let idle = Service::start(Config::default(), Startup::Idle).unwrap();
    let r = idle.router();
    let (code, e) = post(&r, "/simulator/control", json!({"command": "load-preset", "preset": "poker"})).await;
    assert_eq!(code, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(e["error"].as_str().unwrap().contains("unknown preset"));
    let (code, _) = post(&r, "/simulator/control", json!({"command": "warp"})).await;
    assert_eq!(code, StatusCode::BAD_REQUEST);
    let (code, ack) = post(&r, "/simulator/control", json!({"command": "load-preset", "preset": "stable", "seed": 3})).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(ack["status"]["mode"], "simulator");
    let (code, _) = post(&r, "/simulator/control", json!({"command": "inject-perturbation", "agent": "99", "gesture": 3.2})).await;
    assert_eq!(code, StatusCode::UNPROCESSABLE_ENTITY);
    let bad = json!({"command": "apply-intervention", "intervention": {
        "id": "X", "effects": [{"target": {"agent": "42"}, "channel": "gesture_setpoint", "value": {"scalar": 0.4}}]
    }});
    let (code, e) = post(&r, "/simulator/control", bad).await;
    assert_eq!(code, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(!e["issues"].as_array().unwrap().is_empty(), "{e}");
}

#[tokio::test]
async fn pause_then_resume_keeps_the_clock() {
    let s = simulator("stable", 5, 20.0);
    wait_for(|| s.status().frames >= 10, Duration::from_secs(10)).await;
    let paused = s.control(groupfield_service::ControlCommand::Pause).await.unwrap();
    let frozen = s.latest().unwrap().bundle.timestamp;
    tokio::time::sleep(Duration::from_millis(300)).await;
    assert_eq!(s.status().frames, paused.frames);
    assert_eq!(s.latest().unwrap().bundle.timestamp, frozen);
    let mut rx = s.subscribe();
    s.control(groupfield_service::ControlCommand::Resume).await.unwrap();
    let next = loop {
        let m = rx.recv().await.unwrap();
        let v: serde_json::Value = serde_json::from_str(m.as_str()).unwrap();
        if v["type"] == "frame" {
            break v["bundle"]["timestamp"].as_f64().unwrap();
        }
    };
    assert!((next - frozen - 0.25).abs() < 1e-9, "{frozen} -> {next}");
}

#[tokio::test]
async fn perturbation_raises_tension() {
    let s = simulator("stable", 1, 10.0);
    wait_for(|| s.status().frames >= 8, Duration::from_secs(10)).await;
    let before = s.latest().unwrap().bundle.fields.tension[0];
    assert!(before < 5.0, "T1 = {before}");
    let ack = s
        .control(groupfield_service::ControlCommand::InjectPerturbation { agent: "1".into(), gesture: 3.2 })
        .await
        .unwrap();
    wait_for(|| s.status().frames >= ack.frames + 8, Duration::from_secs(10)).await;
    let t1 = s.latest().unwrap().bundle.fields.tension[0];
    assert!(t1 > 20.0 && t1 < 50.0, "T1 = {t1}");
}

#[tokio::test]
async fn snapshots_are_never_torn() {
    let s = simulator("escalation", 9, 40.0);
    wait_for(|| s.status().frames >= 5, Duration::from_secs(10)).await;
    let r = s.router();
    let mut seen = std::collections::BTreeSet::new();
    for _ in 0..60 {
        let (_, v) = get(&r, "/state").await;
        let b: FrameBundle<f64> = serde_json::from_value(v["bundle"].clone()).unwrap();
        let t = b.timestamp;
        assert_eq!(b.frame.timestamp(), t);
        assert_eq!(b.fields.timestamp, t);
        assert_eq!(b.state.timestamp, t);
        assert_eq!(b.matrix.timestamp, t);
        assert_eq!(b.fields.tension.len(), b.frame.len());
        seen.insert(b.sequence);
        tokio::time::sleep(Duration::from_millis(3)).await;
    }
    assert!(seen.len() > 5);
}
