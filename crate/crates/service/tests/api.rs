use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use blend_core::alignment::AlignmentParams;
use blend_core::blender::{blend, BlendRequest};
use blend_core::model::{BlendDecision, Candidate, ContentType, Plan, PlanRegistry, Selector, TimeWindow};
use blend_core::sim::{generate_request, scenarios, SimConfig};
use blend_service::{router, Mode, ServiceConfig, ServiceState, TickMessage};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn seed_dir(dir: &Path, plans: Vec<Plan>, alignment: &AlignmentParams) {
    let reg = PlanRegistry::new(plans).unwrap();
    std::fs::write(dir.join("registry.json"), serde_json::to_string(&reg).unwrap()).unwrap();
    std::fs::write(dir.join("alignment.json"), serde_json::to_string(alignment).unwrap()).unwrap();
}

fn config(dir: &Path, window_len: u64) -> ServiceConfig {
    ServiceConfig {
        data_dir: Some(dir.to_path_buf()),
        window_len,
        sim: SimConfig {
            warmup_requests: 300,
            ..SimConfig::default()
        },
        ..ServiceConfig::default()
    }
}

/// The hand-computed case: A is an ad at aligned 0.5, B and C organic at
/// 0.6 and 0.55, with alignment ratio 1.
fn worked_request(id: &str) -> Value {
    json!({
        "request_id": id,
        "k": 2,
        "candidates": [
            {"id": "A", "content_type": "ad", "raw_score": 0.5},
            {"id": "B", "content_type": "organic", "raw_score": 0.6},
            {"id": "C", "content_type": "organic", "raw_score": 0.55},
        ]
    })
}

fn ad_plan(bias: f64) -> Plan {
    Plan::static_plan("ad", Selector::content_type(ContentType::Ad), 0.0, bias)
}

fn unit_alignment() -> AlignmentParams {
    AlignmentParams::new(0.5, 0.5).unwrap()
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(match body {
            Some(v) => Body::from(serde_json::to_vec(&v).unwrap()),
            None => Body::empty(),
        })
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, value)
}

async fn raw_post(app: &Router, uri: &str, body: &'static str) -> StatusCode {
    let req = Request::builder()
        .method(Method::POST)
        .uri(uri)
        .body(Body::from(body))
        .unwrap();
    app.clone().oneshot(req).await.unwrap().status()
}

fn ids(d: &Value) -> Vec<String> {
    d["ranked"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x["candidate_id"].as_str().unwrap().to_string())
        .collect()
}

#[tokio::test]
async fn blend_over_the_wire_matches_hand_computation() {
    let dir = tempfile::tempdir().unwrap();
    seed_dir(dir.path(), vec![ad_plan(0.2)], &unit_alignment());
    let state = ServiceState::open(config(dir.path(), 100)).unwrap();
    let app = router(state.clone());

    let (status, d) = call(&app, Method::POST, "/blend", Some(worked_request("r1"))).await;
    assert_eq!(status, StatusCode::OK, "{d}");
    assert_eq!(ids(&d), ["A", "B", "C"]);
    assert_eq!(d["exposed_k"], 2);
    let a = &d["ranked"][0];
    assert!((a["aligned"].as_f64().unwrap() - 0.5).abs() < 1e-12);
    assert!((a["plan_boosts"]["ad"].as_f64().unwrap() - 0.2).abs() < 1e-12);
    assert!((a["final"].as_f64().unwrap() - 0.7).abs() < 1e-12);
    assert!((d["ranked"][1]["final"].as_f64().unwrap() - 0.6).abs() < 1e-12);
    assert!((d["ranked"][2]["final"].as_f64().unwrap() - 0.55).abs() < 1e-12);
    assert_eq!(d["registry_version"], 0);
    assert_eq!(d["alignment_snapshot"]["mu_anchor"], 0.5);

    // identical posts under unchanged snapshots give identical decisions
    let (_, again) = call(&app, Method::POST, "/blend", Some(worked_request("r1"))).await;
    assert_eq!(again, d);
    // every ranked candidate is logged once; the duplicate request is absorbed
    assert_eq!(state.tracker().len(), 3);
    assert_eq!(state.decisions().len(), 2);
}

#[tokio::test]
async fn invalid_bodies_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    seed_dir(dir.path(), vec![ad_plan(0.2)], &unit_alignment());
    let app = router(ServiceState::open(config(dir.path(), 100)).unwrap());
    let empty = json!({"request_id": "e", "k": 2, "candidates": []});
    assert_eq!(call(&app, Method::POST, "/blend", Some(empty)).await.0, StatusCode::BAD_REQUEST);
    let negative = json!({"request_id": "n", "k": 1, "candidates": [{"id": "x", "content_type": "ad", "raw_score": -0.1}]});
    assert_eq!(call(&app, Method::POST, "/blend", Some(negative)).await.0, StatusCode::BAD_REQUEST);
    let zero_k = json!({"request_id": "z", "k": 0, "candidates": [{"id": "x", "content_type": "ad", "raw_score": 0.1}]});
    assert_eq!(call(&app, Method::POST, "/blend", Some(zero_k)).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(raw_post(&app, "/blend", "{not json").await, StatusCode::BAD_REQUEST);
    assert_eq!(raw_post(&app, "/whatif", "[]").await, StatusCode::BAD_REQUEST);
    let (status, _) = call(&app, Method::PUT, "/mode", Some(json!({"mode": "turbo"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn degenerate_alignment_answers_503() {
    let dir = tempfile::tempdir().unwrap();
    let mut bad = unit_alignment();
    bad.mu_score = 0.0;
    seed_dir(dir.path(), vec![ad_plan(0.2)], &bad);
    let app = router(ServiceState::open(config(dir.path(), 100)).unwrap());
    let (status, body) = call(&app, Method::POST, "/blend", Some(worked_request("r"))).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert!(body["error"].as_str().unwrap().contains("degenerate") || body["error"].is_string());
    assert_eq!(call(&app, Method::GET, "/healthz", None).await.0, StatusCode::OK);
}

#[tokio::test]
async fn plan_edits_swap_the_registry() {
    let dir = tempfile::tempdir().unwrap();
    let boost = Plan::static_plan("ad", Selector::content_type(ContentType::Ad), 0.2, 0.0);
    seed_dir(dir.path(), vec![boost], &unit_alignment());
    let app = router(ServiceState::open(config(dir.path(), 100)).unwrap());

    let (_, d) = call(&app, Method::POST, "/blend", Some(worked_request("w1"))).await;
    let boost_of_a = |d: &Value| {
        d["ranked"]
            .as_array()
            .unwrap()
            .iter()
            .find(|x| x["candidate_id"] == "A")
            .unwrap()["plan_boosts"]["ad"]
            .as_f64()
            .unwrap()
    };
    assert!((boost_of_a(&d) - 0.2 * 0.5).abs() < 1e-12);

    let (status, body) = call(
        &app,
        Method::PUT,
        "/plans/ad",
        Some(json!({"selector": {"content_type": "ad"}, "weight": 0.3, "mode": "static", "expected_version": 0})),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["version"], 1);
    let (_, d) = call(&app, Method::POST, "/blend", Some(worked_request("w2"))).await;
    assert_eq!(d["registry_version"], 1);
    assert!((boost_of_a(&d) - 0.3 * 0.5).abs() < 1e-12);

    // stale expected_version, in the body or the query
    let (status, body) = call(
        &app,
        Method::PUT,
        "/plans/ad",
        Some(json!({"selector": {"content_type": "ad"}, "weight": 0.9, "mode": "static", "expected_version": 0})),
    )
    .await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["current_version"], 1);
    let (status, _) = call(&app, Method::DELETE, "/plans/ad?expected_version=0", None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (_, current) = call(&app, Method::GET, "/plans/ad", None).await;
    assert_eq!(current["weight"], 0.3);

    // invalid plans and mismatched ids are rejected without a version bump
    let (status, _) = call(
        &app,
        Method::PUT,
        "/plans/ad",
        Some(json!({"weight": 0.5, "mode": "pid_delivered", "target_share": 0.1})),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&app, Method::PUT, "/plans/ad", Some(json!({"plan_id": "other", "mode": "static"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    // old versions stay addressable
    let (_, v0) = call(&app, Method::GET, "/plans/versions/0", None).await;
    assert_eq!(v0["plans"][0]["weight"], 0.2);
    assert_eq!(call(&app, Method::GET, "/plans/versions/99", None).await.0, StatusCode::NOT_FOUND);

    let (status, body) = call(&app, Method::DELETE, "/plans/ad?expected_version=1", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["version"], 2);
    assert_eq!(call(&app, Method::GET, "/plans/ad", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, Method::DELETE, "/plans/ad", None).await.0, StatusCode::NOT_FOUND);

    // whole-registry replacement
    let (status, reg) = call(
        &app,
        Method::PUT,
        "/plans",
        Some(json!({"plans": [{"plan_id": "x", "mode": "static", "bias": 0.1}], "expected_version": 2})),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{reg}");
    assert_eq!(reg["version"], 3);
    let (_, listed) = call(&app, Method::GET, "/plans", None).await;
    assert_eq!(listed, reg);
}

#[tokio::test]
async fn whatif_is_pure_and_shows_the_entering_ad() {
    let dir = tempfile::tempdir().unwrap();
    seed_dir(dir.path(), vec![ad_plan(0.0)], &unit_alignment());
    let state = ServiceState::open(config(dir.path(), 100)).unwrap();
    let app = router(state.clone());
    call(&app, Method::POST, "/blend", Some(worked_request("seed"))).await;
    let logged = state.tracker().len();
    let version = state.snapshot().registry.version();

    let body = json!({"request": worked_request("probe"), "overrides": {"ad": {"bias": 0.2}}});
    let (status, out) = call(&app, Method::POST, "/whatif", Some(body)).await;
    assert_eq!(status, StatusCode::OK, "{out}");
    assert_eq!(ids(&out["current"])[..2], ["B", "C"]);
    assert_eq!(ids(&out["hypothetical"])[..2], ["A", "B"]);
    assert_eq!(out["changed"], json!(["A", "C"]));
    assert_eq!(out["hypothetical"]["registry_version"], out["current"]["registry_version"]);

    let (_, same) = call(
        &app,
        Method::POST,
        "/whatif",
        Some(json!({"request": worked_request("probe"), "overrides": {"ad": {"bias": 0.0}}})),
    )
    .await;
    assert_eq!(same["current"], same["hypothetical"]);
    assert_eq!(same["changed"], json!([]));

    let (status, _) = call(
        &app,
        Method::POST,
        "/whatif",
        Some(json!({"request": worked_request("probe"), "overrides": {"ghost": {"bias": 1.0}}})),
    )
    .await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    for i in 0..50 {
        let body = json!({"request": worked_request(&format!("p{i}")), "overrides": {"ad": {"bias": i as f64 / 10.0, "weight": 0.0, "enabled": i % 2 == 0}}});
        assert_eq!(call(&app, Method::POST, "/whatif", Some(body)).await.0, StatusCode::OK);
    }
    assert_eq!(state.tracker().len(), logged);
    assert_eq!(state.decisions().len(), 1);
    assert_eq!(state.snapshot().registry.version(), version);
    assert_eq!(state.requests(), 1);
}

#[tokio::test]
async fn reports_wait_for_the_window_to_close() {
    let dir = tempfile::tempdir().unwrap();
    seed_dir(dir.path(), vec![ad_plan(0.2)], &unit_alignment());
    let state = ServiceState::open(config(dir.path(), 3)).unwrap();
    let app = router(state.clone());
    for i in 0..2 {
        call(&app, Method::POST, "/blend", Some(worked_request(&format!("q{i}")))).await;
    }
    let (status, _) = call(&app, Method::GET, "/reports/plans?window=0", None).await;
    assert_eq!(status.as_u16(), 425);
    assert_eq!(call(&app, Method::GET, "/reports/plans?window=zz", None).await.0, StatusCode::BAD_REQUEST);
    call(&app, Method::POST, "/blend", Some(worked_request("q2"))).await;

    let (status, body) = call(&app, Method::GET, "/reports/plans?window=0", None).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let reports = body["reports"].as_array().unwrap();
    assert_eq!(reports.len(), 1);
    let r = &reports[0];
    assert_eq!(r["plan_id"], "ad");
    assert_eq!(r["vv_lift"], 3);
    assert!((r["cost"].as_f64().unwrap() - 0.15).abs() < 1e-9);
    assert!((r["roi_vv"].as_f64().unwrap() - 20.0).abs() < 1e-6);
    assert!((r["boost_spend"].as_f64().unwrap() - 0.6).abs() < 1e-9);
    assert!((r["exposure_share"].as_f64().unwrap() - 0.5).abs() < 1e-12);
    // the same window by timestamp range
    let (_, by_range) = call(&app, Method::GET, "/reports/plans?window=0-3", None).await;
    assert_eq!(by_range["reports"], body["reports"]);
    assert_eq!(call(&app, Method::GET, "/reports/plans?window=0-4", None).await.0.as_u16(), 425);
}

fn rebuild_request(events: &[blend_core::tracking::ExposureEvent], d: &BlendDecision) -> BlendRequest {
    let candidates: Vec<Candidate> = events
        .iter()
        .filter(|e| e.request_id == d.request_id)
        .map(|e| Candidate {
            id: e.candidate_id.clone(),
            content_type: e.content_type.clone(),
            raw_score: e.decomposition.raw,
            tags: e.tags.clone(),
        })
        .collect();
    BlendRequest::new(d.request_id.clone(), candidates, d.exposed_k)
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_edits_never_tear_a_decision() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), 200);
    cfg.sim.plans = PlanRegistry::new(vec![
        scenarios::ad_plan(0.1),
        Plan::static_plan("fresh", Selector::content_type(ContentType::ColdStart), 0.3, 0.01),
    ])
    .unwrap();
    let sim = cfg.sim.clone();
    let state = ServiceState::open(cfg).unwrap();
    let app = router(state.clone());
    let done = Arc::new(std::sync::atomic::AtomicBool::new(false));
    let landed = Arc::new(std::sync::atomic::AtomicU64::new(0));

    let writer = {
        let (app, done, landed) = (app.clone(), done.clone(), landed.clone());
        tokio::spawn(async move {
            let mut puts = 0;
            while !done.load(std::sync::atomic::Ordering::SeqCst) {
                let w = 0.1 + (puts % 7) as f64 * 0.1;
                let (status, _) = call(
                    &app,
                    Method::PUT,
                    "/plans/fresh",
                    Some(json!({"selector": {"content_type": "cold_start"}, "weight": w, "bias": 0.01, "mode": "static"})),
                )
                .await;
                assert_eq!(status, StatusCode::OK);
                puts += 1;
                landed.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                tokio::task::yield_now().await;
            }
            puts
        })
    };
    let live = {
        let state = state.clone();
        tokio::task::spawn_blocking(move || {
            for _ in 0..600 {
                state.serve_simulated().unwrap();
            }
        })
    };
    let mut clients = Vec::new();
    for c in 0..4u64 {
        let (app, sim, landed) = (app.clone(), sim.clone(), landed.clone());
        clients.push(tokio::spawn(async move {
            let mut out = Vec::new();
            for i in 0..300u64 {
                // on a single core the writer can starve; let an edit land every 30 requests
                if i % 30 == 0 {
                    let seen = landed.load(std::sync::atomic::Ordering::SeqCst);
                    while landed.load(std::sync::atomic::Ordering::SeqCst) == seen {
                        tokio::task::yield_now().await;
                    }
                }
                let t = c * 1_000_000 + i;
                let mut req = generate_request(&sim, t);
                req.request_id = format!("h{t}");
                let (status, d) = call(&app, Method::POST, "/blend", Some(serde_json::to_value(&req).unwrap())).await;
                assert_eq!(status, StatusCode::OK);
                out.push(serde_json::from_value::<BlendDecision>(d).unwrap());
            }
            out
        }));
    }
    let mut served = Vec::new();
    for c in clients {
        served.extend(c.await.unwrap());
    }
    live.await.unwrap();
    done.store(true, std::sync::atomic::Ordering::SeqCst);
    assert!(writer.await.unwrap() > 0);

    state.flush().unwrap();
    let mut by_request: BTreeMap<(String, u64), Vec<_>> = BTreeMap::new();
    for e in state.events_in(TimeWindow::new(0, u64::MAX)).unwrap() {
        by_request.entry((e.request_id.clone(), e.timestamp)).or_default().push(e);
    }
    let logged = state.decisions();
    assert_eq!(logged.len(), 1800);
    assert_eq!(by_request.len(), 1800);
    let mut versions = std::collections::BTreeSet::new();
    let mut mus = std::collections::BTreeSet::new();
    let mut decisions = BTreeMap::new();
    for l in &logged {
        let events = &by_request[&(l.request_id.clone(), l.timestamp)];
        let d = l.decision(events).unwrap();
        let registry = state.registry_at(d.registry_version).unwrap();
        let again = blend(&rebuild_request(events, &d), &registry, &d.alignment_snapshot).unwrap();
        assert_eq!(again, d);
        versions.insert(d.registry_version);
        mus.insert(d.alignment_snapshot.mu_score.to_bits());
        decisions.insert(d.request_id.clone(), d);
    }
    for d in &served {
        assert_eq!(&decisions[&d.request_id], d);
    }
    assert!(versions.len() > 10, "{versions:?}");
    assert!(mus.len() > 1);
}

#[tokio::test]
async fn restart_resumes_with_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), 100);
    cfg.sim.plans = PlanRegistry::new(vec![scenarios::ad_plan(0.1)]).unwrap();
    let probe = {
        let mut r = generate_request(&cfg.sim, 999_999);
        r.request_id = "probe".into();
        serde_json::to_value(r).unwrap()
    };
    let (before, snap, controller, events, decisions, closed) = {
        let state = ServiceState::open(cfg.clone()).unwrap();
        for _ in 0..450 {
            state.serve_simulated().unwrap();
        }
        state.settle();
        let app = router(state.clone());
        let (_, d) = call(&app, Method::POST, "/whatif", Some(json!({"request": probe.clone()}))).await;
        state.flush().unwrap();
        (
            d["current"].clone(),
            state.snapshot(),
            state.controller(),
            state.tracker().len(),
            state.decisions().len(),
            state.closed_until(),
        )
    };
    assert_eq!(closed, 400);
    assert!(snap.registry.version() >= 4);

    let state = ServiceState::open(cfg).unwrap();
    assert_eq!(state.snapshot(), snap);
    assert_eq!(state.controller(), controller);
    assert_eq!(state.tracker().len(), events);
    assert_eq!(state.decisions().len(), decisions);
    assert_eq!(state.closed_until(), closed);
    assert_eq!(state.requests(), 450);
    let app = router(state.clone());
    let (_, after) = call(&app, Method::POST, "/blend", Some(probe)).await;
    assert_eq!(after, before);

    // windows keep closing where they left off
    for _ in 0..49 {
        state.serve_simulated().unwrap();
    }
    state.settle();
    assert_eq!(state.closed_until(), 500);
    assert_eq!(state.latest_tick().unwrap().window_id, 4);
}

async fn next_event(body: &mut Body, deadline: Duration) -> Option<(String, Value, Option<String>)> {
    let start = Instant::now();
    let mut buf = String::new();
    loop {
        if let Some(i) = buf.find("\n\n") {
            let block: String = buf[..i].to_string();
            let (mut name, mut data, mut id) = (String::new(), String::new(), None);
            for line in block.lines() {
                if let Some(v) = line.strip_prefix("event: ") {
                    name = v.to_string();
                } else if let Some(v) = line.strip_prefix("data: ") {
                    data.push_str(v);
                } else if let Some(v) = line.strip_prefix("id: ") {
                    id = Some(v.to_string());
                }
            }
            if name.is_empty() {
                buf.drain(..i + 2);
                continue;
            }
            return Some((name, serde_json::from_str(&data).unwrap_or(Value::String(data)), id));
        }
        let left = deadline.checked_sub(start.elapsed())?;
        let frame = tokio::time::timeout(left, body.frame()).await.ok()??.ok()?;
        if let Ok(bytes) = frame.into_data() {
            buf.push_str(std::str::from_utf8(&bytes).unwrap());
        }
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn stream_pushes_one_tick_per_window() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), 100);
    cfg.live_rps = 2_000.0;
    cfg.sim.plans = PlanRegistry::new(vec![scenarios::ad_plan(0.1)]).unwrap();
    let state = ServiceState::open(cfg).unwrap();
    let app = router(state.clone());

    let resp = app
        .clone()
        .oneshot(Request::get("/metrics/stream").body(Body::empty()).unwrap())
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert!(resp.headers()["content-type"].to_str().unwrap().starts_with("text/event-stream"));
    let mut body = resp.into_body();
    let (name, hello, _) = next_event(&mut body, Duration::from_secs(5)).await.unwrap();
    assert_eq!(name, "snapshot");
    assert_eq!(hello["registry"]["plans"][0]["plan_id"], "ads");
    assert_eq!(hello["mode"], "idle");

    let (status, _) = call(&app, Method::PUT, "/mode", Some(json!({"mode": "live_sim"}))).await;
    assert_eq!(status, StatusCode::OK);
    let interval = Duration::from_secs_f64(100.0 / 2_000.0);
    let started = Instant::now();
    let mut seen = Vec::new();
    while seen.len() < 3 {
        let (name, tick, id) = next_event(&mut body, Duration::from_secs(10)).await.expect("tick");
        if name != "tick" {
            continue;
        }
        if seen.is_empty() {
            // one window interval plus scheduling slack on a loaded host
            assert!(started.elapsed() < interval * 4 + Duration::from_millis(500), "{:?}", started.elapsed());
        }
        let msg: TickMessage = serde_json::from_value(tick).unwrap();
        assert_eq!(id.unwrap(), msg.window_id.to_string());
        let ads = &msg.plans["ads"];
        assert!(ads.exposure_share.unwrap() >= 0.0);
        assert_eq!(ads.target_share, Some(0.1));
        assert!(msg.exposures > 0);
        seen.push(msg.window_id);
    }
    assert!(seen.windows(2).all(|w| w[1] > w[0]), "{seen:?}");
    assert!(seen.iter().skip(1).all(|w| *w > 0));

    call(&app, Method::PUT, "/mode", Some(json!({"mode": "idle"}))).await;
    let (_, mode) = call(&app, Method::GET, "/mode", None).await;
    assert_eq!(mode["mode"], "idle");
    let stopped = state.requests();
    tokio::time::sleep(Duration::from_millis(150)).await;
    assert_eq!(state.requests(), stopped);
    assert_eq!(state.mode(), Mode::Idle);

    let (status, latest) = call(&app, Method::GET, "/metrics/latest", None).await;
    assert_eq!(status, StatusCode::OK);
    assert!(latest["drift"].as_object().is_some());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn replay_mode_re_emits_closed_windows() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), 50);
    cfg.replay_interval_ms = 1;
    let state = ServiceState::open(cfg).unwrap();
    for _ in 0..160 {
        state.serve_simulated().unwrap();
    }
    state.settle();
    let mut rx = state.subscribe();
    let app = router(state.clone());
    call(&app, Method::PUT, "/mode", Some(json!({"mode": "replay"}))).await;
    let mut ids = Vec::new();
    for _ in 0..3 {
        let msg = tokio::time::timeout(Duration::from_secs(5), rx.recv()).await.unwrap().unwrap();
        ids.push(msg.window_id);
    }
    assert_eq!(ids, [0, 1, 2]);
    assert_eq!(state.requests(), 160);
}

#[tokio::test]
async fn openapi_document_is_served() {
    let app = router(ServiceState::open(ServiceConfig {
        sim: SimConfig {
            warmup_requests: 200,
            ..SimConfig::default()
        },
        ..ServiceConfig::default()
    })
    .unwrap());
    let (status, doc) = call(&app, Method::GET, "/openapi.yaml", None).await;
    assert_eq!(status, StatusCode::OK);
    let doc = doc.as_str().unwrap();
    for path in ["/blend", "/plans/{id}", "/reports/plans", "/metrics/stream", "/whatif", "/mode"] {
        assert!(doc.contains(&format!("  {path}:")), "{path}");
    }
    let (_, health) = call(&app, Method::GET, "/healthz", None).await;
    assert_eq!(health["status"], "ok");
}
