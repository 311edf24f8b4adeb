use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use chrono::{Duration, TimeZone, Utc};
use serde_json::{json, Value};
use tower::ServiceExt;

use joel_core::dataset::synth::{generate_synthetic, SynthConfig};
use joel_core::dataset::{prepare, FeatureCodec, RawEvent, DEFAULT_TOP_K};
use joel_core::human_loop::{jaccard, registry, ExpertProfile, FeedbackStore, TuneConfig};
use joel_core::model::{ArchSpec, JoelNetwork};
use joel_core::taxonomy::{annotate_dataset, ConceptSet};
use joel_service::{router, CaseRecord, ManualClock, ReviewService, ServiceConfig, ADMIN_HEADER, EXPERT_HEADER};

struct World {
    net: JoelNetwork,
    codec: FeatureCodec,
    events: Vec<RawEvent>,
}

fn world() -> World {
    let cfg = SynthConfig {
        n_events: 600,
        fraud_prevalence: 0.1,
        ..SynthConfig::default()
    };
    let data = generate_synthetic(&cfg, 21).unwrap();
    let (rows, _) = annotate_dataset(data.events.clone(), &data.mapping, data.taxonomy());
    let prep = prepare(rows, &data.split, DEFAULT_TOP_K).unwrap();
    let net = JoelNetwork::build(&ArchSpec::new(vec![8]), prep.codec.dim(), data.taxonomy().clone(), 2).unwrap();
    World {
        net,
        codec: prep.codec,
        events: data.events,
    }
}

struct Harness {
    app: Router,
    svc: Arc<ReviewService>,
    clock: ManualClock,
}

fn harness(w: &World, cases: usize, store: FeedbackStore, batch: usize) -> Harness {
    let clock = ManualClock::new(Utc.with_ymd_and_hms(2024, 5, 1, 9, 0, 0).unwrap());
    let config = ServiceConfig {
        band: (0.0, 1.0),
        admin_token: Some("s3cret".into()),
        tune: TuneConfig {
            batch_size: batch,
            epochs_per_tune: 2,
            ..TuneConfig::default()
        },
        ..ServiceConfig::default()
    };
    let experts = registry([ExpertProfile::trusted("ana", 1.0), ExpertProfile::trusted("bo", 1.0)]);
    let svc = ReviewService::new(w.net.clone(), w.codec.clone(), experts, store, config, Box::new(clock.clone())).unwrap();
    for e in w.events.iter().take(cases) {
        assert!(svc.ingest(e.clone()).unwrap());
    }
    let svc = Arc::new(svc);
    Harness {
        app: router(svc.clone()),
        svc,
        clock,
    }
}

async fn call(app: &Router, method: &str, uri: &str, headers: &[(&str, &str)], body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    for (k, v) in headers {
        req = req.header(*k, *v);
    }
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    (status, value)
}

async fn claim(app: &Router, expert: &str) -> (StatusCode, Option<CaseRecord>) {
    let (status, v) = call(app, "GET", "/api/cases/next", &[(EXPERT_HEADER, expert)], None).await;
    (status, (status == StatusCode::OK).then(|| serde_json::from_value(v).unwrap()))
}

async fn submit(app: &Router, expert: &str, case: &str, decision: &str, concepts: &[&str]) -> (StatusCode, Value) {
    let uri = format!("/api/cases/{case}/review");
    call(app, "POST", &uri, &[(EXPERT_HEADER, expert)], Some(json!({"decision": decision, "concepts": concepts}))).await
}

#[tokio::test]
async fn unknown_or_missing_expert_is_unauthorized() {
    let w = world();
    let h = harness(&w, 2, FeedbackStore::in_memory(), 100);
    assert_eq!(claim(&h.app, "mallory").await.0, StatusCode::UNAUTHORIZED);
    let (status, _) = call(&h.app, "GET", "/api/cases/next", &[], None).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
}

#[tokio::test]
async fn one_case_goes_to_exactly_one_expert() {
    let w = world();
    let h = harness(&w, 1, FeedbackStore::in_memory(), 100);
    let (a, b) = tokio::join!(claim(&h.app, "ana"), claim(&h.app, "bo"));
    let mut statuses = [a.0, b.0];
    statuses.sort();
    assert_eq!(statuses, [StatusCode::OK, StatusCode::NO_CONTENT]);
}

#[tokio::test]
async fn claims_are_fifo_with_sorted_explanations() {
    let w = world();
    let h = harness(&w, 5, FeedbackStore::in_memory(), 100);
    for e in w.events.iter().take(5) {
        let case = claim(&h.app, "ana").await.1.unwrap();
        assert_eq!(case.event_id, e.event_id);
        assert_eq!(case.claimed_by.as_deref(), Some("ana"));
        let scores: Vec<f64> = case.prediction.concept_scores.iter().map(|c| c.score).collect();
        assert!(scores.windows(2).all(|p| p[0] >= p[1]));
        assert_eq!(case.prediction.model_version, 0);
    }
    assert_eq!(claim(&h.app, "ana").await.0, StatusCode::NO_CONTENT);
}

#[tokio::test]
async fn expired_claims_return_to_the_queue() {
    let w = world();
    let h = harness(&w, 1, FeedbackStore::in_memory(), 100);
    let first = claim(&h.app, "ana").await.1.unwrap();
    assert_eq!(claim(&h.app, "bo").await.0, StatusCode::NO_CONTENT);
    h.clock.advance(Duration::minutes(15));
    let again = claim(&h.app, "bo").await.1.unwrap();
    assert_eq!(again.event_id, first.event_id);
    // the stale claimant can no longer review
    let (status, _) = submit(&h.app, "ana", &first.event_id, "decline", &["suspicious_ip"]).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _) = submit(&h.app, "bo", &first.event_id, "decline", &["suspicious_ip"]).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn review_is_persisted_and_validated() {
    let w = world();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("feedback.jsonl");
    let h = harness(&w, 3, FeedbackStore::open(&path).unwrap(), 100);
    let case = claim(&h.app, "ana").await.1.unwrap();
    let id = case.event_id.as_str();

    assert_eq!(submit(&h.app, "ana", id, "decline", &[]).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(submit(&h.app, "ana", id, "decline", &["made_up"]).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(submit(&h.app, "ana", "no-such-case", "decline", &["suspicious_ip"]).await.0, StatusCode::NOT_FOUND);
    assert_eq!(submit(&h.app, "bo", id, "decline", &["suspicious_ip"]).await.0, StatusCode::CONFLICT);

    let (status, ack) = submit(&h.app, "ana", id, "decline", &["suspicious_ip"]).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ack, json!({"seq": 1, "model_version": 0, "tuned": false}));
    // reviewed is terminal
    assert_eq!(submit(&h.app, "ana", id, "approve", &["other_legit"]).await.0, StatusCode::CONFLICT);

    drop(h);
    let store = FeedbackStore::open(&path).unwrap();
    assert_eq!(store.len(), 1);
    let r = &store.records()[0];
    assert_eq!((r.event_id.as_str(), r.expert_id.as_str()), (id, "ana"));
    assert_eq!(r.concepts, ["suspicious_ip"]);
}

#[tokio::test]
async fn the_batch_sized_review_tunes() {
    let w = world();
    let h = harness(&w, 5, FeedbackStore::in_memory(), 3);
    for i in 0..3 {
        let case = claim(&h.app, "ana").await.1.unwrap();
        let (_, ack) = submit(&h.app, "ana", &case.event_id, "approve", &["nothing_suspicious"]).await;
        assert_eq!(ack["tuned"], json!(i == 2));
        assert_eq!(ack["model_version"], json!(if i == 2 { 1 } else { 0 }));
    }
    let (_, model) = call(&h.app, "GET", "/api/model", &[], None).await;
    assert_eq!(model["version"], json!(1));
    let next = claim(&h.app, "ana").await.1.unwrap();
    assert_eq!(next.prediction.model_version, 1);
    let (_, m) = call(&h.app, "GET", "/api/metrics", &[], None).await;
    assert_eq!(m["tunes"], json!(1));
    assert_eq!(m["pending_feedback"], json!(0));
}

#[tokio::test]
async fn model_and_taxonomy_endpoints() {
    let w = world();
    let h = harness(&w, 1, FeedbackStore::in_memory(), 100);
    let (status, model) = call(&h.app, "GET", "/api/model", &[], None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(model["arch"]["hidden"], json!([8]));
    assert_eq!(model["arch"]["concepts"], json!(w.net.concepts()));
    assert_eq!(model["lambda"], json!(1.0));
    assert_eq!(model["thresholds"]["concepts"].as_object().unwrap().len(), w.net.concepts());
    let (status, tax) = call(&h.app, "GET", "/api/taxonomy", &[], None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(tax.as_array().unwrap().len(), w.net.taxonomy.len());
}

#[tokio::test]
async fn agreement_metrics() {
    let w = world();
    let h = harness(&w, 6, FeedbackStore::in_memory(), 100);
    let (_, m) = call(&h.app, "GET", "/api/metrics", &[], None).await;
    assert_eq!(m["agreement"], Value::Null);
    assert_eq!(m["pending"], json!(6));

    // echo the fired concepts back: perfect agreement
    for _ in 0..2 {
        let case = claim(&h.app, "ana").await.1.unwrap();
        let fired: Vec<&str> = case.prediction.concepts_fired.iter().map(String::as_str).collect();
        assert!(!fired.is_empty());
        submit(&h.app, "ana", &case.event_id, "approve", &fired).await;
    }
    let (_, m) = call(&h.app, "GET", "/api/metrics", &[], None).await;
    assert_eq!(m["agreement"]["mean_jaccard"], json!(1.0));

    // then disagree and compare against a recomputation from the raw sets
    let tax = &w.net.taxonomy;
    let mut pairs = Vec::new();
    for (i, c) in [["suspicious_ip", "suspicious_email"], ["other_fraud", "suspicious_customer"]].iter().enumerate() {
        let case = claim(&h.app, "bo").await.1.unwrap();
        let decision = if i == 0 { "decline" } else { "approve" };
        submit(&h.app, "bo", &case.event_id, decision, c).await;
        let fired = ConceptSet::from_ids(tax, case.prediction.concepts_fired.iter().map(String::as_str)).unwrap();
        pairs.push((fired, ConceptSet::from_ids(tax, c.iter().copied()).unwrap()));
    }
    let expected = (2.0 + pairs.iter().map(|(a, b)| jaccard(a, b)).sum::<f64>()) / 4.0;
    let (_, m) = call(&h.app, "GET", "/api/metrics", &[], None).await;
    assert!((m["agreement"]["mean_jaccard"].as_f64().unwrap() - expected).abs() < 1e-12);
    assert_eq!(m["agreement"]["reviews"], json!(4));
    assert_eq!(m["reviewed"], json!(4));
}

#[tokio::test]
async fn forced_tuning() {
    let w = world();
    let h = harness(&w, 5, FeedbackStore::in_memory(), 100);
    let tune = |token: Option<&'static str>| {
        let app = h.app.clone();
        async move {
            let headers: Vec<(&str, &str)> = token.map(|t| (ADMIN_HEADER, t)).into_iter().collect();
            call(&app, "POST", "/api/model/tune", &headers, None).await
        }
    };
    assert_eq!(tune(None).await.0, StatusCode::FORBIDDEN);
    assert_eq!(tune(Some("wrong")).await.0, StatusCode::FORBIDDEN);
    let (status, r) = tune(Some("s3cret")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(r["tuned"], json!(false));
    assert_eq!(r["version_after"], json!(0));

    for _ in 0..2 {
        let case = claim(&h.app, "ana").await.1.unwrap();
        submit(&h.app, "ana", &case.event_id, "approve", &["other_legit"]).await;
    }
    let (_, r) = tune(Some("s3cret")).await;
    assert_eq!(r, json!({"tuned": true, "version_before": 0, "version_after": 1, "consumed": 2}));
    assert_eq!(h.svc.snapshot().version, 1);
}

#[tokio::test]
async fn acknowledged_reviews_survive_a_restart() {
    let w = world();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fb.jsonl");
    let mut acked = Vec::new();
    {
        let h = harness(&w, 4, FeedbackStore::open(&path).unwrap(), 100);
        for _ in 0..3 {
            let case = claim(&h.app, "ana").await.1.unwrap();
            let (status, ack) = submit(&h.app, "ana", &case.event_id, "approve", &["other_legit"]).await;
            assert_eq!(status, StatusCode::OK);
            acked.push((ack["seq"].as_u64().unwrap(), case.event_id));
        }
    }
    let h = harness(&w, 4, FeedbackStore::open(&path).unwrap(), 100);
    let store = FeedbackStore::open(&path).unwrap();
    let stored: Vec<(u64, String)> = store.records().iter().map(|r| (r.seq, r.event_id.clone())).collect();
    assert_eq!(stored, acked);
    // reviewed cases are not served again
    let next = claim(&h.app, "bo").await.1.unwrap();
    assert_eq!(next.event_id, w.events[3].event_id);
    let (_, m) = call(&h.app, "GET", "/api/metrics", &[], None).await;
    assert_eq!(m["reviewed"], json!(3));
}

#[test]
fn claims_during_tuning_see_one_model_version() {
    let w = world();
    let clock = ManualClock::new(Utc::now());
    let config = ServiceConfig {
        band: (0.0, 1.0),
        tune: TuneConfig {
            batch_size: 10,
            epochs_per_tune: 400,
            ..TuneConfig::default()
        },
        ..ServiceConfig::default()
    };
    let experts = registry([ExpertProfile::trusted("ana", 1.0), ExpertProfile::trusted("bo", 1.0)]);
    let svc = ReviewService::new(w.net.clone(), w.codec.clone(), experts, FeedbackStore::in_memory(), config, Box::new(clock))
        .unwrap();
    for e in w.events.iter().take(200) {
        svc.ingest(e.clone()).unwrap();
    }
    let svc = Arc::new(svc);
    for _ in 0..9 {
        let c = svc.next_case("ana").unwrap().unwrap();
        svc.review(&c.event_id, "ana", serde_json::from_value(json!({"decision": "approve", "concepts": ["other_legit"]})).unwrap())
            .unwrap();
    }
    let trigger = svc.next_case("ana").unwrap().unwrap();
    let before = svc.snapshot();
    let tuner = {
        let svc = svc.clone();
        std::thread::spawn(move || {
            let req = serde_json::from_value(json!({"decision": "decline", "concepts": ["suspicious_ip"]})).unwrap();
            svc.review(&trigger.event_id, "ana", req).unwrap()
        })
    };
    let mut seen = Vec::new();
    while !tuner.is_finished() {
        if let Some(c) = svc.next_case("bo").unwrap() {
            seen.push(c);
        }
    }
    assert!(tuner.join().unwrap().tuned);
    let after = svc.snapshot();
    let by_id: std::collections::HashMap<_, _> = w.events.iter().map(|e| (e.event_id.clone(), e)).collect();
    for c in &seen {
        let net = if c.prediction.model_version == before.version { &before } else { &after };
        assert!(c.prediction.model_version == before.version || c.prediction.model_version == after.version);
        let x = w.codec.encode_events(&[by_id[&c.event_id]]);
        assert_eq!(net.predict(x.row(0)).unwrap().fraud_score, c.prediction.fraud_score);
    }
    assert!(!seen.is_empty());
}
