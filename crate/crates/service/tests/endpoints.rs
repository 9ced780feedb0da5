use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use faxis::eval::{preference_flip_report, EvalOptions, EvalReport, QuerySet};
use faxis::io::synth::{generate_synthetic, SynthConfig};
use faxis::{AxisSchema, Index, ItemFilter, ItemRecord, PartitionedEmbedding, QueryOptions, QueryWeights};
use faxis_service::{router, AppState};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

/// Planted-latent index: semantic and speaker blocks of the synthetic latents.
fn synthetic_index() -> Index {
    let cfg = SynthConfig {
        n_speakers: 4,
        n_sentences: 5,
        seed: 2,
        ..SynthConfig::default()
    };
    let data = generate_synthetic(&cfg).unwrap();
    let schema = Arc::new(AxisSchema::new([("semantic", cfg.semantic_dim), ("speaker_id", cfg.speaker_dim)]).unwrap());
    let records = data
        .items
        .iter()
        .zip(&data.latents)
        .map(|(m, l)| ItemRecord {
            id: m.id.clone(),
            corpus: m.corpus.clone(),
            labels: m.labels.clone(),
            embedding: PartitionedEmbedding::new(schema.clone(), l[..cfg.semantic_dim + cfg.speaker_dim].to_vec())
                .unwrap(),
        })
        .collect();
    Index::build(records).unwrap()
}

async fn call(state: &AppState, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = router(state.clone(), None).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

#[tokio::test]
async fn axes_requires_an_index() {
    let (status, _) = call(&AppState::new(), "GET", "/axes", None).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    let (status, _) = call(&AppState::new(), "POST", "/query", Some(json!({"query_id": "x"}))).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn axes_describes_the_standard_schema() {
    let schema = Arc::new(AxisSchema::standard());
    let mut data = vec![0.0; schema.total_dim()];
    for i in 0..schema.len() {
        data[schema.range(i).start] = 1.0;
    }
    let item = ItemRecord {
        id: "only".into(),
        corpus: "c".into(),
        labels: [("speaker".to_string(), "p".to_string())].into(),
        embedding: PartitionedEmbedding::new(schema, data).unwrap(),
    };
    let state = AppState::with_index(Index::build(vec![item]).unwrap());
    let (status, body) = call(&state, "GET", "/axes", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(
        body["axes"],
        json!([{"name": "semantic", "dim": 384}, {"name": "speaker_id", "dim": 256}, {"name": "dialect", "dim": 12}])
    );
    assert_eq!(body["items"], 1);
    assert_eq!(body["label_fields"], json!(["speaker"]));
    assert_eq!(body["corpora"], json!(["c"]));
    let (_, again) = call(&state, "GET", "/axes", None).await;
    assert_eq!(again, body);
}

#[tokio::test]
async fn query_by_id_matches_the_index() {
    let index = synthetic_index();
    let state = AppState::with_index(index.clone());
    let req = json!({"query_id": "spk00_sent001_r0", "weights": {"semantic": 1.0, "speaker_id": -1.0}, "k": 5});
    let (status, body) = call(&state, "POST", "/query", Some(req.clone())).await;
    assert_eq!(status, StatusCode::OK);

    let q = &index.get("spk00_sent001_r0").unwrap().embedding;
    let w = QueryWeights::new().with("semantic", 1.0).with("speaker_id", -1.0);
    let expected = index
        .query(q, &w, 5, &QueryOptions::excluding("spk00_sent001_r0"))
        .unwrap();
    let ids: Vec<&str> = body["results"].as_array().unwrap().iter().map(|r| r["item_id"].as_str().unwrap()).collect();
    let want: Vec<&str> = expected.results.iter().map(|r| r.item_id.as_str()).collect();
    assert_eq!(ids, want);
    let top = &body["results"][0];
    assert_eq!(top["rank"], 1);
    assert_eq!(top["labels"]["sentence"], "sent001");
    assert!(top["per_axis"]["semantic"].is_number());
    assert_eq!(body["weights"], json!({"semantic": 1.0, "speaker_id": -1.0}));
    assert!(body["timing_ms"].is_number());

    // identical requests give identical bodies apart from timing
    let (_, mut second) = call(&state, "POST", "/query", Some(req)).await;
    let mut first = body;
    first["timing_ms"] = Value::Null;
    second["timing_ms"] = Value::Null;
    assert_eq!(first, second);
}

#[tokio::test]
async fn empty_weights_give_an_id_ordered_tie_block() {
    let state = AppState::with_index(synthetic_index());
    let (status, body) = call(&state, "POST", "/query", Some(json!({"query_id": "spk01_sent000_r0", "weights": {}, "k": 4}))).await;
    assert_eq!(status, StatusCode::OK);
    let rows = body["results"].as_array().unwrap();
    assert!(rows.iter().all(|r| r["score"] == 0.0));
    let ids: Vec<&str> = rows.iter().map(|r| r["item_id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["spk00_sent000_r0", "spk00_sent001_r0", "spk00_sent002_r0", "spk00_sent003_r0"]);
}

#[tokio::test]
async fn query_errors_map_to_status_codes() {
    let state = AppState::with_index(synthetic_index());
    let cases = [
        (json!({"query_id": "spk00_sent000_r0", "weights": {"gender": 1.0}}), StatusCode::BAD_REQUEST),
        (json!({"query_id": "nobody"}), StatusCode::NOT_FOUND),
        (json!({"query_id": "spk00_sent000_r0", "k": 0}), StatusCode::BAD_REQUEST),
        (json!({"query_id": "spk00_sent000_r0", "k": 1001}), StatusCode::BAD_REQUEST),
        (json!({}), StatusCode::BAD_REQUEST),
        (json!({"query_id": "x", "bogus": 1}), StatusCode::BAD_REQUEST),
    ];
    for (req, want) in cases {
        let (status, body) = call(&state, "POST", "/query", Some(req.clone())).await;
        assert_eq!(status, want, "{req}");
        assert!(body["error"].is_string());
    }
    let (_, body) = call(&state, "POST", "/query", Some(json!({"query_id": "spk00_sent000_r0", "weights": {"gender": 1.0}}))).await;
    assert_eq!(body["axis"], "gender");
    assert!(body["error"].as_str().unwrap().contains("gender"));
}

fn unit(dim: usize, hot: usize, scale: f64) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[hot] = scale;
    v
}

#[tokio::test]
async fn query_by_embedding_is_validated() {
    let state = AppState::with_index(synthetic_index());
    let ok = json!({"query_embedding": {"semantic": unit(16, 0, 1.0), "speaker_id": unit(16, 3, 1.0)}, "weights": {"semantic": 1.0}, "k": 3});
    let (status, body) = call(&state, "POST", "/query", Some(ok)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["results"].as_array().unwrap().len(), 3);

    let off = json!({"query_embedding": {"semantic": unit(16, 0, 0.9), "speaker_id": unit(16, 3, 1.0)}});
    let (status, body) = call(&state, "POST", "/query", Some(off)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["axes"], json!(["semantic"]));

    let short = json!({"query_embedding": {"semantic": unit(15, 0, 1.0), "speaker_id": unit(16, 3, 1.0)}});
    assert_eq!(call(&state, "POST", "/query", Some(short)).await.0, StatusCode::BAD_REQUEST);
    let both = json!({"query_id": "spk00_sent000_r0", "query_embedding": {}});
    assert_eq!(call(&state, "POST", "/query", Some(both)).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn filter_and_self_inclusion() {
    let state = AppState::with_index(synthetic_index());
    let req = json!({"query_id": "spk00_sent000_r0", "weights": {"semantic": 1.0}, "k": 100,
                     "filter": {"corpus_ne": "query"}});
    let (_, body) = call(&state, "POST", "/query", Some(req)).await;
    let rows = body["results"].as_array().unwrap();
    assert_eq!(rows.len(), 15);
    assert!(rows.iter().all(|r| r["corpus"] == "reference"));

    let req = json!({"query_id": "spk00_sent000_r0", "weights": {"semantic": 1.0}, "k": 1, "exclude_self": false});
    let (_, body) = call(&state, "POST", "/query", Some(req)).await;
    assert_eq!(body["results"][0]["item_id"], "spk00_sent000_r0");

    let req = json!({"query_id": "spk00_sent000_r0", "k": 5, "filter": {"corpus": "nowhere"}});
    let (status, body) = call(&state, "POST", "/query", Some(req)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["empty_after_filter"], true);
}

#[tokio::test]
async fn flip_report_matches_the_eval_module() {
    let index = synthetic_index();
    let state = AppState::with_index(index.clone());
    let req = json!({
        "query_filter": {"corpus": "query"},
        "settings": [{"semantic": 1.0, "speaker_id": 1.0}, {"semantic": 1.0, "speaker_id": -1.0}],
        "exclude_self": false
    });
    let (status, body) = call(&state, "POST", "/flip-report", Some(req)).await;
    assert_eq!(status, StatusCode::OK);
    let served: EvalReport = serde_json::from_value(body).unwrap();

    let filter = ItemFilter {
        corpus: Some("query".into()),
        ..ItemFilter::default()
    };
    let qs = QuerySet::from_index(&index, Some(&filter)).unwrap();
    let settings = [
        QueryWeights::new().with("semantic", 1.0).with("speaker_id", 1.0),
        QueryWeights::new().with("semantic", 1.0).with("speaker_id", -1.0),
    ];
    let direct = preference_flip_report(&qs, &index, &settings, EvalOptions { exclude_self: false }).unwrap();
    assert_eq!(served, direct);

    let one = json!({"query_ids": ["spk00_sent000_r0"], "settings": [{"semantic": 1.0}]});
    let (status, body) = call(&state, "POST", "/flip-report", Some(one)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["settings"].as_array().unwrap().len(), 1);
    assert_eq!(body["n_queries"], 1);
}

#[tokio::test]
async fn flip_report_without_speaker_labels_is_rejected() {
    let mut index = synthetic_index().items().to_vec();
    for it in &mut index {
        it.labels.remove("speaker");
    }
    let state = AppState::with_index(Index::build(index).unwrap());
    let req = json!({"settings": [{"semantic": 1.0}]});
    let (status, body) = call(&state, "POST", "/flip-report", Some(req)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["label"], "speaker");
    let (status, _) = call(&state, "POST", "/flip-report", Some(json!({"settings": []}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn swapping_the_index_is_visible_to_new_requests() {
    let state = AppState::new();
    assert!(state.current().is_none());
    state.swap(synthetic_index());
    let held = state.current().unwrap();
    let (_, body) = call(&state, "GET", "/axes", None).await;
    assert_eq!(body["items"], 20);
    let fewer: Vec<ItemRecord> = held.items()[..3].to_vec();
    state.swap(Index::build(fewer).unwrap());
    assert_eq!(held.len(), 20);
    let (_, body) = call(&state, "GET", "/axes", None).await;
    assert_eq!(body["items"], 3);
}

#[tokio::test]
async fn serves_static_ui_files() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_path_buf();
    std::fs::write(dir.join("index.html"), "<html>ui</html>").unwrap();
    let state = AppState::with_index(synthetic_index());
    let resp = router(state, Some(dir))
        .oneshot(Request::builder().uri("/index.html").body(Body::empty()).unwrap())
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    assert_eq!(&bytes[..], b"<html>ui</html>");
}
