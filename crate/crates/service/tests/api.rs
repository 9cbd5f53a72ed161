use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use cuegen_core::attributes::{lda_fit, topic_tokens, train_head, HeadHyper, HeadMode, LabeledText, LdaParams, LinearHead, TopicModel};
use cuegen_core::corpus::{parse_script, LineKind, Script};
use cuegen_core::synthetic::{two_style_scripts, SyntheticSpec};
use cuegen_core::textmodel::{sample, scene_sequences, train_lm, train_tokenizer, Checkpoint, LMConfig, SampleParams, TrainHyper};
use cuegen_service::candidates::prefix_ids;
use cuegen_service::{router, AppState, Models, ServiceConfig, Store};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

struct Artifacts {
    ck: Checkpoint<f32>,
    head: LinearHead,
    lda: TopicModel,
}

fn artifacts() -> &'static Artifacts {
    static A: OnceLock<Artifacts> = OnceLock::new();
    A.get_or_init(|| {
        let raw = two_style_scripts(&SyntheticSpec { scripts: 40, seed: 21, ..Default::default() });
        let scripts: Vec<Script> = raw.iter().map(|r| parse_script(r).unwrap()).collect();
        let texts: Vec<String> = scripts.iter().flat_map(|s| s.lines().map(|l| l.model_text())).collect();
        let vocab = train_tokenizer(texts.iter().map(String::as_str), 2000).unwrap();
        let config = LMConfig { layers: 2, heads: 4, d_model: 32, context: 64, vocab_size: vocab.len(), d_ff: 64, seed: 3 };
        let hyper = TrainHyper { steps: 250, lr: 3e-3, batch: 16, seed: 1, val_fraction: 0.1, clip: 1.0, warmup: 20 };
        let (ck, _) = train_lm::<f32>(&scene_sequences(&scripts, &vocab), &vocab, config, &hyper).unwrap();
        let data: Vec<LabeledText> = scripts
            .iter()
            .take(10)
            .flat_map(|s| s.lines())
            .map(|l| LabeledText { text: l.model_text(), labels: vec![l.is_cue() as usize] })
            .collect();
        let classes = vec!["dialogue".to_string(), "cue".to_string()];
        let (head, _) = train_head(&data, &ck.model, &ck.vocab, classes, HeadMode::Softmax, &HeadHyper::default()).unwrap();
        let docs: Vec<Vec<String>> = texts.iter().map(|t| topic_tokens(t)).filter(|d| !d.is_empty()).collect();
        let lda = lda_fit(&docs, &LdaParams { k: 3, iters: 30, ..Default::default() }).unwrap();
        Artifacts { ck, head, lda }
    })
}

fn app_with(models: impl FnOnce(&Store) -> Models) -> (Router, tempfile::TempDir) {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    let models = models(&store);
    (router(Arc::new(AppState::with_models(store, models).unwrap())), dir)
}

fn full_app() -> (Router, tempfile::TempDir) {
    let a = artifacts();
    app_with(|s| Models::new(s, Some(a.ck.clone()), Some(a.head.clone()), None, Some(a.lda.clone())).unwrap())
}

async fn call(app: &Router, method: &str, uri: &str, body: impl Into<Body>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).body(body.into()).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let v = serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()));
    (status, v)
}

async fn post_json(app: &Router, uri: &str, v: Value) -> (StatusCode, Value) {
    call(app, "POST", uri, v.to_string()).await
}

fn fixture(name: &str) -> String {
    std::fs::read_to_string(format!("{}/../core/fixtures/{name}", env!("CARGO_MANIFEST_DIR"))).unwrap()
}

fn assert_error(v: &Value, name: &str) {
    assert_eq!(v["error"], name, "{v}");
    assert!(v["detail"].is_string(), "{v}");
}

fn cue_request(prefix: &str, alpha: f64, n: usize, seed: u64) -> Value {
    json!({
        "prefix": prefix,
        "attribute": {"sentence_type": "cue"},
        "params": {"alpha": alpha, "num_iterations": 3, "max_len": 10, "seed": seed},
        "num_candidates": n,
    })
}

#[tokio::test]
async fn uploads_match_fixture_manifest() {
    let (app, _dir) = app_with(|_| Models::default());
    let manifest: Value = serde_json::from_str(&fixture("manifest.json")).unwrap();
    for f in manifest["fixtures"].as_array().unwrap() {
        let (status, v) = call(&app, "POST", "/v1/scripts", fixture(f["file"].as_str().unwrap())).await;
        if let Some(err) = f.get("error") {
            assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
            assert_eq!(v["error"], *err);
            continue;
        }
        assert_eq!(status, StatusCode::CREATED, "{v}");
        assert_eq!(v["dialogue"], f["dialogue"]);
        assert_eq!(v["cues"], f["cues"]);
        assert_eq!(v["scenes"], f["scenes"].as_array().unwrap().len());
        assert!(v.get("warning").is_none());

        let (status, full) = call(&app, "GET", &format!("/v1/scripts/{}", v["id"].as_str().unwrap()), "").await;
        assert_eq!(status, StatusCode::OK);
        let kinds: Vec<Vec<String>> = full["script"]["scenes"]
            .as_array()
            .unwrap()
            .iter()
            .map(|s| {
                s["lines"]
                    .as_array()
                    .unwrap()
                    .iter()
                    .map(|l| if l["kind"] == "cue" { "cue".into() } else { l["speaker"].as_str().unwrap().to_string() })
                    .collect()
            })
            .collect();
        assert_eq!(serde_json::to_value(kinds).unwrap(), f["scenes"]);
    }
    let (_, list) = call(&app, "GET", "/v1/scripts", "").await;
    assert_eq!(list.as_array().unwrap().len(), 4);
}

#[tokio::test]
async fn upload_errors_and_dedup() {
    let (app, _dir) = app_with(|_| Models::default());
    let (status, v) = call(&app, "POST", "/v1/scripts", "").await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_error(&v, "EmptyInput");

    let text = fixture("intro_excerpts.txt");
    let (_, a) = call(&app, "POST", "/v1/scripts", text.clone()).await;
    let (status, b) = call(&app, "POST", "/v1/scripts", text).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(a["source_hash"], b["source_hash"]);
    assert_ne!(a["id"], b["id"]);
    assert_eq!(b["duplicate_of"], json!([a["id"]]));
    assert!(b["warning"].is_string());

    let (status, v) = call(&app, "GET", "/v1/scripts/nope", "").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_error(&v, "UnknownScript");
    let (status, v) = call(&app, "GET", "/v1/nothing-here", "").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_error(&v, "NotFound");
}

#[tokio::test]
async fn generate_without_checkpoint_conflicts() {
    let (app, _dir) = app_with(|_| Models::default());
    let (_, h) = call(&app, "GET", "/v1/health", "").await;
    assert_eq!(h["status"], "ok");
    assert!(h["checkpoint"].is_null());
    let (status, v) = post_json(&app, "/v1/generate", cue_request("CAL. My mother is dead.", 0.04, 1, 0)).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_error(&v, "NoCheckpoint");
}

#[tokio::test]
async fn generate_validation() {
    let (app, _dir) = full_app();
    let mut two = cue_request("ANNA. I want the truth.", 0.04, 1, 0);
    two["attribute"] = json!({"sentence_type": "cue", "topic": 1});
    let (status, v) = post_json(&app, "/v1/generate", two).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_error(&v, "InvalidAttribute");

    for n in [0, 17] {
        let (status, v) = post_json(&app, "/v1/generate", cue_request("ANNA. Hello.", 0.04, n, 0)).await;
        assert_eq!(status, StatusCode::BAD_REQUEST);
        assert_error(&v, "InvalidRequest");
    }
    let mut bad = cue_request("ANNA. Hello.", 0.04, 1, 0);
    bad["attribute"] = json!({"sentence_type": "monologue"});
    assert_eq!(post_json(&app, "/v1/generate", bad).await.0, StatusCode::BAD_REQUEST);
    bad = cue_request("ANNA. Hello.", 0.04, 1, 0);
    bad["attribute"] = json!({"topic": 99});
    assert_eq!(post_json(&app, "/v1/generate", bad).await.0, StatusCode::BAD_REQUEST);
    bad = cue_request("ANNA. Hello.", 0.04, 1, 0);
    bad["params"]["gm_scale"] = json!(1.5);
    let (status, v) = post_json(&app, "/v1/generate", bad).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_error(&v, "InvalidParams");
    bad = cue_request("ANNA. Hello.", 0.04, 1, 0);
    bad["params"]["step_size"] = json!(1.0);
    assert_eq!(post_json(&app, "/v1/generate", bad).await.0, StatusCode::BAD_REQUEST);

    let mut emo = cue_request("ANNA. Hello.", 0.04, 1, 0);
    emo["attribute"] = json!({"emotion": "joy"});
    let (status, v) = post_json(&app, "/v1/generate", emo).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_error(&v, "AttributeModelNotLoaded");

    let (status, v) = call(&app, "POST", "/v1/generate", "{not json").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_error(&v, "MalformedJson");
}

#[tokio::test]
async fn zero_alpha_candidate_is_plain_sample() {
    let (app, _dir) = full_app();
    let ck = &artifacts().ck;
    let prefix = "CAL. My mother is dead.";
    for seed in [0u64, 5, 9] {
        let (status, v) = post_json(&app, "/v1/generate", cue_request(prefix, 0.0, 1, seed)).await;
        assert_eq!(status, StatusCode::OK, "{v}");
        let ids = prefix_ids(ck, prefix, 10);
        let plain = sample(&ck.model, &ids, &SampleParams { top_k: 10, temperature: 1.0, max_len: 10, seed }).unwrap();
        assert_eq!(v["candidates"][0]["text"], ck.vocab.decode(&plain));
        assert_eq!(v["unsteered"]["texts"][0], v["candidates"][0]["text"]);
    }
}

#[tokio::test]
async fn cue_steering_beats_unsteered_comparison() {
    let (app, _dir) = full_app();
    for prefix in ["ANNA. I want the truth.", "BEN. We should go home.", "CAL. My mother is dead."] {
        let (status, v) = post_json(&app, "/v1/generate", cue_request(prefix, 2.0, 4, 0)).await;
        assert_eq!(status, StatusCode::OK, "{v}");
        let cands = v["candidates"].as_array().unwrap();
        assert_eq!(cands.len(), 4);
        let lls: Vec<f64> = cands.iter().map(|c| c["attribute_log_likelihood"].as_f64().unwrap()).collect();
        assert!(lls.windows(2).all(|w| w[0] >= w[1]), "not sorted: {lls:?}");
        for c in cands {
            assert!(c["mean_kl"].as_f64().unwrap() >= 0.0);
            assert!(c["perplexity"].is_null() || c["perplexity"].as_f64().unwrap() >= 1.0);
            assert!(c["cue_text"].as_str().unwrap().starts_with('('));
        }
        let base = v["unsteered"]["mean_attribute_log_likelihood"].as_f64().unwrap();
        assert!(lls[0] >= base, "{prefix}: top {} < unsteered mean {base}", lls[0]);
    }
}

#[tokio::test]
async fn topic_generation_and_attribute_listing() {
    let (app, _dir) = full_app();
    let (_, attrs) = call(&app, "GET", "/v1/attributes", "").await;
    assert_eq!(attrs["models"][0]["name"], "sentence_type");
    assert_eq!(attrs["models"][0]["classes"], json!(["dialogue", "cue"]));
    assert_eq!(attrs["topics"].as_array().unwrap().len(), 3);
    assert_eq!(attrs["topics"][0]["top_words"].as_array().unwrap().len(), 10);

    let mut req = cue_request("ANNA. Listen.", 0.04, 2, 0);
    req["attribute"] = json!({"topic": 1});
    let (status, v) = post_json(&app, "/v1/generate", req).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    assert_eq!(v["attribute"], "topic:1");
    for c in v["candidates"].as_array().unwrap() {
        assert!(c["attribute_log_likelihood"].as_f64().unwrap() <= 0.0);
    }
}

#[tokio::test]
async fn accept_inserts_and_exports() {
    let (app, _dir) = full_app();
    let (_, s) = call(&app, "POST", "/v1/scripts", fixture("table_examples.txt")).await;
    let script_id = s["id"].as_str().unwrap().to_string();
    let before = s["lines"].as_u64().unwrap();

    // the CAL line of the fourth scene
    let (status, sess) = post_json(&app, "/v1/sessions", json!({"script_id": script_id, "scene": 3, "line": 0})).await;
    assert_eq!(status, StatusCode::CREATED, "{sess}");
    let sid = sess["id"].as_str().unwrap().to_string();
    let accept_uri = format!("/v1/sessions/{sid}/accept");

    let (status, v) = post_json(&app, &accept_uri, json!({"candidate": 0})).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_error(&v, "NoPendingCandidates");

    let mut req = cue_request("", 2.0, 3, 1);
    req.as_object_mut().unwrap().remove("prefix");
    req["session_id"] = json!(sid);
    let (status, gen) = post_json(&app, "/v1/generate", req).await;
    assert_eq!(status, StatusCode::OK, "{gen}");
    assert!(gen["input_line"].as_str().unwrap().starts_with("CAL"));
    let chosen = gen["candidates"][0]["cue_text"].as_str().unwrap().to_string();

    let (status, after) = post_json(&app, &accept_uri, json!({"candidate": 0})).await;
    assert_eq!(status, StatusCode::OK, "{after}");
    assert_eq!(after["history"].as_array().unwrap().len(), 1);
    assert_eq!(after["history"][0]["chosen_text"], chosen);
    assert_eq!(after["cursor"], json!({"scene": 3, "line": 1}));
    assert!(after["pending"].is_null());

    let (status, v) = post_json(&app, &accept_uri, json!({"candidate": 0})).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_error(&v, "NoPendingCandidates");

    let (_, full) = call(&app, "GET", &format!("/v1/scripts/{script_id}"), "").await;
    assert_eq!(full["lines"].as_u64().unwrap(), before + 1);
    assert_eq!(full["version"], 2);
    let inserted = &full["script"]["scenes"][3]["lines"][1];
    assert_eq!(inserted["kind"], "cue");
    assert_eq!(inserted["text"], chosen);

    let (status, exported) = call(&app, "GET", &format!("/v1/scripts/{script_id}/export"), "").await;
    assert_eq!(status, StatusCode::OK);
    let exported = exported.as_str().unwrap();
    let cal = exported.lines().position(|l| l.starts_with("CAL")).unwrap();
    assert_eq!(exported.lines().nth(cal + 1).unwrap(), chosen);
    let reparsed = parse_script(exported).unwrap();
    let stored: Script = serde_json::from_value(full["script"].clone()).unwrap();
    assert!(reparsed.same_content(&stored));
    assert_eq!(reparsed.scenes[3].lines[1].kind, LineKind::Cue);

    let (status, v) = post_json(&app, "/v1/sessions/nope/accept", json!({})).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_error(&v, "UnknownSession");
    let (status, _) = post_json(&app, "/v1/sessions", json!({"script_id": script_id, "scene": 9, "line": 0})).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn session_params_persist() {
    let (app, _dir) = full_app();
    let (_, s) = call(&app, "POST", "/v1/scripts", fixture("intro_excerpts.txt")).await;
    let (_, sess) = post_json(&app, "/v1/sessions", json!({"script_id": s["id"], "scene": 1, "line": 0})).await;
    let sid = sess["id"].as_str().unwrap();
    let req = json!({"session_id": sid, "attribute": {"sentence_type": "cue"}, "params": {"alpha": 0.5, "max_len": 6}, "num_candidates": 1});
    let (status, _) = post_json(&app, "/v1/generate", req).await;
    assert_eq!(status, StatusCode::OK);
    let req = json!({"session_id": sid, "attribute": {"sentence_type": "cue"}, "params": {"seed": 4}, "num_candidates": 1});
    let (_, v) = post_json(&app, "/v1/generate", req).await;
    assert_eq!(v["params"]["alpha"], 0.5);
    assert_eq!(v["params"]["max_len"], 6);
    assert_eq!(v["params"]["seed"], 4);
    let (_, got) = call(&app, "GET", &format!("/v1/sessions/{sid}"), "").await;
    assert_eq!(got["params"]["seed"], 4);
    assert_eq!(got["pending"]["candidates"].as_array().unwrap().len(), 1);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_generation_matches_serial() {
    let (app, _dir) = full_app();
    let (_, s) = call(&app, "POST", "/v1/scripts", fixture("harbor_lights.txt")).await;
    let mut sessions = Vec::new();
    for i in 0..8 {
        let (_, sess) = post_json(&app, "/v1/sessions", json!({"script_id": s["id"], "scene": 0, "line": i + 1})).await;
        sessions.push(sess["id"].as_str().unwrap().to_string());
    }
    let request = |i: usize| {
        json!({
            "session_id": sessions[i],
            "attribute": {"sentence_type": "cue"},
            "params": {"alpha": 1.0, "max_len": 6, "seed": i},
            "num_candidates": 2,
        })
    };
    let mut serial = Vec::new();
    for i in 0..8 {
        serial.push(post_json(&app, "/v1/generate", request(i)).await.1);
    }
    let handles: Vec<_> = (0..8)
        .map(|i| {
            let app = app.clone();
            let body = request(i);
            tokio::spawn(async move { post_json(&app, "/v1/generate", body).await.1 })
        })
        .collect();
    for (i, h) in handles.into_iter().enumerate() {
        assert_eq!(h.await.unwrap(), serial[i], "session {i}");
    }
}

#[tokio::test]
async fn state_survives_restart() {
    let a = artifacts();
    let dir = tempfile::tempdir().unwrap();
    let ck_path = dir.path().join("lm.bin");
    let head_path = dir.path().join("head.bin");
    a.ck.save(&ck_path).unwrap();
    a.head.save(&head_path).unwrap();
    let config = ServiceConfig {
        store_dir: dir.path().join("store"),
        checkpoint: Some(ck_path),
        cue_head: Some(head_path),
        ..Default::default()
    };
    let app = router(Arc::new(AppState::open(&config).unwrap()));
    let (_, s) = call(&app, "POST", "/v1/scripts", fixture("intro_excerpts.txt")).await;
    let (_, sess) = post_json(&app, "/v1/sessions", json!({"script_id": s["id"]})).await;
    let (_, h) = call(&app, "GET", "/v1/health", "").await;
    let ck_id = h["checkpoint"]["id"].as_str().unwrap().to_string();
    assert_eq!(sess["checkpoint_id"], ck_id);
    assert!(config.store_dir.join("blobs").join(&ck_id).exists());

    let app = router(Arc::new(AppState::open(&config).unwrap()));
    let (status, got) = call(&app, "GET", &format!("/v1/sessions/{}", sess["id"].as_str().unwrap()), "").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(got, sess);
    let (_, list) = call(&app, "GET", "/v1/scripts", "").await;
    assert_eq!(list[0]["id"], s["id"]);
}
