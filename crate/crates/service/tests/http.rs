use std::sync::Arc;

use reqwest::{Client, StatusCode};
use serde_json::{json, Value};

use recipecrit::corpus::{GrammarConfig, SyntheticGrammar, TokenVocab};
use recipecrit::model::{ModelConfig, RecipeModel, TrainingStage};
use recipecrit::training::recipe_sentences;
use recipecrit_service::{serve, AppState};

fn small_model() -> RecipeModel {
    let grammar = SyntheticGrammar::new(GrammarConfig::default_grammar()).unwrap();
    let recipes = grammar.generate(40, 1);
    let tv = TokenVocab::build(recipe_sentences(&recipes), 1, 1000);
    let cfg = ModelConfig {
        hidden_dim: 8,
        num_layers: 1,
        num_heads: 2,
        ffn_dim: 16,
        latent_dim: 8,
        max_instruction_tokens: 12,
        dropout: 0.0,
        ..ModelConfig::desk(grammar.vocab().len(), tv.len())
    };
    let mut m = RecipeModel::new(cfg, tv, grammar.vocab().clone(), 3).unwrap();
    m.set_stage(TrainingStage::Stage2);
    m
}

fn demo() -> Value {
    serde_json::from_str(include_str!("../demo/cherry_tomato_confit.json")).unwrap()
}

async fn start(state: Arc<AppState>) -> String {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(serve(listener, state));
    format!("http://{addr}")
}

async fn ready() -> (Client, String, Arc<AppState>) {
    let state = AppState::new(None);
    state.set_model(small_model()).unwrap();
    let url = start(state.clone()).await;
    (Client::new(), url, state)
}

async fn post(c: &Client, url: String, body: Value) -> (StatusCode, Value) {
    let r = c.post(url).json(&body).send().await.unwrap();
    let status = r.status();
    (status, r.json().await.unwrap())
}

async fn get(c: &Client, url: String) -> (StatusCode, Value) {
    let r = c.get(url).send().await.unwrap();
    let status = r.status();
    (status, r.json().await.unwrap())
}

async fn new_session(c: &Client, url: &str) -> String {
    let (s, _) = post(c, format!("{url}/recipes"), demo()).await;
    assert!(s == StatusCode::CREATED || s == StatusCode::CONFLICT);
    let (s, body) = post(c, format!("{url}/sessions"), json!({ "recipe_id": "cherry-tomato-confit" })).await;
    assert_eq!(s, StatusCode::CREATED, "{body}");
    body["session_id"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn health_reports_loading_then_ready() {
    let state = AppState::new(None);
    let url = start(state.clone()).await;
    let c = Client::new();
    let (s, h) = get(&c, format!("{url}/health")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(h["status"], "loading");
    let (s, body) = post(&c, format!("{url}/sessions"), json!({ "recipe_id": "x" })).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    assert!(body["code"].is_string() && body["message"].is_string());

    let model = small_model();
    let digest = model.digest();
    state.set_model(model).unwrap();
    let (_, h) = get(&c, format!("{url}/health")).await;
    assert_eq!(h["status"], "ready");
    assert_eq!(h["model_digest"], digest);
}

#[tokio::test]
async fn recipe_registration_errors() {
    let (c, url, _) = ready().await;
    let (s, body) = post(&c, format!("{url}/recipes"), demo()).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(body["recipe_id"], "cherry-tomato-confit");
    let names: Vec<&str> = body["ingredients"].as_array().unwrap().iter().map(|i| i["name"].as_str().unwrap()).collect();
    assert!(names.contains(&"tomato") && names.contains(&"rosemary"), "{names:?}");

    let (s, _) = post(&c, format!("{url}/recipes"), demo()).await;
    assert_eq!(s, StatusCode::CONFLICT);

    let mut long = demo();
    long["id"] = json!("long");
    long["instructions"] = json!(vec!["stir"; 21]);
    let (s, body) = post(&c, format!("{url}/recipes"), long).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(body["code"], "bad_request");

    let (s, _) = post(&c, format!("{url}/recipes"), json!({ "title": "no lists" })).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let junk = json!({ "title": "mystery", "ingredients": ["1 cup unobtainium"], "instructions": ["stir"] });
    let (s, _) = post(&c, format!("{url}/recipes"), junk).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);

    let r = c
        .post(format!("{url}/recipes"))
        .header("content-type", "text/plain")
        .body(demo().to_string())
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::UNSUPPORTED_MEDIA_TYPE);
}

#[tokio::test]
async fn session_creation() {
    let (c, url, _) = ready().await;
    post(&c, format!("{url}/recipes"), demo()).await;
    let (s, _) = post(&c, format!("{url}/sessions"), json!({ "recipe_id": "nope" })).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, body) = post(
        &c,
        format!("{url}/sessions"),
        json!({ "recipe_id": "cherry-tomato-confit", "critique_config": { "decay": 0.5 } }),
    )
    .await;
    assert_eq!(s, StatusCode::CREATED);
    assert!(body["base_z_digest"].is_string());
    let id = body["session_id"].as_str().unwrap();
    let (s, state) = get(&c, format!("{url}/sessions/{id}")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(state["config"]["decay"], 0.5);
    assert_eq!(state["history"].as_array().unwrap().len(), 0);

    let (s, _) = get(&c, format!("{url}/sessions/missing")).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, vocab) = get(&c, format!("{url}/vocab/ingredients")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(vocab.as_array().unwrap().len(), 50);
    assert!(vocab[0]["aliases"].is_array());
}

#[tokio::test]
async fn critique_errors() {
    let (c, url, _) = ready().await;
    let id = new_session(&c, &url).await;
    let crit = |body: Value| post(&c, format!("{url}/sessions/{id}/critiques"), body);

    let (s, _) = crit(json!({ "ingredient": "unobtainium", "direction": "add" })).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = crit(json!({ "ingredient": 999, "direction": "add" })).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = crit(json!({ "ingredient": "kale", "direction": "sideways" })).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = crit(json!({ "ingredient": "salmon", "direction": "remove" })).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = post(&c, format!("{url}/sessions/nope/critiques"), json!({ "ingredient": "kale", "direction": "add" })).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let (s, body) = crit(json!({ "ingredient": "kale", "direction": "add" })).await;
    assert_eq!(s, StatusCode::OK, "{body}");
    assert!(body["trace"]["records"].is_array());
    let (s, body) = crit(json!({ "ingredient": "kale", "direction": "remove" })).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(body["code"], "conflict");

    let (s, _) = post(&c, format!("{url}/sessions/{id}/undo"), json!({})).await;
    assert_eq!(s, StatusCode::OK);
    let (s, _) = post(&c, format!("{url}/sessions/{id}/undo"), json!({})).await;
    assert_eq!(s, StatusCode::CONFLICT);
}

#[tokio::test]
async fn adding_a_listed_ingredient_is_a_flagged_noop() {
    let (c, url, _) = ready().await;
    let id = new_session(&c, &url).await;
    let (_, before) = get(&c, format!("{url}/sessions/{id}")).await;
    let (s, body) = post(
        &c,
        format!("{url}/sessions/{id}/critiques"),
        json!({ "ingredient": "tomato", "direction": "add" }),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body["noop"], true);
    assert_eq!(body["success"], true);
    assert_eq!(body["state_digest"], before["current"]["state_digest"]);
    let (_, again) = post(
        &c,
        format!("{url}/sessions/{id}/critiques"),
        json!({ "ingredient": "tomato", "direction": "add" }),
    )
    .await;
    assert_eq!(again["success"], body["success"]);
    assert_eq!(again["history_len"], 2);
}

#[tokio::test]
async fn undo_restores_the_previous_state() {
    let (c, url, _) = ready().await;
    let id = new_session(&c, &url).await;
    let (_, before) = get(&c, format!("{url}/sessions/{id}")).await;
    let (s, after) = post(
        &c,
        format!("{url}/sessions/{id}/critiques"),
        json!({ "ingredient": "rosemary", "direction": "remove" }),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    assert_ne!(after["z_digest"], before["current"]["z_digest"]);
    let (s, undone) = post(&c, format!("{url}/sessions/{id}/undo"), json!({})).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(undone["history_len"], 0);
    assert_eq!(undone["current"]["state_digest"], before["current"]["state_digest"]);
}

#[tokio::test]
async fn replaying_a_session_reproduces_its_latent_vector() {
    let (c, url, _) = ready().await;
    let id = new_session(&c, &url).await;
    let steps = [
        ("kale", "add", ""),
        ("rosemary", "remove", ""),
        ("spinach", "add", "?from=base"),
    ];
    let mut last = Value::Null;
    for (ing, dir, q) in steps {
        let (s, body) = post(
            &c,
            format!("{url}/sessions/{id}/critiques{q}"),
            json!({ "ingredient": ing, "direction": dir }),
        )
        .await;
        assert_eq!(s, StatusCode::OK, "{body}");
        last = body;
    }
    let (_, state) = get(&c, format!("{url}/sessions/{id}")).await;
    assert_eq!(state["history"].as_array().unwrap().len(), 3);
    assert_eq!(state["current"]["z_digest"], last["z_digest"]);

    let (s, rep) = post(&c, format!("{url}/sessions/{id}/replay"), json!({})).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(rep["matches"], true);
    assert_eq!(rep["z_digest"], last["z_digest"]);

    // a scripted client replaying the same calls on a fresh session
    let (_, fresh) = post(&c, format!("{url}/sessions"), json!({ "recipe_id": "cherry-tomato-confit" })).await;
    let fid = fresh["session_id"].as_str().unwrap();
    let mut replayed = Value::Null;
    for (ing, dir, q) in steps {
        let (_, body) = post(
            &c,
            format!("{url}/sessions/{fid}/critiques{q}"),
            json!({ "ingredient": ing, "direction": dir }),
        )
        .await;
        replayed = body;
    }
    assert_eq!(replayed["z_digest"], last["z_digest"]);
    assert_eq!(replayed["state_digest"], last["state_digest"]);
}

#[tokio::test]
async fn concurrent_sessions_stay_isolated() {
    let (c, url, _) = ready().await;
    let a = new_session(&c, &url).await;
    let b = new_session(&c, &url).await;
    let ra = post(&c, format!("{url}/sessions/{a}/critiques"), json!({ "ingredient": "kale", "direction": "add" }));
    let rb = post(&c, format!("{url}/sessions/{b}/critiques"), json!({ "ingredient": "salt", "direction": "remove" }));
    let ((sa, ba), (sb, bb)) = tokio::join!(ra, rb);
    assert_eq!((sa, sb), (StatusCode::OK, StatusCode::OK));
    let (_, ga) = get(&c, format!("{url}/sessions/{a}")).await;
    let (_, gb) = get(&c, format!("{url}/sessions/{b}")).await;
    assert_eq!(ga["current"]["z_digest"], ba["z_digest"]);
    assert_eq!(gb["current"]["z_digest"], bb["z_digest"]);
    assert_eq!(ga["history"][0]["ingredient"]["name"], "kale");
    assert_eq!(gb["history"][0]["ingredient"]["name"], "salt");
}

#[tokio::test]
async fn recipes_persist_across_restarts() {
    let dir = tempfile::tempdir().unwrap();
    let state = AppState::new(Some(dir.path().to_path_buf()));
    state.set_model(small_model()).unwrap();
    let url = start(state).await;
    let c = Client::new();
    let id = new_session(&c, &url).await;
    post(&c, format!("{url}/sessions/{id}/critiques"), json!({ "ingredient": "kale", "direction": "add" })).await;
    assert!(dir.path().join("events.jsonl").exists());

    let restarted = AppState::new(Some(dir.path().to_path_buf()));
    restarted.set_model(small_model()).unwrap();
    let url = start(restarted).await;
    let (s, _) = post(&c, format!("{url}/sessions"), json!({ "recipe_id": "cherry-tomato-confit" })).await;
    assert_eq!(s, StatusCode::CREATED);
}
