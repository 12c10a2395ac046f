//! JSON-over-HTTP service for recipe critiquing sessions.
//!
//! Critiques within a session chain: each one starts from the latent vector
//! left by the previous one. Pass `?from=base` to start from the encoded base
//! recipe instead.

pub mod session;

use std::collections::{BTreeSet, HashMap};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use anyhow::Context;
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use recipecrit::corpus::{IngredientVocab, Recipe, RecipeRecord, Rejection};
use recipecrit::critique::{Critique, CritiqueConfig, Direction};
use recipecrit::model::RecipeModel;

use session::{HistoryEntry, Session, SessionError, SessionState};

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
        }
    }

    fn bad_request(m: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", m)
    }

    fn not_found(m: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", m)
    }

    fn conflict(m: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, "conflict", m)
    }

    fn unprocessable(m: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "unprocessable", m)
    }

    fn internal(m: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", m)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "code": self.code, "message": self.message }))).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        match r {
            JsonRejection::MissingJsonContentType(_) => Self::new(
                StatusCode::UNSUPPORTED_MEDIA_TYPE,
                "unsupported_media_type",
                "expected content-type application/json",
            ),
            other => Self::bad_request(other.body_text()),
        }
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        match e {
            SessionError::Unprocessable(m) => Self::unprocessable(m),
            SessionError::Conflict(m) => Self::conflict(m),
            SessionError::Core(recipecrit::Error::Argument(m)) => Self::unprocessable(m),
            SessionError::Core(e) => Self::internal(e.to_string()),
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

enum ModelSlot {
    Loading,
    Ready(Arc<RecipeModel>),
    Failed(String),
}

/// Shared registry of recipes and sessions plus the read-only model.
pub struct AppState {
    model: RwLock<ModelSlot>,
    recipes: RwLock<HashMap<String, Recipe>>,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
    counter: AtomicU64,
    persist_dir: Option<PathBuf>,
}

impl AppState {
    pub fn new(persist_dir: Option<PathBuf>) -> Arc<Self> {
        Arc::new(AppState {
            model: RwLock::new(ModelSlot::Loading),
            recipes: RwLock::new(HashMap::new()),
            sessions: RwLock::new(HashMap::new()),
            counter: AtomicU64::new(0),
            persist_dir,
        })
    }

    /// Installs the model and restores persisted recipes.
    pub fn set_model(&self, model: RecipeModel) -> anyhow::Result<()> {
        if let Some(dir) = &self.persist_dir {
            let path = dir.join("recipes.jsonl");
            if path.exists() {
                let (recipes, stats) = recipecrit::corpus::load_jsonl(&path, model.ingredients())?;
                log::info!("restored {} recipes ({} dropped)", recipes.len(), stats.dropped());
                let mut reg = self.recipes.write().unwrap();
                for r in recipes {
                    reg.insert(r.id.clone(), r);
                }
            }
        }
        *self.model.write().unwrap() = ModelSlot::Ready(Arc::new(model));
        Ok(())
    }

    pub fn set_failed(&self, message: String) {
        *self.model.write().unwrap() = ModelSlot::Failed(message);
    }

    fn model(&self) -> ApiResult<Arc<RecipeModel>> {
        match &*self.model.read().unwrap() {
            ModelSlot::Ready(m) => Ok(m.clone()),
            ModelSlot::Loading => Err(ApiError::new(
                StatusCode::SERVICE_UNAVAILABLE,
                "model_loading",
                "model is still loading",
            )),
            ModelSlot::Failed(e) => Err(ApiError::new(
                StatusCode::SERVICE_UNAVAILABLE,
                "model_unavailable",
                format!("model failed to load: {e}"),
            )),
        }
    }

    fn next_id(&self, prefix: &str) -> String {
        format!("{prefix}{:06}", self.counter.fetch_add(1, Ordering::SeqCst) + 1)
    }

    fn session(&self, id: &str) -> ApiResult<Arc<Mutex<Session>>> {
        self.sessions
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("no session {id:?}")))
    }

    fn append(&self, file: &str, record: &Value) {
        let Some(dir) = &self.persist_dir else { return };
        let res = std::fs::create_dir_all(dir).and_then(|_| {
            let mut f = OpenOptions::new().create(true).append(true).open(dir.join(file))?;
            writeln!(f, "{record}")
        });
        if let Err(e) = res {
            log::warn!("could not persist to {}: {e}", dir.join(file).display());
        }
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/vocab/ingredients", get(vocab))
        .route("/recipes", post(create_recipe))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/critiques", post(critique))
        .route("/sessions/{id}/undo", post(undo))
        .route("/sessions/{id}/replay", post(replay))
        .with_state(state)
}

pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

/// Where and what to serve.
#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub addr: std::net::SocketAddr,
    pub checkpoint: PathBuf,
    /// Ingredient vocabulary TSV that must match the checkpoint.
    pub vocab: Option<PathBuf>,
    pub persist_dir: Option<PathBuf>,
}

/// Binds first, then loads the checkpoint in the background; `/health`
/// reports `loading` until it is ready.
pub async fn run(opts: ServeOptions) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(opts.addr)
        .await
        .with_context(|| format!("binding {}", opts.addr))?;
    let state = AppState::new(opts.persist_dir.clone());
    let loader = state.clone();
    tokio::task::spawn_blocking(move || {
        let result = (|| -> anyhow::Result<_> {
            let vocab = opts.vocab.as_deref().map(IngredientVocab::load).transpose()?;
            Ok(recipecrit::model::load_checkpoint(&opts.checkpoint, vocab.as_ref())?)
        })();
        match result {
            Ok(model) => {
                log::info!("model ready, digest {}", model.digest());
                if let Err(e) = loader.set_model(model) {
                    log::error!("restoring persisted recipes: {e:#}");
                    loader.set_failed(format!("{e:#}"));
                }
            }
            Err(e) => {
                log::error!("loading {}: {e:#}", opts.checkpoint.display());
                loader.set_failed(format!("{e:#}"));
            }
        }
    });
    log::info!("listening on {}", opts.addr);
    serve(listener, state).await?;
    Ok(())
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

async fn health(State(st): State<Arc<AppState>>) -> Json<Value> {
    Json(match &*st.model.read().unwrap() {
        ModelSlot::Loading => json!({ "status": "loading", "model_digest": null }),
        ModelSlot::Ready(m) => json!({ "status": "ready", "model_digest": m.digest() }),
        ModelSlot::Failed(e) => json!({ "status": "failed", "model_digest": null, "message": e }),
    })
}

async fn vocab(State(st): State<Arc<AppState>>) -> ApiResult<Json<Value>> {
    let model = st.model()?;
    let items: Vec<Value> = model
        .ingredients()
        .ingredients()
        .iter()
        .map(|i| json!({ "id": i.id, "name": i.canonical_name, "aliases": i.aliases }))
        .collect();
    Ok(Json(Value::Array(items)))
}

fn ingredient_views(set: &BTreeSet<usize>, vocab: &IngredientVocab) -> Vec<Value> {
    set.iter().map(|&i| json!({ "id": i, "name": vocab.name(i) })).collect()
}

fn state_view(s: &SessionState, vocab: &IngredientVocab) -> Value {
    json!({
        "ingredients": ingredient_views(&s.ingredients, vocab),
        "instructions": s.instructions,
        "z_digest": s.z.digest(),
        "state_digest": s.digest(),
    })
}

async fn create_recipe(
    State(st): State<Arc<AppState>>,
    body: Result<Json<RecipeRecord>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let Json(record) = body?;
    let model = st.model()?;
    let vocab = model.ingredients();
    if let Some(id) = &record.id {
        if st.recipes.read().unwrap().contains_key(id) {
            return Err(ApiError::conflict(format!("recipe {id:?} already exists")));
        }
    }
    let stored = record.clone();
    let recipe = record.into_recipe(|| st.next_id("r"), vocab).map_err(|r| match r {
        Rejection::NoResolvedIngredients => ApiError::unprocessable("no ingredient line resolves to a known ingredient"),
        other => ApiError::bad_request(format!("invalid recipe: {other:?}")),
    })?;
    {
        let mut reg = st.recipes.write().unwrap();
        if reg.contains_key(&recipe.id) {
            return Err(ApiError::conflict(format!("recipe {:?} already exists", recipe.id)));
        }
        reg.insert(recipe.id.clone(), recipe.clone());
    }
    st.append("recipes.jsonl", &json!(RecipeRecord { id: Some(recipe.id.clone()), ..stored }));
    Ok((
        StatusCode::CREATED,
        Json(json!({
            "recipe_id": recipe.id,
            "ingredients": ingredient_views(&recipe.ingredient_ids, vocab),
        })),
    ))
}

#[derive(Deserialize)]
struct NewSession {
    recipe_id: String,
    critique_config: Option<CritiqueConfig>,
}

async fn create_session(
    State(st): State<Arc<AppState>>,
    body: Result<Json<NewSession>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let Json(req) = body?;
    let model = st.model()?;
    let recipe = st
        .recipes
        .read()
        .unwrap()
        .get(&req.recipe_id)
        .cloned()
        .ok_or_else(|| ApiError::not_found(format!("no recipe {:?}", req.recipe_id)))?;
    let config = req.critique_config.unwrap_or_default();
    config.validate().map_err(|e| ApiError::bad_request(e.to_string()))?;
    let id = st.next_id("s");
    let m = model.clone();
    let (session, predicted) = blocking(move || {
        let s = Session::start(id, recipe, config, &m).map_err(|e| ApiError::internal(e.to_string()))?;
        let p = m.predict_ingredients(&s.base.z).map_err(|e| ApiError::internal(e.to_string()))?;
        Ok((s, p))
    })
    .await?;
    let vocab = model.ingredients();
    let body = json!({
        "session_id": session.id,
        "recipe_id": session.recipe.id,
        "config": session.config,
        "base_prediction": {
            "ingredients": ingredient_views(&predicted.top_set, vocab),
            "probabilities": predicted.probabilities,
        },
        "base_z_digest": session.base.z.digest(),
        "state": state_view(&session.base, vocab),
    });
    st.append("events.jsonl", &json!({ "event": "session", "session_id": session.id, "recipe_id": session.recipe.id }));
    st.sessions
        .write()
        .unwrap()
        .insert(session.id.clone(), Arc::new(Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(body)))
}

fn history_view(h: &HistoryEntry, vocab: &IngredientVocab) -> Value {
    json!({
        "ingredient": { "id": h.critique.ingredient, "name": vocab.name(h.critique.ingredient) },
        "direction": h.critique.direction,
        "from_base": h.from_base,
        "noop": h.noop,
        "success": h.success,
        "trace_digest": h.trace_digest,
        "state_digest": h.state.digest(),
    })
}

fn session_view(s: &Session, vocab: &IngredientVocab) -> Value {
    json!({
        "session_id": s.id,
        "recipe_id": s.recipe.id,
        "recipe": {
            "title": s.recipe.title,
            "ingredients": s.recipe.ingredient_lines,
            "instructions": s.recipe.instructions,
        },
        "config": s.config,
        "base": state_view(&s.base, vocab),
        "current": state_view(s.current(), vocab),
        "history": s.history.iter().map(|h| history_view(h, vocab)).collect::<Vec<_>>(),
        "created": s.created,
        "updated": s.updated,
    })
}

async fn get_session(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let session = st.session(&id)?;
    let model = st.model()?;
    let s = session.lock().unwrap();
    Ok(Json(session_view(&s, model.ingredients())))
}

#[derive(Deserialize, Serialize)]
#[serde(untagged)]
enum IngredientRef {
    Id(usize),
    Name(String),
}

#[derive(Deserialize)]
struct CritiqueRequest {
    ingredient: IngredientRef,
    direction: Direction,
}

#[derive(Deserialize)]
struct CritiqueQuery {
    from: Option<String>,
}

async fn critique(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<CritiqueQuery>,
    body: Result<Json<CritiqueRequest>, JsonRejection>,
) -> ApiResult<Json<Value>> {
    let Json(req) = body?;
    let from_base = match q.from.as_deref() {
        None | Some("current") => false,
        Some("base") => true,
        Some(other) => return Err(ApiError::bad_request(format!("unknown from={other:?}"))),
    };
    let session = st.session(&id)?;
    let model = st.model()?;
    let ingredient = match &req.ingredient {
        IngredientRef::Id(i) if *i < model.ingredients().len() => *i,
        IngredientRef::Id(i) => return Err(ApiError::unprocessable(format!("ingredient id {i} outside the vocabulary"))),
        IngredientRef::Name(n) => model
            .ingredients()
            .resolve_name(n)
            .ok_or_else(|| ApiError::unprocessable(format!("unknown ingredient {n:?}")))?,
    };
    let c = Critique {
        ingredient,
        direction: req.direction,
    };
    let m = model.clone();
    let body = blocking(move || {
        let mut s = session.lock().unwrap();
        let vocab = m.ingredients();
        s.apply(&m, c, from_base)?;
        let entry = s.history.last().expect("entry just applied");
        let body = json!({
            "session_id": s.id,
            "critique": { "ingredient": { "id": c.ingredient, "name": vocab.name(c.ingredient) }, "direction": c.direction },
            "from_base": from_base,
            "noop": entry.noop,
            "ingredients": ingredient_views(&entry.state.ingredients, vocab),
            "instructions": entry.state.instructions,
            "z_digest": entry.state.z.digest(),
            "state_digest": entry.state.digest(),
            "success": entry.success,
            "coherence": entry.coherence,
            "trace": entry.trace,
            "trace_digest": entry.trace_digest,
            "history_len": s.history.len(),
        });
        Ok(body)
    })
    .await?;
    st.append("events.jsonl", &json!({ "event": "critique", "session_id": id, "ingredient": ingredient, "direction": req.direction, "from_base": from_base }));
    Ok(Json(body))
}

async fn undo(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let session = st.session(&id)?;
    let model = st.model()?;
    let body = {
        let mut s = session.lock().unwrap();
        if s.undo().is_none() {
            return Err(ApiError::conflict("nothing to undo"));
        }
        json!({
            "session_id": s.id,
            "history_len": s.history.len(),
            "current": state_view(s.current(), model.ingredients()),
        })
    };
    st.append("events.jsonl", &json!({ "event": "undo", "session_id": id }));
    Ok(Json(body))
}

async fn replay(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let session = st.session(&id)?;
    let model = st.model()?;
    blocking(move || {
        let s = session.lock().unwrap();
        let replayed = s.replay(&model)?;
        let current = s.current();
        Ok(Json(json!({
            "session_id": s.id,
            "history_len": s.history.len(),
            "z_digest": replayed.z.digest(),
            "state_digest": replayed.digest(),
            "matches": replayed.z == current.z && replayed == *current,
        })))
    })
    .await
}
