//! Interactive critiquing sessions, independent of the HTTP layer.

use std::collections::BTreeSet;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use recipecrit::corpus::Recipe;
use recipecrit::critique::{critique_input, edit_latent, Critique, CritiqueConfig, CritiqueTrace, Direction};
use recipecrit::eval::{coherence_prf, success_of, Prf, SuccessMode};
use recipecrit::model::{LatentVector, RecipeModel};

#[derive(Debug)]
pub enum SessionError {
    /// The critique cannot apply to this session (HTTP 422).
    Unprocessable(String),
    /// The critique contradicts an earlier one (HTTP 409).
    Conflict(String),
    Core(recipecrit::Error),
}

impl From<recipecrit::Error> for SessionError {
    fn from(e: recipecrit::Error) -> Self {
        SessionError::Core(e)
    }
}

/// What the user currently sees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub z: LatentVector,
    pub ingredients: BTreeSet<usize>,
    pub instructions: Vec<String>,
}

impl SessionState {
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.z.values {
            h.update(v.to_le_bytes());
        }
        for i in &self.ingredients {
            h.update((*i as u64).to_le_bytes());
        }
        for s in &self.instructions {
            h.update((s.len() as u64).to_le_bytes());
            h.update(s.as_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct HistoryEntry {
    pub critique: Critique,
    pub from_base: bool,
    /// The current list already satisfied the critique; nothing changed.
    pub noop: bool,
    pub state: SessionState,
    pub trace: Option<CritiqueTrace>,
    pub trace_digest: Option<String>,
    pub success: bool,
    pub coherence: Prf,
}

#[derive(Debug, Clone)]
pub struct Session {
    pub id: String,
    pub recipe: Recipe,
    pub config: CritiqueConfig,
    pub base: SessionState,
    pub history: Vec<HistoryEntry>,
    pub created: u64,
    pub updated: u64,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl Session {
    /// Encodes the recipe once; the base state shows the recipe as written.
    pub fn start(id: String, recipe: Recipe, config: CritiqueConfig, model: &RecipeModel) -> recipecrit::Result<Self> {
        config.validate()?;
        let z = model.encode_recipe(&recipe)?;
        let t = now();
        Ok(Session {
            id,
            base: SessionState {
                z,
                ingredients: recipe.ingredient_ids.clone(),
                instructions: recipe.instructions.clone(),
            },
            recipe,
            config,
            history: Vec::new(),
            created: t,
            updated: t,
        })
    }

    pub fn current(&self) -> &SessionState {
        self.history.last().map(|h| &h.state).unwrap_or(&self.base)
    }

    fn at_base(&self) -> bool {
        self.history.iter().all(|h| h.noop)
    }

    /// Applies one critique starting from the current latent vector, or
    /// from the encoded base recipe when `from_base` is set.
    pub fn apply(&mut self, model: &RecipeModel, critique: Critique, from_base: bool) -> Result<&HistoryEntry, SessionError> {
        let vocab = model.ingredients();
        let c = critique.ingredient;
        if c >= vocab.len() {
            return Err(SessionError::Unprocessable(format!("ingredient id {c} outside the vocabulary")));
        }
        if let Some(prev) = self
            .history
            .iter()
            .find(|h| !h.noop && h.critique.ingredient == c && h.critique.direction != critique.direction)
        {
            return Err(SessionError::Conflict(format!(
                "{} was already critiqued with {}; undo it first",
                vocab.name(c),
                prev.critique.direction
            )));
        }
        let current = self.current().clone();
        if critique.direction == Direction::Remove
            && !current.ingredients.contains(&c)
            && !self.recipe.ingredient_ids.contains(&c)
        {
            return Err(SessionError::Unprocessable(format!(
                "{} is not in this recipe",
                vocab.name(c)
            )));
        }
        let satisfied = current.ingredients.contains(&c) == (critique.direction == Direction::Add);
        let entry = if satisfied {
            HistoryEntry {
                critique,
                from_base,
                noop: true,
                success: success_of(&current.ingredients, &current.instructions, &critique, vocab, SuccessMode::Both),
                coherence: coherence_prf(&current.ingredients, &current.instructions, vocab),
                state: current,
                trace: None,
                trace_digest: None,
            }
        } else {
            let z = if from_base || self.at_base() {
                if self.recipe.ingredient_ids.contains(&c) {
                    model.encode(&critique_input(&self.recipe, &[critique], model)?)?
                } else {
                    self.base.z.clone()
                }
            } else {
                current.z
            };
            let edited = edit_latent(model, &self.recipe.id, &z, &[critique], &self.config)?;
            let trace_digest = match &edited.trace {
                Some(t) => Some(hex::encode(Sha256::digest(t.to_jsonl()?.as_bytes()))),
                None => None,
            };
            HistoryEntry {
                critique,
                from_base,
                noop: false,
                success: recipecrit::eval::success(&edited, &critique, vocab, SuccessMode::Both),
                coherence: coherence_prf(&edited.ingredients_after, &edited.instructions, vocab),
                state: SessionState {
                    z: edited.z_after,
                    ingredients: edited.ingredients_after,
                    instructions: edited.instructions,
                },
                trace: edited.trace,
                trace_digest,
            }
        };
        self.history.push(entry);
        self.updated = now();
        Ok(self.history.last().expect("just pushed"))
    }

    /// Drops the latest critique and restores the stored prior state.
    pub fn undo(&mut self) -> Option<HistoryEntry> {
        let e = self.history.pop();
        if e.is_some() {
            self.updated = now();
        }
        e
    }

    /// Re-runs the history from the base recipe and returns the final state.
    pub fn replay(&self, model: &RecipeModel) -> Result<SessionState, SessionError> {
        let mut fresh = Session::start(self.id.clone(), self.recipe.clone(), self.config.clone(), model)?;
        for h in &self.history {
            fresh.apply(model, h.critique, h.from_base)?;
        }
        Ok(fresh.current().clone())
    }
}
