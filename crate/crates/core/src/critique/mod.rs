//! Gradient-based critiquing of the latent recipe representation and the
//! recipe editing pipelines built on it.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::corpus::{mask_for_removal_critique, NoisedRecipe, Recipe};
use crate::model::{IngredientPrediction, IngredientTarget, LatentVector, RecipeModel};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Add,
    Remove,
}

impl Direction {
    pub fn target_value(self) -> bool {
        self == Direction::Add
    }
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Direction::Add => "add",
            Direction::Remove => "remove",
        })
    }
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "add" => Ok(Direction::Add),
            "remove" => Ok(Direction::Remove),
            _ => Err(Error::arg(format!("unknown critique direction {s:?}"))),
        }
    }
}

/// One piece of feedback: add or remove a single ingredient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Critique {
    pub ingredient: usize,
    pub direction: Direction,
}

impl Critique {
    pub fn add(ingredient: usize) -> Self {
        Critique {
            ingredient,
            direction: Direction::Add,
        }
    }

    pub fn remove(ingredient: usize) -> Self {
        Critique {
            ingredient,
            direction: Direction::Remove,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoppingCriterion {
    EarlyStopping,
    LocalThreshold,
    GlobalL1Threshold,
}

impl StoppingCriterion {
    pub const ALL: [StoppingCriterion; 3] = [
        StoppingCriterion::EarlyStopping,
        StoppingCriterion::LocalThreshold,
        StoppingCriterion::GlobalL1Threshold,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StoppingCriterion::EarlyStopping => "early_stopping",
            StoppingCriterion::LocalThreshold => "local_threshold",
            StoppingCriterion::GlobalL1Threshold => "global_l1_threshold",
        }
    }
}

impl std::str::FromStr for StoppingCriterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::arg(format!("unknown stopping criterion {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CritiqueConfig {
    pub alpha0: f64,
    pub decay: f64,
    pub patience: usize,
    pub max_iters: usize,
    pub criterion: StoppingCriterion,
    /// Only read by the threshold criteria.
    pub threshold: f64,
}

impl Default for CritiqueConfig {
    fn default() -> Self {
        CritiqueConfig {
            alpha0: 1.0,
            decay: 0.9,
            patience: 5,
            max_iters: 100,
            criterion: StoppingCriterion::EarlyStopping,
            threshold: 0.1,
        }
    }
}

impl CritiqueConfig {
    pub fn with_criterion(criterion: StoppingCriterion) -> Self {
        CritiqueConfig {
            criterion,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha0 > 0.0 && self.alpha0.is_finite()) {
            return Err(Error::config("alpha0 must be positive"));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::config("decay must lie in (0, 1]"));
        }
        if self.patience == 0 {
            return Err(Error::config("patience must be at least 1"));
        }
        if self.max_iters == 0 {
            return Err(Error::config("max_iters must be at least 1"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config("threshold must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    PatienceExhausted,
    MaxIters,
    ThresholdMet,
    /// The loss gradient vanished at the starting point.
    ZeroGradient,
}

/// State after iteration `t`; `t = 0` describes the starting point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub t: usize,
    /// Step size for the next update, `α₀·ζ^t`.
    pub alpha: f64,
    pub loss: f64,
    /// `|ỹ_c − ŷ_c|` per critiqued coordinate, in critique order.
    pub diffs: Vec<f64>,
    pub best_val: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CritiqueTrace {
    pub records: Vec<IterationRecord>,
    pub termination: Termination,
}

impl CritiqueTrace {
    /// Number of gradient updates performed.
    pub fn iterations(&self) -> usize {
        self.records.last().map(|r| r.t).unwrap_or(0)
    }

    /// One JSON object per record.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }
}

fn check_critiques(critiques: &[Critique], n: usize) -> Result<()> {
    for (i, c) in critiques.iter().enumerate() {
        if c.ingredient >= n {
            return Err(Error::arg(format!("ingredient id {} outside the vocabulary", c.ingredient)));
        }
        if critiques[..i]
            .iter()
            .any(|d| d.ingredient == c.ingredient && d.direction != c.direction)
        {
            return Err(Error::arg(format!(
                "ingredient {} is both added and removed",
                c.ingredient
            )));
        }
    }
    Ok(())
}

/// Desired ingredient vector: the thresholded prediction with critiqued
/// coordinates overwritten. EOS fires at the size of the resulting set.
pub fn build_target(prediction: &IngredientPrediction, critiques: &[Critique]) -> Result<IngredientTarget> {
    let mut y = prediction.thresholded();
    check_critiques(critiques, y.len())?;
    for c in critiques {
        y[c.ingredient] = c.direction.target_value();
    }
    Ok(IngredientTarget::new(y, prediction.eos_probabilities.len()))
}

fn diffs(target: &IngredientTarget, p: &IngredientPrediction, critiques: &[Critique]) -> Vec<f64> {
    critiques
        .iter()
        .map(|c| {
            let y = if target.ingredients[c.ingredient] { 1.0 } else { 0.0 };
            (y - p.probabilities[c.ingredient]).abs()
        })
        .collect()
}

fn l1(target: &IngredientTarget, p: &IngredientPrediction) -> f64 {
    target
        .ingredients
        .iter()
        .zip(&p.probabilities)
        .map(|(&y, &q)| ((y as u8 as f64) - q).abs())
        .sum()
}

fn max_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(0.0, f64::max)
}

/// Iteratively moves `z` along the normalized negative gradient of the
/// ingredient loss towards the critiqued target. Returns the selected latent
/// vector and the full trace.
pub fn critique_latent(
    model: &RecipeModel,
    z: &LatentVector,
    critiques: &[Critique],
    config: &CritiqueConfig,
) -> Result<(LatentVector, CritiqueTrace)> {
    config.validate()?;
    if critiques.is_empty() {
        return Err(Error::arg("at least one critique is required"));
    }
    let start = model.predict_ingredients(z)?;
    let target = build_target(&start, critiques)?;
    let lambda = model.config().eos_loss_weight;
    let d0 = diffs(&target, &start, critiques);
    let mut best_val = max_of(&d0);
    let mut alpha = config.alpha0;
    let mut records = vec![IterationRecord {
        t: 0,
        alpha,
        loss: crate::model::ingredient_loss(&start, &target, lambda)?,
        diffs: d0,
        best_val,
        accepted: true,
    }];
    let threshold_met = |p: &IngredientPrediction, m: f64| match config.criterion {
        StoppingCriterion::EarlyStopping => false,
        StoppingCriterion::LocalThreshold => m < config.threshold,
        StoppingCriterion::GlobalL1Threshold => l1(&target, p) < config.threshold,
    };
    if threshold_met(&start, best_val) {
        return Ok((z.clone(), CritiqueTrace { records, termination: Termination::ThresholdMet }));
    }

    let mut best = z.clone();
    let mut current = z.clone();
    let mut stale = 0;
    let mut t = 0;
    let termination = loop {
        if config.criterion == StoppingCriterion::EarlyStopping && stale >= config.patience {
            break Termination::PatienceExhausted;
        }
        if t >= config.max_iters {
            break Termination::MaxIters;
        }
        t += 1;
        let (_, g) = model.grad_ingredient_loss_wrt_z(&current, &target)?;
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::Numerical(format!("critique gradient is {norm} at iteration {t}")));
        }
        if norm == 0.0 && t == 1 {
            return Ok((z.clone(), CritiqueTrace { records, termination: Termination::ZeroGradient }));
        }
        if norm > 0.0 {
            let step = alpha / norm;
            let values = current.values.iter().zip(&g).map(|(v, gi)| v - step * gi).collect();
            current = LatentVector::new(values);
        }
        if !current.is_finite() {
            return Err(Error::Numerical(format!("latent vector diverged at iteration {t}")));
        }
        let p = model.predict_ingredients(&current)?;
        let d = diffs(&target, &p, critiques);
        let m = max_of(&d);
        let accepted = m < best_val;
        if accepted {
            best_val = m;
            best = current.clone();
            stale = 0;
        } else {
            stale += 1;
        }
        alpha *= config.decay;
        records.push(IterationRecord {
            t,
            alpha,
            loss: crate::model::ingredient_loss(&p, &target, lambda)?,
            diffs: d,
            best_val,
            accepted,
        });
        if threshold_met(&p, m) {
            break Termination::ThresholdMet;
        }
    };
    let z_star = match config.criterion {
        StoppingCriterion::EarlyStopping => best,
        _ => current,
    };
    Ok((z_star, CritiqueTrace { records, termination }))
}

/// Result of one editing pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditedRecipe {
    pub base_id: String,
    pub critiques: Vec<Critique>,
    pub z_before: LatentVector,
    pub z_after: LatentVector,
    pub ingredients_before: BTreeSet<usize>,
    pub ingredients_after: BTreeSet<usize>,
    /// Predicted probabilities at `z_after`.
    pub probabilities_after: Vec<f64>,
    pub instructions: Vec<String>,
    /// Absent for the filtered-decode baseline.
    pub trace: Option<CritiqueTrace>,
}

/// Encoder input for a critique: the full recipe, with lines and steps that
/// refer to removed ingredients hidden.
pub fn critique_input(recipe: &Recipe, critiques: &[Critique], model: &RecipeModel) -> Result<NoisedRecipe> {
    check_critiques(critiques, model.ingredients().len())?;
    let mut noised = NoisedRecipe::clean(recipe.clone());
    for c in critiques.iter().filter(|c| c.direction == Direction::Remove) {
        let m = mask_for_removal_critique(recipe, c.ingredient, model.ingredients())?;
        noised.masked_ingredients.extend(m.masked_ingredients);
        noised.masked_instructions.extend(m.masked_instructions);
    }
    Ok(noised)
}

fn decode(model: &RecipeModel, z: &LatentVector, set: &BTreeSet<usize>) -> Result<Vec<String>> {
    let max = model.config().max_instruction_tokens;
    Ok(model.decode_instructions(z, set, max)?.sentences)
}

/// Critiques an already encoded recipe, predicts the edited ingredient set
/// and decodes new instructions from it.
pub fn edit_latent(
    model: &RecipeModel,
    base_id: &str,
    z: &LatentVector,
    critiques: &[Critique],
    config: &CritiqueConfig,
) -> Result<EditedRecipe> {
    let before = model.predict_ingredients(z)?;
    let (z_star, trace) = critique_latent(model, z, critiques, config)?;
    let after = model.predict_ingredients(&z_star)?;
    let instructions = decode(model, &z_star, &after.top_set)?;
    Ok(EditedRecipe {
        base_id: base_id.to_string(),
        critiques: critiques.to_vec(),
        z_before: z.clone(),
        z_after: z_star,
        ingredients_before: before.top_set,
        ingredients_after: after.top_set,
        probabilities_after: after.probabilities,
        instructions,
        trace: Some(trace),
    })
}

pub fn edit_recipe(recipe: &Recipe, critiques: &[Critique], model: &RecipeModel, config: &CritiqueConfig) -> Result<EditedRecipe> {
    let input = critique_input(recipe, critiques, model)?;
    let z = model.encode(&input)?;
    edit_latent(model, &recipe.id, &z, critiques, config)
}

/// Baseline on an encoded recipe: leaves `z` alone and forces the critiqued
/// ingredients into or out of the predicted list before decoding.
pub fn filtered_decode_latent(model: &RecipeModel, base_id: &str, z: &LatentVector, critiques: &[Critique]) -> Result<EditedRecipe> {
    check_critiques(critiques, model.ingredients().len())?;
    let before = model.predict_ingredients(z)?;
    let mut set = before.top_set.clone();
    for c in critiques {
        match c.direction {
            Direction::Add => set.insert(c.ingredient),
            Direction::Remove => set.remove(&c.ingredient),
        };
    }
    let instructions = decode(model, z, &set)?;
    Ok(EditedRecipe {
        base_id: base_id.to_string(),
        critiques: critiques.to_vec(),
        z_before: z.clone(),
        z_after: z.clone(),
        ingredients_before: before.top_set,
        ingredients_after: set,
        probabilities_after: before.probabilities,
        instructions,
        trace: None,
    })
}

pub fn filtered_decode_baseline(recipe: &Recipe, critiques: &[Critique], model: &RecipeModel) -> Result<EditedRecipe> {
    let input = critique_input(recipe, critiques, model)?;
    let z = model.encode(&input)?;
    filtered_decode_latent(model, &recipe.id, &z, critiques)
}

#[cfg(test)]
mod tests;
