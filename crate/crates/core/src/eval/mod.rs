//! Metrics and experiment harnesses: editing success, fidelity, coherence
//! and reconstruction.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{apply_denoising_noise, CritiqueEvalSet, IngredientVocab, NoisedRecipe, Recipe};
use crate::critique::{
    critique_input, edit_latent, filtered_decode_latent, Critique, CritiqueConfig, Direction, EditedRecipe,
};
use crate::model::{RecipeModel, TrainingStage};
use crate::{Error, Result};

/// `|A∩B| / |A∪B|`, with two empty sets scoring 1.
pub fn iou(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Harmonic mean of `|A∩B|/|A|` and `|A∩B|/|B|`. Both empty scores 1, one
/// empty scores 0.
pub fn set_f1(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let i = a.intersection(b).count() as f64;
    2.0 * i / (a.len() + b.len()) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize, other_empty: bool) -> f64 {
    match den {
        0 if other_empty => 1.0,
        0 => 0.0,
        _ => num as f64 / den as f64,
    }
}

/// Precision and recall of the ingredients mentioned in `instructions`
/// against the `predicted` list.
pub fn coherence_prf<S: AsRef<str>>(predicted: &BTreeSet<usize>, instructions: &[S], vocab: &IngredientVocab) -> Prf {
    let mentioned = vocab.ingredient_mentions(instructions);
    let both = mentioned.intersection(predicted).count();
    let precision = ratio(both, mentioned.len(), predicted.is_empty());
    let recall = ratio(both, predicted.len(), mentioned.is_empty());
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Prf { precision, recall, f1 }
}

/// Which parts of an edited recipe must reflect the critique.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuccessMode {
    #[default]
    Both,
    ListOnly,
    TextOnly,
}

pub fn success_of<S: AsRef<str>>(
    ingredients: &BTreeSet<usize>,
    instructions: &[S],
    critique: &Critique,
    vocab: &IngredientVocab,
    mode: SuccessMode,
) -> bool {
    let want = critique.direction == Direction::Add;
    let list = ingredients.contains(&critique.ingredient) == want;
    let text = || vocab.ingredient_mentions(instructions).contains(&critique.ingredient) == want;
    match mode {
        SuccessMode::Both => list && text(),
        SuccessMode::ListOnly => list,
        SuccessMode::TextOnly => text(),
    }
}

/// Whether the edited list and instructions include (add) or exclude
/// (remove) the critiqued ingredient.
pub fn success(edited: &EditedRecipe, critique: &Critique, vocab: &IngredientVocab, mode: SuccessMode) -> bool {
    success_of(&edited.ingredients_after, &edited.instructions, critique, vocab, mode)
}

/// Per-edit measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditOutcome {
    pub success: bool,
    pub iou: f64,
    pub f1: f64,
    pub coherence: Prf,
    pub iterations: usize,
}

/// Scores an edit against its base ingredient list. The critiqued
/// ingredient is left out of the fidelity comparison.
pub fn evaluate_edit(
    base: &BTreeSet<usize>,
    edited: &EditedRecipe,
    critique: &Critique,
    vocab: &IngredientVocab,
    mode: SuccessMode,
) -> EditOutcome {
    let mut a = edited.ingredients_after.clone();
    let mut b = base.clone();
    a.remove(&critique.ingredient);
    b.remove(&critique.ingredient);
    EditOutcome {
        success: success(edited, critique, vocab, mode),
        iou: iou(&a, &b),
        f1: set_f1(&a, &b),
        coherence: coherence_prf(&edited.ingredients_after, &edited.instructions, vocab),
        iterations: edited.trace.as_ref().map(|t| t.iterations()).unwrap_or(0),
    }
}

/// An editing method under evaluation.
#[derive(Debug, Clone, PartialEq)]
pub enum Pipeline {
    Critique(CritiqueConfig),
    FilteredDecode,
    /// Returns the base recipe untouched; a harness self-check.
    Identity,
}

impl Pipeline {
    pub fn name(&self) -> String {
        match self {
            Pipeline::Critique(c) => c.criterion.name().to_string(),
            Pipeline::FilteredDecode => "filtered_decode".into(),
            Pipeline::Identity => "identity".into(),
        }
    }

    pub fn run(&self, model: &RecipeModel, recipe: &Recipe, critique: &Critique) -> Result<EditedRecipe> {
        let critiques = std::slice::from_ref(critique);
        if let Pipeline::Identity = self {
            let z = model.encode_recipe(recipe)?;
            return Ok(EditedRecipe {
                base_id: recipe.id.clone(),
                critiques: critiques.to_vec(),
                z_before: z.clone(),
                z_after: z,
                ingredients_before: recipe.ingredient_ids.clone(),
                ingredients_after: recipe.ingredient_ids.clone(),
                probabilities_after: Vec::new(),
                instructions: recipe.instructions.clone(),
                trace: None,
            });
        }
        let z = model.encode(&critique_input(recipe, critiques, model)?)?;
        match self {
            Pipeline::Critique(cfg) => edit_latent(model, &recipe.id, &z, critiques, cfg),
            _ => filtered_decode_latent(model, &recipe.id, &z, critiques),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub seed: u64,
    pub success_mode: SuccessMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            seed: 0,
            success_mode: SuccessMode::Both,
        }
    }
}

/// One machine-readable result record. Percentages lie in `[0, 100]`;
/// `target_id` is absent on macro-averaged rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub experiment: String,
    pub criterion: String,
    pub direction: Option<Direction>,
    pub target_id: Option<usize>,
    pub n: usize,
    pub success_rate: Option<f64>,
    pub iou: f64,
    pub f1: f64,
    pub coh_p: f64,
    pub coh_r: f64,
    pub coh_f1: f64,
    pub mean_iters: Option<f64>,
    pub seed: u64,
    pub model_digest: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
}

impl MetricsReport {
    /// Macro-averaged row for a criterion and direction.
    pub fn summary(&self, criterion: &str, direction: Option<Direction>) -> Option<&MetricsRow> {
        self.rows
            .iter()
            .find(|r| r.criterion == criterion && r.direction == direction && r.target_id.is_none())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let rows = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(MetricsReport { rows })
    }

    /// SHA-256 of the machine serialization.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_jsonl()?.as_bytes())))
    }

    /// Summary rows laid out as a plain-text table.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<22} {:<7} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6} {:>5}\n",
            "Model", "Dir.", "Succ.", "IoU", "F1", "Prec.", "Rec.", "F1", "Iters", "n"
        );
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.1}")).unwrap_or_else(|| "-".into());
        for r in self.rows.iter().filter(|r| r.target_id.is_none()) {
            out.push_str(&format!(
                "{:<22} {:<7} {:>6} {:>6.1} {:>6.1} {:>6.1} {:>6.1} {:>6.1} {:>6} {:>5}\n",
                r.criterion,
                r.direction.map(|d| d.to_string()).unwrap_or_else(|| "-".into()),
                opt(r.success_rate),
                r.iou,
                r.f1,
                r.coh_p,
                r.coh_r,
                r.coh_f1,
                opt(r.mean_iters),
                r.n
            ));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Machine,
    Table,
}

pub fn emit_report(report: &MetricsReport, path: &Path, format: ReportFormat) -> Result<()> {
    let text = match format {
        ReportFormat::Machine => report.to_jsonl()?,
        ReportFormat::Table => report.to_table(),
    };
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[derive(Default)]
struct Acc {
    n: usize,
    success: usize,
    iou: f64,
    f1: f64,
    p: f64,
    r: f64,
    c: f64,
    iters: f64,
}

impl Acc {
    fn push(&mut self, o: &EditOutcome) {
        self.n += 1;
        self.success += o.success as usize;
        self.iou += o.iou;
        self.f1 += o.f1;
        self.p += o.coherence.precision;
        self.r += o.coherence.recall;
        self.c += o.coherence.f1;
        self.iters += o.iterations as f64;
    }

    fn mean(&self, v: f64) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            100.0 * v / self.n as f64
        }
    }
}

fn mean(rows: &[MetricsRow], f: impl Fn(&MetricsRow) -> f64) -> f64 {
    if rows.is_empty() {
        0.0
    } else {
        rows.iter().map(f).sum::<f64>() / rows.len() as f64
    }
}

fn require_stage2(model: &RecipeModel) -> Result<()> {
    if model.stage() != TrainingStage::Stage2 {
        return Err(Error::arg("editing experiments need a model trained through stage 2"));
    }
    Ok(())
}

/// Runs every pipeline on every evaluation set: add on recipes without the
/// target, remove on recipes with it. Emits one row per target plus a
/// macro average per pipeline and direction.
pub fn run_editing(
    experiment: &str,
    model: &RecipeModel,
    sets: &[CritiqueEvalSet],
    pipelines: &[Pipeline],
    config: &EvalConfig,
) -> Result<MetricsReport> {
    require_stage2(model)?;
    let digest = model.digest();
    let vocab = model.ingredients();
    let mut rows = Vec::new();
    for pipeline in pipelines {
        let name = pipeline.name();
        for direction in [Direction::Add, Direction::Remove] {
            let mut per_target = Vec::new();
            for set in sets {
                let critique = Critique {
                    ingredient: set.target,
                    direction,
                };
                let recipes = match direction {
                    Direction::Add => &set.negative,
                    Direction::Remove => &set.positive,
                };
                let mut acc = Acc::default();
                for recipe in recipes {
                    let edited = pipeline.run(model, recipe, &critique)?;
                    acc.push(&evaluate_edit(&recipe.ingredient_ids, &edited, &critique, vocab, config.success_mode));
                }
                log::info!(
                    "{experiment} {name} {direction} {}: success {}/{}",
                    vocab.name(set.target),
                    acc.success,
                    acc.n
                );
                per_target.push(MetricsRow {
                    experiment: experiment.to_string(),
                    criterion: name.clone(),
                    direction: Some(direction),
                    target_id: Some(set.target),
                    n: acc.n,
                    success_rate: Some(acc.mean(acc.success as f64)),
                    iou: acc.mean(acc.iou),
                    f1: acc.mean(acc.f1),
                    coh_p: acc.mean(acc.p),
                    coh_r: acc.mean(acc.r),
                    coh_f1: acc.mean(acc.c),
                    mean_iters: Some(if acc.n == 0 { 0.0 } else { acc.iters / acc.n as f64 }),
                    seed: config.seed,
                    model_digest: digest.clone(),
                });
            }
            let summary = MetricsRow {
                experiment: experiment.to_string(),
                criterion: name.clone(),
                direction: Some(direction),
                target_id: None,
                n: per_target.iter().map(|r| r.n).sum(),
                success_rate: Some(mean(&per_target, |r| r.success_rate.unwrap_or(0.0))),
                iou: mean(&per_target, |r| r.iou),
                f1: mean(&per_target, |r| r.f1),
                coh_p: mean(&per_target, |r| r.coh_p),
                coh_r: mean(&per_target, |r| r.coh_r),
                coh_f1: mean(&per_target, |r| r.coh_f1),
                mean_iters: Some(mean(&per_target, |r| r.mean_iters.unwrap_or(0.0))),
                seed: config.seed,
                model_digest: digest.clone(),
            };
            rows.extend(per_target);
            rows.push(summary);
        }
    }
    Ok(MetricsReport { rows })
}

/// Latent critiquing against the filtered-decode baseline.
pub fn run_rq1(model: &RecipeModel, sets: &[CritiqueEvalSet], critique: &CritiqueConfig, config: &EvalConfig) -> Result<MetricsReport> {
    let pipelines = [Pipeline::Critique(critique.clone()), Pipeline::FilteredDecode];
    run_editing("rq1", model, sets, &pipelines, config)
}

/// The same protocol across stopping criteria.
pub fn run_rq2(model: &RecipeModel, sets: &[CritiqueEvalSet], grid: &[CritiqueConfig], config: &EvalConfig) -> Result<MetricsReport> {
    let pipelines: Vec<Pipeline> = grid.iter().cloned().map(Pipeline::Critique).collect();
    run_editing("rq2", model, sets, &pipelines, config)
}

/// Evaluation sets for `k` critique targets chosen on `train`, each with
/// `n_each` recipes per side drawn from `pool`.
pub fn critique_eval_sets(
    train: &[Recipe],
    pool: &[Recipe],
    vocab: &IngredientVocab,
    k: usize,
    n_each: usize,
    min_support: usize,
    seed: u64,
) -> Result<Vec<CritiqueEvalSet>> {
    let targets = crate::corpus::select_critique_targets(train, vocab, k, min_support)?;
    targets
        .into_iter()
        .map(|t| crate::corpus::sample_eval_set(pool, t, n_each, seed.wrapping_add(t as u64)))
        .collect()
}

/// Anything that can rebuild a recipe's ingredient set and instructions from
/// a noised view of it.
pub trait Reconstructor {
    fn reconstruct(&self, noised: &NoisedRecipe) -> Result<(BTreeSet<usize>, Vec<String>)>;
    fn vocab(&self) -> &IngredientVocab;
    fn digest(&self) -> String;
}

impl Reconstructor for RecipeModel {
    fn reconstruct(&self, noised: &NoisedRecipe) -> Result<(BTreeSet<usize>, Vec<String>)> {
        let z = self.encode(noised)?;
        let set = self.predict_ingredients(&z)?.top_set;
        let steps = self.decode_instructions(&z, &set, self.config().max_instruction_tokens)?;
        Ok((set, steps.sentences))
    }

    fn vocab(&self) -> &IngredientVocab {
        self.ingredients()
    }

    fn digest(&self) -> String {
        RecipeModel::digest(self)
    }
}

/// Noises each test recipe at `mask_ratio` and scores the reconstructed
/// ingredient set against the truth and the generated steps against the
/// predicted set.
pub fn run_reconstruction<M: Reconstructor>(model: &M, test: &[Recipe], mask_ratio: f64, seed: u64) -> Result<MetricsReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = Acc::default();
    for recipe in test {
        let noised = apply_denoising_noise(recipe, mask_ratio, &mut rng)?;
        let (set, steps) = model.reconstruct(&noised)?;
        acc.push(&EditOutcome {
            success: false,
            iou: iou(&set, &recipe.ingredient_ids),
            f1: set_f1(&set, &recipe.ingredient_ids),
            coherence: coherence_prf(&set, &steps, model.vocab()),
            iterations: 0,
        });
    }
    Ok(MetricsReport {
        rows: vec![MetricsRow {
            experiment: "reconstruction".into(),
            criterion: "recipecrit".into(),
            direction: None,
            target_id: None,
            n: acc.n,
            success_rate: None,
            iou: acc.mean(acc.iou),
            f1: acc.mean(acc.f1),
            coh_p: acc.mean(acc.p),
            coh_r: acc.mean(acc.r),
            coh_f1: acc.mean(acc.c),
            mean_iters: None,
            seed,
            model_digest: model.digest(),
        }],
    })
}

/// The `k` most frequent training ingredients, with `k` the rounded mean
/// training set size.
pub fn majority_set(train: &[Recipe], vocab_size: usize) -> BTreeSet<usize> {
    if train.is_empty() {
        return BTreeSet::new();
    }
    let freq = crate::corpus::document_frequency(train, vocab_size);
    let total: usize = train.iter().map(|r| r.ingredient_ids.len()).sum();
    let k = (total as f64 / train.len() as f64).round() as usize;
    let probs: Vec<f64> = freq.iter().map(|&f| f as f64).collect();
    crate::model::top_k(&probs, k)
}

/// Ingredient scores of always predicting [`majority_set`].
pub fn majority_baseline(train: &[Recipe], test: &[Recipe], vocab_size: usize) -> MetricsRow {
    let set = majority_set(train, vocab_size);
    let n = test.len().max(1) as f64;
    let iou_sum: f64 = test.iter().map(|r| iou(&set, &r.ingredient_ids)).sum();
    let f1_sum: f64 = test.iter().map(|r| set_f1(&set, &r.ingredient_ids)).sum();
    MetricsRow {
        experiment: "reconstruction".into(),
        criterion: "majority_set".into(),
        direction: None,
        target_id: None,
        n: test.len(),
        success_rate: None,
        iou: 100.0 * iou_sum / n,
        f1: 100.0 * f1_sum / n,
        coh_p: 0.0,
        coh_r: 0.0,
        coh_f1: 0.0,
        mean_iters: None,
        seed: 0,
        model_digest: String::new(),
    }
}

#[cfg(test)]
mod tests;
