use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::vocab::IngredientVocab;
use crate::{Error, Result};

/// Upper bound on ingredient lines and on instruction steps per recipe.
pub const MAX_RECIPE_ITEMS: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Recipe {
    pub id: String,
    pub title: String,
    pub ingredient_lines: Vec<String>,
    pub ingredient_ids: BTreeSet<usize>,
    pub instructions: Vec<String>,
}

/// On-disk JSONL record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecipeRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub title: String,
    pub ingredients: Vec<String>,
    pub instructions: Vec<String>,
}

/// Why a record was rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rejection {
    TooManyIngredients,
    TooManyInstructions,
    NoIngredientLines,
    NoInstructions,
    NoResolvedIngredients,
}

impl RecipeRecord {
    pub fn validate(&self) -> std::result::Result<(), Rejection> {
        if self.ingredients.len() > MAX_RECIPE_ITEMS {
            return Err(Rejection::TooManyIngredients);
        }
        if self.instructions.len() > MAX_RECIPE_ITEMS {
            return Err(Rejection::TooManyInstructions);
        }
        if self.ingredients.is_empty() {
            return Err(Rejection::NoIngredientLines);
        }
        if self.instructions.is_empty() {
            return Err(Rejection::NoInstructions);
        }
        Ok(())
    }

    /// Validates bounds and resolves ingredient ids.
    pub fn into_recipe(
        self,
        fallback_id: impl FnOnce() -> String,
        vocab: &IngredientVocab,
    ) -> std::result::Result<Recipe, Rejection> {
        self.validate()?;
        let ids = vocab.resolve_lines(&self.ingredients);
        if ids.is_empty() {
            return Err(Rejection::NoResolvedIngredients);
        }
        Ok(Recipe {
            id: self.id.unwrap_or_else(fallback_id),
            title: self.title,
            ingredient_lines: self.ingredients,
            ingredient_ids: ids,
            instructions: self.instructions,
        })
    }
}

impl From<&Recipe> for RecipeRecord {
    fn from(r: &Recipe) -> Self {
        RecipeRecord {
            id: Some(r.id.clone()),
            title: r.title.clone(),
            ingredients: r.ingredient_lines.clone(),
            instructions: r.instructions.clone(),
        }
    }
}

impl Recipe {
    /// Re-resolves `ingredient_ids` against another vocabulary.
    pub fn resolve(&mut self, vocab: &IngredientVocab) {
        self.ingredient_ids = vocab.resolve_lines(&self.ingredient_lines);
    }

    /// Ingredient ids resolved from each ingredient line.
    pub fn line_ids(&self, vocab: &IngredientVocab) -> Vec<BTreeSet<usize>> {
        self.ingredient_lines
            .iter()
            .map(|l| vocab.mentions_in(l))
            .collect()
    }

    /// Boolean target over the vocabulary.
    pub fn ingredient_target(&self, vocab_size: usize) -> Vec<bool> {
        let mut y = vec![false; vocab_size];
        for &i in &self.ingredient_ids {
            if i < vocab_size {
                y[i] = true;
            }
        }
        y
    }
}

/// Counters reported by [`load_jsonl`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LoadStats {
    pub lines: usize,
    pub kept: usize,
    pub dropped_bounds: usize,
    pub dropped_empty: usize,
    pub dropped_unresolved: usize,
    pub malformed: usize,
}

impl LoadStats {
    pub fn dropped(&self) -> usize {
        self.dropped_bounds + self.dropped_empty + self.dropped_unresolved
    }
}

/// Reads line-delimited recipe records, filtering by the size bounds and
/// resolving ingredients against `vocab`.
pub fn load_jsonl(path: &Path, vocab: &IngredientVocab) -> Result<(Vec<Recipe>, LoadStats)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_jsonl(BufReader::new(file), vocab).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn read_jsonl<R: BufRead>(reader: R, vocab: &IngredientVocab) -> Result<(Vec<Recipe>, LoadStats)> {
    let mut stats = LoadStats::default();
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<reader>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        stats.lines += 1;
        let record: RecipeRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("line {}: skipping malformed record: {e}", n + 1);
                stats.malformed += 1;
                continue;
            }
        };
        match record.into_recipe(|| format!("line-{}", n + 1), vocab) {
            Ok(r) => out.push(r),
            Err(Rejection::TooManyIngredients | Rejection::TooManyInstructions) => {
                stats.dropped_bounds += 1
            }
            Err(Rejection::NoIngredientLines | Rejection::NoInstructions) => {
                stats.dropped_empty += 1
            }
            Err(Rejection::NoResolvedIngredients) => stats.dropped_unresolved += 1,
        }
    }
    stats.kept = out.len();
    Ok((out, stats))
}

pub fn write_jsonl(path: &Path, recipes: &[Recipe]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in recipes {
        let line = serde_json::to_string(&RecipeRecord::from(r))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// A recipe with some ingredient lines and instruction steps hidden from the
/// encoder. The title is never masked.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoisedRecipe {
    pub base: Recipe,
    pub masked_ingredients: BTreeSet<usize>,
    pub masked_instructions: BTreeSet<usize>,
}

impl NoisedRecipe {
    pub fn clean(base: Recipe) -> Self {
        NoisedRecipe {
            base,
            masked_ingredients: BTreeSet::new(),
            masked_instructions: BTreeSet::new(),
        }
    }

    pub fn new(
        base: Recipe,
        masked_ingredients: BTreeSet<usize>,
        masked_instructions: BTreeSet<usize>,
    ) -> Result<Self> {
        if masked_ingredients
            .iter()
            .any(|&i| i >= base.ingredient_lines.len())
            || masked_instructions
                .iter()
                .any(|&i| i >= base.instructions.len())
        {
            return Err(Error::arg("masked position outside the recipe"));
        }
        Ok(NoisedRecipe {
            base,
            masked_ingredients,
            masked_instructions,
        })
    }

    /// Whether every ingredient line and instruction is hidden.
    pub fn fully_masked_lists(&self) -> bool {
        self.masked_ingredients.len() == self.base.ingredient_lines.len()
            && self.masked_instructions.len() == self.base.instructions.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn vocab() -> IngredientVocab {
        IngredientVocab::new(vec![
            ("salt", vec![]),
            ("tomato", vec!["tomatoes"]),
            ("oil", vec!["olive oil"]),
        ])
        .unwrap()
    }

    fn record(n_ing: usize, n_ins: usize) -> String {
        let ings: Vec<String> = (0..n_ing).map(|i| format!("{i} pinch salt")).collect();
        let ins: Vec<String> = (0..n_ins).map(|i| format!("step {i}")).collect();
        serde_json::json!({"title": "t", "ingredients": ings, "instructions": ins}).to_string()
    }

    #[test]
    fn bounds_filter_and_resolution() {
        let text = [
            record(21, 3),
            record(3, 21),
            record(1, 1),
            record(20, 20),
            r#"{"title": "x", "ingredients": ["2 cups flour"], "instructions": ["mix"]}"#.into(),
            "not json".into(),
            r#"{"id": "keep", "title": "y", "ingredients": ["1 tbsp olive oil", "4 tomatoes"], "instructions": ["go"]}"#.into(),
        ]
        .join("\n");
        let (recipes, stats) = read_jsonl(Cursor::new(text), &vocab()).unwrap();
        assert_eq!(recipes.len(), 3);
        assert_eq!(stats.dropped_bounds, 2);
        assert_eq!(stats.dropped_unresolved, 1);
        assert_eq!(stats.malformed, 1);
        assert_eq!(recipes[0].id, "line-3");
        assert_eq!(recipes[0].ingredient_ids.len(), 1);
        assert_eq!(recipes[2].id, "keep");
        assert_eq!(recipes[2].ingredient_ids, BTreeSet::from([1, 2]));
        assert!(recipes
            .iter()
            .all(|r| r.ingredient_lines.len() <= 20 && r.instructions.len() <= 20));
    }

    #[test]
    fn empty_input_is_empty_output() {
        let (recipes, stats) = read_jsonl(Cursor::new(""), &vocab()).unwrap();
        assert!(recipes.is_empty());
        assert_eq!(stats, LoadStats::default());
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_jsonl(Path::new("/nonexistent/recipes.jsonl"), &vocab()).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn write_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.jsonl");
        let (recipes, _) = read_jsonl(Cursor::new(record(2, 2)), &vocab()).unwrap();
        write_jsonl(&p, &recipes).unwrap();
        let (back, _) = load_jsonl(&p, &vocab()).unwrap();
        assert_eq!(back, recipes);
    }

    #[test]
    fn noised_recipe_rejects_out_of_range_positions() {
        let (recipes, _) = read_jsonl(Cursor::new(record(2, 2)), &vocab()).unwrap();
        let base = recipes[0].clone();
        assert!(NoisedRecipe::new(base.clone(), BTreeSet::from([2]), BTreeSet::new()).is_err());
        let n = NoisedRecipe::new(base, BTreeSet::from([0, 1]), BTreeSet::from([0, 1])).unwrap();
        assert!(n.fully_masked_lists());
    }
}
