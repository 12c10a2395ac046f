//! Grammar-driven synthetic recipe corpus.
//!
//! Every generated recipe is coherent by construction: each chosen
//! ingredient has one ingredient line and exactly one instruction step that
//! mentions it, and no other step mentions any ingredient.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::recipe::{Recipe, MAX_RECIPE_ITEMS};
use super::vocab::IngredientVocab;
use crate::{Error, Result};

pub const DEFAULT_GRAMMAR: &str = include_str!("../../grammar/default.toml");

const ING: &str = "{ING}";
const MAIN: &str = "{MAIN}";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrammarConfig {
    #[serde(default = "default_zipf")]
    pub zipf_exponent: f64,
    #[serde(rename = "ingredient")]
    pub ingredients: Vec<IngredientRule>,
    #[serde(rename = "dish")]
    pub dishes: Vec<DishRule>,
}

fn default_zipf() -> f64 {
    1.0
}

fn default_weight() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngredientRule {
    pub name: String,
    #[serde(default)]
    pub aliases: Vec<String>,
    pub groups: Vec<String>,
    #[serde(default)]
    pub stage: u32,
    #[serde(default)]
    pub weight: Option<f64>,
    pub lines: Vec<String>,
    pub steps: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DishRule {
    pub name: String,
    #[serde(default = "default_weight")]
    pub weight: f64,
    pub titles: Vec<String>,
    pub main: Vec<String>,
    pub opening: Vec<String>,
    pub closing: Vec<String>,
    pub draws: Vec<GroupDraw>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupDraw {
    pub group: String,
    pub min: usize,
    pub max: usize,
}

impl GrammarConfig {
    pub fn default_grammar() -> Self {
        Self::from_toml(DEFAULT_GRAMMAR).expect("bundled grammar parses")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("grammar: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Ingredient vocabulary in grammar order.
    pub fn catalog(&self) -> Result<IngredientVocab> {
        IngredientVocab::new(
            self.ingredients
                .iter()
                .map(|i| (i.name.clone(), i.aliases.clone())),
        )
    }
}

/// A validated grammar ready to sample from.
#[derive(Debug, Clone)]
pub struct SyntheticGrammar {
    config: GrammarConfig,
    vocab: IngredientVocab,
    /// group -> (ingredient ids, weights)
    groups: HashMap<String, (Vec<usize>, Vec<f64>)>,
    dish_mains: Vec<(Vec<usize>, Vec<f64>)>,
}

impl SyntheticGrammar {
    pub fn new(config: GrammarConfig) -> Result<Self> {
        let vocab = config.catalog()?;
        if config.dishes.len() < 2 {
            return Err(Error::config("grammar needs at least two dish templates"));
        }
        if !(config.zipf_exponent >= 0.0 && config.zipf_exponent.is_finite()) {
            return Err(Error::config("zipf_exponent must be finite and non-negative"));
        }
        let zipf = |rank: usize| 1.0 / ((rank + 1) as f64).powf(config.zipf_exponent);

        let mut groups: HashMap<String, (Vec<usize>, Vec<f64>)> = HashMap::new();
        for (id, rule) in config.ingredients.iter().enumerate() {
            if rule.groups.is_empty() {
                return Err(Error::config(format!("ingredient {:?} has no group", rule.name)));
            }
            if rule.lines.is_empty() || rule.steps.is_empty() {
                return Err(Error::config(format!(
                    "ingredient {:?} needs at least one line and one step template",
                    rule.name
                )));
            }
            if let Some(w) = rule.weight {
                if !(w > 0.0 && w.is_finite()) {
                    return Err(Error::config(format!("ingredient {:?} has a bad weight", rule.name)));
                }
            }
            let forms = &vocab.ingredients()[id].aliases;
            for t in rule.lines.iter().chain(&rule.steps) {
                for form in forms {
                    let text = t.replace(ING, form);
                    let found = vocab.mentions_in(&text);
                    if found != BTreeSet::from([id]) {
                        let names: Vec<&str> = found.iter().map(|&i| vocab.name(i)).collect();
                        return Err(Error::config(format!(
                            "template {t:?} of {:?} resolves to {names:?} with form {form:?}",
                            rule.name
                        )));
                    }
                }
            }
            for g in &rule.groups {
                let entry = groups.entry(g.clone()).or_default();
                let w = rule.weight.unwrap_or_else(|| zipf(entry.0.len()));
                entry.0.push(id);
                entry.1.push(w);
            }
        }

        let mut dish_mains = Vec::new();
        for dish in &config.dishes {
            if dish.titles.is_empty() || dish.opening.is_empty() || dish.closing.is_empty() {
                return Err(Error::config(format!(
                    "dish {:?} needs titles, opening and closing steps",
                    dish.name
                )));
            }
            if !(dish.weight > 0.0 && dish.weight.is_finite()) {
                return Err(Error::config(format!("dish {:?} has a bad weight", dish.name)));
            }
            for t in &dish.titles {
                if !t.contains(MAIN) {
                    return Err(Error::config(format!("title {t:?} lacks {MAIN}")));
                }
            }
            for s in dish.opening.iter().chain(&dish.closing) {
                if !vocab.mentions_in(s).is_empty() {
                    return Err(Error::config(format!(
                        "step {s:?} of dish {:?} mentions an ingredient",
                        dish.name
                    )));
                }
            }
            if dish.main.is_empty() {
                return Err(Error::config(format!("dish {:?} has no main ingredient", dish.name)));
            }
            let mut mains = Vec::new();
            for m in &dish.main {
                let id = vocab.id_of(m).ok_or_else(|| {
                    Error::config(format!("dish {:?} references unknown ingredient {m:?}", dish.name))
                })?;
                mains.push(id);
            }
            let weights = (0..mains.len()).map(zipf).collect();
            let mut max_items = 1;
            for d in &dish.draws {
                if !groups.contains_key(&d.group) {
                    return Err(Error::config(format!(
                        "dish {:?} draws from unknown group {:?}",
                        dish.name, d.group
                    )));
                }
                if d.min > d.max {
                    return Err(Error::config(format!("dish {:?}: min > max", dish.name)));
                }
                max_items += d.max;
            }
            if max_items > MAX_RECIPE_ITEMS || max_items + 2 > MAX_RECIPE_ITEMS {
                return Err(Error::config(format!(
                    "dish {:?} can exceed {MAX_RECIPE_ITEMS} ingredients or steps",
                    dish.name
                )));
            }
            dish_mains.push((mains, weights));
        }
        Ok(SyntheticGrammar {
            config,
            vocab,
            groups,
            dish_mains,
        })
    }

    pub fn vocab(&self) -> &IngredientVocab {
        &self.vocab
    }

    pub fn config(&self) -> &GrammarConfig {
        &self.config
    }

    pub fn generate(&self, n: usize, seed: u64) -> Vec<Recipe> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dish_pick = WeightedIndex::new(self.config.dishes.iter().map(|d| d.weight))
            .expect("dish weights validated");
        (0..n)
            .map(|i| {
                let d = dish_pick.sample(&mut rng);
                self.sample_recipe(d, format!("syn-{seed}-{i:05}"), &mut rng)
            })
            .collect()
    }

    fn sample_recipe<R: Rng>(&self, dish_idx: usize, id: String, rng: &mut R) -> Recipe {
        let dish = &self.config.dishes[dish_idx];
        let (mains, mw) = &self.dish_mains[dish_idx];
        let main = mains[WeightedIndex::new(mw).expect("zipf weights").sample(rng)];
        let mut chosen = vec![main];
        for draw in &dish.draws {
            let count = rng.gen_range(draw.min..=draw.max);
            let (ids, ws) = &self.groups[&draw.group];
            let mut cand: Vec<(usize, f64)> = ids
                .iter()
                .zip(ws)
                .filter(|(id, _)| !chosen.contains(id))
                .map(|(&i, &w)| (i, w))
                .collect();
            for _ in 0..count {
                if cand.is_empty() {
                    break;
                }
                let k = WeightedIndex::new(cand.iter().map(|c| c.1))
                    .expect("positive weights")
                    .sample(rng);
                chosen.push(cand.swap_remove(k).0);
            }
        }
        let form = |id: usize, rng: &mut R| -> String {
            self.vocab.ingredients()[id]
                .aliases
                .choose(rng)
                .expect("aliases include the name")
                .clone()
        };
        let title = dish
            .titles
            .choose(rng)
            .expect("validated")
            .replace(MAIN, &form(main, rng));
        let lines: Vec<String> = chosen
            .iter()
            .map(|&i| {
                let t = self.config.ingredients[i].lines.choose(rng).expect("validated");
                t.replace(ING, &form(i, rng))
            })
            .collect();
        let mut order = chosen.clone();
        order.sort_by_key(|&i| (self.config.ingredients[i].stage, i));
        let mut steps = vec![dish.opening.choose(rng).expect("validated").clone()];
        for &i in &order {
            let t = self.config.ingredients[i].steps.choose(rng).expect("validated");
            steps.push(t.replace(ING, &form(i, rng)));
        }
        steps.push(dish.closing.choose(rng).expect("validated").clone());
        Recipe {
            id,
            title,
            ingredient_lines: lines,
            ingredient_ids: chosen.into_iter().collect(),
            instructions: steps,
        }
    }
}

/// Generates `n` recipes from `config`; ids refer to the grammar's catalog.
pub fn generate_synthetic_corpus(config: &GrammarConfig, n: usize, seed: u64) -> Result<Vec<Recipe>> {
    Ok(SyntheticGrammar::new(config.clone())?.generate(n, seed))
}
