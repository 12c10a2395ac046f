use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::recipe::Recipe;
use super::tokenizer::tokenize;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ingredient {
    pub id: usize,
    pub canonical_name: String,
    /// Surface forms matched in text; always contains `canonical_name`.
    pub aliases: Vec<String>,
}

/// Ingredient vocabulary `I`. Slot `len()` is reserved for the EOS token of
/// the set predictor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IngredientVocab {
    ingredients: Vec<Ingredient>,
    #[serde(skip)]
    matcher: AliasMatcher,
}

impl PartialEq for IngredientVocab {
    fn eq(&self, other: &Self) -> bool {
        self.ingredients == other.ingredients
    }
}

impl IngredientVocab {
    /// Builds from `(canonical_name, aliases)` pairs in id order.
    pub fn new<I, S>(entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<S>)>,
        S: Into<String>,
    {
        let mut ingredients = Vec::new();
        let mut seen = HashMap::new();
        for (id, (name, aliases)) in entries.into_iter().enumerate() {
            let name = name.into().trim().to_lowercase();
            if name.is_empty() {
                return Err(Error::config(format!("ingredient {id} has an empty name")));
            }
            if seen.insert(name.clone(), id).is_some() {
                return Err(Error::config(format!("duplicate ingredient name {name:?}")));
            }
            let mut all = vec![name.clone()];
            for a in aliases {
                let a = a.into().trim().to_lowercase();
                if !a.is_empty() && !all.contains(&a) {
                    all.push(a);
                }
            }
            ingredients.push(Ingredient {
                id,
                canonical_name: name,
                aliases: all,
            });
        }
        let matcher = AliasMatcher::new(&ingredients)?;
        Ok(IngredientVocab {
            ingredients,
            matcher,
        })
    }

    /// Rebuilds the alias matcher after deserialisation.
    pub fn reindex(&mut self) -> Result<()> {
        self.matcher = AliasMatcher::new(&self.ingredients)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ingredients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ingredients.is_empty()
    }

    pub fn eos_index(&self) -> usize {
        self.ingredients.len()
    }

    pub fn ingredients(&self) -> &[Ingredient] {
        &self.ingredients
    }

    pub fn get(&self, id: usize) -> Option<&Ingredient> {
        self.ingredients.get(id)
    }

    pub fn name(&self, id: usize) -> &str {
        &self.ingredients[id].canonical_name
    }

    pub fn id_of(&self, canonical_name: &str) -> Option<usize> {
        let key = canonical_name.trim().to_lowercase();
        self.ingredients
            .iter()
            .find(|i| i.canonical_name == key)
            .map(|i| i.id)
    }

    /// Resolves a name or any alias to an id.
    pub fn resolve_name(&self, text: &str) -> Option<usize> {
        if let Some(id) = self.id_of(text) {
            return Some(id);
        }
        let toks = tokenize(text);
        match self.matcher.scan(&toks).as_slice() {
            [(id, start, len)] if *start == 0 && *len == toks.len() => Some(*id),
            _ => None,
        }
    }

    /// Ids mentioned in `text`, scanning left to right with longest-alias
    /// whole-token matches.
    pub fn mentions_in(&self, text: &str) -> BTreeSet<usize> {
        self.matcher
            .scan(&tokenize(text))
            .into_iter()
            .map(|(id, _, _)| id)
            .collect()
    }

    /// Ids mentioned anywhere in a list of sentences.
    pub fn ingredient_mentions<S: AsRef<str>>(&self, sentences: &[S]) -> BTreeSet<usize> {
        sentences
            .iter()
            .flat_map(|s| self.mentions_in(s.as_ref()))
            .collect()
    }

    /// Resolves raw ingredient lines into the recipe's id set.
    pub fn resolve_lines<S: AsRef<str>>(&self, lines: &[S]) -> BTreeSet<usize> {
        self.ingredient_mentions(lines)
    }

    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for ing in &self.ingredients {
            h.update((ing.id as u64).to_le_bytes());
            for a in &ing.aliases {
                h.update((a.len() as u64).to_le_bytes());
                h.update(a.as_bytes());
            }
            h.update([0xff]);
        }
        h.finalize().into()
    }

    /// `canonical_name<TAB>alias1|alias2|...`, one ingredient per line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for ing in &self.ingredients {
            let aliases: Vec<&str> = ing.aliases[1..].iter().map(String::as_str).collect();
            out.push_str(&ing.canonical_name);
            out.push('\t');
            out.push_str(&aliases.join("|"));
            out.push('\n');
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (name, aliases) = match line.split_once('\t') {
                Some((name, rest)) => (
                    name,
                    rest.split('|')
                        .map(str::trim)
                        .filter(|a| !a.is_empty())
                        .collect::<Vec<_>>(),
                ),
                None => (line, Vec::new()),
            };
            if name.trim().is_empty() {
                return Err(Error::config(format!("vocabulary line {} has no name", n + 1)));
            }
            entries.push((name, aliases));
        }
        IngredientVocab::new(entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

/// Result of restricting a catalog to its most frequent ingredients.
#[derive(Debug, Clone)]
pub struct VocabBuild {
    pub vocab: IngredientVocab,
    /// Fraction of ingredient occurrences in the input covered by the vocabulary.
    pub coverage: f64,
}

/// Keeps the `max_size` most document-frequent catalog ingredients of
/// `recipes` (whose ids refer to `catalog`). Ids of the result follow the
/// frequency rank, ties broken lexicographically.
pub fn build_ingredient_vocab(
    recipes: &[Recipe],
    catalog: &IngredientVocab,
    max_size: usize,
) -> Result<VocabBuild> {
    if max_size == 0 {
        return Err(Error::arg("max_size must be at least 1"));
    }
    let mut freq = vec![0usize; catalog.len()];
    for r in recipes {
        for &id in &r.ingredient_ids {
            freq[id] += 1;
        }
    }
    let mut ranked: Vec<usize> = (0..catalog.len()).filter(|&i| freq[i] > 0).collect();
    ranked.sort_by(|&a, &b| {
        freq[b]
            .cmp(&freq[a])
            .then_with(|| catalog.name(a).cmp(catalog.name(b)))
    });
    ranked.truncate(max_size);
    let total: usize = freq.iter().sum();
    let covered: usize = ranked.iter().map(|&i| freq[i]).sum();
    let vocab = IngredientVocab::new(ranked.iter().map(|&i| {
        let ing = &catalog.ingredients[i];
        (ing.canonical_name.clone(), ing.aliases[1..].to_vec())
    }))?;
    Ok(VocabBuild {
        vocab,
        coverage: if total == 0 {
            1.0
        } else {
            covered as f64 / total as f64
        },
    })
}

/// Longest-match whole-token alias scanner.
#[derive(Debug, Clone, Default)]
struct AliasMatcher {
    /// First token -> (alias tokens, ingredient id), longest first.
    by_first: HashMap<String, Vec<(Vec<String>, usize)>>,
}

impl AliasMatcher {
    fn new(ingredients: &[Ingredient]) -> Result<Self> {
        let mut by_first: HashMap<String, Vec<(Vec<String>, usize)>> = HashMap::new();
        let mut owner: HashMap<Vec<String>, usize> = HashMap::new();
        for ing in ingredients {
            for alias in &ing.aliases {
                let toks = tokenize(alias);
                if toks.is_empty() {
                    continue;
                }
                match owner.get(&toks) {
                    Some(&o) if o != ing.id => {
                        return Err(Error::config(format!(
                            "alias {alias:?} is shared by {:?} and {:?}",
                            ingredients[o].canonical_name, ing.canonical_name
                        )))
                    }
                    Some(_) => continue,
                    None => {
                        owner.insert(toks.clone(), ing.id);
                    }
                }
                by_first
                    .entry(toks[0].clone())
                    .or_default()
                    .push((toks, ing.id));
            }
        }
        for list in by_first.values_mut() {
            list.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(&b.0)));
        }
        Ok(AliasMatcher { by_first })
    }

    /// Non-overlapping `(id, start, len)` matches.
    fn scan(&self, toks: &[String]) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < toks.len() {
            let hit = self.by_first.get(&toks[i]).and_then(|cands| {
                cands
                    .iter()
                    .find(|(alias, _)| toks[i..].starts_with(alias))
                    .map(|(alias, id)| (*id, alias.len()))
            });
            match hit {
                Some((id, len)) => {
                    out.push((id, i, len));
                    i += len;
                }
                None => i += 1,
            }
        }
        out
    }
}
