use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::recipe::Recipe;
use super::vocab::IngredientVocab;
use crate::{Error, Result};

/// Train/validation/test partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<Recipe>,
    pub val: Vec<Recipe>,
    pub test: Vec<Recipe>,
}

/// Shuffles with `seed` and cuts at `round(f_train·n)` and
/// `round(f_val·n)`; the test split takes the remainder.
pub fn split_corpus(recipes: &[Recipe], fractions: (f64, f64, f64), seed: u64) -> Result<Splits> {
    let (a, b, c) = fractions;
    for f in [a, b, c] {
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::arg(format!("split fraction {f} outside [0, 1]")));
        }
    }
    if ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::arg(format!(
            "split fractions sum to {}, expected 1",
            a + b + c
        )));
    }
    let n = recipes.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((a * n as f64).round() as usize).min(n);
    let n_val = ((b * n as f64).round() as usize).min(n - n_train);
    let pick = |idx: &[usize]| idx.iter().map(|&i| recipes[i].clone()).collect::<Vec<_>>();
    Ok(Splits {
        train: pick(&order[..n_train]),
        val: pick(&order[n_train..n_train + n_val]),
        test: pick(&order[n_train + n_val..]),
    })
}

/// Number of recipes containing each ingredient.
pub fn document_frequency(recipes: &[Recipe], vocab_size: usize) -> Vec<usize> {
    let mut freq = vec![0usize; vocab_size];
    for r in recipes {
        for &i in &r.ingredient_ids {
            if i < vocab_size {
                freq[i] += 1;
            }
        }
    }
    freq
}

/// Picks `k/2` most and `k/2` least document-frequent ingredients among
/// those appearing in at least `min_support` recipes. Ties are broken by
/// canonical name.
pub fn select_critique_targets(
    train: &[Recipe],
    vocab: &IngredientVocab,
    k: usize,
    min_support: usize,
) -> Result<Vec<usize>> {
    if k % 2 != 0 {
        return Err(Error::arg(format!("number of targets {k} must be even")));
    }
    if k > vocab.len() {
        return Err(Error::arg(format!(
            "cannot select {k} targets from {} ingredients",
            vocab.len()
        )));
    }
    let freq = document_frequency(train, vocab.len());
    let mut eligible: Vec<usize> = (0..vocab.len())
        .filter(|&i| freq[i] >= min_support)
        .collect();
    if eligible.len() < k {
        return Err(Error::arg(format!(
            "only {} ingredients appear in at least {min_support} recipes, need {k}",
            eligible.len()
        )));
    }
    eligible.sort_by(|&a, &b| {
        freq[b]
            .cmp(&freq[a])
            .then_with(|| vocab.name(a).cmp(vocab.name(b)))
    });
    let half = k / 2;
    let mut out: Vec<usize> = eligible[..half].to_vec();
    let mut least: Vec<usize> = eligible[half..].to_vec();
    least.sort_by(|&a, &b| {
        freq[a]
            .cmp(&freq[b])
            .then_with(|| vocab.name(a).cmp(vocab.name(b)))
    });
    out.extend(least.into_iter().take(half));
    Ok(out)
}

/// Recipes sampled for one critiqued ingredient.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CritiqueEvalSet {
    pub target: usize,
    /// Recipes containing the target (removal candidates).
    pub positive: Vec<Recipe>,
    /// Recipes without the target (addition candidates).
    pub negative: Vec<Recipe>,
}

pub fn sample_eval_set(
    recipes: &[Recipe],
    target: usize,
    n_each: usize,
    seed: u64,
) -> Result<CritiqueEvalSet> {
    let (pos, neg): (Vec<&Recipe>, Vec<&Recipe>) = recipes
        .iter()
        .partition(|r| r.ingredient_ids.contains(&target));
    if pos.len() < n_each {
        return Err(Error::arg(format!(
            "positive side: only {} recipes contain ingredient {target}, need {n_each}",
            pos.len()
        )));
    }
    if neg.len() < n_each {
        return Err(Error::arg(format!(
            "negative side: only {} recipes lack ingredient {target}, need {n_each}",
            neg.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |side: &[&Recipe]| -> Vec<Recipe> {
        let mut idx = sample(&mut rng, side.len(), n_each).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| side[i].clone()).collect()
    };
    let positive = draw(&pos);
    let negative = draw(&neg);
    Ok(CritiqueEvalSet {
        target,
        positive,
        negative,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{BTreeSet, HashSet};

    fn recipes(n: usize) -> Vec<Recipe> {
        (0..n)
            .map(|i| Recipe {
                id: format!("r{i}"),
                title: String::new(),
                ingredient_lines: vec![],
                ingredient_ids: BTreeSet::from([i % 3]),
                instructions: vec!["x".into()],
            })
            .collect()
    }

    #[test]
    fn exact_proportions_and_determinism() {
        let rs = recipes(100);
        let s = split_corpus(&rs, (0.7, 0.15, 0.15), 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (70, 15, 15));
        assert_eq!(s, split_corpus(&rs, (0.7, 0.15, 0.15), 1).unwrap());
        let ids: HashSet<&str> = s
            .train
            .iter()
            .chain(&s.val)
            .chain(&s.test)
            .map(|r| r.id.as_str())
            .collect();
        assert_eq!(ids.len(), 100);
        assert_ne!(s, split_corpus(&rs, (0.7, 0.15, 0.15), 2).unwrap());
    }

    #[test]
    fn full_corpus_ratios() {
        // 907K recipes at 635/907, 136/907, 136/907; sizes only.
        let n = 907_000usize;
        let f = (635.0 / 907.0, 136.0 / 907.0, 136.0 / 907.0);
        let n_train = (f.0 * n as f64).round() as usize;
        let n_val = (f.1 * n as f64).round() as usize;
        assert_eq!((n_train, n_val, n - n_train - n_val), (635_000, 136_000, 136_000));
    }

    #[test]
    fn invalid_fractions() {
        let rs = recipes(10);
        assert!(split_corpus(&rs, (1.2, -0.1, -0.1), 0).is_err());
        assert!(split_corpus(&rs, (0.5, 0.2, 0.2), 0).is_err());
    }

    fn vocab(n: usize) -> IngredientVocab {
        IngredientVocab::new((0..n).map(|i| (format!("ing{i:02}"), Vec::<String>::new()))).unwrap()
    }

    fn with_ids(sets: &[&[usize]]) -> Vec<Recipe> {
        sets.iter()
            .enumerate()
            .map(|(i, ids)| Recipe {
                id: format!("r{i}"),
                title: String::new(),
                ingredient_lines: vec![],
                ingredient_ids: ids.iter().copied().collect(),
                instructions: vec!["x".into()],
            })
            .collect()
    }

    #[test]
    fn targets_match_brute_force_frequency_sort() {
        let v = vocab(6);
        // frequencies: 0:5, 1:4, 2:4, 3:2, 4:1, 5:3
        let rs = with_ids(&[
            &[0, 1, 2, 5],
            &[0, 1, 2, 3],
            &[0, 1, 2, 5],
            &[0, 1, 2, 3, 4],
            &[0, 5],
        ]);
        let got = select_critique_targets(&rs, &v, 4, 1).unwrap();
        // brute force: count directly
        let mut counts: Vec<(usize, usize)> = (0..6)
            .map(|i| (i, rs.iter().filter(|r| r.ingredient_ids.contains(&i)).count()))
            .collect();
        counts.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let most: Vec<usize> = counts[..2].iter().map(|c| c.0).collect();
        let mut rest = counts[2..].to_vec();
        rest.sort_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(&b.0)));
        let least: Vec<usize> = rest[..2].iter().map(|c| c.0).collect();
        assert_eq!(got, [most, least].concat());
        assert_eq!(got, vec![0, 1, 4, 3]);

        // minimum support removes rare ingredients from the least-popular side
        assert_eq!(select_critique_targets(&rs, &v, 2, 3).unwrap(), vec![0, 5]);
        assert!(select_critique_targets(&rs, &v, 6, 3).is_err());
        assert!(select_critique_targets(&rs, &v, 3, 1).is_err());
        assert!(select_critique_targets(&rs, &v, 8, 1).is_err());
    }

    #[test]
    fn two_ingredient_vocab_selects_both() {
        let v = vocab(2);
        let rs = with_ids(&[&[0], &[0, 1]]);
        assert_eq!(select_critique_targets(&rs, &v, 2, 1).unwrap(), vec![0, 1]);
    }

    #[test]
    fn eval_set_sampling() {
        let rs = recipes(300);
        let set = sample_eval_set(&rs, 0, 50, 9).unwrap();
        assert_eq!(set.positive.len(), 50);
        assert_eq!(set.negative.len(), 50);
        assert!(set.positive.iter().all(|r| r.ingredient_ids.contains(&0)));
        assert!(set.negative.iter().all(|r| !r.ingredient_ids.contains(&0)));
        let distinct: HashSet<&str> = set.positive.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(distinct.len(), 50);
        assert_eq!(set, sample_eval_set(&rs, 0, 50, 9).unwrap());

        let empty = sample_eval_set(&rs, 0, 0, 9).unwrap();
        assert!(empty.positive.is_empty() && empty.negative.is_empty());

        let err = sample_eval_set(&rs, 0, 101, 9).unwrap_err().to_string();
        assert!(err.contains("positive"), "{err}");
        let err = sample_eval_set(&recipes(3), 7, 1, 9).unwrap_err().to_string();
        assert!(err.contains("positive"), "{err}");
    }
}
