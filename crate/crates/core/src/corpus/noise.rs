use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::Rng;

use super::recipe::{NoisedRecipe, Recipe};
use super::vocab::IngredientVocab;
use crate::{Error, Result};

fn mask_count(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64).round() as usize).min(n)
}

/// Masks `round(ratio·n)` ingredient lines and `round(ratio·m)` instruction
/// steps, chosen uniformly and independently. When both lists would end up
/// fully masked, one instruction is left visible.
pub fn apply_denoising_noise<R: Rng + ?Sized>(
    recipe: &Recipe,
    mask_ratio: f64,
    rng: &mut R,
) -> Result<NoisedRecipe> {
    if !(0.0..=1.0).contains(&mask_ratio) {
        return Err(Error::arg(format!("mask ratio {mask_ratio} outside [0, 1]")));
    }
    let n_ing = recipe.ingredient_lines.len();
    let n_ins = recipe.instructions.len();
    let k_ing = mask_count(mask_ratio, n_ing);
    let k_ins = mask_count(mask_ratio, n_ins);
    let ing: BTreeSet<usize> = sample(rng, n_ing, k_ing).into_iter().collect();
    let mut ins: BTreeSet<usize> = sample(rng, n_ins, k_ins).into_iter().collect();
    if k_ing == n_ing && k_ins == n_ins && n_ins > 0 {
        let keep = rng.gen_range(0..n_ins);
        ins.remove(&keep);
    }
    Ok(NoisedRecipe {
        base: recipe.clone(),
        masked_ingredients: ing,
        masked_instructions: ins,
    })
}

/// Encoder input for removing `target`: hides the lines that resolve to it
/// and every step that mentions it.
pub fn mask_for_removal_critique(
    recipe: &Recipe,
    target: usize,
    vocab: &IngredientVocab,
) -> Result<NoisedRecipe> {
    if !recipe.ingredient_ids.contains(&target) {
        return Err(Error::arg(format!(
            "ingredient {:?} is not in recipe {}",
            vocab.get(target).map(|i| i.canonical_name.as_str()).unwrap_or("?"),
            recipe.id
        )));
    }
    let ing = recipe
        .line_ids(vocab)
        .iter()
        .enumerate()
        .filter(|(_, ids)| ids.contains(&target))
        .map(|(i, _)| i)
        .collect();
    let ins = recipe
        .instructions
        .iter()
        .enumerate()
        .filter(|(_, s)| vocab.mentions_in(s).contains(&target))
        .map(|(i, _)| i)
        .collect();
    Ok(NoisedRecipe {
        base: recipe.clone(),
        masked_ingredients: ing,
        masked_instructions: ins,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn confit_vocab() -> IngredientVocab {
        IngredientVocab::new(vec![
            ("clove", vec!["cloves", "garlic"]),
            ("oil", vec!["olive oil"]),
            ("pepper", vec!["black pepper", "crushed red pepper"]),
            ("rosemary", vec![]),
            ("salt", vec![]),
            ("tomato", vec!["tomatoes", "cherry tomatoes"]),
            ("kale", vec![]),
            ("scallion", vec!["scallions", "green onion", "green onions"]),
        ])
        .unwrap()
    }

    pub(crate) fn confit(vocab: &IngredientVocab) -> Recipe {
        let lines = vec![
            "2 pints cherry tomatoes".to_string(),
            "4 cloves".to_string(),
            "1/4 cup olive oil".to_string(),
            "2 sprigs rosemary".to_string(),
            "1 pinch crushed red pepper".to_string(),
            "salt".to_string(),
        ];
        Recipe {
            id: "cherry-tomato-confit".into(),
            title: "Cherry tomato confit".into(),
            ingredient_ids: vocab.resolve_lines(&lines),
            ingredient_lines: lines,
            instructions: vec![
                "preheat oven to 325 degrees".into(),
                "spread tomatoes and garlic on a sheet.".into(),
                "drizzle with oil, and sprinkle with rosemary, crushed red pepper, a large pinch of salt and several grinds of pepper.".into(),
                "bake until tomatoes are wrinkled and fragrant, about 45 minutes, shaking pan.".into(),
                "transfer tomato pan to a rack to cool.".into(),
                "discard garlic.".into(),
            ],
        }
    }

    fn toy(n_ing: usize, n_ins: usize) -> Recipe {
        Recipe {
            id: "toy".into(),
            title: "toy".into(),
            ingredient_lines: (0..n_ing).map(|i| format!("line {i}")).collect(),
            ingredient_ids: BTreeSet::from([0]),
            instructions: (0..n_ins).map(|i| format!("step {i}")).collect(),
        }
    }

    #[test]
    fn half_ratio_masks_half_of_each_list() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = apply_denoising_noise(&toy(8, 6), 0.5, &mut rng).unwrap();
        assert_eq!(n.masked_ingredients.len(), 4);
        assert_eq!(n.masked_instructions.len(), 3);
    }

    #[test]
    fn zero_ratio_masks_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = apply_denoising_noise(&toy(5, 5), 0.0, &mut rng).unwrap();
        assert!(n.masked_ingredients.is_empty() && n.masked_instructions.is_empty());
    }

    #[test]
    fn full_ratio_keeps_one_step_visible() {
        // Enumerating the rule: k_ing = 2, k_ins = 2, both lists full, so one
        // instruction is restored -> 2 + 1 masked.
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = apply_denoising_noise(&toy(2, 2), 1.0, &mut rng).unwrap();
            assert_eq!(n.masked_ingredients.len(), 2);
            assert_eq!(n.masked_instructions.len(), 1);
        }
    }

    #[test]
    fn ratio_out_of_range_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(apply_denoising_noise(&toy(2, 2), 1.5, &mut rng).is_err());
        assert!(apply_denoising_noise(&toy(2, 2), -0.1, &mut rng).is_err());
    }

    #[test]
    fn masks_differ_across_draws() {
        // Fresh noise per epoch: 8 choose 4 = 70 patterns per list.
        let r = toy(8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let first = apply_denoising_noise(&r, 0.5, &mut rng).unwrap();
        let repeats = (0..100)
            .filter(|_| apply_denoising_noise(&r, 0.5, &mut rng).unwrap() == first)
            .count();
        assert!(repeats <= 2);
    }

    #[test]
    fn removal_masks_target_line_and_referencing_steps() {
        let v = confit_vocab();
        let r = confit(&v);
        let tomato = v.id_of("tomato").unwrap();
        let n = mask_for_removal_critique(&r, tomato, &v).unwrap();
        assert_eq!(n.masked_ingredients, BTreeSet::from([0]));
        // steps 2, 4 and 5 (1-based) mention tomato
        assert_eq!(n.masked_instructions, BTreeSet::from([1, 3, 4]));

        let rosemary = v.id_of("rosemary").unwrap();
        let n = mask_for_removal_critique(&r, rosemary, &v).unwrap();
        assert_eq!(n.masked_ingredients, BTreeSet::from([3]));
        assert_eq!(n.masked_instructions, BTreeSet::from([2]));
    }

    #[test]
    fn removal_with_no_matching_steps_masks_only_the_line() {
        let v = confit_vocab();
        let mut r = confit(&v);
        r.instructions = vec!["preheat oven".into(), "wait".into()];
        let salt = v.id_of("salt").unwrap();
        let n = mask_for_removal_critique(&r, salt, &v).unwrap();
        assert_eq!(n.masked_ingredients, BTreeSet::from([5]));
        assert!(n.masked_instructions.is_empty());
    }

    #[test]
    fn removal_matches_aliases() {
        let v = confit_vocab();
        let mut r = confit(&v);
        r.ingredient_lines.push("3 scallions".into());
        r.resolve(&v);
        r.instructions.push("garnish with sliced green onion".into());
        let scallion = v.id_of("scallion").unwrap();
        let n = mask_for_removal_critique(&r, scallion, &v).unwrap();
        // alias-match oracle: which steps contain the text "green onion" or "scallion"
        let expected: BTreeSet<usize> = r
            .instructions
            .iter()
            .enumerate()
            .filter(|(_, s)| s.contains("green onion") || s.contains("scallion"))
            .map(|(i, _)| i)
            .collect();
        assert_eq!(n.masked_instructions, expected);
        assert_eq!(n.masked_ingredients, BTreeSet::from([6]));
    }

    #[test]
    fn removal_of_absent_target_is_argument_error() {
        let v = confit_vocab();
        let r = confit(&v);
        let kale = v.id_of("kale").unwrap();
        assert!(matches!(
            mask_for_removal_critique(&r, kale, &v),
            Err(Error::Argument(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn masks_exact_counts(n_ing in 1usize..=20, n_ins in 1usize..=20, ratio in 0.0f64..=1.0, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = apply_denoising_noise(&toy(n_ing, n_ins), ratio, &mut rng).unwrap();
            let k_ing = (ratio * n_ing as f64).round() as usize;
            let k_ins = (ratio * n_ins as f64).round() as usize;
            prop_assert_eq!(n.masked_ingredients.len(), k_ing);
            if k_ing == n_ing && k_ins == n_ins {
                prop_assert_eq!(n.masked_instructions.len(), k_ins - 1);
            } else {
                prop_assert_eq!(n.masked_instructions.len(), k_ins);
            }
            prop_assert!(n.masked_ingredients.iter().all(|&i| i < n_ing));
            prop_assert!(n.masked_instructions.iter().all(|&i| i < n_ins));
            prop_assert!(!n.fully_masked_lists());
        }
    }
}
