use super::*;
use crate::corpus::{GrammarConfig, SyntheticGrammar, TokenVocab};
use crate::model::ModelConfig;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;

fn fixture() -> &'static (RecipeModel, Vec<Recipe>) {
    static F: OnceLock<(RecipeModel, Vec<Recipe>)> = OnceLock::new();
    F.get_or_init(|| {
        let grammar = SyntheticGrammar::new(GrammarConfig::default_grammar()).unwrap();
        let recipes = grammar.generate(20, 3);
        let tv = TokenVocab::build(crate::training::recipe_sentences(&recipes), 1, 1000);
        let cfg = ModelConfig {
            hidden_dim: 8,
            num_layers: 1,
            num_heads: 2,
            ffn_dim: 16,
            latent_dim: 6,
            max_instruction_tokens: 12,
            dropout: 0.0,
            ..ModelConfig::desk(grammar.vocab().len(), tv.len())
        };
        let model = RecipeModel::new(cfg, tv, grammar.vocab().clone(), 2).unwrap();
        (model, recipes)
    })
}

fn random_z(rng: &mut ChaCha8Rng, n: usize) -> LatentVector {
    LatentVector::new((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn l2(a: &LatentVector, b: &LatentVector) -> f64 {
    a.distance(b)
}

#[test]
fn empty_critique_list_gives_the_thresholded_prediction() {
    let (model, _) = fixture();
    let z = random_z(&mut ChaCha8Rng::seed_from_u64(1), 6);
    let p = model.predict_ingredients(&z).unwrap();
    let t = build_target(&p, &[]).unwrap();
    assert_eq!(t.ingredients, p.thresholded());
}

#[test]
fn build_target_overwrites_only_critiqued_coordinates() {
    let (model, _) = fixture();
    let z = random_z(&mut ChaCha8Rng::seed_from_u64(2), 6);
    let p = model.predict_ingredients(&z).unwrap();
    let base = p.thresholded();
    let t = build_target(&p, &[Critique::add(3), Critique::remove(7)]).unwrap();
    for i in 0..base.len() {
        match i {
            3 => assert!(t.ingredients[i]),
            7 => assert!(!t.ingredients[i]),
            _ => assert_eq!(t.ingredients[i], base[i]),
        }
    }
    assert_eq!(t.eos_step, t.positive_set().len().min(p.eos_probabilities.len()));
    // adding an ingredient already above 0.5 changes nothing
    if let Some(on) = base.iter().position(|&b| b) {
        assert_eq!(build_target(&p, &[Critique::add(on)]).unwrap().ingredients, base);
    }
}

#[test]
fn conflicting_or_unknown_critiques_are_rejected() {
    let (model, _) = fixture();
    let z = random_z(&mut ChaCha8Rng::seed_from_u64(3), 6);
    let p = model.predict_ingredients(&z).unwrap();
    assert!(matches!(
        build_target(&p, &[Critique::add(4), Critique::remove(4)]),
        Err(Error::Argument(_))
    ));
    assert!(build_target(&p, &[Critique::add(4), Critique::add(4)]).is_ok());
    assert!(build_target(&p, &[Critique::add(999)]).is_err());
    assert!(critique_latent(model, &z, &[], &CritiqueConfig::default()).is_err());
}

#[test]
fn confit_target_adds_kale_to_the_predicted_set() {
    let vocab = crate::corpus::noise::tests::confit_vocab();
    let names = ["clove", "oil", "pepper", "rosemary", "salt", "tomato"];
    let mut logits = crate::tensor::Matrix::filled(3, vocab.len() + 1, -4.0);
    for name in names {
        logits.set(0, vocab.id_of(name).unwrap(), 4.0);
    }
    let p = IngredientPrediction::from_step_logits(logits);
    let kale = vocab.id_of("kale").unwrap();
    let t = build_target(&p, &[Critique::add(kale)]).unwrap();
    let mut got: Vec<&str> = t.positive_set().iter().map(|&i| vocab.name(i)).collect();
    got.sort();
    assert_eq!(got, ["clove", "kale", "oil", "pepper", "rosemary", "salt", "tomato"]);
}

#[test]
fn config_validation() {
    assert!(CritiqueConfig::default().validate().is_ok());
    let bad = [
        CritiqueConfig { alpha0: 0.0, ..Default::default() },
        CritiqueConfig { decay: 0.0, ..Default::default() },
        CritiqueConfig { decay: 1.5, ..Default::default() },
        CritiqueConfig { patience: 0, ..Default::default() },
        CritiqueConfig { max_iters: 0, ..Default::default() },
        CritiqueConfig { threshold: 1.0, ..Default::default() },
    ];
    for c in bad {
        assert!(c.validate().is_err(), "{c:?}");
    }
    let c: CritiqueConfig = serde_json::from_str(r#"{"criterion":"global_l1_threshold"}"#).unwrap();
    assert_eq!(c.criterion, StoppingCriterion::GlobalL1Threshold);
    assert_eq!(c.patience, 5);
}

#[test]
fn zero_gradient_start_returns_the_input() {
    let (model, _) = fixture();
    let mut model = model.clone();
    let id = model.params().lookup("predictor.z_in.w").unwrap();
    let m = model.params_mut().get_mut(id);
    m.data_mut().iter_mut().for_each(|v| *v = 0.0);
    let z = random_z(&mut ChaCha8Rng::seed_from_u64(4), 6);
    let (z_star, trace) = critique_latent(&model, &z, &[Critique::add(1)], &CritiqueConfig::default()).unwrap();
    assert_eq!(z_star, z);
    assert_eq!(trace.termination, Termination::ZeroGradient);
    assert_eq!(trace.iterations(), 0);
}

#[test]
fn non_finite_latent_is_rejected() {
    let (model, _) = fixture();
    let mut z = random_z(&mut ChaCha8Rng::seed_from_u64(5), 6);
    z.values[2] = f64::NAN;
    assert!(critique_latent(model, &z, &[Critique::add(1)], &CritiqueConfig::default()).is_err());
}

#[test]
fn unreachable_threshold_runs_to_the_cap() {
    let (model, _) = fixture();
    let z = random_z(&mut ChaCha8Rng::seed_from_u64(6), 6);
    let cfg = CritiqueConfig {
        criterion: StoppingCriterion::LocalThreshold,
        threshold: 1e-300,
        max_iters: 15,
        ..Default::default()
    };
    let (_, trace) = critique_latent(model, &z, &[Critique::add(0)], &cfg).unwrap();
    assert_eq!(trace.termination, Termination::MaxIters);
    assert_eq!(trace.iterations(), 15);
}

#[test]
fn threshold_variants_return_the_current_iterate() {
    let (model, _) = fixture();
    let z = random_z(&mut ChaCha8Rng::seed_from_u64(7), 6);
    for criterion in [StoppingCriterion::LocalThreshold, StoppingCriterion::GlobalL1Threshold] {
        let cfg = CritiqueConfig {
            criterion,
            max_iters: 8,
            ..Default::default()
        };
        let (z_star, trace) = critique_latent(model, &z, &[Critique::add(5)], &cfg).unwrap();
        // replay the updates to find the last iterate
        let target = build_target(&model.predict_ingredients(&z).unwrap(), &[Critique::add(5)]).unwrap();
        let mut cur = z.clone();
        let mut alpha = cfg.alpha0;
        for _ in 0..trace.iterations() {
            let (_, g) = model.grad_ingredient_loss_wrt_z(&cur, &target).unwrap();
            let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            cur = LatentVector::new(cur.values.iter().zip(&g).map(|(v, gi)| v - alpha / n * gi).collect());
            alpha *= cfg.decay;
        }
        assert_eq!(z_star, cur);
    }
}

#[test]
fn trace_serializes_one_object_per_iteration() {
    let (model, _) = fixture();
    let z = random_z(&mut ChaCha8Rng::seed_from_u64(8), 6);
    let (_, trace) = critique_latent(model, &z, &[Critique::add(2)], &CritiqueConfig::default()).unwrap();
    let text = trace.to_jsonl().unwrap();
    assert_eq!(text.lines().count(), trace.records.len());
    let first: IterationRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first, trace.records[0]);
    let json = serde_json::to_string(&trace).unwrap();
    assert!(json.contains("\"termination\""));
}

#[test]
fn removing_an_absent_ingredient_is_an_argument_error() {
    let (model, recipes) = fixture();
    let r = &recipes[0];
    let absent = (0..model.ingredients().len()).find(|i| !r.ingredient_ids.contains(i)).unwrap();
    let err = edit_recipe(r, &[Critique::remove(absent)], model, &CritiqueConfig::default()).unwrap_err();
    assert!(matches!(err, Error::Argument(_)));
    assert!(filtered_decode_baseline(r, &[Critique::remove(absent)], model).is_err());
}

#[test]
fn baseline_forces_the_list_and_keeps_z() {
    let (model, recipes) = fixture();
    let r = &recipes[1];
    let absent = (0..model.ingredients().len()).find(|i| !r.ingredient_ids.contains(i)).unwrap();
    let e = filtered_decode_baseline(r, &[Critique::add(absent)], model).unwrap();
    assert!(e.ingredients_after.contains(&absent));
    assert_eq!(e.z_before, e.z_after);
    assert!(e.trace.is_none());
    let present = *r.ingredient_ids.iter().next().unwrap();
    let e = filtered_decode_baseline(r, &[Critique::remove(present)], model).unwrap();
    assert!(!e.ingredients_after.contains(&present));
}

#[test]
fn edit_recipe_masks_removed_ingredients_in_the_input() {
    let (model, recipes) = fixture();
    let r = &recipes[2];
    let present = *r.ingredient_ids.iter().next().unwrap();
    let input = critique_input(r, &[Critique::remove(present)], model).unwrap();
    assert!(!input.masked_ingredients.is_empty());
    let e = edit_recipe(r, &[Critique::remove(present)], model, &CritiqueConfig::default()).unwrap();
    assert_eq!(e.z_before, model.encode(&input).unwrap());
    assert_eq!(e.base_id, r.id);
    let clean = critique_input(r, &[Critique::add(0)], model).unwrap();
    assert!(clean.masked_ingredients.is_empty() && clean.masked_instructions.is_empty());
}

fn check_contract(model: &RecipeModel, z: &LatentVector, critiques: &[Critique], cfg: &CritiqueConfig) {
    let (z_star, trace) = critique_latent(model, z, critiques, cfg).unwrap();
    let target = build_target(&model.predict_ingredients(z).unwrap(), critiques).unwrap();
    let n = trace.iterations();
    assert!(n <= cfg.max_iters);
    for (i, r) in trace.records.iter().enumerate() {
        assert_eq!(r.t, i);
        // exact schedule: repeated multiplication by the decay
        let mut a = cfg.alpha0;
        for _ in 0..i {
            a *= cfg.decay;
        }
        assert_eq!(r.alpha, a);
        assert!((r.alpha - cfg.alpha0 * cfg.decay.powi(i as i32)).abs() <= 1e-12 * cfg.alpha0);
        if i > 0 {
            assert!(r.best_val <= trace.records[i - 1].best_val);
        }
        assert_eq!(r.diffs.len(), critiques.len());
    }
    // replay to check step lengths and the returned iterate
    let mut cur = z.clone();
    let mut best = (trace.records[0].best_val, z.clone());
    for i in 1..=n {
        let (_, g) = model.grad_ingredient_loss_wrt_z(&cur, &target).unwrap();
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        let alpha = trace.records[i - 1].alpha;
        let next = if norm > 0.0 {
            LatentVector::new(cur.values.iter().zip(&g).map(|(v, gi)| v - alpha / norm * gi).collect())
        } else {
            cur.clone()
        };
        if norm > 0.0 {
            assert!((l2(&next, &cur) - alpha).abs() < 1e-6);
        }
        let m = trace.records[i].diffs.iter().copied().fold(0.0, f64::max);
        if m < best.0 {
            best = (m, next.clone());
        }
        cur = next;
    }
    match cfg.criterion {
        StoppingCriterion::EarlyStopping => {
            assert_eq!(z_star, best.1);
            let min = trace.records.iter().map(|r| r.diffs.iter().copied().fold(0.0, f64::max)).fold(f64::INFINITY, f64::min);
            assert_eq!(trace.records.last().unwrap().best_val, min);
            if trace.termination == Termination::PatienceExhausted {
                assert!(trace.records[n + 1 - cfg.patience..].iter().all(|r| !r.accepted));
            }
        }
        _ => assert_eq!(z_star, cur),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn critique_loop_contract(
        seed in any::<u64>(),
        alpha0 in 0.01f64..3.0,
        decay in 0.5f64..=1.0,
        patience in 1usize..6,
        max_iters in 1usize..25,
        criterion in 0usize..3,
        threshold in 0.01f64..0.99,
        n_crit in 1usize..3,
    ) {
        let (model, _) = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = random_z(&mut rng, 6);
        let n = model.ingredients().len();
        let mut critiques: Vec<Critique> = Vec::new();
        while critiques.len() < n_crit {
            let i = rng.gen_range(0..n);
            if critiques.iter().all(|c| c.ingredient != i) {
                critiques.push(if rng.gen_bool(0.5) { Critique::add(i) } else { Critique::remove(i) });
            }
        }
        let cfg = CritiqueConfig {
            alpha0,
            decay,
            patience,
            max_iters,
            criterion: StoppingCriterion::ALL[criterion],
            threshold,
        };
        check_contract(model, &z, &critiques, &cfg);
    }
}
