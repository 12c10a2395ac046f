use super::*;
use crate::corpus::{GrammarConfig, SyntheticGrammar, TokenVocab};
use crate::model::{LatentVector, ModelConfig};
use proptest::prelude::*;

fn s(v: &[usize]) -> BTreeSet<usize> {
    v.iter().copied().collect()
}

fn vocab() -> IngredientVocab {
    IngredientVocab::new(vec![
        ("kale", vec![]),
        ("tomato", vec!["tomatoes"]),
        ("olive oil", vec![]),
        ("garlic", vec![]),
    ])
    .unwrap()
}

#[test]
fn set_metric_examples() {
    assert_eq!(iou(&s(&[1, 2, 3]), &s(&[2, 3, 4])), 0.5);
    assert_eq!(iou(&s(&[1, 2]), &s(&[1, 2])), 1.0);
    assert_eq!(iou(&s(&[1]), &s(&[2])), 0.0);
    assert_eq!(iou(&s(&[]), &s(&[])), 1.0);
    assert!((set_f1(&s(&[1, 2, 3]), &s(&[2, 3, 4])) - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(set_f1(&s(&[5, 6]), &s(&[5, 6])), 1.0);
    assert_eq!(set_f1(&s(&[1]), &s(&[2])), 0.0);
    assert_eq!(set_f1(&s(&[]), &s(&[])), 1.0);
    assert_eq!(set_f1(&s(&[]), &s(&[1])), 0.0);
}

#[test]
fn coherence_examples() {
    let v = vocab();
    let kale = v.id_of("kale").unwrap();
    let tomato = v.id_of("tomato").unwrap();
    let garlic = v.id_of("garlic").unwrap();
    let p = coherence_prf(&s(&[kale, tomato]), &["toss kale with tomatoes", "add garlic"], &v);
    assert!((p.precision - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(p.recall, 1.0);
    let none: [&str; 0] = [];
    let p = coherence_prf(&s(&[]), &none, &v);
    assert_eq!((p.precision, p.recall, p.f1), (1.0, 1.0, 1.0));
    let p = coherence_prf(&s(&[garlic]), &none, &v);
    assert_eq!((p.precision, p.recall, p.f1), (0.0, 0.0, 0.0));
}

#[test]
fn ground_truth_synthetic_recipes_are_fully_coherent() {
    let g = SyntheticGrammar::new(GrammarConfig::default_grammar()).unwrap();
    for r in g.generate(50, 11) {
        let p = coherence_prf(&r.ingredient_ids, &r.instructions, g.vocab());
        assert_eq!((p.precision, p.recall, p.f1), (1.0, 1.0, 1.0));
    }
}

#[test]
fn success_examples() {
    let v = vocab();
    let kale = v.id_of("kale").unwrap();
    let add = Critique::add(kale);
    let rm = Critique::remove(kale);
    let listed = s(&[kale, 1]);
    assert!(success_of(&listed, &["toss kale with tomatoes"], &add, &v, SuccessMode::Both));
    assert!(!success_of(&listed, &["toss the tomatoes"], &add, &v, SuccessMode::Both));
    assert!(success_of(&listed, &["toss the tomatoes"], &add, &v, SuccessMode::ListOnly));
    assert!(!success_of(&listed, &["toss the tomatoes"], &add, &v, SuccessMode::TextOnly));
    assert!(success_of(&s(&[1]), &["toss the tomatoes"], &rm, &v, SuccessMode::Both));
    assert!(!success_of(&s(&[1]), &["wilt the kale"], &rm, &v, SuccessMode::Both));
}

#[test]
fn report_round_trip_and_table() {
    let row = MetricsRow {
        experiment: "rq1".into(),
        criterion: "early_stopping".into(),
        direction: Some(Direction::Add),
        target_id: None,
        n: 40,
        success_rate: Some(62.5),
        iou: 80.0,
        f1: 88.1,
        coh_p: 90.0,
        coh_r: 85.0,
        coh_f1: 87.4,
        mean_iters: Some(7.25),
        seed: 3,
        model_digest: "ab".into(),
    };
    let report = MetricsReport {
        rows: vec![row.clone(), MetricsRow { target_id: Some(4), ..row }],
    };
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("r.jsonl");
    emit_report(&report, &p, ReportFormat::Machine).unwrap();
    let back = MetricsReport::from_jsonl(&std::fs::read_to_string(&p).unwrap()).unwrap();
    assert_eq!(back, report);
    assert_eq!(back.digest().unwrap(), report.digest().unwrap());
    let line: serde_json::Value = serde_json::from_str(report.to_jsonl().unwrap().lines().next().unwrap()).unwrap();
    for key in [
        "experiment", "criterion", "direction", "target_id", "n", "success_rate", "iou", "f1", "coh_p", "coh_r",
        "coh_f1", "mean_iters", "seed", "model_digest",
    ] {
        assert!(line.get(key).is_some(), "{key}");
    }

    let t = dir.path().join("r.txt");
    emit_report(&report, &t, ReportFormat::Table).unwrap();
    let text = std::fs::read_to_string(&t).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split_whitespace().collect();
    let pos = |h: &str, from: usize| header[from..].iter().position(|x| *x == h).unwrap() + from;
    let succ = pos("Succ.", 0);
    let iou_c = pos("IoU", succ);
    let f1_c = pos("F1", iou_c);
    let p_c = pos("Prec.", f1_c);
    let r_c = pos("Rec.", p_c);
    pos("F1", r_c);
    // summary rows only
    assert_eq!(text.lines().count(), 2);

    emit_report(&MetricsReport::default(), &t, ReportFormat::Table).unwrap();
    assert_eq!(std::fs::read_to_string(&t).unwrap().lines().count(), 1);
    emit_report(&MetricsReport::default(), &p, ReportFormat::Machine).unwrap();
    assert_eq!(MetricsReport::from_jsonl(&std::fs::read_to_string(&p).unwrap()).unwrap(), MetricsReport::default());
}

struct Oracle(IngredientVocab);

impl Reconstructor for Oracle {
    fn reconstruct(&self, noised: &NoisedRecipe) -> Result<(BTreeSet<usize>, Vec<String>)> {
        Ok((noised.base.ingredient_ids.clone(), noised.base.instructions.clone()))
    }

    fn vocab(&self) -> &IngredientVocab {
        &self.0
    }

    fn digest(&self) -> String {
        "oracle".into()
    }
}

#[test]
fn perfect_reconstructor_scores_full_marks() {
    let g = SyntheticGrammar::new(GrammarConfig::default_grammar()).unwrap();
    let test = g.generate(30, 2);
    let r = run_reconstruction(&Oracle(g.vocab().clone()), &test, 0.5, 1).unwrap();
    let row = &r.rows[0];
    assert_eq!((row.iou, row.f1, row.coh_p, row.coh_r, row.coh_f1), (100.0, 100.0, 100.0, 100.0, 100.0));
    assert_eq!(row.n, 30);
}

#[test]
fn majority_set_uses_the_most_frequent_ingredients() {
    let g = SyntheticGrammar::new(GrammarConfig::default_grammar()).unwrap();
    let train = g.generate(200, 4);
    let set = majority_set(&train, g.vocab().len());
    let freq = crate::corpus::document_frequency(&train, g.vocab().len());
    let mean = train.iter().map(|r| r.ingredient_ids.len()).sum::<usize>() as f64 / 200.0;
    assert_eq!(set.len(), mean.round() as usize);
    let min_in = set.iter().map(|&i| freq[i]).min().unwrap();
    assert!((0..freq.len()).filter(|i| !set.contains(i)).all(|i| freq[i] <= min_in));
    let row = majority_baseline(&train, &train, g.vocab().len());
    assert!(row.f1 > 0.0 && row.f1 <= 100.0);
}

fn editing_fixture(stage: TrainingStage) -> (RecipeModel, Vec<CritiqueEvalSet>) {
    let g = SyntheticGrammar::new(GrammarConfig::default_grammar()).unwrap();
    let recipes = g.generate(60, 8);
    let tv = TokenVocab::build(crate::training::recipe_sentences(&recipes), 1, 1000);
    let cfg = ModelConfig {
        hidden_dim: 8,
        num_layers: 1,
        num_heads: 2,
        ffn_dim: 16,
        latent_dim: 6,
        max_instruction_tokens: 10,
        dropout: 0.0,
        ..ModelConfig::desk(g.vocab().len(), tv.len())
    };
    let mut model = RecipeModel::new(cfg, tv, g.vocab().clone(), 1).unwrap();
    model.set_stage(stage);
    let targets = crate::corpus::select_critique_targets(&recipes, g.vocab(), 2, 3).unwrap();
    let sets = targets
        .iter()
        .map(|&t| crate::corpus::sample_eval_set(&recipes, t, 3, 5).unwrap())
        .collect();
    (model, sets)
}

#[test]
fn identity_pipeline_removes_vacuously_on_negative_recipes() {
    let (model, sets) = editing_fixture(TrainingStage::Stage2);
    for set in &sets {
        for r in &set.negative {
            let c = Critique::remove(set.target);
            let e = Pipeline::Identity.run(&model, r, &c).unwrap();
            assert!(success(&e, &c, model.ingredients(), SuccessMode::Both));
        }
    }
}

#[test]
fn editing_harness_shapes_and_determinism() {
    let (model, sets) = editing_fixture(TrainingStage::Stage2);
    let crit = CritiqueConfig {
        max_iters: 3,
        ..Default::default()
    };
    let cfg = EvalConfig::default();
    let a = run_rq1(&model, &sets, &crit, &cfg).unwrap();
    let b = run_rq1(&model, &sets, &crit, &cfg).unwrap();
    assert_eq!(a.digest().unwrap(), b.digest().unwrap());
    // two pipelines × two directions × (two targets + summary)
    assert_eq!(a.rows.len(), 12);
    for r in &a.rows {
        for v in [r.success_rate.unwrap(), r.iou, r.f1, r.coh_p, r.coh_r, r.coh_f1] {
            assert!((0.0..=100.0).contains(&v), "{r:?}");
        }
        assert_eq!(r.n, if r.target_id.is_some() { 3 } else { 6 });
    }
    let base = a.summary("filtered_decode", Some(Direction::Add)).unwrap();
    assert_eq!(base.mean_iters, Some(0.0));
    let grid: Vec<CritiqueConfig> = crate::critique::StoppingCriterion::ALL
        .iter()
        .map(|&c| CritiqueConfig { max_iters: 2, ..CritiqueConfig::with_criterion(c) })
        .collect();
    let r2 = run_rq2(&model, &sets, &grid, &cfg).unwrap();
    assert!(r2.summary("global_l1_threshold", Some(Direction::Remove)).is_some());
}

#[test]
fn editing_needs_a_stage2_model() {
    let (model, sets) = editing_fixture(TrainingStage::Stage1);
    let err = run_rq1(&model, &sets, &CritiqueConfig::default(), &EvalConfig::default()).unwrap_err();
    assert!(matches!(err, Error::Argument(_)));
}

#[test]
fn fidelity_ignores_the_critiqued_ingredient() {
    let v = vocab();
    let z = LatentVector::new(vec![0.0]);
    let edited = EditedRecipe {
        base_id: "x".into(),
        critiques: vec![Critique::add(0)],
        z_before: z.clone(),
        z_after: z,
        ingredients_before: s(&[1, 2]),
        ingredients_after: s(&[0, 1, 2]),
        probabilities_after: vec![],
        instructions: vec!["toss kale".into()],
        trace: None,
    };
    let o = evaluate_edit(&s(&[1, 2]), &edited, &Critique::add(0), &v, SuccessMode::Both);
    assert!(o.success);
    assert_eq!((o.iou, o.f1), (1.0, 1.0));
}

proptest! {
    #[test]
    fn set_metric_properties(a in proptest::collection::btree_set(0usize..12, 0..8), b in proptest::collection::btree_set(0usize..12, 0..8)) {
        prop_assert_eq!(iou(&a, &b), iou(&b, &a));
        prop_assert_eq!(set_f1(&a, &b), set_f1(&b, &a));
        prop_assert!(iou(&a, &b) <= set_f1(&a, &b) + 1e-15);
        prop_assert_eq!(iou(&a, &b) == 1.0, a == b);
        prop_assert_eq!(set_f1(&a, &b) == 1.0, a == b);
    }
}
