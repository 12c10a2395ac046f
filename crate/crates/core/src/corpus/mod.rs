//! Recipes, vocabularies, noise and the synthetic desk corpus.

pub mod noise;
pub mod recipe;
pub mod sampling;
pub mod synthetic;
pub mod tokenizer;
pub mod vocab;

pub use noise::{apply_denoising_noise, mask_for_removal_critique};
pub use recipe::{
    load_jsonl, read_jsonl, write_jsonl, LoadStats, NoisedRecipe, Recipe, RecipeRecord, Rejection,
    MAX_RECIPE_ITEMS,
};
pub use sampling::{
    document_frequency, sample_eval_set, select_critique_targets, split_corpus, CritiqueEvalSet,
    Splits,
};
pub use synthetic::{generate_synthetic_corpus, GrammarConfig, SyntheticGrammar};
pub use tokenizer::{detokenize, tokenize, TokenVocab};
pub use vocab::{build_ingredient_vocab, Ingredient, IngredientVocab, VocabBuild};
