//! Recipe encoder, ingredient set predictor and instruction decoder.

mod checkpoint;
mod config;
mod decoder;
mod encoder;
mod layers;
mod predictor;

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use config::ModelConfig;
pub use decoder::{instruction_sequence, split_sentences};
pub use encoder::EncoderInput;
pub use layers::Ctx;
pub use predictor::{cardinality, ingredient_loss, top_k, IngredientPrediction, IngredientTarget};

use crate::corpus::tokenizer::{TokenVocab, BOS, EOS, MASK, PAD};
use crate::corpus::{IngredientVocab, NoisedRecipe, Recipe};
use crate::tensor::{Graph, Matrix, ParamStore, Var};
use crate::{Error, Result};
use decoder::Decoder;
use encoder::Encoder;
use predictor::{Predictor, PredictorOut};

/// Recipe representation `z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentVector {
    pub values: Vec<f64>,
}

impl LatentVector {
    pub fn new(values: Vec<f64>) -> Self {
        LatentVector { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn distance(&self, other: &LatentVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// SHA-256 over the little-endian bit patterns.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.values {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    fn as_row(&self) -> Matrix {
        Matrix::row_vector(self.values.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingStage {
    Initialized,
    Stage1,
    Stage2,
}

impl TrainingStage {
    pub(crate) fn tag(self) -> u8 {
        match self {
            TrainingStage::Initialized => 0,
            TrainingStage::Stage1 => 1,
            TrainingStage::Stage2 => 2,
        }
    }

    pub(crate) fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(TrainingStage::Initialized),
            1 => Some(TrainingStage::Stage1),
            2 => Some(TrainingStage::Stage2),
            _ => None,
        }
    }
}

/// Greedy decoder output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodedInstructions {
    pub sentences: Vec<String>,
    pub tokens: Vec<usize>,
    /// False when decoding stopped at the length limit.
    pub finished: bool,
}

#[derive(Debug, Clone)]
pub struct RecipeModel {
    config: ModelConfig,
    params: ParamStore,
    tokens: TokenVocab,
    ingredients: IngredientVocab,
    stage: TrainingStage,
    encoder: Encoder,
    predictor: Predictor,
    decoder: Decoder,
}

impl RecipeModel {
    pub fn new(config: ModelConfig, tokens: TokenVocab, ingredients: IngredientVocab, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.token_vocab_size != tokens.len() {
            return Err(Error::config(format!(
                "config expects {} tokens, vocabulary has {}",
                config.token_vocab_size,
                tokens.len()
            )));
        }
        if config.ingredient_vocab_size != ingredients.len() {
            return Err(Error::config(format!(
                "config expects {} ingredients, vocabulary has {}",
                config.ingredient_vocab_size,
                ingredients.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&mut params, &config, &mut rng);
        let predictor = Predictor::new(&mut params, &config, &mut rng);
        let decoder = Decoder::new(&mut params, &config, &mut rng);
        Ok(RecipeModel {
            config,
            params,
            tokens,
            ingredients,
            stage: TrainingStage::Initialized,
            encoder,
            predictor,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn tokens(&self) -> &TokenVocab {
        &self.tokens
    }

    pub fn ingredients(&self) -> &IngredientVocab {
        &self.ingredients
    }

    pub fn stage(&self) -> TrainingStage {
        self.stage
    }

    pub fn set_stage(&mut self, stage: TrainingStage) {
        self.stage = stage;
    }

    /// Digest of every parameter tensor.
    pub fn digest(&self) -> String {
        self.params.digest("")
    }

    pub fn encoder_digest(&self) -> String {
        self.params.digest("encoder.")
    }

    pub fn set_steps(&self) -> usize {
        self.predictor.steps()
    }

    pub fn encoder_input(&self, n: &NoisedRecipe) -> Result<EncoderInput> {
        EncoderInput::from_noised(n, &self.tokens, &self.config)
    }

    pub fn encode(&self, n: &NoisedRecipe) -> Result<LatentVector> {
        Ok(self.encode_batch(std::slice::from_ref(n))?.remove(0))
    }

    pub fn encode_recipe(&self, r: &Recipe) -> Result<LatentVector> {
        self.encode(&NoisedRecipe::clean(r.clone()))
    }

    pub fn encode_batch(&self, inputs: &[NoisedRecipe]) -> Result<Vec<LatentVector>> {
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        let prepared = inputs
            .iter()
            .map(|n| self.encoder_input(n))
            .collect::<Result<Vec<_>>>()?;
        let mut g = Graph::new(&self.params);
        let z = self.encoder.forward(&mut g, &prepared, &mut Ctx::eval());
        let m = g.value(z);
        Ok((0..m.rows()).map(|r| LatentVector::new(m.row(r).to_vec())).collect())
    }

    fn check_latent(&self, z: &LatentVector) -> Result<()> {
        if z.len() != self.config.latent_dim {
            return Err(Error::arg(format!(
                "latent vector has {} coordinates, model expects {}",
                z.len(),
                self.config.latent_dim
            )));
        }
        if !z.is_finite() {
            return Err(Error::Numerical("latent vector is not finite".into()));
        }
        Ok(())
    }

    pub fn predict_ingredients(&self, z: &LatentVector) -> Result<IngredientPrediction> {
        self.check_latent(z)?;
        let mut g = Graph::new(&self.params);
        let zv = g.input(z.as_row());
        let out = self.predictor.forward(&mut g, zv, &mut Ctx::eval());
        Ok(IngredientPrediction::from_step_logits(g.value(out.logits).clone()))
    }

    /// Target in the predictor's layout for a ground-truth ingredient set.
    pub fn target_for(&self, set: &BTreeSet<usize>) -> IngredientTarget {
        IngredientTarget::from_set(set, self.ingredients.len(), self.set_steps())
    }

    /// `L_ing(C(z), target)` and its exact gradient with respect to `z`.
    pub fn grad_ingredient_loss_wrt_z(&self, z: &LatentVector, target: &IngredientTarget) -> Result<(f64, Vec<f64>)> {
        self.check_latent(z)?;
        self.check_target(target)?;
        let mut g = Graph::new(&self.params);
        let zv = g.leaf(z.as_row());
        let out = self.predictor.forward(&mut g, zv, &mut Ctx::eval());
        let loss = self.predictor.loss(&mut g, &out, std::slice::from_ref(target), self.config.eos_loss_weight);
        let grads = g.backward(loss);
        let gz = grads
            .get(zv)
            .map(|m| m.data().to_vec())
            .unwrap_or_else(|| vec![0.0; z.len()]);
        Ok((g.scalar(loss), gz))
    }

    fn check_target(&self, target: &IngredientTarget) -> Result<()> {
        if target.ingredients.len() != self.ingredients.len() {
            return Err(Error::arg(format!(
                "target covers {} ingredients, vocabulary has {}",
                target.ingredients.len(),
                self.ingredients.len()
            )));
        }
        if target.eos_step > self.set_steps() {
            return Err(Error::arg("EOS step beyond the set decoder length"));
        }
        Ok(())
    }

    fn check_set(&self, set: &BTreeSet<usize>) -> Result<()> {
        if let Some(&bad) = set.iter().find(|&&i| i >= self.ingredients.len()) {
            return Err(Error::arg(format!("ingredient id {bad} outside the vocabulary")));
        }
        Ok(())
    }

    /// Greedy decoding conditioned on `z` and an ingredient set.
    pub fn decode_instructions(&self, z: &LatentVector, set: &BTreeSet<usize>, max_len: usize) -> Result<DecodedInstructions> {
        self.check_latent(z)?;
        self.check_set(set)?;
        let max_len = max_len.min(self.config.max_instruction_tokens - 1);
        let ids: Vec<usize> = set.iter().copied().collect();
        let mut seq = vec![BOS];
        let mut finished = false;
        while seq.len() <= max_len {
            let mut g = Graph::new(&self.params);
            let zv = g.input(z.as_row());
            let logits = self.decoder.forward(&mut g, zv, std::slice::from_ref(&ids), &[&seq], &mut Ctx::eval());
            let m = g.value(logits);
            let next = argmax_token(m.row(m.rows() - 1));
            if next == EOS {
                finished = true;
                break;
            }
            seq.push(next);
        }
        let tokens = seq[1..].to_vec();
        if tokens.is_empty() {
            log::debug!("decoder produced an empty instruction list");
        }
        Ok(DecodedInstructions {
            sentences: split_sentences(&tokens, &self.tokens),
            tokens,
            finished,
        })
    }

    /// Teacher-forced token cross-entropy, averaged over target tokens.
    pub fn instruction_loss<S: AsRef<str>>(&self, z: &LatentVector, set: &BTreeSet<usize>, steps: &[S]) -> Result<f64> {
        self.check_latent(z)?;
        self.check_set(set)?;
        if steps.iter().all(|s| s.as_ref().trim().is_empty()) {
            return Err(Error::arg("empty instruction target"));
        }
        let seq = instruction_sequence(steps, &self.tokens, self.config.max_instruction_tokens);
        let mut g = Graph::new(&self.params);
        let zv = g.input(z.as_row());
        let ids: Vec<usize> = set.iter().copied().collect();
        let loss = self.instruction_loss_graph(&mut g, zv, &[ids], &[seq], &mut Ctx::eval());
        Ok(g.scalar(loss))
    }

    pub(crate) fn encode_graph(&self, g: &mut Graph, inputs: &[EncoderInput], ctx: &mut Ctx) -> Var {
        self.encoder.forward(g, inputs, ctx)
    }

    pub(crate) fn predict_graph(&self, g: &mut Graph, z: Var, ctx: &mut Ctx) -> PredictorOut {
        self.predictor.forward(g, z, ctx)
    }

    pub(crate) fn ingredient_loss_graph(&self, g: &mut Graph, out: &PredictorOut, targets: &[IngredientTarget]) -> Var {
        self.predictor.loss(g, out, targets, self.config.eos_loss_weight)
    }

    /// Mean token cross-entropy over all target positions in the batch.
    pub(crate) fn instruction_loss_graph(
        &self,
        g: &mut Graph,
        z: Var,
        sets: &[Vec<usize>],
        seqs: &[Vec<usize>],
        ctx: &mut Ctx,
    ) -> Var {
        let inputs: Vec<&[usize]> = seqs.iter().map(|s| &s[..s.len() - 1]).collect();
        let targets: Vec<Option<usize>> = seqs.iter().flat_map(|s| s[1..].iter().map(|&t| Some(t))).collect();
        let logits = self.decoder.forward(g, z, sets, &inputs, ctx);
        let n = targets.len().max(1) as f64;
        g.cross_entropy(logits, &targets, 1.0 / n)
    }

    pub(crate) fn replace_params(&mut self, params: ParamStore) {
        self.params = params;
    }
}

fn argmax_token(row: &[f64]) -> usize {
    let mut best = EOS;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if i == PAD || i == MASK || i == BOS {
            continue;
        }
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}
