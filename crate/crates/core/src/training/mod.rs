//! Two-stage denoising training.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::tokenizer::TokenVocab;
use crate::corpus::{apply_denoising_noise, NoisedRecipe, Recipe, Splits};
use crate::model::{instruction_sequence, save_checkpoint, Ctx, RecipeModel, TrainingStage};
use crate::tensor::{Adam, GradAccumulator, Graph, ParamStore};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub dropout: f64,
    pub mask_ratio: f64,
    pub max_epochs: usize,
    pub patience_epochs: usize,
    pub seed: u64,
    pub stage: u8,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            learning_rate: 1e-4,
            dropout: 0.2,
            mask_ratio: 0.5,
            max_epochs: 30,
            patience_epochs: 5,
            seed: 0,
            stage: 1,
            clip_norm: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::config("mask_ratio must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        if self.stage != 1 && self.stage != 2 {
            return Err(Error::config(format!("unknown stage {}", self.stage)));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs must be at least 1"));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: TrainConfig = toml::from_str(text).map_err(|e| Error::config(format!("train config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub mean_grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: u8,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    pub wall_clock_secs: f64,
    pub checkpoint: Option<PathBuf>,
}

impl TrainReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Every title, ingredient line and step of `recipes`, for vocabulary building.
pub fn recipe_sentences(recipes: &[Recipe]) -> impl Iterator<Item = &str> {
    recipes.iter().flat_map(|r| {
        std::iter::once(r.title.as_str())
            .chain(r.ingredient_lines.iter().map(String::as_str))
            .chain(r.instructions.iter().map(String::as_str))
    })
}

pub fn build_token_vocab(train: &[Recipe], min_freq: usize, max_size: usize) -> TokenVocab {
    TokenVocab::build(recipe_sentences(train), min_freq, max_size)
}

fn epoch_rng(seed: u64, stage: u8, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stage as u64) << 32) | epoch as u64);
    rng
}

fn noise_all(recipes: &[&Recipe], ratio: f64, rng: &mut ChaCha8Rng) -> Result<Vec<NoisedRecipe>> {
    recipes
        .iter()
        .map(|r| apply_denoising_noise(r, ratio, rng))
        .collect()
}

/// Batch loss for the given stage; returns the value and gradients if asked.
fn batch_loss(
    model: &RecipeModel,
    batch: &[NoisedRecipe],
    stage: u8,
    ctx: &mut Ctx,
    want_grads: bool,
) -> Result<(f64, Option<crate::tensor::Grads>)> {
    let inputs = batch
        .iter()
        .map(|n| model.encoder_input(n))
        .collect::<Result<Vec<_>>>()?;
    let mut g = Graph::new(model.params());
    let z = model.encode_graph(&mut g, &inputs, ctx);
    let b = batch.len() as f64;
    let loss = if stage == 1 {
        let out = model.predict_graph(&mut g, z, ctx);
        let targets: Vec<_> = batch.iter().map(|n| model.target_for(&n.base.ingredient_ids)).collect();
        let l = model.ingredient_loss_graph(&mut g, &out, &targets);
        g.scale(l, 1.0 / b)
    } else {
        let sets: Vec<Vec<usize>> = batch
            .iter()
            .map(|n| n.base.ingredient_ids.iter().copied().collect())
            .collect();
        let seqs: Vec<Vec<usize>> = batch
            .iter()
            .map(|n| instruction_sequence(&n.base.instructions, model.tokens(), model.config().max_instruction_tokens))
            .collect();
        model.instruction_loss_graph(&mut g, z, &sets, &seqs, ctx)
    };
    let value = g.scalar(loss);
    let grads = want_grads.then(|| g.backward(loss));
    Ok((value, grads))
}

/// Validation loss with fixed noise so epochs are comparable.
pub fn validation_loss(model: &RecipeModel, val: &[Recipe], stage: u8, mask_ratio: f64, seed: u64, batch_size: usize) -> Result<f64> {
    if val.is_empty() {
        return Ok(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0a11);
    let refs: Vec<&Recipe> = val.iter().collect();
    let noised = noise_all(&refs, mask_ratio, &mut rng)?;
    let mut total = 0.0;
    for chunk in noised.chunks(batch_size.max(1)) {
        let (l, _) = batch_loss(model, chunk, stage, &mut Ctx::eval(), false)?;
        total += l * chunk.len() as f64;
    }
    Ok(total / val.len() as f64)
}

fn run_stage(model: &mut RecipeModel, splits: &Splits, cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainReport> {
    cfg.validate()?;
    if splits.train.is_empty() {
        return Err(Error::arg("empty training split"));
    }
    let started = Instant::now();
    let stage = cfg.stage;
    let mut adam = Adam::new(cfg.learning_rate, cfg.clip_norm);
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut best_params: Option<ParamStore> = None;
    let mut epochs = Vec::new();
    let mut stale = 0;
    let mut stopped_early = false;
    for epoch in 1..=cfg.max_epochs {
        let mut rng = epoch_rng(cfg.seed, stage, epoch);
        let mut order: Vec<&Recipe> = splits.train.iter().collect();
        order.shuffle(&mut rng);
        let noised = noise_all(&order, cfg.mask_ratio, &mut rng)?;
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        dropout_rng.set_stream((1 << 40) | ((stage as u64) << 32) | epoch as u64);
        let mut sum = 0.0;
        let mut norms = 0.0;
        let mut batches = 0;
        for (bi, batch) in noised.chunks(cfg.batch_size).enumerate() {
            let mut ctx = Ctx {
                rng: Some(&mut dropout_rng),
                dropout: cfg.dropout,
            };
            let (loss, grads) = batch_loss(model, batch, stage, &mut ctx, true)?;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "stage {stage} epoch {epoch} batch {bi}: loss is {loss}"
                )));
            }
            let mut acc = GradAccumulator::new(model.params().len());
            acc.add(&grads.expect("gradients requested"));
            if !acc.is_finite() {
                return Err(Error::Divergence(format!(
                    "stage {stage} epoch {epoch} batch {bi}: non-finite gradient"
                )));
            }
            norms += adam.step(model.params_mut(), &acc);
            sum += loss;
            batches += 1;
        }
        let train_loss = sum / batches as f64;
        let val_loss = validation_loss(model, &splits.val, stage, cfg.mask_ratio, cfg.seed, cfg.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence(format!("stage {stage} epoch {epoch}: validation loss {val_loss}")));
        }
        log::info!(
            "stage {stage} epoch {epoch}: train {train_loss:.5} val {val_loss:.5} ({:.1}s)",
            started.elapsed().as_secs_f64()
        );
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            mean_grad_norm: norms / batches as f64,
        });
        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best_params = Some(model.params().clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience_epochs {
                stopped_early = true;
                break;
            }
        }
    }
    if let Some(p) = best_params {
        model.replace_params(p);
    }
    model.params_mut().unfreeze_all();
    model.set_stage(if stage == 1 { TrainingStage::Stage1 } else { TrainingStage::Stage2 });
    if let Some(path) = out {
        save_checkpoint(model, path)?;
    }
    Ok(TrainReport {
        stage,
        epochs,
        best_epoch,
        best_val_loss: best_val,
        stopped_early,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        checkpoint: out.map(Path::to_path_buf),
    })
}

/// Trains encoder and ingredient predictor on noised inputs against the full
/// ingredient set.
pub fn train_stage1(splits: &Splits, model: &mut RecipeModel, cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainReport> {
    if cfg.stage != 1 {
        return Err(Error::arg("train_stage1 needs a stage-1 config"));
    }
    model.params_mut().unfreeze_all();
    run_stage(model, splits, cfg, out)
}

/// Trains the instruction decoder with the encoder frozen.
pub fn train_stage2(splits: &Splits, model: &mut RecipeModel, cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainReport> {
    if cfg.stage != 2 {
        return Err(Error::arg("train_stage2 needs a stage-2 config"));
    }
    if model.stage() == TrainingStage::Initialized {
        return Err(Error::arg("stage 2 needs a model trained by stage 1"));
    }
    model.params_mut().unfreeze_all();
    model.params_mut().freeze_prefix("encoder.");
    model.params_mut().freeze_prefix("predictor.");
    run_stage(model, splits, cfg, out)
}
