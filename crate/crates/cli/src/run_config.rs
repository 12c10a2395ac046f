//! Training config file: [`TrainConfig`] fields at the top level, token
//! vocabulary limits, and an optional `[model]` table overriding the desk
//! model layout.

use std::path::Path;

use serde::Deserialize;

use recipecrit::model::ModelConfig;
use recipecrit::training::TrainConfig;
use recipecrit::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelOverrides {
    pub hidden_dim: Option<usize>,
    pub num_layers: Option<usize>,
    pub num_heads: Option<usize>,
    pub ffn_dim: Option<usize>,
    pub latent_dim: Option<usize>,
    pub max_instruction_tokens: Option<usize>,
    pub eos_loss_weight: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub min_token_freq: usize,
    pub max_token_vocab: usize,
    pub model: ModelOverrides,
}

impl RunConfig {
    /// Settings that train the desk model on the synthetic corpus.
    pub fn desk() -> Self {
        Self::parse(include_str!("../../../configs/desk.toml")).expect("bundled desk config parses")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |e: &dyn std::fmt::Display| Error::config(format!("train config: {e}"));
        let mut table: toml::Table = text.parse().map_err(|e| bad(&e))?;
        let model = match table.remove("model") {
            Some(v) => v.try_into().map_err(|e| bad(&e))?,
            None => ModelOverrides::default(),
        };
        let mut take = |key: &str, default: usize| -> Result<usize> {
            match table.remove(key) {
                Some(toml::Value::Integer(n)) if n > 0 => Ok(n as usize),
                Some(v) => Err(bad(&format!("{key} must be a positive integer, got {v}"))),
                None => Ok(default),
            }
        };
        let min_token_freq = take("min_token_freq", 3)?;
        let max_token_vocab = take("max_token_vocab", 2000)?;
        if table.contains_key("stage") || table.contains_key("seed") {
            return Err(bad(&"stage and seed come from the command line"));
        }
        let train = TrainConfig::from_toml(&toml::to_string(&table).map_err(|e| bad(&e))?)?;
        Ok(RunConfig {
            train,
            min_token_freq,
            max_token_vocab,
            model,
        })
    }

    pub fn train_config(&self, stage: u8, seed: u64) -> TrainConfig {
        TrainConfig {
            stage,
            seed,
            ..self.train.clone()
        }
    }

    pub fn model_config(&self, ingredients: usize, tokens: usize) -> ModelConfig {
        let mut c = ModelConfig::desk(ingredients, tokens);
        let m = &self.model;
        c.hidden_dim = m.hidden_dim.unwrap_or(c.hidden_dim);
        c.num_layers = m.num_layers.unwrap_or(c.num_layers);
        c.num_heads = m.num_heads.unwrap_or(c.num_heads);
        c.ffn_dim = m.ffn_dim.unwrap_or(c.ffn_dim);
        c.latent_dim = m.latent_dim.unwrap_or(c.latent_dim);
        c.max_instruction_tokens = m.max_instruction_tokens.unwrap_or(c.max_instruction_tokens);
        c.eos_loss_weight = m.eos_loss_weight.unwrap_or(c.eos_loss_weight);
        c.dropout = self.train.dropout;
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_file_parses() {
        let c = RunConfig::desk();
        assert_eq!(c.train.batch_size, 32);
        assert_eq!(c.min_token_freq, 3);
        assert_eq!(c.model_config(50, 300).hidden_dim, 64);
    }

    #[test]
    fn overrides_apply() {
        let c = RunConfig::parse("max_epochs = 2\n[model]\nhidden_dim = 8\nnum_heads = 1\n").unwrap();
        assert_eq!(c.train.max_epochs, 2);
        let m = c.model_config(10, 40);
        assert_eq!((m.hidden_dim, m.num_heads, m.latent_dim), (8, 1, 64));
    }

    #[test]
    fn rejects_bad_files() {
        assert!(RunConfig::parse("stage = 2").is_err());
        assert!(RunConfig::parse("[model]\nwidth = 3").is_err());
        assert!(RunConfig::parse("min_token_freq = 0").is_err());
        assert!(RunConfig::parse("batch_size = 0").is_err());
    }
}
