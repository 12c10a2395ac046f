use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub latent_dim: usize,
    pub max_sentence_tokens: usize,
    pub max_sentences: usize,
    /// Number of set-decoder steps; also the cap on predicted set size.
    pub max_ingredients: usize,
    pub max_instruction_tokens: usize,
    pub dropout: f64,
    pub ingredient_vocab_size: usize,
    pub token_vocab_size: usize,
    pub eos_loss_weight: f64,
    /// One sentence encoder for title, ingredient lines and steps.
    #[serde(default = "yes")]
    pub share_sentence_encoder: bool,
    /// Adds sentence positions in the ingredient-set encoder.
    #[serde(default)]
    pub ingredient_set_positions: bool,
}

fn yes() -> bool {
    true
}

impl ModelConfig {
    /// Small configuration for CPU training on the synthetic corpus.
    pub fn desk(ingredient_vocab_size: usize, token_vocab_size: usize) -> Self {
        ModelConfig {
            hidden_dim: 64,
            num_layers: 2,
            num_heads: 2,
            ffn_dim: 128,
            latent_dim: 64,
            max_sentence_tokens: 24,
            max_sentences: 20,
            max_ingredients: 20,
            max_instruction_tokens: 200,
            dropout: 0.2,
            ingredient_vocab_size,
            token_vocab_size,
            eos_loss_weight: 1.0,
            share_sentence_encoder: true,
            ingredient_set_positions: false,
        }
    }

    /// Full-size layout: 4 layers, 4 heads, hidden 512.
    pub fn full(ingredient_vocab_size: usize, token_vocab_size: usize) -> Self {
        ModelConfig {
            hidden_dim: 512,
            num_layers: 4,
            num_heads: 4,
            ffn_dim: 2048,
            latent_dim: 512,
            max_sentence_tokens: 30,
            max_instruction_tokens: 600,
            ..Self::desk(ingredient_vocab_size, token_vocab_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m.to_string()));
        if self.hidden_dim == 0 || self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return bad("hidden_dim must be a positive multiple of num_heads");
        }
        if self.latent_dim == 0 || self.ffn_dim == 0 {
            return bad("latent_dim and ffn_dim must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.eos_loss_weight >= 0.0 && self.eos_loss_weight.is_finite()) {
            return bad("eos_loss_weight must be finite and non-negative");
        }
        if self.ingredient_vocab_size == 0 {
            return bad("empty ingredient vocabulary");
        }
        if self.token_vocab_size <= crate::corpus::tokenizer::SEP {
            return bad("token vocabulary lacks the special tokens");
        }
        if self.max_sentence_tokens == 0
            || self.max_sentences == 0
            || self.max_ingredients == 0
            || self.max_instruction_tokens < 2
        {
            return bad("length limits must be positive");
        }
        Ok(())
    }
}
