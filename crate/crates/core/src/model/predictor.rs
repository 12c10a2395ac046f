use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{embedding, run_stack, segment_blocks, stack, Block, Ctx, LayerNorm, Linear};
use super::ModelConfig;
use crate::tensor::{sigmoid, Graph, Matrix, ParamId, ParamStore, Var, PROB_CLAMP};
use crate::{Error, Result};

/// Output of the ingredient set predictor for one latent vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngredientPrediction {
    /// Max-pooled probability per ingredient.
    pub probabilities: Vec<f64>,
    /// End-of-set probability at each decoder step.
    pub eos_probabilities: Vec<f64>,
    /// Raw `steps × (|I| + 1)` logits; the last column is EOS.
    pub per_step_logits: Matrix,
    pub top_set: BTreeSet<usize>,
}

impl IngredientPrediction {
    pub fn from_step_logits(per_step_logits: Matrix) -> Self {
        let (steps, cols) = per_step_logits.shape();
        let n = cols - 1;
        let mut probabilities = vec![f64::NEG_INFINITY; n];
        let mut eos_probabilities = Vec::with_capacity(steps);
        for s in 0..steps {
            let row = per_step_logits.row(s);
            for (p, &l) in probabilities.iter_mut().zip(row) {
                if l > *p {
                    *p = l;
                }
            }
            eos_probabilities.push(sigmoid(row[n]));
        }
        for p in &mut probabilities {
            *p = sigmoid(*p);
        }
        let k = cardinality(&eos_probabilities).min(n);
        let top_set = top_k(&probabilities, k);
        IngredientPrediction {
            probabilities,
            eos_probabilities,
            per_step_logits,
            top_set,
        }
    }

    /// EOS probability at the step that fixed the set size.
    pub fn eos_probability(&self) -> f64 {
        let k = cardinality(&self.eos_probabilities);
        self.eos_probabilities.get(k.saturating_sub(1)).copied().unwrap_or(0.0)
    }

    /// Ingredients with probability above 0.5.
    pub fn thresholded(&self) -> Vec<bool> {
        self.probabilities.iter().map(|&p| p > 0.5).collect()
    }
}

/// Set size implied by the first step whose EOS probability exceeds 0.5;
/// the number of steps when none does.
pub fn cardinality(eos_probabilities: &[f64]) -> usize {
    eos_probabilities
        .iter()
        .position(|&p| p > 0.5)
        .map(|s| s + 1)
        .unwrap_or(eos_probabilities.len())
}

/// The `k` most probable ingredients; ties go to the lower id.
pub fn top_k(probabilities: &[f64], k: usize) -> BTreeSet<usize> {
    let mut order: Vec<usize> = (0..probabilities.len()).collect();
    order.sort_by(|&a, &b| probabilities[b].total_cmp(&probabilities[a]).then(a.cmp(&b)));
    order.into_iter().take(k).collect()
}

/// Desired ingredient vector plus the step at which EOS should fire.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngredientTarget {
    pub ingredients: Vec<bool>,
    /// 1-based EOS step; 0 disables the EOS terms.
    pub eos_step: usize,
}

impl IngredientTarget {
    /// EOS fires at the size of the positive set, capped at `steps`.
    pub fn new(ingredients: Vec<bool>, steps: usize) -> Self {
        let k = ingredients.iter().filter(|&&b| b).count().min(steps);
        IngredientTarget {
            ingredients,
            eos_step: k,
        }
    }

    pub fn from_set(set: &BTreeSet<usize>, n: usize, steps: usize) -> Self {
        let mut y = vec![false; n];
        for &i in set {
            if i < n {
                y[i] = true;
            }
        }
        Self::new(y, steps)
    }

    pub fn positive_set(&self) -> BTreeSet<usize> {
        (0..self.ingredients.len()).filter(|&i| self.ingredients[i]).collect()
    }

    /// Per-step EOS targets and weights.
    pub fn eos_terms(&self, steps: usize) -> (Vec<f64>, Vec<f64>) {
        let mut t = vec![0.0; steps];
        let mut w = vec![0.0; steps];
        for s in 0..self.eos_step.min(steps) {
            w[s] = 1.0;
        }
        if self.eos_step >= 1 && self.eos_step <= steps {
            t[self.eos_step - 1] = 1.0;
        }
        (t, w)
    }
}

fn bce(p: f64, y: f64) -> f64 {
    let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
}

/// Binary cross-entropy over every ingredient plus `λ` times the EOS
/// cross-entropy over steps `1..=eos_step`.
pub fn ingredient_loss(pred: &IngredientPrediction, target: &IngredientTarget, lambda: f64) -> Result<f64> {
    if pred.probabilities.len() != target.ingredients.len() {
        return Err(Error::arg(format!(
            "prediction covers {} ingredients, target {}",
            pred.probabilities.len(),
            target.ingredients.len()
        )));
    }
    let steps = pred.eos_probabilities.len();
    if target.eos_step > steps {
        return Err(Error::arg(format!(
            "EOS step {} beyond {steps} decoder steps",
            target.eos_step
        )));
    }
    let mut loss = 0.0;
    for (&p, &y) in pred.probabilities.iter().zip(&target.ingredients) {
        loss += bce(p, if y { 1.0 } else { 0.0 });
    }
    let (t, w) = target.eos_terms(steps);
    for s in 0..steps {
        if w[s] != 0.0 {
            loss += lambda * w[s] * bce(pred.eos_probabilities[s], t[s]);
        }
    }
    Ok(loss)
}

#[derive(Debug, Clone)]
pub(crate) struct Predictor {
    z_in: Linear,
    step_emb: ParamId,
    blocks: Vec<Block>,
    ln: LayerNorm,
    out: Linear,
    steps: usize,
    n_ing: usize,
}

pub(crate) struct PredictorOut {
    /// `B × |I|` pooled logits.
    pub pooled: Var,
    /// `(B·steps) × 1` EOS logits.
    pub eos: Var,
    /// `(B·steps) × (|I| + 1)`.
    pub logits: Var,
}

impl Predictor {
    pub fn new<R: Rng>(ps: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.hidden_dim;
        Predictor {
            z_in: Linear::new(ps, "predictor.z_in", cfg.latent_dim, d, rng),
            step_emb: ps.add("predictor.step_emb", embedding(cfg.max_ingredients, d, rng)),
            blocks: stack(ps, "predictor.blocks", cfg.num_layers, d, cfg.ffn_dim, cfg.num_heads, false, rng),
            ln: LayerNorm::new(ps, "predictor.ln", d),
            out: Linear::new(ps, "predictor.out", d, cfg.ingredient_vocab_size + 1, rng),
            steps: cfg.max_ingredients,
            n_ing: cfg.ingredient_vocab_size,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn forward(&self, g: &mut Graph, z: Var, ctx: &mut Ctx) -> PredictorOut {
        let b = g.value(z).rows();
        let k = self.steps;
        let zp = self.z_in.forward(g, z);
        let rep: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat(i).take(k)).collect();
        let zp = g.gather(zp, &rep);
        let se = g.param(self.step_emb);
        let tiled: Vec<usize> = (0..b).flat_map(|_| 0..k).collect();
        let se = g.gather(se, &tiled);
        let x = g.add(zp, se);
        let x = ctx.dropout(g, x);
        let lens = vec![k; b];
        let (blocks, groups) = segment_blocks(&lens, false);
        let h = run_stack(&self.blocks, g, x, &blocks, None, ctx);
        let h = self.ln.forward(g, h);
        let logits = self.out.forward(g, h);
        let ing = g.slice_cols(logits, 0, self.n_ing);
        let pooled = g.group_max(ing, &groups);
        let eos = g.slice_cols(logits, self.n_ing, 1);
        PredictorOut { pooled, eos, logits }
    }

    /// Summed ingredient loss over the batch.
    pub fn loss(&self, g: &mut Graph, out: &PredictorOut, targets: &[IngredientTarget], lambda: f64) -> Var {
        let mut y = Vec::with_capacity(targets.len() * self.n_ing);
        for t in targets {
            y.extend(t.ingredients.iter().map(|&b| if b { 1.0 } else { 0.0 }));
        }
        let ones = vec![1.0; y.len()];
        let l_ing = g.bce_with_logits(out.pooled, &y, &ones);
        let mut et = Vec::with_capacity(targets.len() * self.steps);
        let mut ew = Vec::with_capacity(targets.len() * self.steps);
        for t in targets {
            let (a, b) = t.eos_terms(self.steps);
            et.extend(a);
            ew.extend(b.into_iter().map(|w| w * lambda));
        }
        let l_eos = g.bce_with_logits(out.eos, &et, &ew);
        g.add(l_ing, l_eos)
    }
}
