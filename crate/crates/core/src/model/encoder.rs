use rand::Rng;

use super::layers::{embedding, run_stack, segment_blocks, stack, Block, Ctx, LayerNorm, Linear};
use super::ModelConfig;
use crate::corpus::tokenizer::{TokenVocab, UNK};
use crate::corpus::NoisedRecipe;
use crate::tensor::{Graph, ParamId, ParamStore, Var};
use crate::{Error, Result};

/// Token ids of every sentence of a (possibly noised) recipe; `None` marks a
/// masked sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderInput {
    pub title: Option<Vec<usize>>,
    pub ingredients: Vec<Option<Vec<usize>>>,
    pub instructions: Vec<Option<Vec<usize>>>,
}

impl EncoderInput {
    pub fn from_noised(n: &NoisedRecipe, vocab: &TokenVocab, cfg: &ModelConfig) -> Result<Self> {
        let enc = |s: &str| {
            let mut ids = vocab.encode(s);
            if ids.is_empty() {
                ids.push(UNK);
            }
            ids.truncate(cfg.max_sentence_tokens);
            ids
        };
        let mut truncated = false;
        let mut list = |items: &[String], masked: &std::collections::BTreeSet<usize>| {
            if items.len() > cfg.max_sentences {
                truncated = true;
            }
            items
                .iter()
                .take(cfg.max_sentences)
                .enumerate()
                .map(|(i, s)| (!masked.contains(&i)).then(|| enc(s)))
                .collect::<Vec<_>>()
        };
        let ingredients = list(&n.base.ingredient_lines, &n.masked_ingredients);
        let instructions = list(&n.base.instructions, &n.masked_instructions);
        if truncated {
            log::warn!(
                "recipe {}: more than {} sentences in a list, truncating",
                n.base.id,
                cfg.max_sentences
            );
        }
        let title = (!n.base.title.trim().is_empty()).then(|| enc(&n.base.title));
        let input = EncoderInput {
            title,
            ingredients,
            instructions,
        };
        if input.visible_sentences() == 0 {
            return Err(Error::arg(format!(
                "recipe {} has no visible title, ingredient or instruction",
                n.base.id
            )));
        }
        if input.ingredients.is_empty() || input.instructions.is_empty() {
            return Err(Error::arg(format!(
                "recipe {} needs at least one ingredient line and one instruction",
                n.base.id
            )));
        }
        Ok(input)
    }

    pub fn visible_sentences(&self) -> usize {
        self.title.iter().count()
            + self.ingredients.iter().flatten().count()
            + self.instructions.iter().flatten().count()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Encoder {
    tok_emb: ParamId,
    tok_pos: ParamId,
    sentence: Vec<(Vec<Block>, LayerNorm)>,
    mask_emb: ParamId,
    ing_set: Vec<Block>,
    ing_ln: LayerNorm,
    ing_pos: Option<ParamId>,
    ins_set: Vec<Block>,
    ins_ln: LayerNorm,
    ins_pos: ParamId,
    proj: Linear,
}

impl Encoder {
    pub fn new<R: Rng>(ps: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.hidden_dim;
        let tok_emb = ps.add("encoder.tok_emb", embedding(cfg.token_vocab_size, d, rng));
        let tok_pos = ps.add("encoder.tok_pos", embedding(cfg.max_sentence_tokens, d, rng));
        let n_sent = if cfg.share_sentence_encoder { 1 } else { 3 };
        let sentence = (0..n_sent)
            .map(|i| {
                (
                    stack(ps, &format!("encoder.sent{i}"), cfg.num_layers, d, cfg.ffn_dim, cfg.num_heads, false, rng),
                    LayerNorm::new(ps, &format!("encoder.sent{i}.ln"), d),
                )
            })
            .collect();
        let mask_emb = ps.add("encoder.mask_emb", embedding(1, d, rng));
        let ing_set = stack(ps, "encoder.ing_set", cfg.num_layers, d, cfg.ffn_dim, cfg.num_heads, false, rng);
        let ing_ln = LayerNorm::new(ps, "encoder.ing_set.ln", d);
        let ing_pos = cfg
            .ingredient_set_positions
            .then(|| ps.add("encoder.ing_pos", embedding(cfg.max_sentences, d, rng)));
        let ins_set = stack(ps, "encoder.ins_set", cfg.num_layers, d, cfg.ffn_dim, cfg.num_heads, false, rng);
        let ins_ln = LayerNorm::new(ps, "encoder.ins_set.ln", d);
        let ins_pos = ps.add("encoder.ins_pos", embedding(cfg.max_sentences, d, rng));
        let proj = Linear::new(ps, "encoder.proj", 3 * d, cfg.latent_dim, rng);
        Encoder {
            tok_emb,
            tok_pos,
            sentence,
            mask_emb,
            ing_set,
            ing_ln,
            ing_pos,
            ins_set,
            ins_ln,
            ins_pos,
            proj,
        }
    }

    /// Sentence vectors for a list of token sequences, one row each.
    fn sentences(&self, g: &mut Graph, which: usize, seqs: &[&[usize]], ctx: &mut Ctx) -> Var {
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
        let pos: Vec<usize> = seqs.iter().flat_map(|s| 0..s.len()).collect();
        let lens: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
        let (blocks, segs) = segment_blocks(&lens, false);
        let emb = g.param(self.tok_emb);
        let pemb = g.param(self.tok_pos);
        let x = g.gather(emb, &ids);
        let p = g.gather(pemb, &pos);
        let x = g.add(x, p);
        let x = ctx.dropout(g, x);
        let (layers, ln) = &self.sentence[which.min(self.sentence.len() - 1)];
        let h = run_stack(layers, g, x, &blocks, None, ctx);
        let h = ln.forward(g, h);
        g.segment_mean(h, &segs)
    }

    /// Latent vectors, one row per input.
    pub fn forward(&self, g: &mut Graph, inputs: &[EncoderInput], ctx: &mut Ctx) -> Var {
        // Sentence table: [titles | ingredient lines | steps | mask row].
        let mut kinds: [Vec<&[usize]>; 3] = Default::default();
        let mut title_idx = Vec::with_capacity(inputs.len());
        let mut ing_idx = Vec::new();
        let mut ins_idx = Vec::new();
        let mut ing_lens = Vec::with_capacity(inputs.len());
        let mut ins_lens = Vec::with_capacity(inputs.len());
        let mut ins_pos = Vec::new();
        let mut ing_pos = Vec::new();
        // Placeholder index for masked slots, patched once table size is known.
        const MASKED: usize = usize::MAX;
        for inp in inputs {
            title_idx.push(match &inp.title {
                Some(t) => {
                    kinds[0].push(t);
                    (0, kinds[0].len() - 1)
                }
                None => (3, MASKED),
            });
            for s in &inp.ingredients {
                ing_idx.push(match s {
                    Some(t) => {
                        kinds[1].push(t);
                        (1, kinds[1].len() - 1)
                    }
                    None => (3, MASKED),
                });
            }
            ing_pos.extend(0..inp.ingredients.len());
            ing_lens.push(inp.ingredients.len());
            for s in &inp.instructions {
                ins_idx.push(match s {
                    Some(t) => {
                        kinds[2].push(t);
                        (2, kinds[2].len() - 1)
                    }
                    None => (3, MASKED),
                });
            }
            ins_pos.extend(0..inp.instructions.len());
            ins_lens.push(inp.instructions.len());
        }
        let mut parts = Vec::new();
        let mut offsets = [0usize; 4];
        let mut total = 0;
        if self.sentence.len() == 1 {
            // One pass over all sentences when weights are shared.
            let all: Vec<&[usize]> = kinds.iter().flatten().copied().collect();
            if !all.is_empty() {
                parts.push(self.sentences(g, 0, &all, ctx));
            }
            for k in 0..3 {
                offsets[k] = total;
                total += kinds[k].len();
            }
        } else {
            for k in 0..3 {
                offsets[k] = total;
                if !kinds[k].is_empty() {
                    parts.push(self.sentences(g, k, &kinds[k], ctx));
                    total += kinds[k].len();
                }
            }
        }
        offsets[3] = total;
        let mask = g.param(self.mask_emb);
        parts.push(mask);
        let table = g.concat_rows(&parts);
        let resolve = |(k, i): (usize, usize)| if i == MASKED { offsets[3] } else { offsets[k] + i };
        let title_rows: Vec<usize> = title_idx.into_iter().map(resolve).collect();
        let ing_rows: Vec<usize> = ing_idx.into_iter().map(resolve).collect();
        let ins_rows: Vec<usize> = ins_idx.into_iter().map(resolve).collect();

        let t = g.gather(table, &title_rows);

        let (blocks, segs) = segment_blocks(&ing_lens, false);
        let mut xa = g.gather(table, &ing_rows);
        if let Some(p) = self.ing_pos {
            let pe = g.param(p);
            let pe = g.gather(pe, &ing_pos);
            xa = g.add(xa, pe);
        }
        let ha = run_stack(&self.ing_set, g, xa, &blocks, None, ctx);
        let ha = self.ing_ln.forward(g, ha);
        let a = g.segment_mean(ha, &segs);

        let (blocks, segs) = segment_blocks(&ins_lens, false);
        let xs = g.gather(table, &ins_rows);
        let pe = g.param(self.ins_pos);
        let pe = g.gather(pe, &ins_pos);
        let xs = g.add(xs, pe);
        let hs = run_stack(&self.ins_set, g, xs, &blocks, None, ctx);
        let hs = self.ins_ln.forward(g, hs);
        let s = g.segment_mean(hs, &segs);

        let h = g.concat_cols(&[t, a, s]);
        let h = ctx.dropout(g, h);
        let z = self.proj.forward(g, h);
        g.tanh(z)
    }
}
