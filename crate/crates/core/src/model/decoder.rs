use rand::Rng;

use super::layers::{embedding, run_stack, segment_blocks, stack, Block, Ctx, LayerNorm, Linear, Memory};
use super::ModelConfig;
use crate::corpus::tokenizer::{TokenVocab, BOS, EOS, SEP};
use crate::tensor::{AttnBlock, Graph, ParamId, ParamStore, Var};

/// `BOS s1 SEP s2 ... EOS`, truncated so that the decoder input fits in
/// `max_tokens` positions.
pub fn instruction_sequence<S: AsRef<str>>(steps: &[S], vocab: &TokenVocab, max_tokens: usize) -> Vec<usize> {
    let mut seq = vec![BOS];
    for (i, s) in steps.iter().enumerate() {
        if i > 0 {
            seq.push(SEP);
        }
        seq.extend(vocab.encode(s.as_ref()));
    }
    seq.truncate(max_tokens);
    seq.push(EOS);
    seq
}

/// Splits generated ids on `SEP`, dropping `BOS`/`EOS` and empty sentences.
pub fn split_sentences(ids: &[usize], vocab: &TokenVocab) -> Vec<String> {
    ids.split(|&t| t == SEP)
        .map(|chunk| {
            let body: Vec<usize> = chunk.iter().copied().filter(|&t| t != BOS && t != EOS).collect();
            vocab.decode(&body)
        })
        .filter(|s| !s.is_empty())
        .collect()
}

#[derive(Debug, Clone)]
pub(crate) struct Decoder {
    z_mem: Linear,
    ing_emb: ParamId,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    ln: LayerNorm,
    out: Linear,
}

impl Decoder {
    pub fn new<R: Rng>(ps: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.hidden_dim;
        Decoder {
            z_mem: Linear::new(ps, "decoder.z_mem", cfg.latent_dim, d, rng),
            ing_emb: ps.add("decoder.ing_emb", embedding(cfg.ingredient_vocab_size, d, rng)),
            tok_emb: ps.add("decoder.tok_emb", embedding(cfg.token_vocab_size, d, rng)),
            pos_emb: ps.add("decoder.pos_emb", embedding(cfg.max_instruction_tokens, d, rng)),
            blocks: stack(ps, "decoder.blocks", cfg.num_layers, d, cfg.ffn_dim, cfg.num_heads, true, rng),
            ln: LayerNorm::new(ps, "decoder.ln", d),
            out: Linear::new(ps, "decoder.out", d, cfg.token_vocab_size, rng),
        }
    }

    /// Next-token logits for each position of each input sequence, rows
    /// concatenated in batch order.
    pub fn forward(
        &self,
        g: &mut Graph,
        z: Var,
        sets: &[Vec<usize>],
        inputs: &[&[usize]],
        ctx: &mut Ctx,
    ) -> Var {
        let b = sets.len();
        assert_eq!(g.value(z).rows(), b, "one latent row per recipe");
        assert_eq!(inputs.len(), b, "one input sequence per recipe");
        // Memory: one slot for z followed by one per ingredient.
        let zm = self.z_mem.forward(g, z);
        let ie = g.param(self.ing_emb);
        let table = g.concat_rows(&[zm, ie]);
        let mut mem_rows = Vec::new();
        let mut mem_blocks = Vec::with_capacity(b);
        let mut q_start = 0;
        for (i, (set, inp)) in sets.iter().zip(inputs).enumerate() {
            let k_start = mem_rows.len();
            mem_rows.push(i);
            mem_rows.extend(set.iter().map(|&id| b + id));
            mem_blocks.push(AttnBlock {
                q_start,
                q_len: inp.len(),
                k_start,
                k_len: 1 + set.len(),
                causal: false,
            });
            q_start += inp.len();
        }
        let mem = g.gather(table, &mem_rows);

        let ids: Vec<usize> = inputs.iter().flat_map(|s| s.iter().copied()).collect();
        let pos: Vec<usize> = inputs.iter().flat_map(|s| 0..s.len()).collect();
        let lens: Vec<usize> = inputs.iter().map(|s| s.len()).collect();
        let (blocks, _) = segment_blocks(&lens, true);
        let te = g.param(self.tok_emb);
        let pe = g.param(self.pos_emb);
        let x = g.gather(te, &ids);
        let p = g.gather(pe, &pos);
        let x = g.add(x, p);
        let x = ctx.dropout(g, x);
        let memory = Memory {
            rows: mem,
            blocks: &mem_blocks,
        };
        let h = run_stack(&self.blocks, g, x, &blocks, Some(&memory), ctx);
        let h = self.ln.forward(g, h);
        self.out.forward(g, h)
    }
}
