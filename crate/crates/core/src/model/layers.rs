use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{AttnBlock, Graph, Matrix, ParamId, ParamStore, Var};

/// Forward-pass mode. Dropout is active only when an rng is supplied.
pub struct Ctx<'r> {
    pub rng: Option<&'r mut ChaCha8Rng>,
    pub dropout: f64,
}

impl Ctx<'_> {
    pub fn eval() -> Ctx<'static> {
        Ctx {
            rng: None,
            dropout: 0.0,
        }
    }

    pub fn dropout(&mut self, g: &mut Graph, x: Var) -> Var {
        let p = self.dropout;
        let Some(rng) = self.rng.as_deref_mut() else {
            return x;
        };
        if p <= 0.0 {
            return x;
        }
        let (r, c) = g.value(x).shape();
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..r * c)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let m = g.input(Matrix::from_vec(r, c, mask));
        g.mul(x, m)
    }
}

pub(crate) fn init<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let scale = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::uniform(rows, cols, scale, rng)
}

pub(crate) fn embedding<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    Matrix::uniform(rows, cols, 0.1, rng)
}

#[derive(Debug, Clone)]
pub(crate) struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(ps: &mut ParamStore, name: &str, inp: usize, out: usize, rng: &mut R) -> Self {
        Linear {
            w: ps.add(format!("{name}.w"), init(inp, out, rng)),
            b: ps.add(format!("{name}.b"), Matrix::zeros(1, out)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: ps.add(format!("{name}.gain"), Matrix::filled(1, dim, 1.0)),
            bias: ps.add(format!("{name}.bias"), Matrix::zeros(1, dim)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias)
    }
}

#[derive(Debug, Clone)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl Attention {
    fn new<R: Rng>(ps: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut R) -> Self {
        Attention {
            q: Linear::new(ps, &format!("{name}.q"), d, d, rng),
            k: Linear::new(ps, &format!("{name}.k"), d, d, rng),
            v: Linear::new(ps, &format!("{name}.v"), d, d, rng),
            o: Linear::new(ps, &format!("{name}.o"), d, d, rng),
            heads,
        }
    }

    fn forward(&self, g: &mut Graph, x: Var, mem: Var, blocks: &[AttnBlock]) -> Var {
        let q = self.q.forward(g, x);
        let k = self.k.forward(g, mem);
        let v = self.v.forward(g, mem);
        let a = g.attention(q, k, v, self.heads, blocks);
        self.o.forward(g, a)
    }
}

/// Pre-norm transformer block with optional cross-attention.
#[derive(Debug, Clone)]
pub(crate) struct Block {
    ln1: LayerNorm,
    attn: Attention,
    cross: Option<(LayerNorm, Attention)>,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

pub(crate) struct Memory<'b> {
    pub rows: Var,
    pub blocks: &'b [AttnBlock],
}

impl Block {
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        name: &str,
        d: usize,
        ffn: usize,
        heads: usize,
        cross: bool,
        rng: &mut R,
    ) -> Self {
        let ln1 = LayerNorm::new(ps, &format!("{name}.ln1"), d);
        let attn = Attention::new(ps, &format!("{name}.attn"), d, heads, rng);
        let cross = cross.then(|| {
            (
                LayerNorm::new(ps, &format!("{name}.lnx"), d),
                Attention::new(ps, &format!("{name}.cross"), d, heads, rng),
            )
        });
        Block {
            ln1,
            attn,
            cross,
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), d),
            ff1: Linear::new(ps, &format!("{name}.ff1"), d, ffn, rng),
            ff2: Linear::new(ps, &format!("{name}.ff2"), ffn, d, rng),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        blocks: &[AttnBlock],
        mem: Option<&Memory>,
        ctx: &mut Ctx,
    ) -> Var {
        let h = self.ln1.forward(g, x);
        let a = self.attn.forward(g, h, h, blocks);
        let a = ctx.dropout(g, a);
        let mut x = g.add(x, a);
        if let (Some((ln, cross)), Some(m)) = (&self.cross, mem) {
            let h = ln.forward(g, x);
            let a = cross.forward(g, h, m.rows, m.blocks);
            let a = ctx.dropout(g, a);
            x = g.add(x, a);
        }
        let h = self.ln2.forward(g, x);
        let f = self.ff1.forward(g, h);
        let f = g.gelu(f);
        let f = self.ff2.forward(g, f);
        let f = ctx.dropout(g, f);
        g.add(x, f)
    }
}

pub(crate) fn stack<R: Rng>(
    ps: &mut ParamStore,
    name: &str,
    n: usize,
    d: usize,
    ffn: usize,
    heads: usize,
    cross: bool,
    rng: &mut R,
) -> Vec<Block> {
    (0..n)
        .map(|i| Block::new(ps, &format!("{name}.{i}"), d, ffn, heads, cross, rng))
        .collect()
}

pub(crate) fn run_stack(
    layers: &[Block],
    g: &mut Graph,
    mut x: Var,
    blocks: &[AttnBlock],
    mem: Option<&Memory>,
    ctx: &mut Ctx,
) -> Var {
    for b in layers {
        x = b.forward(g, x, blocks, mem, ctx);
    }
    x
}

/// Square non-causal blocks for consecutive segments of the given lengths.
pub(crate) fn segment_blocks(lens: &[usize], causal: bool) -> (Vec<AttnBlock>, Vec<(usize, usize)>) {
    let mut blocks = Vec::with_capacity(lens.len());
    let mut segs = Vec::with_capacity(lens.len());
    let mut start = 0;
    for &n in lens {
        blocks.push(AttnBlock::square(start, n, causal));
        segs.push((start, n));
        start += n;
    }
    (blocks, segs)
}
