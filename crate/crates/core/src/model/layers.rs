use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{ParamStore, Tape, Tensor, TensorError, Var};

const LN_EPS: f64 = 1e-5;

/// Binds parameters of one store onto a tape, either trainable or frozen.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub store: &'a ParamStore,
    pub trainable: bool,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore, trainable: bool) -> Self {
        Self { tape, store, trainable }
    }

    pub fn p(&mut self, idx: usize) -> Var {
        self.store.bind(self.tape, idx, self.trainable)
    }
}

/// Registers freshly initialized parameters under a name prefix.
pub struct Builder<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<'a, R: Rng> Builder<'a, R> {
    /// Xavier-uniform weight matrix.
    pub fn weight(&mut self, name: &str, fan_in: usize, fan_out: usize) -> usize {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| self.rng.gen_range(-a..a)).collect();
        self.store.add(name, Tensor::new(vec![fan_in, fan_out], data).expect("shape matches"))
    }

    pub fn zeros(&mut self, name: &str, shape: Vec<usize>) -> usize {
        self.store.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, n: usize) -> usize {
        self.store.add(name, Tensor::vector(vec![1.0; n]))
    }

    pub fn normal(&mut self, name: &str, shape: Vec<usize>, std: f64) -> usize {
        let dist = Normal::new(0.0, std).expect("positive std");
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| dist.sample(self.rng)).collect();
        self.store.add(name, Tensor::new(shape, data).expect("shape matches"))
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
}

impl Linear {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = b.weight(&format!("{name}.w"), fan_in, fan_out);
        let bias = b.zeros(&format!("{name}.b"), vec![fan_out]);
        Self { w, b: bias }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var, TensorError> {
        let (w, b) = (ctx.p(self.w), ctx.p(self.b));
        let y = ctx.tape.matmul(x, w)?;
        ctx.tape.add(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: usize,
    pub bias: usize,
}

impl LayerNorm {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, dim: usize) -> Self {
        Self { gain: b.ones(&format!("{name}.gain"), dim), bias: b.zeros(&format!("{name}.bias"), vec![dim]) }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var, TensorError> {
        let (g, b) = (ctx.p(self.gain), ctx.p(self.bias));
        ctx.tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Multi-head attention output plus its probabilities, shaped `heads × queries × keys`.
pub struct Attended {
    pub out: Var,
    pub probs: Var,
}

#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, dim: usize, heads: usize) -> Self {
        Self {
            q: Linear::new(b, &format!("{name}.q"), dim, dim),
            k: Linear::new(b, &format!("{name}.k"), dim, dim),
            v: Linear::new(b, &format!("{name}.v"), dim, dim),
            o: Linear::new(b, &format!("{name}.o"), dim, dim),
            heads,
        }
    }

    /// Queries from `x` attend over `ctx_seq`. `key_mask[j]` hides key `j`.
    pub fn forward(
        &self,
        ctx: &mut Ctx<'_>,
        x: Var,
        ctx_seq: Var,
        key_mask: Option<&[bool]>,
    ) -> Result<Attended, TensorError> {
        let q = self.q.forward(ctx, x)?;
        let k = self.k.forward(ctx, ctx_seq)?;
        let v = self.v.forward(ctx, ctx_seq)?;
        let (n, dim) = (ctx.tape.shape(q)[0], ctx.tape.shape(q)[1]);
        let m = ctx.tape.shape(k)[0];
        let dh = dim / self.heads;
        let full_mask: Option<Vec<bool>> = key_mask.map(|km| (0..n).flat_map(|_| km.iter().copied()).collect());
        let mut outs = Vec::with_capacity(self.heads);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = ctx.tape.slice_cols(q, h * dh, dh)?;
            let kh = ctx.tape.slice_cols(k, h * dh, dh)?;
            let vh = ctx.tape.slice_cols(v, h * dh, dh)?;
            let s = ctx.tape.matmul_t(qh, kh)?;
            let mut s = ctx.tape.scale(s, 1.0 / (dh as f64).sqrt())?;
            if let Some(mask) = &full_mask {
                s = ctx.tape.masked_fill(s, mask, f64::NEG_INFINITY)?;
            }
            let p = ctx.tape.softmax(s)?;
            outs.push(ctx.tape.matmul(p, vh)?);
            probs.push(p);
        }
        let joined = ctx.tape.concat(&outs, 1)?;
        let out = self.o.forward(ctx, joined)?;
        let stacked = ctx.tape.concat(&probs, 0)?;
        let probs = ctx.tape.reshape(stacked, vec![self.heads, n, m])?;
        Ok(Attended { out, probs })
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, dim: usize, hidden: usize) -> Self {
        Self { up: Linear::new(b, &format!("{name}.up"), dim, hidden), down: Linear::new(b, &format!("{name}.down"), hidden, dim) }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var, TensorError> {
        let h = self.up.forward(ctx, x)?;
        let h = ctx.tape.relu(h)?;
        self.down.forward(ctx, h)
    }
}

fn residual_norm(ctx: &mut Ctx<'_>, ln: &LayerNorm, x: Var, delta: Var) -> Result<Var, TensorError> {
    let s = ctx.tape.add(x, delta)?;
    ln.forward(ctx, s)
}

/// Post-norm self-attention block: attention, add & norm, feed-forward, add & norm.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub attn: Attention,
    pub ln_attn: LayerNorm,
    pub ffn: FeedForward,
    pub ln_ffn: LayerNorm,
}

impl EncoderLayer {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, dim: usize, heads: usize) -> Self {
        Self {
            attn: Attention::new(b, &format!("{name}.attn"), dim, heads),
            ln_attn: LayerNorm::new(b, &format!("{name}.ln_attn"), dim),
            ffn: FeedForward::new(b, &format!("{name}.ffn"), dim, 4 * dim),
            ln_ffn: LayerNorm::new(b, &format!("{name}.ln_ffn"), dim),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var, mask: Option<&[bool]>) -> Result<Attended, TensorError> {
        let a = self.attn.forward(ctx, x, x, mask)?;
        let x = residual_norm(ctx, &self.ln_attn, x, a.out)?;
        let f = self.ffn.forward(ctx, x)?;
        let out = residual_norm(ctx, &self.ln_ffn, x, f)?;
        Ok(Attended { out, probs: a.probs })
    }
}

/// Runs a stack of encoder layers, returning the last layer's attention.
pub fn encode_stack(
    layers: &[EncoderLayer],
    ctx: &mut Ctx<'_>,
    mut x: Var,
    mask: Option<&[bool]>,
) -> Result<Attended, TensorError> {
    let mut probs = None;
    for layer in layers {
        let a = layer.forward(ctx, x, mask)?;
        x = a.out;
        probs = Some(a.probs);
    }
    Ok(Attended { out: x, probs: probs.expect("at least one layer") })
}

/// Self-attention over the sequence, then cross-attention to a context, then feed-forward.
#[derive(Debug, Clone)]
pub struct CrossLayer {
    pub self_attn: Attention,
    pub ln_self: LayerNorm,
    pub cross_attn: Attention,
    pub ln_cross: LayerNorm,
    pub ffn: FeedForward,
    pub ln_ffn: LayerNorm,
}

impl CrossLayer {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, dim: usize, heads: usize) -> Self {
        Self {
            self_attn: Attention::new(b, &format!("{name}.self"), dim, heads),
            ln_self: LayerNorm::new(b, &format!("{name}.ln_self"), dim),
            cross_attn: Attention::new(b, &format!("{name}.cross"), dim, heads),
            ln_cross: LayerNorm::new(b, &format!("{name}.ln_cross"), dim),
            ffn: FeedForward::new(b, &format!("{name}.ffn"), dim, 4 * dim),
            ln_ffn: LayerNorm::new(b, &format!("{name}.ln_ffn"), dim),
        }
    }

    pub fn forward(
        &self,
        ctx: &mut Ctx<'_>,
        x: Var,
        context: Var,
        context_mask: Option<&[bool]>,
    ) -> Result<Attended, TensorError> {
        let s = self.self_attn.forward(ctx, x, x, None)?;
        let x = residual_norm(ctx, &self.ln_self, x, s.out)?;
        let c = self.cross_attn.forward(ctx, x, context, context_mask)?;
        let x = residual_norm(ctx, &self.ln_cross, x, c.out)?;
        let f = self.ffn.forward(ctx, x)?;
        let out = residual_norm(ctx, &self.ln_ffn, x, f)?;
        Ok(Attended { out, probs: c.probs })
    }
}

pub fn cross_stack(
    layers: &[CrossLayer],
    ctx: &mut Ctx<'_>,
    mut x: Var,
    context: Var,
    context_mask: Option<&[bool]>,
) -> Result<Attended, TensorError> {
    let mut probs = None;
    for layer in layers {
        let a = layer.forward(ctx, x, context, context_mask)?;
        x = a.out;
        probs = Some(a.probs);
    }
    Ok(Attended { out: x, probs: probs.expect("at least one layer") })
}

/// Two-layer scoring head: linear, relu, layer norm, linear to one score per row.
#[derive(Debug, Clone)]
pub struct ScoreHead {
    pub fc: Linear,
    pub ln: LayerNorm,
    pub out: Linear,
}

impl ScoreHead {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, dim: usize) -> Self {
        Self {
            fc: Linear::new(b, &format!("{name}.fc"), dim, dim),
            ln: LayerNorm::new(b, &format!("{name}.ln"), dim),
            out: Linear::new(b, &format!("{name}.out"), dim, 1),
        }
    }

    /// Scores for each row of `x`, as a rank-1 tensor.
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var, TensorError> {
        let h = self.fc.forward(ctx, x)?;
        let h = ctx.tape.relu(h)?;
        let h = self.ln.forward(ctx, h)?;
        let s = self.out.forward(ctx, h)?;
        let n = ctx.tape.shape(s)[0];
        ctx.tape.reshape(s, vec![n])
    }
}
