//! Multi-head attention, layer-norm and MLP sublayers shared by the image,
//! text and fusion encoders.
//!
//! Sublayers are pre-norm: `x + Sublayer(LN(x))`.

use crate::error::{dim_err, Error, Result};
use crate::tensor::{gelu, layer_norm, linear, softmax_in_place, ParamInit, Tensor};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormWeights {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNormWeights {
    pub fn unit(c: usize) -> Self {
        Self {
            gain: Tensor::filled(&[c], 1.0),
            bias: Tensor::zeros(&[c]),
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        layer_norm(x, &self.gain, &self.bias, LN_EPS)
    }
}

/// Dense layer with bias, `x · weight + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn init(c_in: usize, c_out: usize, init: &mut ParamInit) -> Self {
        Self {
            weight: init.matrix(c_in, c_out),
            bias: Tensor::zeros(&[c_out]),
        }
    }

    pub fn zeros(c_in: usize, c_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[c_in, c_out]),
            bias: Tensor::zeros(&[c_out]),
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        linear(x, &self.weight, Some(&self.bias))
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn zero_out(&mut self) {
        self.weight.data_mut().fill(0.0);
        self.bias.data_mut().fill(0.0);
    }
}

/// Parameters of one pre-norm attention sublayer.
///
/// Heads split the projected width into contiguous `C / heads` slices. The
/// context norm is present only for cross-attention, where keys and values
/// come from a different token set than the queries.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub heads: usize,
    pub norm: LayerNormWeights,
    pub context_norm: Option<LayerNormWeights>,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    /// Relative-position bias table, `(2·win − 1)² × heads`.
    pub rel_pos_bias: Option<Tensor>,
}

impl AttentionWeights {
    pub fn init_self(c: usize, heads: usize, init: &mut ParamInit) -> Self {
        Self {
            heads,
            norm: LayerNormWeights::unit(c),
            context_norm: None,
            query: Linear::init(c, c, init),
            key: Linear::init(c, c, init),
            value: Linear::init(c, c, init),
            output: Linear::init(c, c, init),
            rel_pos_bias: None,
        }
    }

    /// Cross-attention with queries of width `c` and context of width `c_ctx`.
    pub fn init_cross(c: usize, c_ctx: usize, heads: usize, init: &mut ParamInit) -> Self {
        Self {
            heads,
            norm: LayerNormWeights::unit(c),
            context_norm: Some(LayerNormWeights::unit(c_ctx)),
            query: Linear::init(c, c, init),
            key: Linear::init(c_ctx, c, init),
            value: Linear::init(c_ctx, c, init),
            output: Linear::init(c, c, init),
            rel_pos_bias: None,
        }
    }

    pub fn with_rel_pos_bias(mut self, win: usize, init: &mut ParamInit) -> Self {
        let n = (2 * win - 1) * (2 * win - 1);
        // fan-in 2500 gives a ±0.02 range
        self.rel_pos_bias = Some(init.uniform(&[n, self.heads], 2500));
        self
    }

    pub fn width(&self) -> usize {
        self.query.out_dim()
    }

    pub fn check(&self, c: usize) -> Result<()> {
        if self.heads == 0 || !c.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "{} heads do not divide {c} channels",
                self.heads
            )));
        }
        if self.query.in_dim() != c || self.width() != c || self.output.out_dim() != c {
            return dim_err(format!(
                "attention weights of width {} applied to {c}-channel tokens",
                self.query.in_dim()
            ));
        }
        Ok(())
    }
}

/// Projected queries, keys and values for a token set, heads still packed.
pub(crate) struct Projected {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
}

/// Scaled dot-product attention for one group of queries against one group
/// of keys/values, all heads. Returns the concatenated head outputs (before
/// the output projection) and, when requested, one n×m probability matrix
/// per head.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attend_group(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    n: usize,
    m: usize,
    c: usize,
    heads: usize,
    key_mask: Option<&[bool]>,
    bias: Option<&dyn Fn(usize, usize, usize) -> f64>,
    mut probs_out: Option<&mut Vec<Tensor>>,
) -> Vec<f64> {
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; n * c];
    let mut scores = vec![0.0; m];
    for h in 0..heads {
        let off = h * dh;
        let mut probs = probs_out.as_ref().map(|_| Vec::with_capacity(n * m));
        for i in 0..n {
            let qi = &q[i * c + off..i * c + off + dh];
            for (j, s) in scores.iter_mut().enumerate() {
                let kj = &k[j * c + off..j * c + off + dh];
                let mut dotp = 0.0;
                for (a, b) in qi.iter().zip(kj) {
                    dotp += a * b;
                }
                *s = dotp * scale;
                if let Some(b) = bias {
                    *s += b(h, i, j);
                }
            }
            if let Some(mask) = key_mask {
                for (s, &keep) in scores.iter_mut().zip(mask) {
                    if !keep {
                        *s = f64::NEG_INFINITY;
                    }
                }
            }
            softmax_in_place(&mut scores, 1.0);
            let oi = &mut out[i * c + off..i * c + off + dh];
            for (j, &p) in scores.iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                let vj = &v[j * c + off..j * c + off + dh];
                for (o, &vv) in oi.iter_mut().zip(vj) {
                    *o += p * vv;
                }
            }
            if let Some(p) = probs.as_mut() {
                p.extend_from_slice(&scores);
            }
        }
        if let (Some(sink), Some(p)) = (probs_out.as_deref_mut(), probs) {
            sink.push(Tensor::new(vec![n, m], p).expect("probability block shape"));
        }
    }
    out
}

/// Result of a sequence attention call.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// `x + Attn(LN(x), context)`.
    pub output: Tensor,
    /// Per-head probability matrices (queries × keys), when requested.
    pub probs: Vec<Tensor>,
}

/// Pre-norm residual attention over a token sequence `x: n×C`.
///
/// With `context = None` this is self-attention; otherwise keys and values
/// come from `context: m×C_ctx`. `key_mask[j] == false` excludes key `j`.
pub fn sequence_attention(
    x: &Tensor,
    context: Option<&Tensor>,
    w: &AttentionWeights,
    key_mask: Option<&[bool]>,
    keep_probs: bool,
) -> Result<AttentionOutput> {
    x.expect_rank(2, "sequence_attention")?;
    let (n, c) = (x.shape()[0], x.shape()[1]);
    w.check(c)?;
    let normed = w.norm.apply(x)?;
    let ctx_normed = match (context, &w.context_norm) {
        (Some(ctx), Some(norm)) => {
            ctx.expect_rank(2, "attention context")?;
            norm.apply(ctx)?
        }
        (Some(ctx), None) => ctx.clone(),
        (None, _) => normed.clone(),
    };
    if ctx_normed.last_dim() != w.key.in_dim() {
        return dim_err(format!(
            "attention context width {} does not match key projection {:?}",
            ctx_normed.last_dim(),
            w.key.weight.shape()
        ));
    }
    let m = ctx_normed.shape()[0];
    if let Some(mask) = key_mask {
        if mask.len() != m {
            return dim_err(format!("key mask of length {} for {m} keys", mask.len()));
        }
    }
    let p = Projected {
        q: w.query.apply(&normed)?,
        k: w.key.apply(&ctx_normed)?,
        v: w.value.apply(&ctx_normed)?,
    };
    let mut probs = Vec::new();
    let mixed = attend_group(
        p.q.data(),
        p.k.data(),
        p.v.data(),
        n,
        m,
        c,
        w.heads,
        key_mask,
        None,
        keep_probs.then_some(&mut probs),
    );
    let delta = w.output.apply(&Tensor::new(vec![n, c], mixed)?)?;
    Ok(AttentionOutput {
        output: x.add(&delta)?,
        probs,
    })
}

/// Position-wise feed-forward sublayer `x + W2 · gelu(W1 · LN(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub norm: LayerNormWeights,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn init(c: usize, hidden: usize, init: &mut ParamInit) -> Self {
        Self {
            norm: LayerNormWeights::unit(c),
            fc1: Linear::init(c, hidden, init),
            fc2: Linear::init(hidden, c, init),
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let h = gelu(&self.fc1.apply(&self.norm.apply(x)?)?);
        x.add(&self.fc2.apply(&h)?)
    }
}
