//! Neural building blocks: linear maps, attention, encoder layers, conv blocks.
//!
//! Layers only hold [`ParamId`]s. Values come from a [`Bound`] store at call
//! time, which lets one layer definition run in `f32` and `f64`.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::params::{Bound, Builder, Init, ParamId};
use crate::tensor::{Float, Result, Tensor, TensorError, Var};

pub const BN_MOMENTUM: f64 = 0.1;
pub const NORM_EPS: f64 = 1e-5;

/// Per-forward state: train/eval mode, dropout stream, and side outputs.
pub struct Ctx<F> {
    train: bool,
    rng: Xoshiro256PlusPlus,
    /// Batch statistics observed by batch-norm layers in train mode.
    pub bn_updates: Vec<BnUpdate<F>>,
    /// Attention weights, when recording is enabled.
    pub attention: Option<Vec<(String, Tensor<F>)>>,
    /// Intermediate shapes, when tracing is enabled.
    pub shapes: Option<Vec<(String, Vec<usize>)>>,
}

impl<F: Float> Ctx<F> {
    pub fn eval() -> Self {
        Self {
            train: false,
            rng: Xoshiro256PlusPlus::seed_from_u64(0),
            bn_updates: Vec::new(),
            attention: None,
            shapes: None,
        }
    }

    pub fn train(seed: u64) -> Self {
        Self {
            train: true,
            rng: Xoshiro256PlusPlus::seed_from_u64(seed),
            bn_updates: Vec::new(),
            attention: None,
            shapes: None,
        }
    }

    pub fn recording(mut self) -> Self {
        self.attention = Some(Vec::new());
        self
    }

    pub fn tracing(mut self) -> Self {
        self.shapes = Some(Vec::new());
        self
    }

    pub fn trace(&mut self, name: impl FnOnce() -> String, x: Var<'_, F>) {
        if let Some(list) = &mut self.shapes {
            list.push((name(), x.shape()));
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn dropout<'g>(&mut self, x: Var<'g, F>, p: f64) -> Result<Var<'g, F>> {
        if self.train {
            x.dropout(p, &mut self.rng)
        } else {
            Ok(x)
        }
    }

    fn record(&mut self, name: &str, w: Var<'_, F>) {
        if let Some(list) = &mut self.attention {
            list.push((name.to_string(), w.value()));
        }
    }
}

/// Batch statistics to fold into running buffers after a train step.
#[derive(Debug, Clone)]
pub struct BnUpdate<F> {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub mean: Vec<F>,
    /// Biased (population) variance of the batch.
    pub var: Vec<F>,
    pub count: usize,
}

impl<F: Float> BnUpdate<F> {
    /// `running = (1 - m) * running + m * batch`, with unbiased batch variance.
    pub fn apply(&self, store: &mut crate::params::ParamStore<F>, momentum: f64) {
        let m = F::cst(momentum);
        let keep = F::one() - m;
        let unbias = if self.count > 1 {
            F::cst(self.count as f64 / (self.count - 1) as f64)
        } else {
            F::one()
        };
        for (r, &b) in store.get_mut(self.mean_id).data_mut().iter_mut().zip(&self.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in store.get_mut(self.var_id).data_mut().iter_mut().zip(&self.var) {
            *r = keep * *r + m * b * unbias;
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    /// Uniform(±1/sqrt(din)) weights and bias.
    pub fn new(b: &mut Builder<'_>, name: &str, din: usize, dout: usize) -> Self {
        let bound = 1.0 / (din as f64).sqrt();
        let mut s = b.sub(name);
        Self {
            w: s.param("weight", &[din, dout], Init::Uniform(bound)),
            b: Some(s.param("bias", &[dout], Init::Uniform(bound))),
            din,
            dout,
        }
    }

    pub fn with_init(b: &mut Builder<'_>, name: &str, din: usize, dout: usize, w: Init, bias: bool) -> Self {
        let mut s = b.sub(name);
        Self {
            w: s.param("weight", &[din, dout], w),
            b: bias.then(|| s.param("bias", &[dout], Init::Zeros)),
            din,
            dout,
        }
    }

    pub fn forward<'g, F: Float>(&self, p: &Bound<'_, 'g, F>, x: Var<'g, F>) -> Result<Var<'g, F>> {
        x.linear(p.var(self.w), self.b.map(|b| p.var(b)))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(b: &mut Builder<'_>, name: &str, d: usize) -> Self {
        let mut s = b.sub(name);
        Self {
            gamma: s.param("weight", &[d], Init::Ones),
            beta: s.param("bias", &[d], Init::Zeros),
        }
    }

    pub fn forward<'g, F: Float>(&self, p: &Bound<'_, 'g, F>, x: Var<'g, F>) -> Result<Var<'g, F>> {
        x.layer_norm(p.var(self.gamma), p.var(self.beta), F::cst(NORM_EPS))
    }
}

/// Batch normalization over axis 1 of `[B, C, ...]`.
#[derive(Debug, Clone, Copy)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(b: &mut Builder<'_>, name: &str, c: usize) -> Self {
        let mut s = b.sub(name);
        Self {
            gamma: s.param("weight", &[c], Init::Ones),
            beta: s.param("bias", &[c], Init::Zeros),
            running_mean: s.buffer("running_mean", Tensor::zeros(&[c])),
            running_var: s.buffer("running_var", Tensor::full(&[c], 1.0)),
        }
    }

    pub fn forward<'g, F: Float>(&self, p: &Bound<'_, 'g, F>, ctx: &mut Ctx<F>, x: Var<'g, F>) -> Result<Var<'g, F>> {
        let (gamma, beta) = (p.var(self.gamma), p.var(self.beta));
        let eps = F::cst(NORM_EPS);
        if ctx.is_train() {
            let shape = x.shape();
            let count = shape[0] * shape[2..].iter().product::<usize>();
            let (y, mean, var) = x.batch_norm(gamma, beta, eps)?;
            ctx.bn_updates.push(BnUpdate {
                mean_id: self.running_mean,
                var_id: self.running_var,
                mean,
                var,
                count,
            });
            Ok(y)
        } else {
            x.batch_norm_fixed(gamma, beta, p.data(self.running_mean), p.data(self.running_var), eps)
        }
    }
}

/// Fixed sinusoidal table: `sin` on even columns, `cos` on odd ones.
pub fn positional_encoding<F: Float>(length: usize, d_model: usize) -> Tensor<F> {
    Tensor::from_fn(&[length, d_model], |i| {
        let (pos, col) = (i / d_model, i % d_model);
        let pair = (col / 2 * 2) as f64;
        let angle = pos as f64 / 10000f64.powf(pair / d_model as f64);
        F::cst(if col % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// `softmax(q kᵀ / sqrt(d)) v` over `[B, T, d]` inputs (any leading batch axes).
pub fn scaled_dot_product_attention<'g, F: Float>(
    q: Var<'g, F>,
    k: Var<'g, F>,
    v: Var<'g, F>,
) -> Result<(Var<'g, F>, Var<'g, F>)> {
    let (sq, sk) = (q.shape(), k.shape());
    let d = *sq.last().ok_or(TensorError::Empty { op: "attention" })?;
    if sk.len() < 2 || sk[sk.len() - 2] == 0 {
        return Err(TensorError::Empty { op: "attention" });
    }
    if *sk.last().unwrap() != d {
        return Err(TensorError::Shape {
            op: "attention",
            lhs: sq,
            rhs: sk,
        });
    }
    let scores = q.matmul_nt(k, F::cst(1.0 / (d as f64).sqrt()))?;
    let w = scores.softmax(scores.shape().len() - 1)?;
    Ok((w.matmul(v)?, w))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
}

impl EncoderParams {
    pub fn validate(&self, what: &str) -> std::result::Result<(), String> {
        if self.d_model == 0 || self.heads == 0 || self.ffn_dim == 0 {
            return Err(format!("{what}: dimensions must be positive"));
        }
        if self.d_model % self.heads != 0 {
            return Err(format!(
                "{what}: d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(format!("{what}: dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    qkv: Linear,
    out: Linear,
    heads: usize,
    d: usize,
}

impl MultiHeadAttention {
    pub fn new(b: &mut Builder<'_>, name: &str, d: usize, heads: usize) -> Self {
        let mut s = b.sub(name);
        Self {
            qkv: Linear::with_init(&mut s, "in_proj", d, 3 * d, Init::Xavier(d, 3 * d), true),
            out: Linear::with_init(&mut s, "out_proj", d, d, Init::Uniform(1.0 / (d as f64).sqrt()), true),
            heads,
            d,
        }
    }

    pub fn forward<'g, F: Float>(
        &self,
        p: &Bound<'_, 'g, F>,
        ctx: &mut Ctx<F>,
        x: Var<'g, F>,
        tag: &str,
    ) -> Result<Var<'g, F>> {
        let s = x.shape();
        if s.len() != 3 || s[2] != self.d {
            return Err(TensorError::Shape {
                op: "self_attention",
                lhs: s,
                rhs: vec![self.d],
            });
        }
        let (b, t, h) = (s[0], s[1], self.heads);
        let dk = self.d / h;
        let qkv = self.qkv.forward(p, x)?;
        let split = |i: usize| -> Result<Var<'g, F>> {
            qkv.slice(2, i * self.d, self.d)?.reshape(&[b, t, h, dk])?.transpose(1, 2)
        };
        let (q, k, v) = (split(0)?, split(1)?, split(2)?);
        let (o, w) = scaled_dot_product_attention(q, k, v)?;
        ctx.record(tag, w);
        let o = o.transpose(1, 2)?.reshape(&[b, t, self.d])?;
        self.out.forward(p, o)
    }
}

/// Post-norm transformer encoder layer.
#[derive(Debug, Clone, Copy)]
pub struct EncoderLayer {
    attn: MultiHeadAttention,
    ln1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    ln2: LayerNorm,
    dropout: f64,
}

impl EncoderLayer {
    pub fn new(b: &mut Builder<'_>, name: &str, cfg: &EncoderParams) -> Self {
        let mut s = b.sub(name);
        Self {
            attn: MultiHeadAttention::new(&mut s, "self_attn", cfg.d_model, cfg.heads),
            ln1: LayerNorm::new(&mut s, "norm1", cfg.d_model),
            ff1: Linear::new(&mut s, "linear1", cfg.d_model, cfg.ffn_dim),
            ff2: Linear::new(&mut s, "linear2", cfg.ffn_dim, cfg.d_model),
            ln2: LayerNorm::new(&mut s, "norm2", cfg.d_model),
            dropout: cfg.dropout,
        }
    }

    pub fn forward<'g, F: Float>(
        &self,
        p: &Bound<'_, 'g, F>,
        ctx: &mut Ctx<F>,
        x: Var<'g, F>,
        tag: &str,
    ) -> Result<Var<'g, F>> {
        let a = self.attn.forward(p, ctx, x, tag)?;
        let a = ctx.dropout(a, self.dropout)?;
        let x = self.ln1.forward(p, x.add(a)?)?;
        let f = self.ff2.forward(p, self.ff1.forward(p, x)?.relu()?)?;
        let f = ctx.dropout(f, self.dropout)?;
        self.ln2.forward(p, x.add(f)?)
    }
}

/// Conv1d (k=3, p=1) → BatchNorm → ReLU.
#[derive(Debug, Clone, Copy)]
pub struct ConvBlock {
    w: ParamId,
    b: ParamId,
    bn: BatchNorm,
    pub stride: usize,
}

pub const CONV_KERNEL: usize = 3;
pub const CONV_PAD: usize = 1;

pub fn conv_out_len(l: usize, stride: usize) -> usize {
    (l + 2 * CONV_PAD - CONV_KERNEL) / stride + 1
}

impl ConvBlock {
    pub fn new(b: &mut Builder<'_>, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        let mut s = b.sub(name);
        let bound = 1.0 / ((cin * CONV_KERNEL) as f64).sqrt();
        Self {
            w: s.param("conv.weight", &[cout, cin, CONV_KERNEL], Init::Uniform(bound)),
            b: s.param("conv.bias", &[cout], Init::Uniform(bound)),
            bn: BatchNorm::new(&mut s, "bn", cout),
            stride,
        }
    }

    pub fn forward<'g, F: Float>(&self, p: &Bound<'_, 'g, F>, ctx: &mut Ctx<F>, x: Var<'g, F>) -> Result<Var<'g, F>> {
        let y = x.conv1d(p.var(self.w), p.var(self.b), self.stride, CONV_PAD)?;
        self.bn.forward(p, ctx, y)?.relu()
    }
}
