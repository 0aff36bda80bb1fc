//! Trainable student: context MLP and query MLP → one multi-head softmax
//! attention read-out from the query → MLP head → scalar.
//!
//! Parameters live in one flat vector. The layout is a pure function of the
//! [`StudentConfig`], block by block in this order (matrices row-major,
//! `out × in`):
//!
//! | block      | shape                  |
//! |------------|------------------------|
//! | `ctx.w1`   | `d_hidden × input_dim` |
//! | `ctx.b1`   | `d_hidden`             |
//! | `ctx.w2`   | `d_model × d_hidden`   |
//! | `ctx.b2`   | `d_model`              |
//! | `qry.w1`   | `d_hidden × input_dim` |
//! | `qry.b1`   | `d_hidden`             |
//! | `qry.w2`   | `d_model × d_hidden`   |
//! | `qry.b2`   | `d_model`              |
//! | `attn.q`   | `d_model × d_model`    |
//! | `attn.k`   | `d_model × d_model`    |
//! | `attn.v`   | `d_model × d_model`    |
//! | `attn.o`   | `d_model × d_model`    |
//! | `head.w1`  | `d_hidden × d_model`   |
//! | `head.b1`  | `d_hidden`             |
//! | `head.w2`  | `1 × d_hidden`         |
//! | `head.b2`  | `1`                    |
//!
//! Heads split `d_model` into contiguous slices of `d_model / n_heads`.
//! The attention projections carry no bias.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation and the output.
    fn derivative(self, pre: f64, out: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - out * out,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudentConfig {
    pub d_model: usize,
    pub d_hidden: usize,
    pub n_heads: usize,
    pub input_dim: usize,
    pub activation: Activation,
}

impl Default for StudentConfig {
    fn default() -> Self {
        StudentConfig {
            d_model: 8,
            d_hidden: 8,
            n_heads: 4,
            input_dim: 2,
            activation: Activation::Relu,
        }
    }
}

impl StudentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_hidden == 0 || self.n_heads == 0 || self.input_dim == 0 {
            return Err(Error::InvalidArgument(
                "student dimensions must be positive".into(),
            ));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidArgument(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self)
    }
}

/// One named block of the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Block {
    pub name: &'static str,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub is_bias: bool,
}

impl Block {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Layout {
    pub blocks: Vec<Block>,
    pub total: usize,
}

impl Layout {
    fn new(c: &StudentConfig) -> Self {
        let spec: [(&'static str, usize, usize, bool); 16] = [
            ("ctx.w1", c.d_hidden, c.input_dim, false),
            ("ctx.b1", c.d_hidden, 1, true),
            ("ctx.w2", c.d_model, c.d_hidden, false),
            ("ctx.b2", c.d_model, 1, true),
            ("qry.w1", c.d_hidden, c.input_dim, false),
            ("qry.b1", c.d_hidden, 1, true),
            ("qry.w2", c.d_model, c.d_hidden, false),
            ("qry.b2", c.d_model, 1, true),
            ("attn.q", c.d_model, c.d_model, false),
            ("attn.k", c.d_model, c.d_model, false),
            ("attn.v", c.d_model, c.d_model, false),
            ("attn.o", c.d_model, c.d_model, false),
            ("head.w1", c.d_hidden, c.d_model, false),
            ("head.b1", c.d_hidden, 1, true),
            ("head.w2", 1, c.d_hidden, false),
            ("head.b2", 1, 1, true),
        ];
        let mut offset = 0;
        let blocks = spec
            .into_iter()
            .map(|(name, rows, cols, is_bias)| {
                let b = Block {
                    name,
                    offset,
                    rows,
                    cols,
                    is_bias,
                };
                offset += rows * cols;
                b
            })
            .collect();
        Layout {
            blocks,
            total: offset,
        }
    }

    pub fn block(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }
}

// Offsets into the layout, in table order.
const CTX_W1: usize = 0;
const CTX_B1: usize = 1;
const CTX_W2: usize = 2;
const CTX_B2: usize = 3;
const QRY: usize = 4;
const ATTN_Q: usize = 8;
const ATTN_K: usize = 9;
const ATTN_V: usize = 10;
const ATTN_O: usize = 11;
const HEAD_W1: usize = 12;
const HEAD_B1: usize = 13;
const HEAD_W2: usize = 14;
const HEAD_B2: usize = 15;

/// Context tokens with multiplicities. Attention treats a token of
/// multiplicity `m` exactly like `m` identical copies of it, which lets a long
/// context over a small token alphabet be evaluated on its histogram.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedTokens {
    dim: usize,
    tokens: Vec<f64>,
    counts: Vec<f64>,
}

impl WeightedTokens {
    pub fn new(dim: usize, tokens: Vec<f64>, counts: Vec<f64>) -> Result<Self> {
        if dim == 0 || tokens.len() != dim * counts.len() {
            return Err(Error::dims(dim * counts.len(), tokens.len()));
        }
        if counts.is_empty() {
            return Err(Error::EmptySupport);
        }
        if counts.iter().any(|c| !(*c > 0.0) || !c.is_finite()) {
            return Err(Error::InvalidArgument(
                "token multiplicities must be positive".into(),
            ));
        }
        Ok(WeightedTokens {
            dim,
            tokens,
            counts,
        })
    }

    /// Every token with multiplicity one, in the given order.
    pub fn from_tokens(tokens: &[Vec<f64>]) -> Result<Self> {
        let dim = tokens.first().map_or(0, Vec::len);
        if let Some(bad) = tokens.iter().find(|t| t.len() != dim) {
            return Err(Error::dims(dim, bad.len()));
        }
        Self::new(dim, tokens.concat(), vec![1.0; tokens.len()])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn token(&self, i: usize) -> &[f64] {
        &self.tokens[i * self.dim..(i + 1) * self.dim]
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    /// Total multiplicity, i.e. the length of the expanded context.
    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudentModel {
    config: StudentConfig,
    layout: Layout,
    params: Vec<f64>,
    grads: Vec<f64>,
    epoch: u64,
}

/// On-disk form `{"config": {...}, "params": [...]}`.
#[derive(Serialize, Deserialize)]
struct Checkpoint<'a> {
    config: std::borrow::Cow<'a, StudentConfig>,
    params: std::borrow::Cow<'a, [f64]>,
}

/// Intermediates of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    epoch: u64,
    context: WeightedTokens,
    query: Vec<f64>,
    ctx_pre: Vec<f64>,
    ctx_hidden: Vec<f64>,
    ctx_emb: Vec<f64>,
    qry_pre: Vec<f64>,
    qry_hidden: Vec<f64>,
    qry_emb: Vec<f64>,
    qvec: Vec<f64>,
    keys: Vec<f64>,
    values: Vec<f64>,
    /// `[head][entry]` softmax weight of a single token of the entry.
    token_weights: Vec<f64>,
    /// `[head][entry]` attention mass on the entry (weight × multiplicity).
    masses: Vec<f64>,
    pooled: Vec<f64>,
    attn_out: Vec<f64>,
    head_pre: Vec<f64>,
    head_hidden: Vec<f64>,
    prediction: f64,
}

impl ForwardCache {
    pub fn prediction(&self) -> f64 {
        self.prediction
    }

    pub fn n_heads(&self) -> usize {
        self.token_weights.len() / self.context.len()
    }

    /// Query-to-context weight rows `a^{(h)}`, one per head. Entry `t` is the
    /// weight of one token at context entry `t`; with unit multiplicities each
    /// row sums to one.
    pub fn attention_rows(&self) -> Vec<Vec<f64>> {
        self.token_weights
            .chunks(self.context.len())
            .map(<[f64]>::to_vec)
            .collect()
    }

    /// Per-head attention mass on each context entry; rows sum to one.
    pub fn attention_masses(&self) -> Vec<Vec<f64>> {
        self.masses
            .chunks(self.context.len())
            .map(<[f64]>::to_vec)
            .collect()
    }

    pub fn context(&self) -> &WeightedTokens {
        &self.context
    }

    /// Sign pattern of every hidden pre-activation. Two passes with equal
    /// patterns lie on the same linear piece of a ReLU network.
    pub fn activation_pattern(&self) -> Vec<bool> {
        self.ctx_pre
            .iter()
            .chain(&self.qry_pre)
            .chain(&self.head_pre)
            .map(|v| *v > 0.0)
            .collect()
    }
}

/// `a^{(h)}` rows from the most recent forward pass.
pub fn attention_rows(cache: &ForwardCache) -> Vec<Vec<f64>> {
    cache.attention_rows()
}

fn xavier(rng: &mut rng::Rng, fan_in: usize, fan_out: usize) -> f64 {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    rng.random_range(-s..=s)
}

/// `out = W x + b` for a row-major `rows × cols` matrix.
fn affine(w: &[f64], b: Option<&[f64]>, x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    (0..rows)
        .map(|i| {
            let row = &w[i * cols..(i + 1) * cols];
            let acc: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
            acc + b.map_or(0.0, |b| b[i])
        })
        .collect()
}

/// `dx += W^T dy`.
fn affine_back_input(w: &[f64], dy: &[f64], dx: &mut [f64], cols: usize) {
    for (i, &g) in dy.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        for (d, a) in dx.iter_mut().zip(&w[i * cols..(i + 1) * cols]) {
            *d += a * g;
        }
    }
}

/// `dW += dy x^T`.
fn outer_acc(dw: &mut [f64], dy: &[f64], x: &[f64], scale: f64) {
    let cols = x.len();
    for (i, &g) in dy.iter().enumerate() {
        let g = g * scale;
        if g == 0.0 {
            continue;
        }
        for (d, xv) in dw[i * cols..(i + 1) * cols].iter_mut().zip(x) {
            *d += g * xv;
        }
    }
}

impl StudentModel {
    /// Xavier-uniform weights, zero biases.
    pub fn init(config: StudentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        let mut rng = rng::stream(seed, &[rng::label("student_init")]);
        let mut params = vec![0.0; layout.total];
        for b in &layout.blocks {
            if b.is_bias {
                continue;
            }
            for p in &mut params[b.range()] {
                *p = xavier(&mut rng, b.cols, b.rows);
            }
        }
        Ok(StudentModel {
            grads: vec![0.0; layout.total],
            config,
            layout,
            params,
            epoch: 0,
        })
    }

    pub fn from_params(config: StudentConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if params.len() != layout.total {
            return Err(Error::dims(layout.total, params.len()));
        }
        Ok(StudentModel {
            grads: vec![0.0; layout.total],
            config,
            layout,
            params,
            epoch: 0,
        })
    }

    pub fn config(&self) -> &StudentConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameters; invalidates outstanding forward caches.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.epoch += 1;
        &mut self.params
    }

    pub fn grads(&self) -> &[f64] {
        &self.grads
    }

    pub fn grads_mut(&mut self) -> &mut [f64] {
        &mut self.grads
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    fn block(&self, idx: usize) -> &[f64] {
        &self.params[self.layout.blocks[idx].range()]
    }

    fn mlp(&self, base: usize, x: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let c = &self.config;
        let pre = affine(
            self.block(base + CTX_W1),
            Some(self.block(base + CTX_B1)),
            x,
            c.d_hidden,
            c.input_dim,
        );
        let hidden: Vec<f64> = pre.iter().map(|&v| c.activation.apply(v)).collect();
        let out = affine(
            self.block(base + CTX_W2),
            Some(self.block(base + CTX_B2)),
            &hidden,
            c.d_model,
            c.d_hidden,
        );
        (pre, hidden, out)
    }

    pub fn forward(&self, context: &WeightedTokens, query: &[f64]) -> Result<(f64, ForwardCache)> {
        let c = &self.config;
        if context.is_empty() {
            return Err(Error::EmptySupport);
        }
        if context.dim() != c.input_dim {
            return Err(Error::dims(c.input_dim, context.dim()));
        }
        if query.len() != c.input_dim {
            return Err(Error::dims(c.input_dim, query.len()));
        }
        let (dm, dh, nh, hd) = (c.d_model, c.d_hidden, c.n_heads, c.head_dim());
        let n = context.len();

        let mut ctx_pre = Vec::with_capacity(n * dh);
        let mut ctx_hidden = Vec::with_capacity(n * dh);
        let mut ctx_emb = Vec::with_capacity(n * dm);
        for t in 0..n {
            let (p, h, e) = self.mlp(0, context.token(t));
            ctx_pre.extend(p);
            ctx_hidden.extend(h);
            ctx_emb.extend(e);
        }
        let (qry_pre, qry_hidden, qry_emb) = self.mlp(QRY, query);

        let qvec = affine(self.block(ATTN_Q), None, &qry_emb, dm, dm);
        let mut keys = Vec::with_capacity(n * dm);
        let mut values = Vec::with_capacity(n * dm);
        for t in 0..n {
            let e = &ctx_emb[t * dm..(t + 1) * dm];
            keys.extend(affine(self.block(ATTN_K), None, e, dm, dm));
            values.extend(affine(self.block(ATTN_V), None, e, dm, dm));
        }

        let scale = 1.0 / (hd as f64).sqrt();
        let mut token_weights = vec![0.0; nh * n];
        let mut masses = vec![0.0; nh * n];
        let mut pooled = vec![0.0; dm];
        let mut scores = vec![0.0; n];
        for h in 0..nh {
            let sl = h * hd..(h + 1) * hd;
            for (t, s) in scores.iter_mut().enumerate() {
                let k = &keys[t * dm..(t + 1) * dm];
                *s = scale
                    * qvec[sl.clone()]
                        .iter()
                        .zip(&k[sl.clone()])
                        .map(|(a, b)| a * b)
                        .sum::<f64>();
            }
            let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (t, s) in scores.iter().enumerate() {
                let e = (s - top).exp();
                token_weights[h * n + t] = e;
                z += context.counts()[t] * e;
            }
            for t in 0..n {
                let a = token_weights[h * n + t] / z;
                token_weights[h * n + t] = a;
                let m = a * context.counts()[t];
                masses[h * n + t] = m;
                for (p, v) in pooled[sl.clone()]
                    .iter_mut()
                    .zip(&values[t * dm + sl.start..t * dm + sl.end])
                {
                    *p += m * v;
                }
            }
        }

        let attn_out = affine(self.block(ATTN_O), None, &pooled, dm, dm);
        let head_pre = affine(
            self.block(HEAD_W1),
            Some(self.block(HEAD_B1)),
            &attn_out,
            dh,
            dm,
        );
        let head_hidden: Vec<f64> = head_pre.iter().map(|&v| c.activation.apply(v)).collect();
        let prediction = affine(
            self.block(HEAD_W2),
            Some(self.block(HEAD_B2)),
            &head_hidden,
            1,
            dh,
        )[0];

        let cache = ForwardCache {
            epoch: self.epoch,
            context: context.clone(),
            query: query.to_vec(),
            ctx_pre,
            ctx_hidden,
            ctx_emb,
            qry_pre,
            qry_hidden,
            qry_emb,
            qvec,
            keys,
            values,
            token_weights,
            masses,
            pooled,
            attn_out,
            head_pre,
            head_hidden,
            prediction,
        };
        Ok((prediction, cache))
    }

    /// Convenience forward on an explicit token list (unit multiplicities).
    pub fn forward_tokens(
        &self,
        context: &[Vec<f64>],
        query: &[f64],
    ) -> Result<(f64, ForwardCache)> {
        self.forward(&WeightedTokens::from_tokens(context)?, query)
    }

    pub fn predict(&self, context: &WeightedTokens, query: &[f64]) -> Result<f64> {
        self.forward(context, query).map(|(y, _)| y)
    }

    /// Overwrites `grads` with `upstream · ∂prediction/∂params`.
    pub fn backward(&mut self, cache: &ForwardCache, upstream: f64) -> Result<()> {
        let mut grads = std::mem::take(&mut self.grads);
        grads.clear();
        grads.resize(self.params.len(), 0.0);
        let res = self.backward_accumulate(cache, upstream, &mut grads);
        self.grads = grads;
        res
    }

    /// Adds `upstream · ∂prediction/∂params` into `out`.
    pub fn backward_accumulate(
        &self,
        cache: &ForwardCache,
        upstream: f64,
        out: &mut [f64],
    ) -> Result<()> {
        if cache.epoch != self.epoch {
            return Err(Error::StaleCache {
                cache: cache.epoch,
                model: self.epoch,
            });
        }
        if out.len() != self.params.len() {
            return Err(Error::dims(self.params.len(), out.len()));
        }
        if upstream == 0.0 {
            return Ok(());
        }
        let c = &self.config;
        let (dm, dh, nh, hd) = (c.d_model, c.d_hidden, c.n_heads, c.head_dim());
        let n = cache.context.len();
        let r = |i: usize| self.layout.blocks[i].range();

        // Head MLP.
        out[r(HEAD_B2)][0] += upstream;
        outer_acc(&mut out[r(HEAD_W2)], &[upstream], &cache.head_hidden, 1.0);
        let w2 = self.block(HEAD_W2);
        let d_head_pre: Vec<f64> = (0..dh)
            .map(|i| {
                upstream
                    * w2[i]
                    * c.activation
                        .derivative(cache.head_pre[i], cache.head_hidden[i])
            })
            .collect();
        for (g, d) in out[r(HEAD_B1)].iter_mut().zip(&d_head_pre) {
            *g += d;
        }
        outer_acc(&mut out[r(HEAD_W1)], &d_head_pre, &cache.attn_out, 1.0);
        let mut d_attn_out = vec![0.0; dm];
        affine_back_input(self.block(HEAD_W1), &d_head_pre, &mut d_attn_out, dm);

        // Output projection.
        outer_acc(&mut out[r(ATTN_O)], &d_attn_out, &cache.pooled, 1.0);
        let mut d_pooled = vec![0.0; dm];
        affine_back_input(self.block(ATTN_O), &d_attn_out, &mut d_pooled, dm);

        // Softmax read-out, per head.
        let scale = 1.0 / (hd as f64).sqrt();
        let mut d_qvec = vec![0.0; dm];
        let mut d_keys = vec![0.0; n * dm];
        let mut d_values = vec![0.0; n * dm];
        let mut d_mass = vec![0.0; n];
        for h in 0..nh {
            let sl = h * hd..(h + 1) * hd;
            let dp = &d_pooled[sl.clone()];
            let mut mean = 0.0;
            for t in 0..n {
                let m = cache.masses[h * n + t];
                let v = &cache.values[t * dm + sl.start..t * dm + sl.end];
                d_mass[t] = dp.iter().zip(v).map(|(a, b)| a * b).sum();
                mean += m * d_mass[t];
                for (dv, g) in d_values[t * dm + sl.start..t * dm + sl.end]
                    .iter_mut()
                    .zip(dp)
                {
                    *dv += m * g;
                }
            }
            let q = &cache.qvec[sl.clone()];
            for t in 0..n {
                let ds = cache.masses[h * n + t] * (d_mass[t] - mean) * scale;
                if ds == 0.0 {
                    continue;
                }
                let k = &cache.keys[t * dm + sl.start..t * dm + sl.end];
                for (dq, kv) in d_qvec[sl.clone()].iter_mut().zip(k) {
                    *dq += ds * kv;
                }
                for (dk, qv) in d_keys[t * dm + sl.start..t * dm + sl.end].iter_mut().zip(q) {
                    *dk += ds * qv;
                }
            }
        }

        // Q projection and query MLP.
        outer_acc(&mut out[r(ATTN_Q)], &d_qvec, &cache.qry_emb, 1.0);
        let mut d_qry_emb = vec![0.0; dm];
        affine_back_input(self.block(ATTN_Q), &d_qvec, &mut d_qry_emb, dm);
        self.mlp_backward(
            QRY,
            &cache.query,
            &cache.qry_pre,
            &cache.qry_hidden,
            &d_qry_emb,
            out,
        );

        // K, V projections and context MLP.
        let mut d_emb = vec![0.0; dm];
        for t in 0..n {
            let e = &cache.ctx_emb[t * dm..(t + 1) * dm];
            let dk = &d_keys[t * dm..(t + 1) * dm];
            let dv = &d_values[t * dm..(t + 1) * dm];
            outer_acc(&mut out[r(ATTN_K)], dk, e, 1.0);
            outer_acc(&mut out[r(ATTN_V)], dv, e, 1.0);
            d_emb.fill(0.0);
            affine_back_input(self.block(ATTN_K), dk, &mut d_emb, dm);
            affine_back_input(self.block(ATTN_V), dv, &mut d_emb, dm);
            self.mlp_backward(
                0,
                cache.context.token(t),
                &cache.ctx_pre[t * dh..(t + 1) * dh],
                &cache.ctx_hidden[t * dh..(t + 1) * dh],
                &d_emb,
                out,
            );
        }
        Ok(())
    }

    fn mlp_backward(
        &self,
        base: usize,
        x: &[f64],
        pre: &[f64],
        hidden: &[f64],
        d_out: &[f64],
        out: &mut [f64],
    ) {
        let c = &self.config;
        let r = |i: usize| self.layout.blocks[base + i].range();
        for (g, d) in out[r(CTX_B2)].iter_mut().zip(d_out) {
            *g += d;
        }
        outer_acc(&mut out[r(CTX_W2)], d_out, hidden, 1.0);
        let mut d_hidden = vec![0.0; c.d_hidden];
        affine_back_input(self.block(base + CTX_W2), d_out, &mut d_hidden, c.d_hidden);
        let d_pre: Vec<f64> = d_hidden
            .iter()
            .zip(pre.iter().zip(hidden))
            .map(|(d, (p, h))| d * c.activation.derivative(*p, *h))
            .collect();
        for (g, d) in out[r(CTX_B1)].iter_mut().zip(&d_pre) {
            *g += d;
        }
        outer_acc(&mut out[r(CTX_W1)], &d_pre, x, 1.0);
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&Checkpoint {
            config: std::borrow::Cow::Borrowed(&self.config),
            params: std::borrow::Cow::Borrowed(&self.params),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(s)?;
        StudentModel::from_params(c.config.into_owned(), c.params.into_owned())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}
