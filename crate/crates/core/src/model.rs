//! Pre-norm decoder-only transformer with learned positional embeddings.
//!
//! Everything is `f64` and single-sequence. Parameters live in a
//! [`ParameterView`], an ordered list of named tensors whose order is a pure
//! function of [`ModelConfig`]; masking, checkpoints and the optimizer all
//! work on that enumeration. Gradients are produced by a hand-written reverse
//! pass over the activations cached by [`Transformer::forward_cached`].

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding;

const LN_EPS: f64 = 1e-5;
const PARAMS_PER_BLOCK: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_len: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::config("vocab_size", "must be at least 2"));
        }
        if self.context_len < 2 {
            return Err(Error::config("context_len", "must be at least 2"));
        }
        if self.n_layers == 0 {
            return Err(Error::config("n_layers", "must be positive"));
        }
        if self.d_model == 0 || self.n_heads == 0 {
            return Err(Error::config("d_model", "d_model and n_heads must be positive"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(
                "n_heads",
                format!("{} does not divide d_model {}", self.n_heads, self.d_model),
            ));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    /// Names and shapes of every trainable tensor, in enumeration order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (v, c, d, f) = (self.vocab_size, self.context_len, self.d_model, self.d_ff());
        let mut out = vec![
            ("tok_emb".to_string(), vec![v, d]),
            ("pos_emb".to_string(), vec![c, d]),
        ];
        for l in 0..self.n_layers {
            let p = |s: &str| format!("blocks.{l}.{s}");
            out.extend([
                (p("ln1.gain"), vec![d]),
                (p("ln1.bias"), vec![d]),
                (p("attn.wq"), vec![d, d]),
                (p("attn.wk"), vec![d, d]),
                (p("attn.wv"), vec![d, d]),
                (p("attn.wo"), vec![d, d]),
                (p("ln2.gain"), vec![d]),
                (p("ln2.bias"), vec![d]),
                (p("mlp.w_in"), vec![d, f]),
                (p("mlp.b_in"), vec![f]),
                (p("mlp.w_out"), vec![f, d]),
                (p("mlp.b_out"), vec![d]),
            ]);
        }
        out.extend([
            ("ln_f.gain".to_string(), vec![d]),
            ("ln_f.bias".to_string(), vec![d]),
            ("unembed".to_string(), vec![d, v]),
        ]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl ParamEntry {
    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

/// Ordered, uniquely named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterView {
    entries: Vec<ParamEntry>,
}

impl ParameterView {
    pub fn new(entries: Vec<ParamEntry>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for e in &entries {
            if !seen.insert(e.name.as_str()) {
                return Err(Error::Structural(format!("duplicate layer name `{}`", e.name)));
            }
            let expected: usize = e.shape.iter().product();
            if expected != e.values.len() {
                return Err(Error::Structural(format!(
                    "`{}` has shape {:?} but {} values",
                    e.name,
                    e.shape,
                    e.values.len()
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn zeros(layout: &[(String, Vec<usize>)]) -> Self {
        let entries = layout
            .iter()
            .map(|(name, shape)| ParamEntry {
                name: name.clone(),
                shape: shape.clone(),
                values: vec![0.0; shape.iter().product()],
            })
            .collect();
        Self { entries }
    }

    pub fn zeros_like(&self) -> Self {
        let entries = self
            .entries
            .iter()
            .map(|e| ParamEntry { name: e.name.clone(), shape: e.shape.clone(), values: vec![0.0; e.numel()] })
            .collect();
        Self { entries }
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn into_entries(self) -> Vec<ParamEntry> {
        self.entries
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn total_count(&self) -> usize {
        self.entries.iter().map(ParamEntry::numel).sum()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Ok iff `other` has the same names and shapes in the same order.
    pub fn check_same_structure(&self, other: &ParameterView) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Structural(format!(
                "{} entries vs {} entries",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.name != b.name || a.shape != b.shape {
                return Err(Error::Structural(format!(
                    "`{}` {:?} does not match `{}` {:?}",
                    a.name, a.shape, b.name, b.shape
                )));
            }
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &ParameterView) {
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            for (x, y) in a.values.iter_mut().zip(&b.values) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for e in &mut self.entries {
            for x in &mut e.values {
                *x *= factor;
            }
        }
    }

    pub fn iter_values(&self) -> impl Iterator<Item = &f64> {
        self.entries.iter().flat_map(|e| e.values.iter())
    }

    pub fn all_finite(&self) -> bool {
        self.iter_values().all(|v| v.is_finite())
    }

    /// Mutable access to the `flat`-th scalar across all entries.
    pub fn flat_mut(&mut self, mut flat: usize) -> &mut f64 {
        for e in &mut self.entries {
            if flat < e.values.len() {
                return &mut e.values[flat];
            }
            flat -= e.values.len();
        }
        panic!("flat index out of range");
    }

    pub fn flat(&self, mut flat: usize) -> f64 {
        for e in &self.entries {
            if flat < e.values.len() {
                return e.values[flat];
            }
            flat -= e.values.len();
        }
        panic!("flat index out of range");
    }
}

/// Unnormalized next-token scores at one position.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsRow {
    pub values: Vec<f64>,
    pub position: usize,
}

/// Numerically stable log-softmax.
pub fn log_softmax(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::Domain("log_softmax of an empty row".into()));
    }
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite logit {bad}")));
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(values.iter().map(|v| v - lse).collect())
}

pub fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

impl LogitsRow {
    pub fn log_softmax(&self) -> Result<Vec<f64>> {
        log_softmax(&self.values)
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// `x[rows, inner] * w[inner, cols]`.
fn matmul(x: &[f64], rows: usize, inner: usize, w: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let xr = &x[r * inner..(r + 1) * inner];
        let or = &mut out[r * cols..(r + 1) * cols];
        for (k, &xv) in xr.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wr = &w[k * cols..(k + 1) * cols];
            for (o, &wv) in or.iter_mut().zip(wr) {
                *o += xv * wv;
            }
        }
    }
    out
}

/// `dw[inner, cols] += x[rows, inner]^T * dy[rows, cols]`.
fn accumulate_xt_dy(dw: &mut [f64], x: &[f64], rows: usize, inner: usize, dy: &[f64], cols: usize) {
    for r in 0..rows {
        let xr = &x[r * inner..(r + 1) * inner];
        let dr = &dy[r * cols..(r + 1) * cols];
        for (k, &xv) in xr.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wr = &mut dw[k * cols..(k + 1) * cols];
            for (w, &d) in wr.iter_mut().zip(dr) {
                *w += xv * d;
            }
        }
    }
}

/// `dy[rows, cols] * w[inner, cols]^T`.
fn matmul_wt(dy: &[f64], rows: usize, cols: usize, w: &[f64], inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * inner];
    for r in 0..rows {
        let dr = &dy[r * cols..(r + 1) * cols];
        let or = &mut out[r * inner..(r + 1) * inner];
        for (k, o) in or.iter_mut().enumerate() {
            let wr = &w[k * cols..(k + 1) * cols];
            *o = dr.iter().zip(wr).map(|(a, b)| a * b).sum();
        }
    }
    out
}

struct NormCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

fn layer_norm(x: &[f64], rows: usize, d: usize, gain: &[f64], bias: &[f64]) -> (Vec<f64>, NormCache) {
    let mut out = vec![0.0; rows * d];
    let mut xhat = vec![0.0; rows * d];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for i in 0..d {
            let h = (xr[i] - mean) * rs;
            xhat[r * d + i] = h;
            out[r * d + i] = h * gain[i] + bias[i];
        }
    }
    (out, NormCache { xhat, rstd })
}

fn layer_norm_backward(
    dy: &[f64],
    rows: usize,
    d: usize,
    gain: &[f64],
    cache: &NormCache,
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; rows * d];
    let mut dxhat = vec![0.0; d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        for i in 0..d {
            dgain[i] += dyr[i] * xh[i];
            dbias[i] += dyr[i];
            dxhat[i] = dyr[i] * gain[i];
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dxhat_xhat = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for i in 0..d {
            dx[r * d + i] = cache.rstd[r] * (dxhat[i] - mean_dxhat - xh[i] * mean_dxhat_xhat);
        }
    }
    dx
}

struct BlockCache {
    norm1: NormCache,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Attention weights, `[head][t][u]` flattened with stride `seq`.
    probs: Vec<f64>,
    attn: Vec<f64>,
    norm2: NormCache,
    b: Vec<f64>,
    pre_act: Vec<f64>,
    act: Vec<f64>,
}

/// Activations retained by a forward pass for the reverse pass.
pub struct ForwardCache {
    tokens: Vec<u32>,
    blocks: Vec<BlockCache>,
    norm_f: NormCache,
    final_hidden: Vec<f64>,
    logits: Vec<f64>,
}

impl ForwardCache {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    /// Logits at position `t`.
    pub fn logits_at(&self, t: usize, vocab: usize) -> &[f64] {
        &self.logits[t * vocab..(t + 1) * vocab]
    }

    pub fn rows(&self, vocab: usize) -> Vec<LogitsRow> {
        self.logits
            .chunks(vocab)
            .enumerate()
            .map(|(position, v)| LogitsRow { values: v.to_vec(), position })
            .collect()
    }
}

/// A transformer is a [`ModelConfig`] plus a [`ParameterView`] laid out as
/// [`ModelConfig::layout`] dictates.
#[derive(Debug, Clone, PartialEq)]
pub struct Transformer {
    config: ModelConfig,
    params: ParameterView,
}

impl Transformer {
    /// Random initialization from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seeding::rng_for(config.seed, "model-init");
        let layout = config.layout();
        let resid_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        let mut params = ParameterView::zeros(&layout);
        for e in params.entries_mut() {
            let leaf = e.name.rsplit('.').next().unwrap_or(&e.name).to_string();
            let std = match leaf.as_str() {
                "gain" => {
                    e.values.iter_mut().for_each(|v| *v = 1.0);
                    continue;
                }
                "bias" | "b_in" | "b_out" => continue,
                "tok_emb" | "pos_emb" => 0.5,
                "wo" | "w_out" => resid_scale / (e.shape[0] as f64).sqrt(),
                "unembed" => 0.5 / (e.shape[0] as f64).sqrt(),
                _ => 1.0 / (e.shape[0] as f64).sqrt(),
            };
            let normal = Normal::new(0.0, std).expect("positive std");
            for v in &mut e.values {
                *v = normal.sample(&mut rng);
            }
        }
        Ok(Self { config, params })
    }

    /// Every parameter zero.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = ParameterView::zeros(&config.layout());
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ParameterView) -> Result<Self> {
        config.validate()?;
        let expected = ParameterView::zeros(&config.layout());
        expected.check_same_structure(&params)?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterView {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterView {
        &mut self.params
    }

    pub fn into_params(self) -> ParameterView {
        self.params
    }

    /// Replace parameters with a view of identical structure.
    pub fn with_params(&self, params: ParameterView) -> Result<Self> {
        self.params.check_same_structure(&params)?;
        Ok(Self { config: self.config, params })
    }

    fn p(&self, idx: usize) -> &[f64] {
        &self.params.entries[idx].values
    }

    fn block_base(l: usize) -> usize {
        2 + PARAMS_PER_BLOCK * l
    }

    fn final_base(&self) -> usize {
        2 + PARAMS_PER_BLOCK * self.config.n_layers
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() || tokens.len() > self.config.context_len {
            return Err(Error::Length { len: tokens.len(), max: self.config.context_len });
        }
        if let Some(&id) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Vocabulary { id, vocab: self.config.vocab_size });
        }
        Ok(())
    }

    /// One logits row per input position.
    pub fn forward(&self, tokens: &[u32]) -> Result<Vec<LogitsRow>> {
        Ok(self.forward_cached(tokens)?.rows(self.config.vocab_size))
    }

    /// Logits at the final position only.
    pub fn next_logits(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        let cache = self.forward_cached(tokens)?;
        Ok(cache.logits_at(tokens.len() - 1, self.config.vocab_size).to_vec())
    }

    pub fn forward_cached(&self, tokens: &[u32]) -> Result<ForwardCache> {
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let (t_len, d, f, v) = (tokens.len(), cfg.d_model, cfg.d_ff(), cfg.vocab_size);
        let (n_heads, dh) = (cfg.n_heads, cfg.d_head());
        let scale = 1.0 / (dh as f64).sqrt();

        let tok_emb = self.p(0);
        let pos_emb = self.p(1);
        let mut h = vec![0.0; t_len * d];
        for (t, &tok) in tokens.iter().enumerate() {
            let tok = tok as usize;
            for i in 0..d {
                h[t * d + i] = tok_emb[tok * d + i] + pos_emb[t * d + i];
            }
        }

        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let base = Self::block_base(l);
            let (a, norm1) = layer_norm(&h, t_len, d, self.p(base), self.p(base + 1));
            let q = matmul(&a, t_len, d, self.p(base + 2), d);
            let k = matmul(&a, t_len, d, self.p(base + 3), d);
            let vv = matmul(&a, t_len, d, self.p(base + 4), d);

            let mut probs = vec![0.0; n_heads * t_len * t_len];
            let mut attn = vec![0.0; t_len * d];
            for head in 0..n_heads {
                let off = head * dh;
                for t in 0..t_len {
                    let row = &mut probs[(head * t_len + t) * t_len..(head * t_len + t + 1) * t_len];
                    let qt = &q[t * d + off..t * d + off + dh];
                    let mut max = f64::NEG_INFINITY;
                    for u in 0..=t {
                        let ku = &k[u * d + off..u * d + off + dh];
                        let s = qt.iter().zip(ku).map(|(a, b)| a * b).sum::<f64>() * scale;
                        row[u] = s;
                        max = max.max(s);
                    }
                    let mut sum = 0.0;
                    for s in row.iter_mut().take(t + 1) {
                        *s = (*s - max).exp();
                        sum += *s;
                    }
                    for s in row.iter_mut().take(t + 1) {
                        *s /= sum;
                    }
                    let out = &mut attn[t * d + off..t * d + off + dh];
                    for u in 0..=t {
                        let p = row[u];
                        let vu = &vv[u * d + off..u * d + off + dh];
                        for (o, &x) in out.iter_mut().zip(vu) {
                            *o += p * x;
                        }
                    }
                }
            }
            let proj = matmul(&attn, t_len, d, self.p(base + 5), d);
            for (x, y) in h.iter_mut().zip(&proj) {
                *x += y;
            }

            let (b, norm2) = layer_norm(&h, t_len, d, self.p(base + 6), self.p(base + 7));
            let mut pre_act = matmul(&b, t_len, d, self.p(base + 8), f);
            let b_in = self.p(base + 9);
            for row in pre_act.chunks_mut(f) {
                for (x, bias) in row.iter_mut().zip(b_in) {
                    *x += bias;
                }
            }
            let act: Vec<f64> = pre_act.iter().map(|&x| gelu(x)).collect();
            let mlp = matmul(&act, t_len, f, self.p(base + 10), d);
            let b_out = self.p(base + 11);
            for (t, row) in h.chunks_mut(d).enumerate() {
                for i in 0..d {
                    row[i] += mlp[t * d + i] + b_out[i];
                }
            }
            blocks.push(BlockCache { norm1, a, q, k, v: vv, probs, attn, norm2, b, pre_act, act });
        }

        let fb = self.final_base();
        let (final_hidden, norm_f) = layer_norm(&h, t_len, d, self.p(fb), self.p(fb + 1));
        let logits = matmul(&final_hidden, t_len, d, self.p(fb + 2), v);
        Ok(ForwardCache { tokens: tokens.to_vec(), blocks, norm_f, final_hidden, logits })
    }

    /// Reverse pass given `d loss / d logits` for every position (row-major
    /// `[len, vocab]`). Returns a gradient view aligned with [`Self::params`].
    pub fn backward_cached(&self, cache: &ForwardCache, dlogits: &[f64]) -> Result<ParameterView> {
        let cfg = &self.config;
        let (t_len, d, f, v) = (cache.len(), cfg.d_model, cfg.d_ff(), cfg.vocab_size);
        if dlogits.len() != t_len * v {
            return Err(Error::Structural(format!(
                "upstream gradient has {} values, expected {}",
                dlogits.len(),
                t_len * v
            )));
        }
        let (n_heads, dh) = (cfg.n_heads, cfg.d_head());
        let scale = 1.0 / (dh as f64).sqrt();
        let mut grads = self.params.zeros_like();
        let fb = self.final_base();

        {
            let g = &mut grads.entries[fb + 2].values;
            accumulate_xt_dy(g, &cache.final_hidden, t_len, d, dlogits, v);
        }
        let dfinal = matmul_wt(dlogits, t_len, v, self.p(fb + 2), d);
        let mut dh_res = {
            let (left, right) = grads.entries.split_at_mut(fb + 1);
            layer_norm_backward(
                &dfinal,
                t_len,
                d,
                self.p(fb),
                &cache.norm_f,
                &mut left[fb].values,
                &mut right[0].values,
            )
        };

        for l in (0..cfg.n_layers).rev() {
            let base = Self::block_base(l);
            let bc = &cache.blocks[l];

            // MLP branch.
            {
                let g = &mut grads.entries[base + 11].values;
                for row in dh_res.chunks(d) {
                    for (gv, x) in g.iter_mut().zip(row) {
                        *gv += x;
                    }
                }
            }
            accumulate_xt_dy(&mut grads.entries[base + 10].values, &bc.act, t_len, f, &dh_res, d);
            let dact = matmul_wt(&dh_res, t_len, d, self.p(base + 10), f);
            let dpre: Vec<f64> = dact.iter().zip(&bc.pre_act).map(|(g, &x)| g * gelu_grad(x)).collect();
            {
                let g = &mut grads.entries[base + 9].values;
                for row in dpre.chunks(f) {
                    for (gv, x) in g.iter_mut().zip(row) {
                        *gv += x;
                    }
                }
            }
            accumulate_xt_dy(&mut grads.entries[base + 8].values, &bc.b, t_len, d, &dpre, f);
            let db = matmul_wt(&dpre, t_len, f, self.p(base + 8), d);
            let dnorm2 = {
                let (left, right) = grads.entries.split_at_mut(base + 7);
                layer_norm_backward(
                    &db,
                    t_len,
                    d,
                    self.p(base + 6),
                    &bc.norm2,
                    &mut left[base + 6].values,
                    &mut right[0].values,
                )
            };
            for (x, y) in dh_res.iter_mut().zip(&dnorm2) {
                *x += y;
            }

            // Attention branch.
            accumulate_xt_dy(&mut grads.entries[base + 5].values, &bc.attn, t_len, d, &dh_res, d);
            let dattn = matmul_wt(&dh_res, t_len, d, self.p(base + 5), d);
            let mut dq = vec![0.0; t_len * d];
            let mut dk = vec![0.0; t_len * d];
            let mut dv = vec![0.0; t_len * d];
            let mut dp = vec![0.0; t_len];
            for head in 0..n_heads {
                let off = head * dh;
                for t in 0..t_len {
                    let row = &bc.probs[(head * t_len + t) * t_len..(head * t_len + t + 1) * t_len];
                    let dout = &dattn[t * d + off..t * d + off + dh];
                    let mut weighted = 0.0;
                    for u in 0..=t {
                        let vu = &bc.v[u * d + off..u * d + off + dh];
                        dp[u] = dout.iter().zip(vu).map(|(a, b)| a * b).sum();
                        weighted += row[u] * dp[u];
                        let dvu = &mut dv[u * d + off..u * d + off + dh];
                        for (g, &o) in dvu.iter_mut().zip(dout) {
                            *g += row[u] * o;
                        }
                    }
                    for u in 0..=t {
                        let ds = row[u] * (dp[u] - weighted) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        for i in 0..dh {
                            dq[t * d + off + i] += ds * bc.k[u * d + off + i];
                            dk[u * d + off + i] += ds * bc.q[t * d + off + i];
                        }
                    }
                }
            }
            accumulate_xt_dy(&mut grads.entries[base + 2].values, &bc.a, t_len, d, &dq, d);
            accumulate_xt_dy(&mut grads.entries[base + 3].values, &bc.a, t_len, d, &dk, d);
            accumulate_xt_dy(&mut grads.entries[base + 4].values, &bc.a, t_len, d, &dv, d);
            let mut da = matmul_wt(&dq, t_len, d, self.p(base + 2), d);
            for (x, y) in da.iter_mut().zip(matmul_wt(&dk, t_len, d, self.p(base + 3), d)) {
                *x += y;
            }
            for (x, y) in da.iter_mut().zip(matmul_wt(&dv, t_len, d, self.p(base + 4), d)) {
                *x += y;
            }
            let dnorm1 = {
                let (left, right) = grads.entries.split_at_mut(base + 1);
                layer_norm_backward(
                    &da,
                    t_len,
                    d,
                    self.p(base),
                    &bc.norm1,
                    &mut left[base].values,
                    &mut right[0].values,
                )
            };
            for (x, y) in dh_res.iter_mut().zip(&dnorm1) {
                *x += y;
            }
        }

        for (t, &tok) in cache.tokens.iter().enumerate() {
            let tok = tok as usize;
            let row = &dh_res[t * d..(t + 1) * d];
            for i in 0..d {
                grads.entries[0].values[tok * d + i] += row[i];
                grads.entries[1].values[t * d + i] += row[i];
            }
        }
        Ok(grads)
    }

    /// Recomputes the forward pass for `tokens` and back-propagates
    /// `upstream` (row-major `[len, vocab]`).
    pub fn backward(&self, tokens: &[u32], upstream: &[f64]) -> Result<ParameterView> {
        let cache = self.forward_cached(tokens)?;
        self.backward_cached(&cache, upstream)
    }
}

/// Mean next-token cross-entropy over positions `start..len-1` of `tokens`,
/// and its gradient with respect to the parameters.
pub fn next_token_loss(model: &Transformer, tokens: &[u32], start: usize) -> Result<(f64, ParameterView)> {
    if tokens.len() < 2 || start + 1 >= tokens.len() {
        return Err(Error::Domain("need at least one target position".into()));
    }
    let inputs = &tokens[..tokens.len() - 1];
    let cache = model.forward_cached(inputs)?;
    let v = model.config().vocab_size;
    let count = (inputs.len() - start) as f64;
    let mut dlogits = vec![0.0; inputs.len() * v];
    let mut loss = 0.0;
    for t in start..inputs.len() {
        let target = tokens[t + 1] as usize;
        let logp = log_softmax(cache.logits_at(t, v))?;
        loss -= logp[target] / count;
        let row = &mut dlogits[t * v..(t + 1) * v];
        for (j, g) in row.iter_mut().enumerate() {
            *g = (logp[j].exp() - if j == target { 1.0 } else { 0.0 }) / count;
        }
    }
    let grads = model.backward_cached(&cache, &dlogits)?;
    Ok((loss, grads))
}

/// Random token sequence helper used by tests and benchmarks.
pub fn random_tokens(rng: &mut impl Rng, len: usize, vocab: usize) -> Vec<u32> {
    (0..len).map(|_| rng.random_range(0..vocab as u32)).collect()
}
