//! Relative-position multi-head self-attention encoder.
//!
//! Head `h` scores token pair `(i, j)` as
//!
//! ```text
//! A*_ij = q_i·k_j + q_i·(R_ij W_kR) + u·k_j + v·(R_ij W_kR)
//! ```
//!
//! with `q_i = E_i W_q`, `k_j = E_j W_kE`, optionally scaled by
//! `1/sqrt(d_head)`. Projection matrices are stored d_model x d_model with
//! head `h` owning columns `h*d_head..(h+1)*d_head`. Each layer is a post-norm
//! block: attention, residual, layer norm, ReLU feed-forward, residual,
//! layer norm.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::params::{push_mut, push_ref, ParamTensors, TensorMut, TensorRef};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error, PartialEq)]
pub enum EncoderError {
    #[error("non-finite value in {stage} of layer {layer}")]
    NonFinite { layer: usize, stage: &'static str },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub w_q: Array2<f64>,
    pub w_ke: Array2<f64>,
    pub w_kr: Array2<f64>,
    pub w_v: Array2<f64>,
    /// H x d_head
    pub u: Array2<f64>,
    /// H x d_head
    pub v: Array2<f64>,
    pub w_o: Array2<f64>,
    pub b_o: Array1<f64>,
    pub ln1_gain: Array1<f64>,
    pub ln1_bias: Array1<f64>,
    pub w_ff1: Array2<f64>,
    pub b_ff1: Array1<f64>,
    pub w_ff2: Array2<f64>,
    pub b_ff2: Array1<f64>,
    pub ln2_gain: Array1<f64>,
    pub ln2_bias: Array1<f64>,
}

impl LayerParams {
    pub fn zeros(d_model: usize, heads: usize, d_ff: usize) -> Self {
        let d_head = d_model / heads;
        let m = |r, c| Array2::zeros((r, c));
        LayerParams {
            w_q: m(d_model, d_model),
            w_ke: m(d_model, d_model),
            w_kr: m(d_model, d_model),
            w_v: m(d_model, d_model),
            u: m(heads, d_head),
            v: m(heads, d_head),
            w_o: m(d_model, d_model),
            b_o: Array1::zeros(d_model),
            ln1_gain: Array1::zeros(d_model),
            ln1_bias: Array1::zeros(d_model),
            w_ff1: m(d_model, d_ff),
            b_ff1: Array1::zeros(d_ff),
            w_ff2: m(d_ff, d_model),
            b_ff2: Array1::zeros(d_model),
            ln2_gain: Array1::zeros(d_model),
            ln2_bias: Array1::zeros(d_model),
        }
    }

    /// Weights ~ N(0, std), biases zero, layer-norm gains one.
    pub fn init<R: Rng>(d_model: usize, heads: usize, d_ff: usize, std: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(d_model, heads, d_ff);
        let normal = Normal::new(0.0, std).expect("valid std");
        for w in [
            &mut p.w_q,
            &mut p.w_ke,
            &mut p.w_kr,
            &mut p.w_v,
            &mut p.u,
            &mut p.v,
            &mut p.w_o,
            &mut p.w_ff1,
            &mut p.w_ff2,
        ] {
            w.mapv_inplace(|_| normal.sample(rng));
        }
        p.ln1_gain.fill(1.0);
        p.ln2_gain.fill(1.0);
        p
    }

    fn heads(&self) -> usize {
        self.u.nrows()
    }

    fn d_head(&self) -> usize {
        self.u.ncols()
    }
}

impl ParamTensors for LayerParams {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a>>) {
        push_ref(out, prefix, "w_q", &self.w_q);
        push_ref(out, prefix, "w_ke", &self.w_ke);
        push_ref(out, prefix, "w_kr", &self.w_kr);
        push_ref(out, prefix, "w_v", &self.w_v);
        push_ref(out, prefix, "u", &self.u);
        push_ref(out, prefix, "v", &self.v);
        push_ref(out, prefix, "w_o", &self.w_o);
        push_ref(out, prefix, "b_o", &self.b_o);
        push_ref(out, prefix, "ln1_gain", &self.ln1_gain);
        push_ref(out, prefix, "ln1_bias", &self.ln1_bias);
        push_ref(out, prefix, "w_ff1", &self.w_ff1);
        push_ref(out, prefix, "b_ff1", &self.b_ff1);
        push_ref(out, prefix, "w_ff2", &self.w_ff2);
        push_ref(out, prefix, "b_ff2", &self.b_ff2);
        push_ref(out, prefix, "ln2_gain", &self.ln2_gain);
        push_ref(out, prefix, "ln2_bias", &self.ln2_bias);
    }

    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a>>) {
        push_mut(out, prefix, "w_q", &mut self.w_q);
        push_mut(out, prefix, "w_ke", &mut self.w_ke);
        push_mut(out, prefix, "w_kr", &mut self.w_kr);
        push_mut(out, prefix, "w_v", &mut self.w_v);
        push_mut(out, prefix, "u", &mut self.u);
        push_mut(out, prefix, "v", &mut self.v);
        push_mut(out, prefix, "w_o", &mut self.w_o);
        push_mut(out, prefix, "b_o", &mut self.b_o);
        push_mut(out, prefix, "ln1_gain", &mut self.ln1_gain);
        push_mut(out, prefix, "ln1_bias", &mut self.ln1_bias);
        push_mut(out, prefix, "w_ff1", &mut self.w_ff1);
        push_mut(out, prefix, "b_ff1", &mut self.b_ff1);
        push_mut(out, prefix, "w_ff2", &mut self.w_ff2);
        push_mut(out, prefix, "b_ff2", &mut self.b_ff2);
        push_mut(out, prefix, "ln2_gain", &mut self.ln2_gain);
        push_mut(out, prefix, "ln2_bias", &mut self.ln2_bias);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub layers: Vec<LayerParams>,
    pub scale_attention: bool,
}

impl EncoderParams {
    pub fn init<R: Rng>(
        d_model: usize,
        heads: usize,
        n_layers: usize,
        d_ff: usize,
        scale_attention: bool,
        rng: &mut R,
    ) -> Self {
        assert!(
            heads > 0 && d_model % heads == 0,
            "d_model must be divisible by heads"
        );
        EncoderParams {
            layers: (0..n_layers)
                .map(|_| LayerParams::init(d_model, heads, d_ff, 0.02, rng))
                .collect(),
            scale_attention,
        }
    }

    pub fn zeros_like(&self) -> Self {
        EncoderParams {
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams::zeros(l.w_q.nrows(), l.heads(), l.b_ff1.len()))
                .collect(),
            scale_attention: self.scale_attention,
        }
    }
}

impl ParamTensors for EncoderParams {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a>>) {
        for (i, l) in self.layers.iter().enumerate() {
            l.tensors(&format!("{prefix}layer{i}."), out);
        }
    }

    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a>>) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.tensors_mut(&format!("{prefix}layer{i}."), out);
        }
    }
}

fn scale_factor(scale: bool, d_head: usize) -> f64 {
    if scale {
        1.0 / (d_head as f64).sqrt()
    } else {
        1.0
    }
}

fn head_cols(
    h: usize,
    d_head: usize,
) -> ndarray::SliceInfo<[ndarray::SliceInfoElem; 2], ndarray::Ix2, ndarray::Ix2> {
    s![.., h * d_head..(h + 1) * d_head]
}

/// Pre-softmax scores `A*` of one head.
pub fn attention_scores(
    e: &Array2<f64>,
    r: &Array3<f64>,
    layer: &LayerParams,
    head: usize,
    scale_attention: bool,
) -> Array2<f64> {
    let d_head = layer.d_head();
    let cols = head_cols(head, d_head);
    let q = e.dot(&layer.w_q.slice(cols));
    let k = e.dot(&layer.w_ke.slice(cols));
    let q_u = &q + &layer.u.row(head);
    let q_v = &q + &layer.v.row(head);
    let a = q_v.dot(&layer.w_kr.slice(cols).t());
    let mut scores = q_u.dot(&k.t());
    add_position_term(&mut scores, r, &a);
    scores *= scale_factor(scale_attention, d_head);
    scores
}

/// `scores[i][j] += a_i · R_ij`
fn add_position_term(scores: &mut Array2<f64>, r: &Array3<f64>, a: &Array2<f64>) {
    for i in 0..scores.nrows() {
        let term = r.index_axis(Axis(0), i).dot(&a.row(i));
        let mut row = scores.row_mut(i);
        row += &term;
    }
}

pub fn softmax_rows(scores: &Array2<f64>) -> Array2<f64> {
    let mut p = scores.clone();
    for mut row in p.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    p
}

#[derive(Debug, Clone)]
struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn layer_norm(
    x: &Array2<f64>,
    gain: &Array1<f64>,
    bias: &Array1<f64>,
) -> (Array2<f64>, LayerNormCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (i, mut row) in xhat.rows_mut().into_iter().enumerate() {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.mapv(|v| v * v).sum() / d;
        let is = 1.0 / (var + LN_EPS).sqrt();
        row *= is;
        inv_std[i] = is;
    }
    let y = &xhat * gain + bias;
    (y, LayerNormCache { xhat, inv_std })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LayerNormCache,
    gain: &Array1<f64>,
    d_gain: &mut Array1<f64>,
    d_bias: &mut Array1<f64>,
) -> Array2<f64> {
    *d_gain += &(dy * &cache.xhat).sum_axis(Axis(0));
    *d_bias += &dy.sum_axis(Axis(0));
    let dxhat = dy * gain;
    let d = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.dim());
    for i in 0..dy.nrows() {
        let g = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let mean_g = g.sum() / d;
        let mean_gx = g.dot(&xh) / d;
        let mut out = dx.row_mut(i);
        for k in 0..g.len() {
            out[k] = cache.inv_std[i] * (g[k] - mean_g - xh[k] * mean_gx);
        }
    }
    dx
}

#[derive(Debug, Clone)]
struct HeadCache {
    q_u: Array2<f64>,
    q_v: Array2<f64>,
    k: Array2<f64>,
    a: Array2<f64>,
    p: Array2<f64>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Array2<f64>,
    heads: Vec<HeadCache>,
    values: Array2<f64>,
    concat: Array2<f64>,
    drop_attn: Option<Array2<f64>>,
    ln1: LayerNormCache,
    x1: Array2<f64>,
    pre_ff: Array2<f64>,
    hidden: Array2<f64>,
    drop_ff: Option<Array2<f64>>,
    ln2: LayerNormCache,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    layers: Vec<LayerCache>,
}

impl EncoderTrace {
    /// Post-softmax attention of each layer and head.
    pub fn attention(&self) -> Vec<Vec<&Array2<f64>>> {
        self.layers
            .iter()
            .map(|l| l.heads.iter().map(|h| &h.p).collect())
            .collect()
    }
}

/// Dropout configuration for a training forward pass.
pub struct Dropout<'r, R: Rng> {
    pub rate: f64,
    pub rng: &'r mut R,
}

fn dropout_mask<R: Rng>(
    dropout: &mut Option<Dropout<'_, R>>,
    shape: (usize, usize),
) -> Option<Array2<f64>> {
    let d = dropout.as_mut()?;
    if d.rate <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - d.rate);
    let rate = d.rate;
    Some(Array2::from_shape_fn(shape, |_| {
        if d.rng.gen::<f64>() < rate {
            0.0
        } else {
            keep
        }
    }))
}

fn check_finite(x: &Array2<f64>, layer: usize, stage: &'static str) -> Result<(), EncoderError> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(EncoderError::NonFinite { layer, stage })
    }
}

fn layer_forward<R: Rng>(
    x: &Array2<f64>,
    r: &Array3<f64>,
    p: &LayerParams,
    scale_attention: bool,
    dropout: &mut Option<Dropout<'_, R>>,
    index: usize,
) -> Result<(Array2<f64>, LayerCache), EncoderError> {
    let n = x.nrows();
    let d_head = p.d_head();
    let scale = scale_factor(scale_attention, d_head);
    let q = x.dot(&p.w_q);
    let k = x.dot(&p.w_ke);
    let values = x.dot(&p.w_v);
    let mut concat = Array2::zeros(x.dim());
    let mut heads = Vec::with_capacity(p.heads());
    for h in 0..p.heads() {
        let cols = head_cols(h, d_head);
        let q_h = q.slice(cols);
        let k_h = k.slice(cols).to_owned();
        let q_u = &q_h + &p.u.row(h);
        let q_v = &q_h + &p.v.row(h);
        let a = q_v.dot(&p.w_kr.slice(cols).t());
        let mut scores = q_u.dot(&k_h.t());
        add_position_term(&mut scores, r, &a);
        scores *= scale;
        check_finite(&scores, index, "attention scores")?;
        let probs = softmax_rows(&scores);
        concat
            .slice_mut(cols)
            .assign(&probs.dot(&values.slice(cols)));
        heads.push(HeadCache {
            q_u,
            q_v,
            k: k_h,
            a,
            p: probs,
        });
    }
    let mut attn = concat.dot(&p.w_o) + &p.b_o;
    let drop_attn = dropout_mask(dropout, (n, x.ncols()));
    if let Some(m) = &drop_attn {
        attn *= m;
    }
    let (x1, ln1) = layer_norm(&(x + &attn), &p.ln1_gain, &p.ln1_bias);
    let pre_ff = x1.dot(&p.w_ff1) + &p.b_ff1;
    let hidden = pre_ff.mapv(|v| v.max(0.0));
    let mut ff = hidden.dot(&p.w_ff2) + &p.b_ff2;
    let drop_ff = dropout_mask(dropout, (n, x.ncols()));
    if let Some(m) = &drop_ff {
        ff *= m;
    }
    let (out, ln2) = layer_norm(&(&x1 + &ff), &p.ln2_gain, &p.ln2_bias);
    check_finite(&out, index, "layer output")?;
    Ok((
        out,
        LayerCache {
            input: x.clone(),
            heads,
            values,
            concat,
            drop_attn,
            ln1,
            x1,
            pre_ff,
            hidden,
            drop_ff,
            ln2,
        },
    ))
}

/// Encodes token embeddings `e` (L' x d_model) under relative encoding `r`.
pub fn encode(
    e: &Array2<f64>,
    r: &Array3<f64>,
    params: &EncoderParams,
) -> Result<Array2<f64>, EncoderError> {
    encode_traced::<rand_chacha::ChaCha8Rng>(e, r, params, None).map(|(out, _)| out)
}

pub fn encode_traced<R: Rng>(
    e: &Array2<f64>,
    r: &Array3<f64>,
    params: &EncoderParams,
    mut dropout: Option<Dropout<'_, R>>,
) -> Result<(Array2<f64>, EncoderTrace), EncoderError> {
    let n = e.nrows();
    if r.dim().0 != n || r.dim().1 != n || r.dim().2 != e.ncols() {
        return Err(EncoderError::Shape(format!(
            "embeddings are {:?} but relative encoding is {:?}",
            e.dim(),
            r.dim()
        )));
    }
    let mut x = e.clone();
    let mut layers = Vec::with_capacity(params.layers.len());
    for (i, p) in params.layers.iter().enumerate() {
        let (out, cache) = layer_forward(&x, r, p, params.scale_attention, &mut dropout, i)?;
        layers.push(cache);
        x = out;
    }
    Ok((x, EncoderTrace { layers }))
}

/// Gradients of one backward pass. `grads` accumulates parameter gradients,
/// `d_r` accumulates dL/dR. Returns dL/dE.
pub fn encode_backward(
    trace: &EncoderTrace,
    r: &Array3<f64>,
    params: &EncoderParams,
    d_out: &Array2<f64>,
    grads: &mut EncoderParams,
    d_r: &mut Array3<f64>,
) -> Array2<f64> {
    let mut dx = d_out.clone();
    for ((cache, p), g) in trace
        .layers
        .iter()
        .zip(&params.layers)
        .zip(grads.layers.iter_mut())
        .rev()
    {
        dx = layer_backward(cache, r, p, params.scale_attention, &dx, g, d_r);
    }
    dx
}

fn layer_backward(
    c: &LayerCache,
    r: &Array3<f64>,
    p: &LayerParams,
    scale_attention: bool,
    d_out: &Array2<f64>,
    g: &mut LayerParams,
    d_r: &mut Array3<f64>,
) -> Array2<f64> {
    let d_head = p.d_head();
    let scale = scale_factor(scale_attention, d_head);

    // second sublayer
    let dy2 = layer_norm_backward(d_out, &c.ln2, &p.ln2_gain, &mut g.ln2_gain, &mut g.ln2_bias);
    let mut dx1 = dy2.clone();
    let mut d_ff = dy2;
    if let Some(m) = &c.drop_ff {
        d_ff *= m;
    }
    g.w_ff2 += &c.hidden.t().dot(&d_ff);
    g.b_ff2 += &d_ff.sum_axis(Axis(0));
    let mut d_pre = d_ff.dot(&p.w_ff2.t());
    d_pre.zip_mut_with(&c.pre_ff, |dv, z| {
        if *z <= 0.0 {
            *dv = 0.0
        }
    });
    g.w_ff1 += &c.x1.t().dot(&d_pre);
    g.b_ff1 += &d_pre.sum_axis(Axis(0));
    dx1 += &d_pre.dot(&p.w_ff1.t());

    // first sublayer
    let dy1 = layer_norm_backward(&dx1, &c.ln1, &p.ln1_gain, &mut g.ln1_gain, &mut g.ln1_bias);
    let mut dx = dy1.clone();
    let mut d_attn = dy1;
    if let Some(m) = &c.drop_attn {
        d_attn *= m;
    }
    g.w_o += &c.concat.t().dot(&d_attn);
    g.b_o += &d_attn.sum_axis(Axis(0));
    let d_concat = d_attn.dot(&p.w_o.t());

    let mut d_q = Array2::zeros(c.input.dim());
    let mut d_k = Array2::zeros(c.input.dim());
    let mut d_v = Array2::zeros(c.input.dim());
    for (h, hc) in c.heads.iter().enumerate() {
        let cols = head_cols(h, d_head);
        let d_ctx = d_concat.slice(cols);
        d_v.slice_mut(cols).assign(&hc.p.t().dot(&d_ctx));
        let d_p = d_ctx.dot(&c.values.slice(cols).t());
        let d_scores = softmax_backward(&hc.p, &d_p) * scale;

        let d_qu = d_scores.dot(&hc.k);
        d_k.slice_mut(cols).assign(&d_scores.t().dot(&hc.q_u));
        let mut d_a = Array2::zeros(hc.a.dim());
        for i in 0..d_scores.nrows() {
            let r_i = r.index_axis(Axis(0), i);
            d_a.row_mut(i).assign(&r_i.t().dot(&d_scores.row(i)));
            let mut d_ri = d_r.index_axis_mut(Axis(0), i);
            let a_i = hc.a.row(i);
            for (j, mut cell) in d_ri.outer_iter_mut().enumerate() {
                cell.scaled_add(d_scores[[i, j]], &a_i);
            }
        }
        let w_kr = p.w_kr.slice(cols);
        let d_qv = d_a.dot(&w_kr);
        let mut gw_kr = g.w_kr.slice_mut(cols);
        gw_kr += &d_a.t().dot(&hc.q_v);
        let mut gu = g.u.row_mut(h);
        gu += &d_qu.sum_axis(Axis(0));
        let mut gv = g.v.row_mut(h);
        gv += &d_qv.sum_axis(Axis(0));
        d_q.slice_mut(cols).assign(&(&d_qu + &d_qv));
    }
    let xt = c.input.t();
    g.w_q += &xt.dot(&d_q);
    g.w_ke += &xt.dot(&d_k);
    g.w_v += &xt.dot(&d_v);
    dx += &d_q.dot(&p.w_q.t());
    dx += &d_k.dot(&p.w_ke.t());
    dx += &d_v.dot(&p.w_v.t());
    dx
}

fn softmax_backward(p: &Array2<f64>, d_p: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(p.dim());
    for i in 0..p.nrows() {
        let pr = p.row(i);
        let dr = d_p.row(i);
        let dot = pr.dot(&dr);
        let mut o = out.row_mut(i);
        for j in 0..pr.len() {
            o[j] = pr[j] * (dr[j] - dot);
        }
    }
    out
}

/// Combined-form scores `(q_i+u)·k_j + (q_i+v)·(R_ij W_kR)`, unscaled.
/// Useful to cross-check [`attention_scores`].
pub fn combined_scores(
    e: ArrayView2<'_, f64>,
    r: &Array3<f64>,
    layer: &LayerParams,
    head: usize,
) -> Array2<f64> {
    let d_head = layer.d_head();
    let cols = head_cols(head, d_head);
    let n = e.nrows();
    let q = e.dot(&layer.w_q.slice(cols));
    let k = e.dot(&layer.w_ke.slice(cols));
    let w_kr = layer.w_kr.slice(cols);
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        let qu = &q.row(i) + &layer.u.row(head);
        let qv = &q.row(i) + &layer.v.row(head);
        for j in 0..n {
            let kr = r.slice(s![i, j, ..]).dot(&w_kr);
            out[[i, j]] = qu.dot(&k.row(j)) + qv.dot(&kr);
        }
    }
    out
}
