//! A small differentiable text classifier.
//!
//! Shared encoder: token embedding, optionally a GRU, then max pooling over
//! the sequence. Two heads (topic and sentiment), each dense → ReLU →
//! dense → logistic. Dropout on the latent vector and inside both heads.
//! Gradients are exact reverse-mode derivatives computed from a recorded
//! forward pass ([`Tape`]).

use std::collections::HashMap;
use std::fs;
use std::ops::{Deref, DerefMut};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Probability clamp used by the loss.
pub const PROB_EPS: f64 = 1e-12;
pub const UNK_TOKEN: &str = "<unk>";

/// Layer widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub vocab: usize,
    pub emb: usize,
    pub hid: usize,
    pub head: usize,
}

impl Dims {
    pub fn new(vocab: usize) -> Self {
        Dims {
            vocab,
            emb: 32,
            hid: 32,
            head: 16,
        }
    }

    pub fn latent(&self, use_gru: bool) -> usize {
        if use_gru {
            self.hid
        } else {
            self.emb
        }
    }
}

/// Visits every tensor of a parameter set in a fixed order. Callbacks
/// receive the tensor's name, data and shape.
#[allow(clippy::type_complexity)]
pub trait Tensors {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a [f64], &[usize]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64], &[usize]));

    fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.visit(&mut |name, _, shape| out.push((name.to_string(), shape.to_vec())));
        out
    }

    fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit(&mut |_, data, _| out.extend_from_slice(data));
        out
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, data, _| ok &= data.iter().all(|x| x.is_finite()));
        ok
    }
}

fn v1(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

fn v2(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

fn m1(a: &mut Array1<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

fn m2(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

fn uniform1(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| rng.gen_range(-scale..=scale))
}

fn uniform2(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.gen_range(-scale..=scale))
}

/// Gate weights of the recurrent cell: input projections `w_*` are
/// `emb × hid`, recurrent projections `u_*` are `hid × hid`.
#[derive(Debug, Clone, PartialEq)]
pub struct GruParams {
    pub w_r: Array2<f64>,
    pub u_r: Array2<f64>,
    pub b_r: Array1<f64>,
    pub w_u: Array2<f64>,
    pub u_u: Array2<f64>,
    pub b_u: Array1<f64>,
    pub w_n: Array2<f64>,
    pub u_n: Array2<f64>,
    pub b_n: Array1<f64>,
}

impl GruParams {
    fn zeros(emb: usize, hid: usize) -> Self {
        GruParams {
            w_r: Array2::zeros((emb, hid)),
            u_r: Array2::zeros((hid, hid)),
            b_r: Array1::zeros(hid),
            w_u: Array2::zeros((emb, hid)),
            u_u: Array2::zeros((hid, hid)),
            b_u: Array1::zeros(hid),
            w_n: Array2::zeros((emb, hid)),
            u_n: Array2::zeros((hid, hid)),
            b_n: Array1::zeros(hid),
        }
    }

    fn random(rng: &mut ChaCha8Rng, emb: usize, hid: usize, scale: f64) -> Self {
        GruParams {
            w_r: uniform2(rng, emb, hid, scale),
            u_r: uniform2(rng, hid, hid, scale),
            b_r: uniform1(rng, hid, scale),
            w_u: uniform2(rng, emb, hid, scale),
            u_u: uniform2(rng, hid, hid, scale),
            b_u: uniform1(rng, hid, scale),
            w_n: uniform2(rng, emb, hid, scale),
            u_n: uniform2(rng, hid, hid, scale),
            b_n: uniform1(rng, hid, scale),
        }
    }

    pub fn hidden(&self) -> usize {
        self.b_r.len()
    }
}

impl Tensors for GruParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a [f64], &[usize])) {
        for (name, w, u, b) in [
            ("r", &self.w_r, &self.u_r, &self.b_r),
            ("u", &self.w_u, &self.u_u, &self.b_u),
            ("n", &self.w_n, &self.u_n, &self.b_n),
        ] {
            f(&format!("gru.w_{name}"), v2(w), w.shape());
            f(&format!("gru.u_{name}"), v2(u), u.shape());
            f(&format!("gru.b_{name}"), v1(b), b.shape());
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64], &[usize])) {
        for (name, w, u, b) in [
            ("r", &mut self.w_r, &mut self.u_r, &mut self.b_r),
            ("u", &mut self.w_u, &mut self.u_u, &mut self.b_u),
            ("n", &mut self.w_n, &mut self.u_n, &mut self.b_n),
        ] {
            let s = w.shape().to_vec();
            f(&format!("gru.w_{name}"), m2(w), &s);
            let s = u.shape().to_vec();
            f(&format!("gru.u_{name}"), m2(u), &s);
            let s = b.shape().to_vec();
            f(&format!("gru.b_{name}"), m1(b), &s);
        }
    }
}

/// Shared encoder parameters (θ).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    /// `vocab × emb`
    pub embedding: Array2<f64>,
    pub gru: Option<GruParams>,
}

impl EncoderParams {
    pub fn use_gru(&self) -> bool {
        self.gru.is_some()
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.gru.as_ref().map_or(self.embedding.ncols(), GruParams::hidden)
    }

    pub fn zeros_like(&self) -> Self {
        EncoderParams {
            embedding: Array2::zeros(self.embedding.raw_dim()),
            gru: self
                .gru
                .as_ref()
                .map(|g| GruParams::zeros(g.w_r.nrows(), g.hidden())),
        }
    }
}

impl Tensors for EncoderParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a [f64], &[usize])) {
        f("embedding", v2(&self.embedding), self.embedding.shape());
        if let Some(g) = &self.gru {
            g.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64], &[usize])) {
        let s = self.embedding.shape().to_vec();
        f("embedding", m2(&mut self.embedding), &s);
        if let Some(g) = &mut self.gru {
            g.visit_mut(f);
        }
    }
}

/// Classification head (ϕ or ψ): `z · w1 + b1 → relu → · w2 + b2 → σ`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// `latent × head`
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// `head × 1`, stored flat.
    pub w2: Array1<f64>,
    pub b2: f64,
}

impl HeadParams {
    pub fn zeros(latent: usize, width: usize) -> Self {
        HeadParams {
            w1: Array2::zeros((latent, width)),
            b1: Array1::zeros(width),
            w2: Array1::zeros(width),
            b2: 0.0,
        }
    }

    pub fn random(rng: &mut ChaCha8Rng, latent: usize, width: usize, scale: f64) -> Self {
        HeadParams {
            w1: uniform2(rng, latent, width, scale),
            b1: uniform1(rng, width, scale),
            w2: uniform1(rng, width, scale),
            b2: rng.gen_range(-scale..=scale),
        }
    }

    pub fn init(latent: usize, width: usize, seed: u64) -> Self {
        HeadParams::random(&mut rng::stream(seed, &[rng::tag("head-init")]), latent, width, 0.1)
    }

    pub fn latent_dim(&self) -> usize {
        self.w1.nrows()
    }
}

impl Tensors for HeadParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a [f64], &[usize])) {
        f("w1", v2(&self.w1), self.w1.shape());
        f("b1", v1(&self.b1), self.b1.shape());
        f("w2", v1(&self.w2), &[self.w2.len(), 1]);
        f("b2", std::slice::from_ref(&self.b2), &[1]);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64], &[usize])) {
        let s = self.w1.shape().to_vec();
        f("w1", m2(&mut self.w1), &s);
        let s = self.b1.shape().to_vec();
        f("b1", m1(&mut self.b1), &s);
        let s = [self.w2.len(), 1];
        f("w2", m1(&mut self.w2), &s);
        f("b2", std::slice::from_mut(&mut self.b2), &[1]);
    }
}

/// θ, ϕ and ψ together.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub topic_head: HeadParams,
    pub sentiment_head: HeadParams,
}

impl ModelParams {
    /// Seeded uniform initialization in `[-scale, scale]` for every tensor.
    pub fn init_uniform(dims: Dims, use_gru: bool, seed: u64, scale: f64) -> Self {
        let mut rng = rng::stream(seed, &[rng::tag("init")]);
        let embedding = uniform2(&mut rng, dims.vocab, dims.emb, scale);
        let gru = use_gru.then(|| GruParams::random(&mut rng, dims.emb, dims.hid, scale));
        let latent = dims.latent(use_gru);
        let topic_head = HeadParams::random(&mut rng, latent, dims.head, scale);
        let sentiment_head = HeadParams::random(&mut rng, latent, dims.head, scale);
        ModelParams {
            encoder: EncoderParams { embedding, gru },
            topic_head,
            sentiment_head,
        }
    }

    pub fn init(dims: Dims, use_gru: bool, seed: u64) -> Self {
        Self::init_uniform(dims, use_gru, seed, 0.1)
    }

    pub fn zeros_like(&self) -> Self {
        let latent = self.encoder.latent_dim();
        let width = self.topic_head.b1.len();
        ModelParams {
            encoder: self.encoder.zeros_like(),
            topic_head: HeadParams::zeros(latent, width),
            sentiment_head: HeadParams::zeros(latent, self.sentiment_head.b1.len()),
        }
    }

    pub fn dims(&self) -> Dims {
        Dims {
            vocab: self.encoder.vocab_size(),
            emb: self.encoder.embedding.ncols(),
            hid: self.encoder.gru.as_ref().map_or(0, GruParams::hidden),
            head: self.sentiment_head.b1.len(),
        }
    }

    pub fn head(&self, kind: HeadKind) -> &HeadParams {
        match kind {
            HeadKind::Topic => &self.topic_head,
            HeadKind::Sentiment => &self.sentiment_head,
        }
    }
}

impl Tensors for ModelParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a [f64], &[usize])) {
        self.encoder.visit(&mut |n, d, s| f(&format!("encoder.{n}"), d, s));
        self.topic_head.visit(&mut |n, d, s| f(&format!("topic_head.{n}"), d, s));
        self.sentiment_head
            .visit(&mut |n, d, s| f(&format!("sentiment_head.{n}"), d, s));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64], &[usize])) {
        self.encoder.visit_mut(&mut |n, d, s| f(&format!("encoder.{n}"), d, s));
        self.topic_head
            .visit_mut(&mut |n, d, s| f(&format!("topic_head.{n}"), d, s));
        self.sentiment_head
            .visit_mut(&mut |n, d, s| f(&format!("sentiment_head.{n}"), d, s));
    }
}

/// Gradients, shaped exactly like the parameters they differentiate.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet(pub ModelParams);

impl Deref for GradientSet {
    type Target = ModelParams;
    fn deref(&self) -> &ModelParams {
        &self.0
    }
}

impl DerefMut for GradientSet {
    fn deref_mut(&mut self) -> &mut ModelParams {
        &mut self.0
    }
}

/// `params ← params − lr · grads`, tensor by tensor.
pub fn sgd_step<P: Tensors>(params: &mut P, grads: &P, lr: f64) -> Result<()> {
    if params.shapes() != grads.shapes() {
        return Err(Error::Shape("gradient and parameter shapes differ".into()));
    }
    let mut g: Vec<&[f64]> = Vec::new();
    grads.visit(&mut |_, d, _| g.push(d));
    let mut i = 0;
    params.visit_mut(&mut |_, p, _| {
        for (x, dx) in p.iter_mut().zip(g[i]) {
            *x -= lr * dx;
        }
        i += 1;
    });
    Ok(())
}

/// Dropout state: evaluation mode is the identity; training mode zeroes
/// each unit with probability `rate` and scales survivors by `1/(1-rate)`.
#[derive(Debug, Clone)]
pub struct Dropout {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn eval() -> Self {
        Dropout { rate: 0.0, rng: None }
    }

    pub fn train(rate: f64, seed: u64) -> Self {
        Dropout {
            rate,
            rng: Some(rng::stream(seed, &[rng::tag("dropout")])),
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some() && self.rate > 0.0
    }

    fn mask(&mut self, n: usize) -> Option<Array1<f64>> {
        if !self.is_training() {
            return None;
        }
        let keep = 1.0 - self.rate;
        let rng = self.rng.as_mut().expect("training mode");
        Some(Array1::from_shape_fn(n, |_| {
            if rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        }))
    }
}

/// Pooled encoder output `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVector(pub Array1<f64>);

#[derive(Debug, Clone)]
struct GruStep {
    h_prev: Array1<f64>,
    r: Array1<f64>,
    u: Array1<f64>,
    n: Array1<f64>,
}

/// Everything the encoder's backward pass needs.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    tokens: Vec<usize>,
    /// Per-position inputs to the pooling layer, `T × latent`.
    states: Array2<f64>,
    gru: Option<Vec<GruStep>>,
    argmax: Vec<usize>,
    mask: Option<Array1<f64>>,
    pub z: Array1<f64>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_tokens(params: &EncoderParams, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::EmptySequence);
    }
    let vocab = params.vocab_size();
    match tokens.iter().find(|&&t| t >= vocab) {
        Some(&id) => Err(Error::TokenOutOfRange { id, vocab }),
        None => Ok(()),
    }
}

/// One GRU step:
/// `r = σ(x·W_r + h·U_r + b_r)`, `u = σ(x·W_u + h·U_u + b_u)`,
/// `n = tanh(x·W_n + (r⊙h)·U_n + b_n)`, `h' = (1−u)⊙n + u⊙h`.
fn gru_step(g: &GruParams, x: ArrayView1<f64>, h: &Array1<f64>) -> GruStep {
    let r = (x.dot(&g.w_r) + h.dot(&g.u_r) + &g.b_r).mapv(sigmoid);
    let u = (x.dot(&g.w_u) + h.dot(&g.u_u) + &g.b_u).mapv(sigmoid);
    let rh = &r * h;
    let n = (x.dot(&g.w_n) + rh.dot(&g.u_n) + &g.b_n).mapv(f64::tanh);
    GruStep {
        h_prev: h.clone(),
        r,
        u,
        n,
    }
}

impl GruStep {
    fn output(&self) -> Array1<f64> {
        (1.0 - &self.u) * &self.n + &self.u * &self.h_prev
    }
}

pub fn encode_traced(
    params: &EncoderParams,
    tokens: &[usize],
    dropout: &mut Dropout,
) -> Result<EncoderTrace> {
    check_tokens(params, tokens)?;
    let embedded = params.embedding.select(Axis(0), tokens);
    let (states, gru) = match &params.gru {
        None => (embedded, None),
        Some(g) => {
            let mut h = Array1::zeros(g.hidden());
            let mut steps = Vec::with_capacity(tokens.len());
            let mut states = Array2::zeros((tokens.len(), g.hidden()));
            for (t, x) in embedded.rows().into_iter().enumerate() {
                let step = gru_step(g, x, &h);
                h = step.output();
                states.row_mut(t).assign(&h);
                steps.push(step);
            }
            (states, Some(steps))
        }
    };
    let dim = states.ncols();
    let mut argmax = vec![0usize; dim];
    let mut pooled = Array1::from_elem(dim, f64::NEG_INFINITY);
    for (t, row) in states.rows().into_iter().enumerate() {
        for j in 0..dim {
            if row[j] > pooled[j] {
                pooled[j] = row[j];
                argmax[j] = t;
            }
        }
    }
    let mask = dropout.mask(dim);
    let z = match &mask {
        Some(m) => &pooled * m,
        None => pooled,
    };
    Ok(EncoderTrace {
        tokens: tokens.to_vec(),
        states,
        gru,
        argmax,
        mask,
        z,
    })
}

/// Encodes a token-id sequence into the latent vector `z`.
pub fn encode(params: &EncoderParams, tokens: &[usize], dropout: &mut Dropout) -> Result<LatentVector> {
    Ok(LatentVector(encode_traced(params, tokens, dropout)?.z))
}

#[derive(Debug, Clone)]
pub struct HeadTrace {
    pre: Array1<f64>,
    mask: Option<Array1<f64>>,
    hidden: Array1<f64>,
    pub logit: f64,
    pub prob: f64,
}

pub fn head_traced(head: &HeadParams, z: &Array1<f64>, dropout: &mut Dropout) -> Result<HeadTrace> {
    if z.len() != head.latent_dim() {
        return Err(Error::Shape(format!(
            "latent vector has {} entries, head expects {}",
            z.len(),
            head.latent_dim()
        )));
    }
    let pre = z.dot(&head.w1) + &head.b1;
    let act = pre.mapv(|a| a.max(0.0));
    let mask = dropout.mask(act.len());
    let hidden = match &mask {
        Some(m) => &act * m,
        None => act,
    };
    let logit = hidden.dot(&head.w2) + head.b2;
    Ok(HeadTrace {
        pre,
        mask,
        hidden,
        logit,
        prob: sigmoid(logit),
    })
}

/// Probability that the head assigns the positive class.
pub fn head_forward(z: &LatentVector, head: &HeadParams, dropout: &mut Dropout) -> Result<f64> {
    Ok(head_traced(head, &z.0, dropout)?.prob)
}

/// Binary cross-entropy of one prediction, with `pred` clamped to
/// `[PROB_EPS, 1 − PROB_EPS]`.
pub fn bce_loss(pred: f64, label: bool) -> f64 {
    let p = pred.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if label {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Mean binary cross-entropy over a batch.
pub fn bce_batch(preds: &[f64], labels: &[bool]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::Shape(format!("{} predictions vs {} labels", preds.len(), labels.len())));
    }
    if preds.is_empty() {
        return Ok(0.0);
    }
    Ok(preds.iter().zip(labels).map(|(&p, &y)| bce_loss(p, y)).sum::<f64>() / preds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Topic,
    Sentiment,
}

#[derive(Debug, Clone)]
struct TapeEntry {
    head: HeadKind,
    label: bool,
    encoder: EncoderTrace,
    head_trace: HeadTrace,
}

/// Records the forward computation of a batch loss
/// `coeff · mean_i BCE(p_i, y_i)` for later differentiation.
#[derive(Debug, Clone)]
pub struct Tape {
    coeff: f64,
    entries: Vec<TapeEntry>,
}

impl Tape {
    pub fn new(coeff: f64) -> Self {
        Tape {
            coeff,
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Runs one example through the encoder and the chosen head, records
    /// it, and returns the predicted probability.
    pub fn record(
        &mut self,
        params: &ModelParams,
        head: HeadKind,
        tokens: &[usize],
        label: bool,
        dropout: &mut Dropout,
    ) -> Result<f64> {
        let encoder = encode_traced(&params.encoder, tokens, dropout)?;
        let head_trace = head_traced(params.head(head), &encoder.z, dropout)?;
        let prob = head_trace.prob;
        self.entries.push(TapeEntry {
            head,
            label,
            encoder,
            head_trace,
        });
        Ok(prob)
    }

    /// Mean BCE over the recorded examples, without the coefficient.
    pub fn mean_bce(&self) -> f64 {
        if self.entries.is_empty() {
            return 0.0;
        }
        let sum: f64 = self
            .entries
            .iter()
            .map(|e| bce_loss(e.head_trace.prob, e.label))
            .sum();
        sum / self.entries.len() as f64
    }

    /// The recorded loss, `coeff · mean_bce`.
    pub fn loss(&self) -> f64 {
        self.coeff * self.mean_bce()
    }

    /// Exact gradients of [`Tape::loss`] with respect to every parameter.
    pub fn backward(&self, params: &ModelParams) -> Result<GradientSet> {
        self.backward_impl(params, true)
    }

    /// Like [`Tape::backward`] but stops at the latent vector: encoder
    /// gradients are left at zero.
    pub fn backward_heads(&self, params: &ModelParams) -> Result<GradientSet> {
        self.backward_impl(params, false)
    }

    fn backward_impl(&self, params: &ModelParams, through_encoder: bool) -> Result<GradientSet> {
        if self.entries.is_empty() {
            return Err(Error::BackwardBeforeForward);
        }
        let mut grads = GradientSet(params.zeros_like());
        let scale = self.coeff / self.entries.len() as f64;
        for e in &self.entries {
            let y = if e.label { 1.0 } else { 0.0 };
            let dlogit = scale * (e.head_trace.prob - y);
            let (head, dhead) = match e.head {
                HeadKind::Topic => (&params.topic_head, &mut grads.0.topic_head),
                HeadKind::Sentiment => (&params.sentiment_head, &mut grads.0.sentiment_head),
            };
            let dz = head_backward(head, &e.encoder.z, &e.head_trace, dlogit, dhead);
            if through_encoder {
                encoder_backward(&params.encoder, &e.encoder, &dz, &mut grads.0.encoder);
            }
        }
        Ok(grads)
    }
}

/// Gradient of a head's parameters for one example with upstream `∂loss/∂logit`.
pub fn head_gradient(head: &HeadParams, z: &Array1<f64>, trace: &HeadTrace, dlogit: f64) -> HeadParams {
    let mut g = HeadParams::zeros(head.latent_dim(), head.b1.len());
    head_backward(head, z, trace, dlogit, &mut g);
    g
}

/// Accumulates head gradients; returns `∂loss/∂z`.
fn head_backward(
    head: &HeadParams,
    z: &Array1<f64>,
    trace: &HeadTrace,
    dlogit: f64,
    grads: &mut HeadParams,
) -> Array1<f64> {
    grads.b2 += dlogit;
    grads.w2.scaled_add(dlogit, &trace.hidden);
    let mut dact = &head.w2 * dlogit;
    if let Some(m) = &trace.mask {
        dact *= m;
    }
    let dpre = Array1::from_shape_fn(dact.len(), |j| if trace.pre[j] > 0.0 { dact[j] } else { 0.0 });
    grads.b1 += &dpre;
    for (i, &zi) in z.iter().enumerate() {
        if zi != 0.0 {
            grads.w1.row_mut(i).scaled_add(zi, &dpre);
        }
    }
    head.w1.dot(&dpre)
}

fn encoder_backward(
    params: &EncoderParams,
    trace: &EncoderTrace,
    dz: &Array1<f64>,
    grads: &mut EncoderParams,
) {
    let mut dpooled = dz.clone();
    if let Some(m) = &trace.mask {
        dpooled *= m;
    }
    let mut dstates = Array2::<f64>::zeros(trace.states.raw_dim());
    for (j, &t) in trace.argmax.iter().enumerate() {
        dstates[[t, j]] += dpooled[j];
    }
    match (&params.gru, &trace.gru, &mut grads.gru) {
        (Some(g), Some(steps), Some(dg)) => {
            let mut dh_next = Array1::<f64>::zeros(g.hidden());
            for t in (0..steps.len()).rev() {
                let s = &steps[t];
                let x = params.embedding.row(trace.tokens[t]);
                let dh = &dstates.row(t) + &dh_next;

                let dn = &dh * &(1.0 - &s.u);
                let du = &dh * &(&s.h_prev - &s.n);
                let mut dh_prev = &dh * &s.u;

                let da_n = &dn * &(1.0 - &s.n * &s.n);
                let rh = &s.r * &s.h_prev;
                outer_add(&mut dg.w_n, x, &da_n);
                outer_add(&mut dg.u_n, rh.view(), &da_n);
                dg.b_n += &da_n;
                let drh = g.u_n.dot(&da_n);
                let mut dx = g.w_n.dot(&da_n);
                let dr = &drh * &s.h_prev;
                dh_prev += &(&drh * &s.r);

                let da_u = &du * &(&s.u * &(1.0 - &s.u));
                outer_add(&mut dg.w_u, x, &da_u);
                outer_add(&mut dg.u_u, s.h_prev.view(), &da_u);
                dg.b_u += &da_u;
                dx += &g.w_u.dot(&da_u);
                dh_prev += &g.u_u.dot(&da_u);

                let da_r = &dr * &(&s.r * &(1.0 - &s.r));
                outer_add(&mut dg.w_r, x, &da_r);
                outer_add(&mut dg.u_r, s.h_prev.view(), &da_r);
                dg.b_r += &da_r;
                dx += &g.w_r.dot(&da_r);
                dh_prev += &g.u_r.dot(&da_r);

                grads.embedding.row_mut(trace.tokens[t]).scaled_add(1.0, &dx);
                dh_next = dh_prev;
            }
        }
        _ => {
            for (t, row) in dstates.rows().into_iter().enumerate() {
                grads.embedding.row_mut(trace.tokens[t]).scaled_add(1.0, &row);
            }
        }
    }
}

fn outer_add(m: &mut Array2<f64>, a: ArrayView1<f64>, b: &Array1<f64>) {
    for (i, &ai) in a.iter().enumerate() {
        if ai != 0.0 {
            m.row_mut(i).scaled_add(ai, b);
        }
    }
}

/// Token inventory for the embedding table. Id 0 is the unknown token and
/// the mask token is always present.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a String>) -> Self {
        let mut set: std::collections::BTreeSet<&str> = tokens.into_iter().map(String::as_str).collect();
        set.remove(UNK_TOKEN);
        set.insert(crate::corpus::MASK_TOKEN);
        let list: Vec<String> = std::iter::once(UNK_TOKEN)
            .chain(set)
            .map(String::from)
            .collect();
        Vocab::from_tokens(list)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}

pub const CHECKPOINT_FORMAT: &str = "debias-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A serialized model: vocabulary plus every tensor with its shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub vocab: Vocab,
    pub params: ModelParams,
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    epoch: usize,
    use_gru: bool,
    dims: Dims,
    vocab: Vec<String>,
    tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let mut tensors = Vec::new();
        self.params.visit(&mut |name, data, shape| {
            tensors.push(TensorRecord {
                name: name.to_string(),
                shape: shape.to_vec(),
                data: data.to_vec(),
            })
        });
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            epoch: self.epoch,
            use_gru: self.params.encoder.use_gru(),
            dims: self.params.dims(),
            vocab: self.vocab.tokens.clone(),
            tensors,
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text)?;
        if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                file.format, file.version
            )));
        }
        if file.vocab.len() != file.dims.vocab {
            return Err(Error::Checkpoint("vocabulary size disagrees with dims".into()));
        }
        let mut params = ModelParams::init_uniform(file.dims, file.use_gru, 0, 0.0).zeros_like();
        let by_name: HashMap<&str, &TensorRecord> =
            file.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let mut problem = None;
        let mut filled = 0;
        params.visit_mut(&mut |name, data, shape| match by_name.get(name) {
            Some(t) if t.shape == shape && t.data.len() == data.len() => {
                data.copy_from_slice(&t.data);
                filled += 1;
            }
            Some(_) => problem = Some(format!("tensor {name} has the wrong shape")),
            None => problem = Some(format!("tensor {name} missing")),
        });
        if let Some(p) = problem {
            return Err(Error::Checkpoint(p));
        }
        if filled != file.tensors.len() {
            return Err(Error::Checkpoint("unexpected extra tensors".into()));
        }
        Ok(Checkpoint {
            epoch: file.epoch,
            vocab: Vocab::from_tokens(file.vocab),
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Sentiment probability for raw tokens, in evaluation mode.
    pub fn predict(&self, tokens: &[String]) -> Result<f64> {
        predict_sentiment(&self.params, &self.vocab.encode(tokens))
    }
}

/// Anger probability in evaluation mode.
pub fn predict_sentiment(params: &ModelParams, tokens: &[usize]) -> Result<f64> {
    let mut eval = Dropout::eval();
    let z = encode_traced(&params.encoder, tokens, &mut eval)?.z;
    Ok(head_traced(&params.sentiment_head, &z, &mut eval)?.prob)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny(use_gru: bool, seed: u64) -> ModelParams {
        let dims = Dims {
            vocab: 6,
            emb: 3,
            hid: 4,
            head: 3,
        };
        ModelParams::init_uniform(dims, use_gru, seed, 1.0)
    }

    /// Central-difference gradient of a scalar function of all parameters.
    fn numeric_grad(params: &ModelParams, f: &dyn Fn(&ModelParams) -> f64) -> Vec<f64> {
        let h = 1e-5;
        let n = params.flat().len();
        (0..n)
            .map(|k| {
                let shifted = |delta: f64| {
                    let mut p = params.clone();
                    let mut i = 0;
                    p.visit_mut(&mut |_, d, _| {
                        for x in d.iter_mut() {
                            if i == k {
                                *x += delta;
                            }
                            i += 1;
                        }
                    });
                    f(&p)
                };
                (shifted(h) - shifted(-h)) / (2.0 * h)
            })
            .collect()
    }

    fn batch_loss(p: &ModelParams, head: HeadKind, batch: &[(Vec<usize>, bool)], coeff: f64) -> Tape {
        let mut tape = Tape::new(coeff);
        let mut eval = Dropout::eval();
        for (toks, y) in batch {
            tape.record(p, head, toks, *y, &mut eval).unwrap();
        }
        tape
    }

    fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let batch = vec![
            (vec![1, 2, 3], true),
            (vec![4, 0], false),
            (vec![5, 5, 1, 2], true),
        ];
        for use_gru in [false, true] {
            for head in [HeadKind::Topic, HeadKind::Sentiment] {
                for seed in 0..3 {
                    let p = tiny(use_gru, seed);
                    let tape = batch_loss(&p, head, &batch, 0.7);
                    let analytic = tape.backward(&p).unwrap().flat();
                    let numeric = numeric_grad(&p, &|q| batch_loss(q, head, &batch, 0.7).loss());
                    let err = max_rel_err(&analytic, &numeric);
                    assert!(err < 1e-4, "gru={use_gru} head={head:?} seed={seed}: {err}");
                }
            }
        }
    }

    #[test]
    fn off_path_parameters_get_exactly_zero_gradient() {
        let p = tiny(true, 3);
        let tape = batch_loss(&p, HeadKind::Sentiment, &[(vec![1, 2], true)], 1.0);
        let g = tape.backward(&p).unwrap();
        assert!(g.topic_head.flat().iter().all(|&x| x == 0.0));
        assert!(g.sentiment_head.flat().iter().any(|&x| x != 0.0));
        let g = tape.backward_heads(&p).unwrap();
        assert!(g.encoder.flat().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_coefficient_gives_zero_gradient() {
        let p = tiny(false, 1);
        let tape = batch_loss(&p, HeadKind::Topic, &[(vec![1, 2], true)], 0.0);
        assert!(tape.backward(&p).unwrap().flat().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn backward_before_forward_errors() {
        let p = tiny(false, 0);
        assert!(matches!(Tape::new(1.0).backward(&p), Err(Error::BackwardBeforeForward)));
    }

    #[test]
    fn logit_gradient_is_p_minus_y() {
        let mut p = tiny(false, 0);
        p.sentiment_head = HeadParams::zeros(3, 3);
        let tape = batch_loss(&p, HeadKind::Sentiment, &[(vec![1], true)], 1.0);
        assert_eq!(tape.backward(&p).unwrap().sentiment_head.b2, -0.5);
        assert!((tape.loss() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn single_token_encoding_is_its_embedding() {
        let p = tiny(false, 0);
        let z = encode(&p.encoder, &[4], &mut Dropout::eval()).unwrap();
        assert_eq!(z.0, p.encoder.embedding.row(4).to_owned());
        let z2 = encode(&p.encoder, &[4, 4], &mut Dropout::eval()).unwrap();
        assert_eq!(z, z2);
    }

    #[test]
    fn max_pooling_without_gru_ignores_order() {
        let p = tiny(false, 2);
        let a = encode(&p.encoder, &[1, 2, 3, 5], &mut Dropout::eval()).unwrap();
        let b = encode(&p.encoder, &[5, 3, 1, 2], &mut Dropout::eval()).unwrap();
        assert_eq!(a, b);
        let p = tiny(true, 2);
        let a = encode(&p.encoder, &[1, 2, 3, 5], &mut Dropout::eval()).unwrap();
        let b = encode(&p.encoder, &[5, 3, 1, 2], &mut Dropout::eval()).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn gru_matches_hand_evaluation() {
        // 2-d embeddings and state, every weight set by hand.
        let enc = EncoderParams {
            embedding: array![[0.5, -1.0], [1.0, 0.25], [-0.5, 0.75]],
            gru: Some(GruParams {
                w_r: array![[0.1, 0.2], [0.3, 0.4]],
                u_r: array![[0.5, -0.1], [0.2, 0.3]],
                b_r: array![0.0, 0.1],
                w_u: array![[-0.2, 0.1], [0.4, -0.3]],
                u_u: array![[0.1, 0.1], [-0.2, 0.2]],
                b_u: array![0.05, -0.05],
                w_n: array![[0.6, -0.4], [0.2, 0.1]],
                u_n: array![[0.3, 0.2], [-0.1, 0.4]],
                b_n: array![-0.1, 0.2],
            }),
        };
        let g = enc.gru.as_ref().unwrap();
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        // Scalar reference loop written out component by component.
        let mut h = [0.0f64; 2];
        let mut hs = Vec::new();
        for &tok in &[0usize, 1, 2] {
            let x = [enc.embedding[[tok, 0]], enc.embedding[[tok, 1]]];
            let lin = |w: &Array2<f64>, u: &Array2<f64>, b: &Array1<f64>, hh: [f64; 2], j: usize| {
                x[0] * w[[0, j]] + x[1] * w[[1, j]] + hh[0] * u[[0, j]] + hh[1] * u[[1, j]] + b[j]
            };
            let r = [sig(lin(&g.w_r, &g.u_r, &g.b_r, h, 0)), sig(lin(&g.w_r, &g.u_r, &g.b_r, h, 1))];
            let u = [sig(lin(&g.w_u, &g.u_u, &g.b_u, h, 0)), sig(lin(&g.w_u, &g.u_u, &g.b_u, h, 1))];
            let rh = [r[0] * h[0], r[1] * h[1]];
            let n = [
                lin(&g.w_n, &g.u_n, &g.b_n, rh, 0).tanh(),
                lin(&g.w_n, &g.u_n, &g.b_n, rh, 1).tanh(),
            ];
            h = [
                (1.0 - u[0]) * n[0] + u[0] * h[0],
                (1.0 - u[1]) * n[1] + u[1] * h[1],
            ];
            hs.push(h);
        }
        let trace = encode_traced(&enc, &[0, 1, 2], &mut Dropout::eval()).unwrap();
        for (t, h) in hs.iter().enumerate() {
            assert!((trace.states[[t, 0]] - h[0]).abs() < 1e-12);
            assert!((trace.states[[t, 1]] - h[1]).abs() < 1e-12);
        }
        let expect_max = [
            hs.iter().map(|h| h[0]).fold(f64::MIN, f64::max),
            hs.iter().map(|h| h[1]).fold(f64::MIN, f64::max),
        ];
        assert!((trace.z[0] - expect_max[0]).abs() < 1e-12);
        assert!((trace.z[1] - expect_max[1]).abs() < 1e-12);
    }

    #[test]
    fn encode_rejects_bad_tokens() {
        let p = tiny(false, 0);
        assert!(matches!(
            encode(&p.encoder, &[6], &mut Dropout::eval()),
            Err(Error::TokenOutOfRange { id: 6, vocab: 6 })
        ));
        assert!(matches!(encode(&p.encoder, &[], &mut Dropout::eval()), Err(Error::EmptySequence)));
    }

    #[test]
    fn zero_head_outputs_half() {
        let z = LatentVector(array![0.3, -2.0, 5.0]);
        assert_eq!(head_forward(&z, &HeadParams::zeros(3, 4), &mut Dropout::eval()).unwrap(), 0.5);
        assert!(head_forward(&z, &HeadParams::zeros(2, 4), &mut Dropout::eval()).is_err());
    }

    #[test]
    fn head_matches_hand_arithmetic() {
        let head = HeadParams {
            w1: array![[1.0, -2.0], [0.5, 1.5]],
            b1: array![0.1, -0.2],
            w2: array![0.7, -0.3],
            b2: 0.05,
        };
        let z = LatentVector(array![0.4, 0.8]);
        // pre = [0.4 + 0.4 + 0.1, -0.8 + 1.2 - 0.2] = [0.9, 0.2]
        // logit = 0.9*0.7 + 0.2*(-0.3) + 0.05 = 0.62
        let expected = 1.0 / (1.0 + (-0.62f64).exp());
        let p = head_forward(&z, &head, &mut Dropout::eval()).unwrap();
        assert!((p - expected).abs() < 1e-12);
    }

    #[test]
    fn head_output_strictly_inside_unit_interval() {
        let mut rng = rng::stream(5, &[]);
        for _ in 0..1000 {
            let head = HeadParams::random(&mut rng, 4, 3, 2.0);
            let z = LatentVector(uniform1(&mut rng, 4, 3.0));
            let p = head_forward(&z, &head, &mut Dropout::eval()).unwrap();
            assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn bce_values() {
        assert!((bce_loss(0.5, true) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce_loss(1.0 - 1e-9, true) < 1e-8);
        assert!(bce_loss(0.0, true).is_finite());
        let expected = (-(0.9f64).ln() - (0.8f64).ln()) / 2.0;
        assert!((bce_batch(&[0.9, 0.2], &[true, false]).unwrap() - expected).abs() < 1e-15);
        assert!(bce_batch(&[0.9], &[true, false]).is_err());
    }

    #[test]
    fn sgd_arithmetic() {
        let mut p = HeadParams::zeros(1, 1);
        p.b2 = 1.0;
        let mut g = HeadParams::zeros(1, 1);
        g.b2 = 2.0;
        sgd_step(&mut p, &g, 0.1).unwrap();
        assert!((p.b2 - 0.8).abs() < 1e-15);

        let orig = tiny(true, 4);
        let grads = tiny(true, 5);
        let mut q = orig.clone();
        sgd_step(&mut q, &grads, 0.0).unwrap();
        assert_eq!(q, orig);

        let mut once = orig.clone();
        let mut twice = orig.clone();
        let mut doubled = grads.clone();
        doubled.visit_mut(&mut |_, d, _| d.iter_mut().for_each(|x| *x *= 2.0));
        sgd_step(&mut once, &doubled, 0.25).unwrap();
        sgd_step(&mut twice, &grads, 0.25).unwrap();
        sgd_step(&mut twice, &grads, 0.25).unwrap();
        for (a, b) in once.flat().iter().zip(twice.flat()) {
            assert!((a - b).abs() < 1e-12);
        }

        let mut wrong = tiny(false, 0);
        assert!(sgd_step(&mut wrong, &grads, 0.1).is_err());
    }

    #[test]
    fn dropout_eval_identity_and_train_unbiased() {
        let p = tiny(false, 7);
        let tokens = [1, 2, 3];
        let eval = encode(&p.encoder, &tokens, &mut Dropout::eval()).unwrap().0;
        let rate = 0.3;
        let trials = 20_000;
        let mut dropout = Dropout::train(rate, 11);
        let mut sum = Array1::<f64>::zeros(eval.len());
        for _ in 0..trials {
            sum += &encode(&p.encoder, &tokens, &mut dropout).unwrap().0;
        }
        let mean = sum / trials as f64;
        for (m, e) in mean.iter().zip(&eval) {
            // Each draw is e/(1-r) w.p. 1-r, else 0: sd = |e|·sqrt(r/(1-r)).
            let sd = e.abs() * (rate / (1.0 - rate)).sqrt() / (trials as f64).sqrt();
            assert!((m - e).abs() <= 3.0 * sd + 1e-12, "mean {m} vs {e}");
        }
    }

    #[test]
    fn forward_is_deterministic_given_dropout_seed() {
        let p = tiny(true, 1);
        let run = || {
            let mut d = Dropout::train(0.5, 99);
            (0..5)
                .map(|_| encode(&p.encoder, &[1, 2, 3], &mut d).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn checkpoint_round_trip() {
        for use_gru in [false, true] {
            let ck = Checkpoint {
                epoch: 3,
                vocab: Vocab::build(["b", "a", "c", "<unk>", "x"].map(String::from).iter()),
                params: tiny(use_gru, 8),
            };
            let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.to_json().unwrap(), ck.to_json().unwrap());
        }
        assert!(Checkpoint::from_json(r#"{"format":"other"}"#).is_err());
    }

    #[test]
    fn vocab_reserves_unknown_and_mask() {
        let v = Vocab::build(["z", "a"].map(String::from).iter());
        assert_eq!(v.tokens(), ["<unk>", "a", "it", "z"]);
        assert_eq!(v.id("nope"), 0);
        assert_eq!(v.encode(&["a".into(), "it".into()]), vec![1, 2]);
    }
}
