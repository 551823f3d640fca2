//! Small pre-LayerNorm transformer encoder with a sigmoid head, trained with
//! binary cross-entropy.
//!
//! All parameters live in one flat `Vec<f64>`; [`Layout`] records where each
//! tensor sits. Gradients use the same layout, which keeps the optimizer,
//! clipping, gradient checks and checkpoints trivial.
//!
//! Masked positions are dropped before the encoder runs (each kept token
//! retains its original position embedding), so padding cannot influence
//! the output at all.

mod checkpoint;
mod gradcheck;
mod predict;
mod train;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, GradCheckReport, ProbeSet};
pub use predict::{predict, Prediction, Scorer};
pub use train::{accuracy, train, LabeledInput, TrainConfig};

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::context::ContextConfig;
use crate::error::{Error, Result};
use crate::tokenize::AssembledInput;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub n_segments: usize,
    pub dropout: f64,
    pub max_seq_len: usize,
}

impl ModelConfig {
    /// Default dimensions, sized to the vocabulary and context settings.
    pub fn for_context(vocab_size: usize, ctx: &ContextConfig) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            ffn_dim: 128,
            n_segments: ctx.segment_count(),
            dropout: 0.1,
            max_seq_len: ctx.max_seq_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("ffn_dim", self.ffn_dim),
            ("n_segments", self.n_segments),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    /// Checks that inputs assembled under `ctx` fit this model.
    pub fn check_context(&self, ctx: &ContextConfig) -> Result<()> {
        if ctx.segment_count() > self.n_segments {
            return Err(Error::Config(format!(
                "max_triples {} needs {} segments but the model has {}",
                ctx.max_triples,
                ctx.segment_count(),
                self.n_segments
            )));
        }
        if ctx.max_seq_len > self.max_seq_len {
            return Err(Error::Config(format!(
                "context max_seq_len {} exceeds the model's {}",
                ctx.max_seq_len, self.max_seq_len
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LayerLayout {
    ln1_g: Range<usize>,
    ln1_b: Range<usize>,
    wq: Range<usize>,
    bq: Range<usize>,
    wk: Range<usize>,
    bk: Range<usize>,
    wv: Range<usize>,
    bv: Range<usize>,
    wo: Range<usize>,
    bo: Range<usize>,
    ln2_g: Range<usize>,
    ln2_b: Range<usize>,
    w1: Range<usize>,
    b1: Range<usize>,
    w2: Range<usize>,
    b2: Range<usize>,
}

/// Offsets of every tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    tok: Range<usize>,
    pos: Range<usize>,
    seg: Range<usize>,
    layers: Vec<LayerLayout>,
    lnf_g: Range<usize>,
    lnf_b: Range<usize>,
    head_w: Range<usize>,
    head_b: Range<usize>,
    total: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Embedding,
    /// Xavier-uniform with (fan_in, fan_out).
    Matrix(usize, usize),
    Zero,
    One,
}

impl Layout {
    fn new(cfg: &ModelConfig) -> (Self, Vec<(Range<usize>, Init)>) {
        let d = cfg.d_model;
        let f = cfg.ffn_dim;
        let mut next = 0;
        let mut inits = Vec::new();
        let mut take = |n: usize, init: Init| {
            let r = next..next + n;
            next += n;
            inits.push((r.clone(), init));
            r
        };
        let tok = take(cfg.vocab_size * d, Init::Embedding);
        let pos = take(cfg.max_seq_len * d, Init::Embedding);
        let seg = take(cfg.n_segments * d, Init::Embedding);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerLayout {
                ln1_g: take(d, Init::One),
                ln1_b: take(d, Init::Zero),
                wq: take(d * d, Init::Matrix(d, d)),
                bq: take(d, Init::Zero),
                wk: take(d * d, Init::Matrix(d, d)),
                bk: take(d, Init::Zero),
                wv: take(d * d, Init::Matrix(d, d)),
                bv: take(d, Init::Zero),
                wo: take(d * d, Init::Matrix(d, d)),
                bo: take(d, Init::Zero),
                ln2_g: take(d, Init::One),
                ln2_b: take(d, Init::Zero),
                w1: take(d * f, Init::Matrix(d, f)),
                b1: take(f, Init::Zero),
                w2: take(f * d, Init::Matrix(f, d)),
                b2: take(d, Init::Zero),
            })
            .collect();
        let lnf_g = take(d, Init::One);
        let lnf_b = take(d, Init::Zero);
        let head_w = take(d, Init::Matrix(d, 1));
        let head_b = take(1, Init::Zero);
        let layout = Layout {
            tok,
            pos,
            seg,
            layers,
            lnf_g,
            lnf_b,
            head_w,
            head_b,
            total: next,
        };
        (layout, inits)
    }

    pub fn total(&self) -> usize {
        self.total
    }

    /// Parameter ranges of the classification head (weights and bias).
    pub fn head(&self) -> Range<usize> {
        self.head_w.start..self.head_b.end
    }

    pub fn token_embedding(&self) -> Range<usize> {
        self.tok.clone()
    }

    pub fn position_embedding(&self) -> Range<usize> {
        self.pos.clone()
    }

    pub fn segment_embedding(&self) -> Range<usize> {
        self.seg.clone()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    cfg: ModelConfig,
    layout: Layout,
    params: Vec<f64>,
}

pub fn sigmoid(z: f64) -> f64 {
    let p = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// Binary cross-entropy on a probability, clamped away from 0 and 1.
pub fn bce(p: f64, label: u8) -> f64 {
    const EPS: f64 = 1e-12;
    let p = p.clamp(EPS, 1.0 - EPS);
    if label == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Binary cross-entropy computed from the logit; stable for any `z`.
pub fn bce_with_logit(z: f64, label: u8) -> f64 {
    let y = f64::from(label);
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// Mean per-example loss.
pub fn batch_loss(probs: &[f64], labels: &[u8]) -> f64 {
    if probs.is_empty() {
        return 0.0;
    }
    probs.iter().zip(labels).map(|(&p, &y)| bce(p, y)).sum::<f64>() / probs.len() as f64
}

struct LnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

struct LayerCache {
    ln1: LnCache,
    h1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    o: Vec<f64>,
    attn_drop: Option<Vec<f64>>,
    ln2: LnCache,
    h2: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
    ffn_drop: Option<Vec<f64>>,
}

/// Everything the backward pass needs from one forward pass.
pub(crate) struct Trace {
    positions: Vec<usize>,
    tokens: Vec<usize>,
    segments: Vec<usize>,
    emb_drop: Option<Vec<f64>>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    zf: Vec<f64>,
    pub(crate) logit: f64,
}

fn linear(x: &[f64], n: usize, din: usize, w: &[f64], b: &[f64], dout: usize) -> Vec<f64> {
    let mut y = Vec::with_capacity(n * dout);
    for i in 0..n {
        y.extend_from_slice(b);
        let row = &mut y[i * dout..(i + 1) * dout];
        for (k, &xv) in x[i * din..(i + 1) * din].iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            for (yo, &wv) in row.iter_mut().zip(&w[k * dout..(k + 1) * dout]) {
                *yo += xv * wv;
            }
        }
    }
    y
}

/// Accumulates weight/bias gradients into `gw`/`gb`; returns dx.
#[allow(clippy::too_many_arguments)]
fn linear_backward(
    x: &[f64],
    dy: &[f64],
    n: usize,
    din: usize,
    dout: usize,
    w: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; n * din];
    for i in 0..n {
        let dyr = &dy[i * dout..(i + 1) * dout];
        if dyr.iter().all(|&v| v == 0.0) {
            continue;
        }
        for (g, &d) in gb.iter_mut().zip(dyr) {
            *g += d;
        }
        let xr = &x[i * din..(i + 1) * din];
        let dxr = &mut dx[i * din..(i + 1) * din];
        for k in 0..din {
            let wr = &w[k * dout..(k + 1) * dout];
            let gwr = &mut gw[k * dout..(k + 1) * dout];
            let xv = xr[k];
            let mut acc = 0.0;
            for o in 0..dout {
                acc += dyr[o] * wr[o];
                gwr[o] += xv * dyr[o];
            }
            dxr[k] = acc;
        }
    }
    dx
}

fn layer_norm(x: &[f64], n: usize, d: usize, g: &[f64], b: &[f64]) -> (Vec<f64>, LnCache) {
    let mut y = vec![0.0; n * d];
    let mut xhat = vec![0.0; n * d];
    let mut inv_std = vec![0.0; n];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[i] = is;
        for j in 0..d {
            let xh = (row[j] - mean) * is;
            xhat[i * d + j] = xh;
            y[i * d + j] = g[j] * xh + b[j];
        }
    }
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_backward(dy: &[f64], cache: &LnCache, n: usize, d: usize, g: &[f64], gg: &mut [f64], gb: &mut [f64]) -> Vec<f64> {
    let mut dx = vec![0.0; n * d];
    for i in 0..n {
        let dyr = &dy[i * d..(i + 1) * d];
        if dyr.iter().all(|&v| v == 0.0) {
            continue;
        }
        let xh = &cache.xhat[i * d..(i + 1) * d];
        let mut sum_dxh = 0.0;
        let mut sum_dxh_xh = 0.0;
        for j in 0..d {
            gg[j] += dyr[j] * xh[j];
            gb[j] += dyr[j];
            let dxh = dyr[j] * g[j];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh[j];
        }
        let scale = cache.inv_std[i] / d as f64;
        for j in 0..d {
            let dxh = dyr[j] * g[j];
            dx[i * d + j] = scale * (d as f64 * dxh - sum_dxh - xh[j] * sum_dxh_xh);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn dropout_mask(rng: &mut ChaCha8Rng, len: usize, rate: f64) -> Vec<f64> {
    let keep = 1.0 - rate;
    (0..len)
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect()
}

fn apply_mask(x: &mut [f64], mask: &Option<Vec<f64>>) {
    if let Some(m) = mask {
        for (v, s) in x.iter_mut().zip(m) {
            *v *= s;
        }
    }
}

impl Classifier {
    /// Fresh model with seeded initialization.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (layout, inits) = Layout::new(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let emb = Normal::new(0.0, 1.0 / (cfg.d_model as f64).sqrt()).expect("valid std");
        let mut params = vec![0.0; layout.total];
        for (range, init) in inits {
            let slot = &mut params[range];
            match init {
                Init::Embedding => slot.iter_mut().for_each(|p| *p = emb.sample(&mut rng)),
                Init::Matrix(fan_in, fan_out) => {
                    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let u = Uniform::new(-a, a).expect("valid bounds");
                    slot.iter_mut().for_each(|p| *p = u.sample(&mut rng));
                }
                Init::Zero => {}
                Init::One => slot.iter_mut().for_each(|p| *p = 1.0),
            }
        }
        Ok(Self { cfg, layout, params })
    }

    /// Rebuilds a model from raw parameters, e.g. when loading a checkpoint.
    pub fn from_params(cfg: ModelConfig, params: Vec<f64>) -> Result<Self> {
        cfg.validate()?;
        let (layout, _) = Layout::new(&cfg);
        if params.len() != layout.total {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                layout.total,
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Checkpoint("parameters contain NaN or Inf".into()));
        }
        Ok(Self { cfg, layout, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    fn check_input(&self, input: &AssembledInput) -> Result<()> {
        let n = input.token_ids.len();
        if input.segment_ids.len() != n || input.mask.len() != n {
            return Err(Error::Input("token, segment and mask arrays differ in length".into()));
        }
        if n == 0 || n > self.cfg.max_seq_len {
            return Err(Error::Input(format!(
                "input length {n} outside 1..={}",
                self.cfg.max_seq_len
            )));
        }
        if input.mask[0] != 1 {
            return Err(Error::Input("position 0 ([CLS]) must be unmasked".into()));
        }
        if let Some(&s) = input.segment_ids.iter().find(|&&s| s as usize >= self.cfg.n_segments) {
            return Err(Error::Input(format!(
                "segment id {s} >= n_segments {}",
                self.cfg.n_segments
            )));
        }
        if let Some(&t) = input.token_ids.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
            return Err(Error::Input(format!("token id {t} >= vocab size {}", self.cfg.vocab_size)));
        }
        Ok(())
    }

    /// P(match | input).
    pub fn forward(&self, input: &AssembledInput) -> Result<f64> {
        Ok(sigmoid(self.trace(input, None)?.logit))
    }

    pub fn logit(&self, input: &AssembledInput) -> Result<f64> {
        Ok(self.trace(input, None)?.logit)
    }

    pub(crate) fn trace(&self, input: &AssembledInput, mut rng: Option<&mut ChaCha8Rng>) -> Result<Trace> {
        self.check_input(input)?;
        let cfg = &self.cfg;
        let p = &self.params;
        let ly = &self.layout;
        let d = cfg.d_model;
        let f = cfg.ffn_dim;
        let heads = cfg.n_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let rate = if rng.is_some() { cfg.dropout } else { 0.0 };
        let mut drop = |len: usize| -> Option<Vec<f64>> {
            match rng.as_deref_mut() {
                Some(r) if rate > 0.0 => Some(dropout_mask(r, len, rate)),
                _ => None,
            }
        };

        let positions: Vec<usize> = (0..input.mask.len()).filter(|&i| input.mask[i] == 1).collect();
        let tokens: Vec<usize> = positions.iter().map(|&i| input.token_ids[i] as usize).collect();
        let segments: Vec<usize> = positions.iter().map(|&i| input.segment_ids[i] as usize).collect();
        let n = positions.len();

        let mut x = vec![0.0; n * d];
        for i in 0..n {
            let row = &mut x[i * d..(i + 1) * d];
            let t = &p[ly.tok.start + tokens[i] * d..][..d];
            let ps = &p[ly.pos.start + positions[i] * d..][..d];
            let s = &p[ly.seg.start + segments[i] * d..][..d];
            for j in 0..d {
                row[j] = t[j] + ps[j] + s[j];
            }
        }
        let emb_drop = drop(n * d);
        apply_mask(&mut x, &emb_drop);

        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in &ly.layers {
            let (h1, ln1) = layer_norm(&x, n, d, &p[l.ln1_g.clone()], &p[l.ln1_b.clone()]);
            let q = linear(&h1, n, d, &p[l.wq.clone()], &p[l.bq.clone()], d);
            let k = linear(&h1, n, d, &p[l.wk.clone()], &p[l.bk.clone()], d);
            let v = linear(&h1, n, d, &p[l.wv.clone()], &p[l.bv.clone()], d);
            let mut probs = vec![0.0; heads * n * n];
            let mut o = vec![0.0; n * d];
            for h in 0..heads {
                let off = h * dh;
                for i in 0..n {
                    let pr = &mut probs[(h * n + i) * n..(h * n + i + 1) * n];
                    let qi = &q[i * d + off..i * d + off + dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..n {
                        let kj = &k[j * d + off..j * d + off + dh];
                        let s: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                        pr[j] = s;
                        max = max.max(s);
                    }
                    let mut z = 0.0;
                    for v in pr.iter_mut() {
                        *v = (*v - max).exp();
                        z += *v;
                    }
                    for v in pr.iter_mut() {
                        *v /= z;
                    }
                    let oi = &mut o[i * d + off..i * d + off + dh];
                    for j in 0..n {
                        let w = pr[j];
                        let vj = &v[j * d + off..j * d + off + dh];
                        for t in 0..dh {
                            oi[t] += w * vj[t];
                        }
                    }
                }
            }
            let mut a = linear(&o, n, d, &p[l.wo.clone()], &p[l.bo.clone()], d);
            let attn_drop = drop(n * d);
            apply_mask(&mut a, &attn_drop);
            for (xv, av) in x.iter_mut().zip(&a) {
                *xv += av;
            }

            let (h2, ln2) = layer_norm(&x, n, d, &p[l.ln2_g.clone()], &p[l.ln2_b.clone()]);
            let pre = linear(&h2, n, d, &p[l.w1.clone()], &p[l.b1.clone()], f);
            let act: Vec<f64> = pre.iter().map(|&v| gelu(v)).collect();
            let mut m = linear(&act, n, f, &p[l.w2.clone()], &p[l.b2.clone()], d);
            let ffn_drop = drop(n * d);
            apply_mask(&mut m, &ffn_drop);
            for (xv, mv) in x.iter_mut().zip(&m) {
                *xv += mv;
            }
            layers.push(LayerCache {
                ln1,
                h1,
                q,
                k,
                v,
                probs,
                o,
                attn_drop,
                ln2,
                h2,
                pre,
                act,
                ffn_drop,
            });
        }

        let (zf, lnf) = layer_norm(&x[..d], 1, d, &p[ly.lnf_g.clone()], &p[ly.lnf_b.clone()]);
        let logit = p[ly.head_b.start] + zf.iter().zip(&p[ly.head_w.clone()]).map(|(a, b)| a * b).sum::<f64>();
        Ok(Trace {
            positions,
            tokens,
            segments,
            emb_drop,
            layers,
            lnf,
            zf,
            logit,
        })
    }

    /// Adds d(loss)/d(params) into `grad`, given d(loss)/d(logit).
    pub(crate) fn backward(&self, trace: &Trace, dlogit: f64, grad: &mut [f64]) {
        let cfg = &self.cfg;
        let p = &self.params;
        let ly = &self.layout;
        let d = cfg.d_model;
        let f = cfg.ffn_dim;
        let heads = cfg.n_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let n = trace.positions.len();

        for (g, z) in grad[ly.head_w.clone()].iter_mut().zip(&trace.zf) {
            *g += dlogit * z;
        }
        grad[ly.head_b.start] += dlogit;
        let dzf: Vec<f64> = p[ly.head_w.clone()].iter().map(|w| dlogit * w).collect();
        let (gg, gb) = split_two(grad, &ly.lnf_g, &ly.lnf_b);
        let dcls = layer_norm_backward(&dzf, &trace.lnf, 1, d, &p[ly.lnf_g.clone()], gg, gb);
        let mut dx = vec![0.0; n * d];
        dx[..d].copy_from_slice(&dcls);

        for (l, c) in ly.layers.iter().zip(&trace.layers).rev() {
            // x_out = x_mid + drop(W2 gelu(W1 ln2(x_mid) + b1) + b2)
            let mut dm = dx.clone();
            apply_mask(&mut dm, &c.ffn_drop);
            let (gw, gb) = split_two(grad, &l.w2, &l.b2);
            let dact = linear_backward(&c.act, &dm, n, f, d, &p[l.w2.clone()], gw, gb);
            let dpre: Vec<f64> = dact.iter().zip(&c.pre).map(|(g, &x)| g * gelu_grad(x)).collect();
            let (gw, gb) = split_two(grad, &l.w1, &l.b1);
            let dh2 = linear_backward(&c.h2, &dpre, n, d, f, &p[l.w1.clone()], gw, gb);
            let (gg, gb) = split_two(grad, &l.ln2_g, &l.ln2_b);
            let dmid = layer_norm_backward(&dh2, &c.ln2, n, d, &p[l.ln2_g.clone()], gg, gb);
            for (a, b) in dx.iter_mut().zip(&dmid) {
                *a += b;
            }

            // x_mid = x_in + drop(Wo attn(ln1(x_in)) + bo)
            let mut da = dx.clone();
            apply_mask(&mut da, &c.attn_drop);
            let (gw, gb) = split_two(grad, &l.wo, &l.bo);
            let dout = linear_backward(&c.o, &da, n, d, d, &p[l.wo.clone()], gw, gb);
            let mut dq = vec![0.0; n * d];
            let mut dk = vec![0.0; n * d];
            let mut dv = vec![0.0; n * d];
            let mut dp = vec![0.0; n];
            for h in 0..heads {
                let off = h * dh;
                for i in 0..n {
                    let pr = &c.probs[(h * n + i) * n..(h * n + i + 1) * n];
                    let doi = &dout[i * d + off..i * d + off + dh];
                    let mut dot = 0.0;
                    for j in 0..n {
                        let vj = &c.v[j * d + off..j * d + off + dh];
                        let g: f64 = doi.iter().zip(vj).map(|(a, b)| a * b).sum();
                        dp[j] = g;
                        dot += pr[j] * g;
                        let dvj = &mut dv[j * d + off..j * d + off + dh];
                        for t in 0..dh {
                            dvj[t] += pr[j] * doi[t];
                        }
                    }
                    let qi = &c.q[i * d + off..i * d + off + dh];
                    for j in 0..n {
                        let ds = pr[j] * (dp[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &c.k[j * d + off..j * d + off + dh];
                        for t in 0..dh {
                            dq[i * d + off + t] += ds * kj[t];
                            dk[j * d + off + t] += ds * qi[t];
                        }
                    }
                }
            }
            let (gw, gb) = split_two(grad, &l.wq, &l.bq);
            let mut dh1 = linear_backward(&c.h1, &dq, n, d, d, &p[l.wq.clone()], gw, gb);
            let (gw, gb) = split_two(grad, &l.wk, &l.bk);
            let dh1k = linear_backward(&c.h1, &dk, n, d, d, &p[l.wk.clone()], gw, gb);
            let (gw, gb) = split_two(grad, &l.wv, &l.bv);
            let dh1v = linear_backward(&c.h1, &dv, n, d, d, &p[l.wv.clone()], gw, gb);
            for ((a, b), c2) in dh1.iter_mut().zip(&dh1k).zip(&dh1v) {
                *a += b + c2;
            }
            let (gg, gb) = split_two(grad, &l.ln1_g, &l.ln1_b);
            let din = layer_norm_backward(&dh1, &c.ln1, n, d, &p[l.ln1_g.clone()], gg, gb);
            for (a, b) in dx.iter_mut().zip(&din) {
                *a += b;
            }
        }

        apply_mask(&mut dx, &trace.emb_drop);
        for i in 0..n {
            let row = &dx[i * d..(i + 1) * d];
            for (base, idx) in [
                (ly.tok.start, trace.tokens[i]),
                (ly.pos.start, trace.positions[i]),
                (ly.seg.start, trace.segments[i]),
            ] {
                for (g, v) in grad[base + idx * d..][..d].iter_mut().zip(row) {
                    *g += v;
                }
            }
        }
    }

    /// Loss and gradient for one labeled input, accumulated into `grad`.
    pub(crate) fn loss_and_grad(
        &self,
        input: &AssembledInput,
        label: u8,
        rng: Option<&mut ChaCha8Rng>,
        grad: &mut [f64],
    ) -> Result<f64> {
        let trace = self.trace(input, rng)?;
        let loss = bce_with_logit(trace.logit, label);
        let dlogit = sigmoid(trace.logit) - f64::from(label);
        self.backward(&trace, dlogit, grad);
        Ok(loss)
    }

    /// Full gradient of the loss on one input (no dropout).
    pub fn gradient(&self, input: &AssembledInput, label: u8) -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; self.layout.total];
        let loss = self.loss_and_grad(input, label, None, &mut grad)?;
        Ok((loss, grad))
    }

    /// Loss without dropout, computed from the logit.
    pub fn loss(&self, input: &AssembledInput, label: u8) -> Result<f64> {
        Ok(bce_with_logit(self.logit(input)?, label))
    }
}

/// Two disjoint mutable sub-slices of the gradient vector.
fn split_two<'a>(grad: &'a mut [f64], a: &Range<usize>, b: &Range<usize>) -> (&'a mut [f64], &'a mut [f64]) {
    debug_assert!(a.end <= b.start);
    let (lo, hi) = grad.split_at_mut(b.start);
    (&mut lo[a.clone()], &mut hi[..b.len()])
}
