//! Forward and backward passes of the backbone.
//!
//! Sequence layout: image tokens `m`, prompt tokens `p`, response tokens `d`.
//! Attention is bidirectional inside the prefix `m ++ p` and causal over `d`,
//! with every response position seeing the whole prefix.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::weights::{Group, Layer, Linear, Weights};

const NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4;

/// One model input.
#[derive(Clone, Copy, Debug)]
pub struct Seq<'a> {
    pub m: &'a [u32],
    pub p: &'a [u32],
    pub d: &'a [u32],
}

impl Seq<'_> {
    pub fn prefix_len(&self) -> usize {
        self.m.len() + self.p.len()
    }

    pub fn len(&self) -> usize {
        self.prefix_len() + self.d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn check_seq(cfg: &ModelConfig, seq: &Seq) -> Result<()> {
    if seq.len() > cfg.max_len {
        return Err(Error::LengthOverflow { len: seq.len(), max: cfg.max_len });
    }
    if seq.prefix_len() == 0 {
        return Err(Error::Empty("model prefix"));
    }
    if let Some(t) = seq.m.iter().find(|&&t| t as usize >= cfg.image_vocab) {
        return Err(Error::Vocabulary(format!("image token id {t}")));
    }
    if let Some(t) = seq.p.iter().chain(seq.d).find(|&&t| t as usize >= cfg.text_vocab) {
        return Err(Error::Vocabulary(format!("text token id {t}")));
    }
    Ok(())
}

/// Which parameter groups receive gradients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Trainable {
    pub embeddings: bool,
    pub proj_base: bool,
    pub proj_lora: bool,
    pub dec_base: bool,
    pub dec_lora: bool,
    pub lm_head: bool,
    pub reward: bool,
}

impl Trainable {
    pub fn all() -> Self {
        Self { embeddings: true, proj_base: true, proj_lora: true, dec_base: true, dec_lora: true, lm_head: true, reward: true }
    }

    pub fn wants(&self, g: Group) -> bool {
        match g {
            Group::Embedding => self.embeddings,
            Group::ProjBase => self.proj_base,
            Group::ProjLora => self.proj_lora,
            Group::DecBase => self.dec_base,
            Group::DecLora => self.dec_lora,
            Group::LmHead => self.lm_head,
            Group::Reward => self.reward,
        }
    }

    fn below_head(&self) -> bool {
        self.embeddings || self.proj_base || self.proj_lora || self.dec_base || self.dec_lora
    }

    fn below_decoder(&self) -> bool {
        self.embeddings || self.proj_base || self.proj_lora
    }
}

struct LinCache {
    x: Array2<f64>,
    /// Dropout-masked input of the adapter path, when dropout is active.
    xd: Option<Array2<f64>>,
    keep: Option<Array2<f64>>,
    xa: Option<Array2<f64>>,
}

fn lin_fwd(lin: &Linear, x: Array2<f64>, scale: f64, dropout: &mut Option<(&mut ChaCha8Rng, f64)>) -> (Array2<f64>, LinCache) {
    let mut y = x.dot(&lin.w);
    let mut cache = LinCache { x, xd: None, keep: None, xa: None };
    if let (Some(l), true) = (&lin.lora, scale != 0.0) {
        if let Some((rng, p)) = dropout.as_mut().filter(|(_, p)| *p > 0.0) {
            let inv = 1.0 / (1.0 - *p);
            let keep = Array2::from_shape_simple_fn(cache.x.dim(), || if rng.random::<f64>() < *p { 0.0 } else { inv });
            cache.xd = Some(&cache.x * &keep);
            cache.keep = Some(keep);
        }
        let xa = cache.xd.as_ref().unwrap_or(&cache.x).dot(&l.a);
        y.scaled_add(scale, &xa.dot(&l.b));
        cache.xa = Some(xa);
    }
    (y, cache)
}

fn lin_bwd(
    lin: &Linear,
    cache: &LinCache,
    dy: &Array2<f64>,
    scale: f64,
    grad: &mut Linear,
    base: bool,
    lora: bool,
    need_dx: bool,
) -> Option<Array2<f64>> {
    if base {
        grad.w += &cache.x.t().dot(dy);
    }
    let mut dx = need_dx.then(|| dy.dot(&lin.w.t()));
    if let (Some(l), Some(xa)) = (&lin.lora, &cache.xa) {
        if lora || need_dx {
            let mut dxa = dy.dot(&l.b.t());
            dxa *= scale;
            if lora {
                let g = grad.lora.as_mut().expect("gradient buffers mirror adapters");
                g.b.scaled_add(scale, &xa.t().dot(dy));
                g.a += &cache.xd.as_ref().unwrap_or(&cache.x).t().dot(&dxa);
            }
            if let Some(dx) = dx.as_mut() {
                let mut back = dxa.dot(&l.a.t());
                if let Some(keep) = &cache.keep {
                    back *= keep;
                }
                *dx += &back;
            }
        }
    }
    dx
}

/// Row-wise RMS normalisation times gain. Returns `(y, xhat, rms)`.
fn rms_fwd(x: &Array2<f64>, gain: &Array2<f64>) -> (Array2<f64>, Array2<f64>, Vec<f64>) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut rms = Vec::with_capacity(x.nrows());
    for mut row in xhat.rows_mut() {
        let r = (row.iter().map(|v| v * v).sum::<f64>() / d + NORM_EPS).sqrt();
        row /= r;
        rms.push(r);
    }
    let y = &xhat * &gain.row(0);
    (y, xhat, rms)
}

fn rms_bwd(dy: &Array2<f64>, xhat: &Array2<f64>, rms: &[f64], gain: &Array2<f64>, dgain: Option<&mut Array2<f64>>) -> Array2<f64> {
    if let Some(dg) = dgain {
        let contrib = (dy * xhat).sum_axis(Axis(0));
        let mut row = dg.row_mut(0);
        row += &contrib;
    }
    let d = xhat.ncols() as f64;
    let mut dx = dy * &gain.row(0);
    for ((mut row, xh), &r) in dx.rows_mut().into_iter().zip(xhat.rows()).zip(rms) {
        let dot = row.dot(&xh) / d;
        Zip::from(&mut row).and(&xh).for_each(|v, &h| *v = (*v - h * dot) / r);
    }
    dx
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Whether query `i` may attend to key `j`.
#[inline]
pub fn visible(i: usize, j: usize, prefix: usize) -> bool {
    j < prefix || j <= i
}

fn attention(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>, heads: usize, prefix: usize) -> (Array2<f64>, Vec<Array2<f64>>) {
    let (t, d) = q.dim();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Array2::zeros((t, d));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut sc = q.slice(cols).dot(&k.slice(cols).t());
        for (i, mut row) in sc.rows_mut().into_iter().enumerate() {
            softmax_visible(&mut row.view_mut(), i, prefix, scale);
        }
        out.slice_mut(cols).assign(&sc.dot(&v.slice(cols)));
        probs.push(sc);
    }
    (out, probs)
}

fn softmax_visible(row: &mut ndarray::ArrayViewMut1<f64>, i: usize, prefix: usize, scale: f64) {
    let mut max = f64::NEG_INFINITY;
    for (j, x) in row.iter_mut().enumerate() {
        if visible(i, j, prefix) {
            *x *= scale;
            max = max.max(*x);
        }
    }
    let mut sum = 0.0;
    for (j, x) in row.iter_mut().enumerate() {
        if visible(i, j, prefix) {
            *x = (*x - max).exp();
            sum += *x;
        } else {
            *x = 0.0;
        }
    }
    *row /= sum;
}

fn attention_bwd(
    dout: &Array2<f64>,
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    probs: &[Array2<f64>],
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let (t, d) = q.dim();
    let heads = probs.len();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Array2::zeros((t, d));
    let mut dk = Array2::zeros((t, d));
    let mut dv = Array2::zeros((t, d));
    for (h, p) in probs.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let doh = dout.slice(cols);
        let mut ds = doh.dot(&v.slice(cols).t());
        dv.slice_mut(cols).assign(&p.t().dot(&doh));
        for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
            let dot = row.dot(&prow);
            Zip::from(&mut row).and(&prow).for_each(|g, &pp| *g = pp * (*g - dot) * scale);
        }
        dq.slice_mut(cols).assign(&ds.dot(&k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&q.slice(cols)));
    }
    (dq, dk, dv)
}

struct LayerCache {
    xhat1: Array2<f64>,
    rms1: Vec<f64>,
    cq: LinCache,
    ck: LinCache,
    cv: LinCache,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    co: LinCache,
    xhat2: Array2<f64>,
    rms2: Vec<f64>,
    c1: LinCache,
    h1: Array2<f64>,
    c2: LinCache,
}

/// Everything the backward pass needs.
pub struct Trace {
    pub prefix: usize,
    pub hf: Array2<f64>,
    tokens: Vec<u32>,
    image: Vec<u32>,
    cproj: Option<LinCache>,
    layers: Vec<LayerCache>,
    xhat_f: Array2<f64>,
    rms_f: Vec<f64>,
}

impl Trace {
    /// Keys and values of layer `l`, `[T, D]` each.
    pub fn kv(&self, l: usize) -> (&Array2<f64>, &Array2<f64>) {
        (&self.layers[l].k, &self.layers[l].v)
    }
}

fn layer_fwd(
    layer: &Layer,
    x: Array2<f64>,
    heads: usize,
    prefix: usize,
    scale: f64,
    dropout: &mut Option<(&mut ChaCha8Rng, f64)>,
) -> (Array2<f64>, LayerCache) {
    let (a, xhat1, rms1) = rms_fwd(&x, &layer.ln1);
    let (q, cq) = lin_fwd(&layer.wq, a.clone(), scale, dropout);
    let (k, ck) = lin_fwd(&layer.wk, a.clone(), scale, dropout);
    let (v, cv) = lin_fwd(&layer.wv, a, scale, dropout);
    let (o, probs) = attention(&q, &k, &v, heads, prefix);
    let (att, co) = lin_fwd(&layer.wo, o, scale, dropout);
    let x_mid = x + &att;
    let (b, xhat2, rms2) = rms_fwd(&x_mid, &layer.ln2);
    let (h1, c1) = lin_fwd(&layer.w1, b, scale, dropout);
    let (f, c2) = lin_fwd(&layer.w2, h1.mapv(gelu), scale, dropout);
    let out = x_mid + &f;
    (out, LayerCache { xhat1, rms1, cq, ck, cv, q, k, v, probs, co, xhat2, rms2, c1, h1, c2 })
}

fn layer_bwd(layer: &Layer, c: &LayerCache, dout: Array2<f64>, scale: f64, g: &mut Layer, tr: &Trainable) -> Array2<f64> {
    let (base, lora) = (tr.dec_base, tr.dec_lora);
    let dg = lin_bwd(&layer.w2, &c.c2, &dout, scale, &mut g.w2, base, lora, true).expect("dx requested");
    let dh1 = Zip::from(&dg).and(&c.h1).map_collect(|&d, &h| d * gelu_grad(h));
    let db = lin_bwd(&layer.w1, &c.c1, &dh1, scale, &mut g.w1, base, lora, true).expect("dx requested");
    let mut dmid = dout;
    dmid += &rms_bwd(&db, &c.xhat2, &c.rms2, &layer.ln2, base.then_some(&mut g.ln2));
    let dobj = lin_bwd(&layer.wo, &c.co, &dmid, scale, &mut g.wo, base, lora, true).expect("dx requested");
    let (dq, dk, dv) = attention_bwd(&dobj, &c.q, &c.k, &c.v, &c.probs);
    let mut da = lin_bwd(&layer.wq, &c.cq, &dq, scale, &mut g.wq, base, lora, true).expect("dx requested");
    da += &lin_bwd(&layer.wk, &c.ck, &dk, scale, &mut g.wk, base, lora, true).expect("dx requested");
    da += &lin_bwd(&layer.wv, &c.cv, &dv, scale, &mut g.wv, base, lora, true).expect("dx requested");
    dmid + &rms_bwd(&da, &c.xhat1, &c.rms1, &layer.ln1, base.then_some(&mut g.ln1))
}

/// Run the backbone to the final normalised hidden states `[T, D]`.
pub fn forward(w: &Weights, cfg: &ModelConfig, seq: &Seq, scale: f64, dropout: Option<(&mut ChaCha8Rng, f64)>) -> Result<Trace> {
    check_seq(cfg, seq)?;
    let mut dropout = dropout;
    let t = seq.len();
    let mut x = Array2::zeros((t, cfg.d_hidden));
    let mut cproj = None;
    if !seq.m.is_empty() {
        let mut ximg = Array2::zeros((seq.m.len(), cfg.d_img));
        for (i, &tok) in seq.m.iter().enumerate() {
            ximg.row_mut(i).assign(&w.img_emb.row(tok as usize));
        }
        let (y, c) = lin_fwd(&w.proj, ximg, scale, &mut dropout);
        x.slice_mut(s![..seq.m.len(), ..]).assign(&y);
        cproj = Some(c);
    }
    let tokens: Vec<u32> = seq.p.iter().chain(seq.d).copied().collect();
    for (i, &tok) in tokens.iter().enumerate() {
        x.row_mut(seq.m.len() + i).assign(&w.tok_emb.row(tok as usize));
    }
    x += &w.pos_emb.slice(s![..t, ..]);

    let prefix = seq.prefix_len();
    let mut layers = Vec::with_capacity(cfg.layers);
    for layer in &w.layers {
        let (y, c) = layer_fwd(layer, x, cfg.heads, prefix, scale, &mut dropout);
        x = y;
        layers.push(c);
    }
    let (hf, xhat_f, rms_f) = rms_fwd(&x, &w.ln_f);
    Ok(Trace { prefix, hf, tokens, image: seq.m.to_vec(), cproj, layers, xhat_f, rms_f })
}

/// Accumulate parameter gradients given `dL/dhf`. Head gradients are the caller's job.
pub fn backward(w: &Weights, trace: &Trace, dhf: &Array2<f64>, scale: f64, grads: &mut Weights, tr: &Trainable) {
    if !tr.below_head() {
        return;
    }
    let mut dx = rms_bwd(dhf, &trace.xhat_f, &trace.rms_f, &w.ln_f, tr.dec_base.then_some(&mut grads.ln_f));
    for (l, layer) in w.layers.iter().enumerate().rev() {
        dx = layer_bwd(layer, &trace.layers[l], dx, scale, &mut grads.layers[l], tr);
    }
    if !tr.below_decoder() {
        return;
    }
    let n_img = trace.image.len();
    if tr.embeddings {
        let t = dx.nrows();
        let mut pos = grads.pos_emb.slice_mut(s![..t, ..]);
        pos += &dx;
        for (i, &tok) in trace.tokens.iter().enumerate() {
            let mut row = grads.tok_emb.row_mut(tok as usize);
            row += &dx.row(n_img + i);
        }
    }
    if let Some(c) = &trace.cproj {
        let dimg = dx.slice(s![..n_img, ..]).to_owned();
        let dximg = lin_bwd(&w.proj, c, &dimg, scale, &mut grads.proj, tr.proj_base, tr.proj_lora, tr.embeddings);
        if let Some(dximg) = dximg {
            for (i, &tok) in trace.image.iter().enumerate() {
                let mut row = grads.img_emb.row_mut(tok as usize);
                row += &dximg.row(i);
            }
        }
    }
}

/// Per-layer keys and values for incremental decoding.
pub(crate) struct KvCache {
    k: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    len: usize,
}

impl KvCache {
    pub(crate) fn from_trace(trace: &Trace, cfg: &ModelConfig) -> Self {
        let t = trace.hf.nrows();
        let grab = |src: &Array2<f64>| {
            let mut a = Array2::zeros((cfg.max_len, cfg.d_hidden));
            a.slice_mut(s![..t, ..]).assign(src);
            a
        };
        let k = trace.layers.iter().map(|c| grab(&c.k)).collect();
        let v = trace.layers.iter().map(|c| grab(&c.v)).collect();
        Self { k, v, len: t }
    }

    pub(crate) fn len(&self) -> usize {
        self.len
    }
}

/// Feed one response token at position `cache.len()` and return its final hidden row `[1, D]`.
pub(crate) fn step(w: &Weights, cfg: &ModelConfig, cache: &mut KvCache, token: u32, scale: f64) -> Array2<f64> {
    let pos = cache.len;
    let d = cfg.d_hidden;
    let mut x = Array2::zeros((1, d));
    x.row_mut(0).assign(&(&w.tok_emb.row(token as usize) + &w.pos_emb.row(pos)));
    let dh = cfg.head_dim();
    let inv = 1.0 / (dh as f64).sqrt();
    for (l, layer) in w.layers.iter().enumerate() {
        let (a, _, _) = rms_fwd(&x, &layer.ln1);
        let (q, _) = lin_fwd(&layer.wq, a.clone(), scale, &mut None);
        let (k, _) = lin_fwd(&layer.wk, a.clone(), scale, &mut None);
        let (v, _) = lin_fwd(&layer.wv, a, scale, &mut None);
        cache.k[l].row_mut(pos).assign(&k.row(0));
        cache.v[l].row_mut(pos).assign(&v.row(0));
        let keys = cache.k[l].slice(s![..=pos, ..]);
        let values = cache.v[l].slice(s![..=pos, ..]);
        let mut o = Array2::zeros((1, d));
        for h in 0..cfg.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut sc = q.slice(cols).dot(&keys.slice(cols).t());
            softmax_visible(&mut sc.row_mut(0), pos, pos + 1, inv);
            o.slice_mut(cols).assign(&sc.dot(&values.slice(cols)));
        }
        let (att, _) = lin_fwd(&layer.wo, o, scale, &mut None);
        let x_mid = x + &att;
        let (b, _, _) = rms_fwd(&x_mid, &layer.ln2);
        let (h1, _) = lin_fwd(&layer.w1, b, scale, &mut None);
        let (f, _) = lin_fwd(&layer.w2, h1.mapv(gelu), scale, &mut None);
        x = x_mid + &f;
    }
    cache.len += 1;
    rms_fwd(&x, &w.ln_f).0
}

/// Reward logits `h(H_k)` for rows `start..start+n`.
pub fn reward_logits(w: &Weights, hf: ArrayView2<f64>) -> Vec<f64> {
    let b = w.reward_b[[0, 0]];
    hf.dot(&w.reward_w).column(0).iter().map(|z| z + b).collect()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `log Σ exp`.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn tiny() -> (ModelConfig, Weights) {
        let cfg = ModelConfig::tiny();
        let w = Weights::init(&cfg, &mut seed::rng(3));
        (cfg, w)
    }

    #[test]
    fn causal_over_response_bidirectional_over_prefix() {
        let (cfg, w) = tiny();
        let m = [0u32, 5, 9];
        let p = [3u32, 4];
        let d = [7u32, 8, 9, 10];
        let base = forward(&w, &cfg, &Seq { m: &m, p: &p, d: &d }, 1.0, None).unwrap().hf;
        let d2 = [7u32, 8, 20, 10];
        let changed = forward(&w, &cfg, &Seq { m: &m, p: &p, d: &d2 }, 1.0, None).unwrap().hf;
        // The edited response token sits at position 5 + 2.
        for k in 0..9 {
            let same = base.row(k) == changed.row(k);
            assert_eq!(same, k < 7, "row {k}");
        }
        let p2 = [3u32, 6];
        let changed = forward(&w, &cfg, &Seq { m: &m, p: &p2, d: &d }, 1.0, None).unwrap().hf;
        for k in 0..9 {
            assert_ne!(base.row(k), changed.row(k), "row {k} ignores the prefix");
        }
    }

    #[test]
    fn length_overflow_is_reported() {
        let (cfg, w) = tiny();
        let d = vec![2u32; cfg.max_len];
        let err = forward(&w, &cfg, &Seq { m: &[0], p: &[], d: &d }, 1.0, None);
        assert!(matches!(err, Err(Error::LengthOverflow { .. })));
    }

    #[test]
    fn softmax_is_normalised_and_shift_invariant() {
        let p = softmax(&[1.0, 2.0, -3.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let q = softmax(&[101.0, 102.0, 97.0]);
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }
}
