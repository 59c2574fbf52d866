use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{LmParams, Slot, LN_EPS};
use crate::autodiff::{softmax_in_place, Scalar};
use crate::error::{Error, Result};

/// Called with the post-block residual of every block at every decoded
/// position. May read or modify it in place.
pub trait ResidualHook<T: Scalar> {
    fn on_residual(&mut self, layer_index: usize, position: usize, residual: &mut [T]);
}

pub struct NoHook;

impl<T: Scalar> ResidualHook<T> for NoHook {
    fn on_residual(&mut self, _: usize, _: usize, _: &mut [T]) {}
}

impl<T: Scalar, F: FnMut(usize, usize, &mut [T])> ResidualHook<T> for F {
    fn on_residual(&mut self, layer_index: usize, position: usize, residual: &mut [T]) {
        self(layer_index, position, residual)
    }
}

/// Incremental single-sequence decoder with cached keys and values.
///
/// Feeding tokens one at a time yields the same logits as [`super::forward`]
/// over the whole prefix, up to float rounding.
pub struct Decoder<'a, T: Scalar = f32> {
    params: &'a LmParams<T>,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    len: usize,
}

fn layer_norm<T: Scalar>(x: &[T], g: &[T], b: &[T], out: &mut [T]) {
    let n = T::lit(x.len() as f64);
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let rs = T::one() / (var + T::lit(LN_EPS)).sqrt();
    for j in 0..x.len() {
        out[j] = (x[j] - mean) * rs * g[j] + b[j];
    }
}

/// `out = x · w + bias` for row-major `w` of shape `[x.len(), out.len()]`.
fn affine<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, out: &mut [T]) {
    let n = out.len();
    match bias {
        Some(b) => out.copy_from_slice(b),
        None => out.fill(T::zero()),
    }
    for (i, &xi) in x.iter().enumerate() {
        for (o, &wv) in out.iter_mut().zip(&w[i * n..(i + 1) * n]) {
            *o = *o + xi * wv;
        }
    }
}

impl<'a, T: Scalar> Decoder<'a, T> {
    pub fn new(params: &'a LmParams<T>) -> Self {
        let n = params.config.n_layers;
        Self { params, keys: vec![Vec::new(); n], values: vec![Vec::new(); n], len: 0 }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn reset(&mut self) {
        self.keys.iter_mut().chain(self.values.iter_mut()).for_each(Vec::clear);
        self.len = 0;
    }

    /// Appends `token` and returns the next-token logits.
    pub fn step(&mut self, token: usize, hook: &mut impl ResidualHook<T>) -> Result<Vec<T>> {
        let p = self.params;
        let cfg = &p.config;
        if token >= cfg.vocab {
            return Err(Error::IndexOutOfRange { what: "token id", index: token, len: cfg.vocab });
        }
        if self.len >= cfg.ctx_len {
            return Err(Error::IndexOutOfRange { what: "position", index: self.len, len: cfg.ctx_len });
        }
        let (d, heads) = (cfg.d_model, cfg.n_heads);
        let dh = d / heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let pos = self.len;
        let mut x: Vec<T> = p.tok_emb().row(token).iter().zip(p.pos_emb().row(pos)).map(|(&a, &b)| a + b).collect();
        let mut h = vec![T::zero(); d];
        let mut qkv = vec![T::zero(); 3 * d];
        let mut att = vec![T::zero(); d];
        let mut o = vec![T::zero(); d];
        let mut f = vec![T::zero(); cfg.d_ff];
        let mut scores = vec![T::zero(); pos + 1];
        for b in 0..cfg.n_layers {
            let w = |s: Slot| p.block(b, s).data();
            layer_norm(&x, w(Slot::Ln1G), w(Slot::Ln1B), &mut h);
            affine(&h, w(Slot::WQkv), Some(w(Slot::BQkv)), &mut qkv);
            self.keys[b].extend_from_slice(&qkv[d..2 * d]);
            self.values[b].extend_from_slice(&qkv[2 * d..]);
            let (ks, vs) = (&self.keys[b], &self.values[b]);
            for hd in 0..heads {
                let q = &qkv[hd * dh..(hd + 1) * dh];
                for (t, s) in scores.iter_mut().enumerate() {
                    let k = &ks[t * d + hd * dh..t * d + (hd + 1) * dh];
                    *s = q.iter().zip(k).map(|(&a, &b)| a * b).sum::<T>() * scale;
                }
                softmax_in_place(&mut scores);
                let out = &mut att[hd * dh..(hd + 1) * dh];
                out.fill(T::zero());
                for (t, &s) in scores.iter().enumerate() {
                    for (a, &v) in out.iter_mut().zip(&vs[t * d + hd * dh..t * d + (hd + 1) * dh]) {
                        *a = *a + s * v;
                    }
                }
            }
            affine(&att, w(Slot::WO), Some(w(Slot::BO)), &mut o);
            x.iter_mut().zip(&o).for_each(|(a, &b)| *a = *a + b);
            layer_norm(&x, w(Slot::Ln2G), w(Slot::Ln2B), &mut h);
            affine(&h, w(Slot::WFc), Some(w(Slot::BFc)), &mut f);
            f.iter_mut().for_each(|v| *v = v.max(T::zero()));
            affine(&f, w(Slot::WProj), Some(w(Slot::BProj)), &mut o);
            x.iter_mut().zip(&o).for_each(|(a, &b)| *a = *a + b);
            hook.on_residual(cfg.layer_of_block(b), pos, &mut x);
        }
        layer_norm(&x, p.head(0).data(), p.head(1).data(), &mut h);
        let mut logits = vec![T::zero(); cfg.vocab];
        affine(&h, p.head(2).data(), None, &mut logits);
        self.len += 1;
        Ok(logits)
    }

    /// Feeds every token of `tokens`, returning the logits after the last.
    pub fn prefill(&mut self, tokens: &[usize], hook: &mut impl ResidualHook<T>) -> Result<Vec<T>> {
        let mut last = Err(Error::Empty("prefill needs at least one token".into()));
        for &t in tokens {
            last = Ok(self.step(t, hook)?);
        }
        last
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub top_p: f64,
    /// 0 selects greedy decoding.
    pub temperature: f64,
    pub repetition_penalty: f64,
    pub max_new: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { top_p: 0.8, temperature: 1.0, repetition_penalty: 1.0, max_new: 32 }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) || self.temperature < 0.0 || self.repetition_penalty <= 0.0 {
            return Err(Error::InvalidConfig(format!("invalid decode settings {self:?}")));
        }
        Ok(())
    }
}

/// Smallest prefix of tokens, by descending probability, whose mass reaches
/// `top_p`, renormalised. Ties keep the lower token id first.
pub fn nucleus_support(probs: &[f64], top_p: f64) -> Vec<(usize, f64)> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for i in order {
        kept.push((i, probs[i]));
        mass += probs[i];
        if mass >= top_p {
            break;
        }
    }
    kept.iter().map(|&(i, p)| (i, p / mass)).collect()
}

/// Draws the next token from `logits` under `cfg`. `history` feeds the
/// repetition penalty.
pub fn sample_next<T: Scalar>(logits: &[T], history: &[usize], cfg: &DecodeConfig, rng: &mut impl Rng) -> usize {
    let mut z: Vec<f64> = logits.iter().map(|v| v.as_f64()).collect();
    if cfg.repetition_penalty != 1.0 {
        let mut seen = vec![false; z.len()];
        for &t in history {
            if t < z.len() && !seen[t] {
                seen[t] = true;
                z[t] = if z[t] > 0.0 { z[t] / cfg.repetition_penalty } else { z[t] * cfg.repetition_penalty };
            }
        }
    }
    if cfg.temperature == 0.0 {
        return (0..z.len()).fold(0, |best, i| if z[i] > z[best] { i } else { best });
    }
    z.iter_mut().for_each(|v| *v /= cfg.temperature);
    softmax_in_place(&mut z);
    let support = nucleus_support(&z, cfg.top_p);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for &(i, p) in &support {
        acc += p;
        if u < acc {
            return i;
        }
    }
    support.last().map_or(0, |&(i, _)| i)
}

/// Continues `prompt` by up to `cfg.max_new` tokens (stopping at the context
/// limit) and returns only the generated tokens.
pub fn sample<T: Scalar>(
    params: &LmParams<T>,
    prompt: &[usize],
    cfg: &DecodeConfig,
    rng: &mut impl Rng,
    hook: &mut impl ResidualHook<T>,
) -> Result<Vec<usize>> {
    cfg.validate()?;
    if prompt.is_empty() {
        return Err(Error::Empty("prompt".into()));
    }
    let mut dec = Decoder::new(params);
    let mut logits = dec.prefill(prompt, hook)?;
    let mut history = prompt.to_vec();
    let mut out = Vec::new();
    let limit = params.config.ctx_len;
    while out.len() < cfg.max_new {
        let t = sample_next(&logits, &history, cfg, rng);
        out.push(t);
        history.push(t);
        if history.len() >= limit || out.len() == cfg.max_new {
            break;
        }
        logits = dec.step(t, hook)?;
    }
    Ok(out)
}
