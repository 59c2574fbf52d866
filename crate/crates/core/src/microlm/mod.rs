//! Decoder-only character transformer with residual capture and
//! intervention hooks.
//!
//! Layers are addressed in reverse: layer index 0 is the output of the final
//! block. Captures read the residual stream after each block's residual add,
//! before the final layer norm.

mod decode;
mod forward;

pub use decode::{nucleus_support, sample, sample_next, DecodeConfig, Decoder, NoHook, ResidualHook};
pub use forward::{forward, forward_graph, lm_loss, Batch, ForwardOutput, GraphForward, Intervention, ResidualCapture};

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{checkpoint, Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub ctx_len: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self { vocab: 62, d_model: 64, n_layers: 4, n_heads: 4, d_ff: 256, ctx_len: 64 }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.ctx_len < 2 {
            return bad(format!("ctx_len {} must be at least 2", self.ctx_len));
        }
        if self.vocab == 0 || self.n_layers == 0 || self.d_ff == 0 {
            return bad("vocab, n_layers and d_ff must be positive".into());
        }
        Ok(())
    }

    /// Block position (0 = first block) of a reverse-counted layer index.
    pub fn block_of(&self, layer_index: usize) -> Result<usize> {
        if layer_index >= self.n_layers {
            return Err(Error::IndexOutOfRange { what: "layer index", index: layer_index, len: self.n_layers });
        }
        Ok(self.n_layers - 1 - layer_index)
    }

    pub fn layer_of_block(&self, block: usize) -> usize {
        self.n_layers - 1 - block
    }
}

const PER_BLOCK: usize = 12;

/// Slot of a tensor within one block.
#[derive(Clone, Copy, Debug)]
pub(crate) enum Slot {
    Ln1G = 0,
    Ln1B,
    WQkv,
    BQkv,
    WO,
    BO,
    Ln2G,
    Ln2B,
    WFc,
    BFc,
    WProj,
    BProj,
}

const SLOT_NAMES: [&str; PER_BLOCK] =
    ["ln1.g", "ln1.b", "attn.w_qkv", "attn.b_qkv", "attn.w_o", "attn.b_o", "ln2.g", "ln2.b", "mlp.w_fc", "mlp.b_fc", "mlp.w_proj", "mlp.b_proj"];

/// All micro-LM weights as an ordered list of named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct LmParams<T: Scalar = f32> {
    pub config: LmConfig,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> LmParams<T> {
    pub fn names(config: &LmConfig) -> Vec<String> {
        let mut out = vec!["tok_emb".to_string(), "pos_emb".to_string()];
        for b in 0..config.n_layers {
            out.extend(SLOT_NAMES.iter().map(|s| format!("blocks.{b}.{s}")));
        }
        out.extend(["ln_f.g", "ln_f.b", "w_out"].map(String::from));
        out
    }

    pub fn shapes(c: &LmConfig) -> Vec<Vec<usize>> {
        let (d, f) = (c.d_model, c.d_ff);
        let mut out = vec![vec![c.vocab, d], vec![c.ctx_len, d]];
        for _ in 0..c.n_layers {
            out.extend([
                vec![d],
                vec![d],
                vec![d, 3 * d],
                vec![3 * d],
                vec![d, d],
                vec![d],
                vec![d],
                vec![d],
                vec![d, f],
                vec![f],
                vec![f, d],
                vec![d],
            ]);
        }
        out.extend([vec![d], vec![d], vec![d, c.vocab]]);
        out
    }

    /// Normal(0, 0.02) weights, unit layer-norm gains, zero biases.
    pub fn init(config: &LmConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let names = Self::names(config);
        let tensors = Self::shapes(config)
            .into_iter()
            .zip(&names)
            .map(|(shape, name)| {
                let n: usize = shape.iter().product();
                let data: Vec<T> = if name.ends_with(".g") {
                    vec![T::one(); n]
                } else if shape.len() == 1 {
                    vec![T::zero(); n]
                } else {
                    (0..n).map(|_| T::lit(normal.sample(rng))).collect()
                };
                Tensor::new(&shape, data).expect("shape")
            })
            .collect();
        Ok(Self { config: config.clone(), tensors })
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.tensors.iter_mut().collect()
    }

    pub fn n_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub(crate) fn tok_emb(&self) -> &Tensor<T> {
        &self.tensors[0]
    }

    pub(crate) fn pos_emb(&self) -> &Tensor<T> {
        &self.tensors[1]
    }

    pub(crate) fn block(&self, b: usize, slot: Slot) -> &Tensor<T> {
        &self.tensors[2 + b * PER_BLOCK + slot as usize]
    }

    pub(crate) fn head(&self, i: usize) -> &Tensor<T> {
        &self.tensors[2 + self.config.n_layers * PER_BLOCK + i]
    }

    /// Inserts every tensor into `g`, as leaves when `trainable`.
    pub fn insert(&self, g: &mut Graph<T>, trainable: bool) -> ParamVars {
        ParamVars {
            n_layers: self.config.n_layers,
            vars: self
                .tensors
                .iter()
                .map(|t| if trainable { g.leaf(t.clone()) } else { g.constant(t.clone()) })
                .collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> LmParams<U> {
        LmParams { config: self.config.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }

    pub fn from_tensors(config: LmConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let shapes = Self::shapes(&config);
        if shapes.len() != tensors.len() || shapes.iter().zip(&tensors).any(|(s, t)| s.as_slice() != t.shape()) {
            return Err(Error::Shape("parameter tensors do not match the configuration".into()));
        }
        Ok(Self { config, tensors })
    }
}

impl LmParams<f32> {
    pub fn named(&self) -> Vec<(String, Tensor<f32>)> {
        Self::names(&self.config).into_iter().zip(self.tensors.iter().cloned()).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        checkpoint::encode(&self.named())
    }

    /// Writes the tensor container plus a `<path>.json` sidecar holding the
    /// configuration.
    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.named())?;
        std::fs::write(sidecar(path), serde_json::to_vec_pretty(&self.config)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let config: LmConfig = serde_json::from_slice(&std::fs::read(sidecar(path))?)?;
        let mut named = checkpoint::load(path)?;
        let tensors = Self::names(&config)
            .iter()
            .zip(Self::shapes(&config))
            .map(|(n, s)| checkpoint::take(&mut named, n, &s))
            .collect::<Result<Vec<_>>>()?;
        Self::from_tensors(config, tensors)
    }
}

pub fn sidecar(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// Graph handles for a parameter set, in [`LmParams::names`] order.
#[derive(Clone, Debug)]
pub struct ParamVars {
    n_layers: usize,
    pub vars: Vec<Var>,
}

impl ParamVars {
    /// Wraps vars already in a graph, in [`LmParams::names`] order.
    pub fn from_vars(config: &LmConfig, vars: Vec<Var>) -> Result<Self> {
        let want = LmParams::<f32>::names(config).len();
        if vars.len() != want {
            return Err(Error::Shape(format!("{} parameter vars for a model with {want} tensors", vars.len())));
        }
        Ok(Self { n_layers: config.n_layers, vars })
    }

    pub(crate) fn tok_emb(&self) -> Var {
        self.vars[0]
    }

    pub(crate) fn pos_emb(&self) -> Var {
        self.vars[1]
    }

    pub(crate) fn block(&self, b: usize, slot: Slot) -> Var {
        self.vars[2 + b * PER_BLOCK + slot as usize]
    }

    pub(crate) fn head(&self, i: usize) -> Var {
        self.vars[2 + self.n_layers * PER_BLOCK + i]
    }
}
