//! Fine-tuning with feature-guided auxiliary losses.
//!
//! `reduce` penalises pre-activations of the target language's features
//! that exceed their per-language thresholds on samples of every other
//! language; `enhance` rewards the original language's features for staying
//! above theirs. Both are added to next-token cross-entropy with weight
//! `aux_weight`.

use std::collections::BTreeSet;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, warmup_cosine, AdamConfig, AdamState, Graph, Scalar, Tensor, Var};
use crate::corpus::{Document, Vocabulary};
use crate::error::{Error, Result};
use crate::langfeat::LanguageFeatureSet;
use crate::microlm::{lm_loss, Batch, LmParams};
use crate::sae::SaeParams;
use crate::scripts::LanguageId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SasftMode {
    SftOnly,
    Reduce,
    ReduceZero,
    Enhance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SasftConfig {
    /// The language to suppress (`reduce`) or reinforce (`enhance`).
    pub target_language: LanguageId,
    /// Reverse-counted layer indices carrying the auxiliary loss.
    pub layers: Vec<usize>,
    pub features_per_layer: usize,
    pub aux_weight: f64,
    pub mode: SasftMode,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup: usize,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for SasftConfig {
    fn default() -> Self {
        Self {
            target_language: LanguageId::from("synB"),
            layers: vec![0, 1],
            features_per_layer: 2,
            aux_weight: 0.05,
            mode: SasftMode::Reduce,
            lr: 1e-3,
            weight_decay: 0.1,
            warmup: 100,
            steps: 1000,
            batch: 64,
            seed: 0,
        }
    }
}

impl SasftConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.aux_weight >= 0.0) {
            return bad(format!("aux_weight must be ≥ 0, got {}", self.aux_weight));
        }
        if self.mode != SasftMode::SftOnly && (self.layers.is_empty() || self.features_per_layer == 0) {
            return bad("auxiliary modes need at least one layer and one feature".into());
        }
        if !(self.lr > 0.0) || self.batch == 0 || !(self.weight_decay >= 0.0) {
            return bad(format!("invalid optimiser settings lr={} batch={}", self.lr, self.batch));
        }
        Ok(())
    }

    fn aux_active(&self) -> bool {
        self.mode != SasftMode::SftOnly
    }
}

/// One training sequence: targets before `response_start` are masked out.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub lang: LanguageId,
    pub tokens: Vec<usize>,
    pub response_start: usize,
}

impl Example {
    /// `mask[t]` covers the prediction of token `t + 1`.
    pub fn target_mask(&self) -> Vec<bool> {
        (1..self.tokens.len()).map(|t| t >= self.response_start).collect()
    }
}

/// Splits each document into a `prompt_len`-character prompt and a
/// response. `prompt_len = 0` trains on every position.
pub fn examples_from_docs(docs: &[Document], vocab: &Vocabulary, prompt_len: usize) -> Result<Vec<Example>> {
    docs.iter()
        .map(|d| {
            Ok(Example { lang: d.lang.clone(), tokens: vocab.encode(&d.text)?, response_start: prompt_len.max(1) })
        })
        .collect()
}

/// Per-row pre-activations `[rows, k]` of the layer's selected features,
/// paired with the layer's feature set (columns in `features` order).
pub struct LayerPreacts<'a> {
    pub f: Var,
    pub set: &'a LanguageFeatureSet,
}

fn hinge_mean<T: Scalar>(
    g: &mut Graph<T>,
    layers: &[LayerPreacts<'_>],
    row_langs: &[&LanguageId],
    row_mask: &[bool],
    qualifies: impl Fn(&LanguageId) -> bool,
    anchor: impl Fn(&LanguageFeatureSet, usize, &LanguageId) -> Result<T>,
    above: bool,
) -> Result<Var> {
    let rows = row_langs.len();
    if row_mask.len() != rows {
        return Err(Error::Shape(format!("{} row languages but {} mask entries", rows, row_mask.len())));
    }
    let keep: Vec<bool> = row_langs.iter().zip(row_mask).map(|(l, &m)| m && qualifies(l)).collect();
    let n = keep.iter().filter(|&&k| k).count();
    let mut total: Option<Var> = None;
    for layer in layers {
        let k = g.value(layer.f).cols();
        if g.value(layer.f).rows() != rows || k > layer.set.features.len() {
            return Err(Error::Shape(format!("pre-activations {:?} for {rows} rows", g.value(layer.f).shape())));
        }
        let mut anchors = vec![T::zero(); rows * k];
        let mut weights = vec![T::zero(); rows * k];
        for r in (0..rows).filter(|&r| keep[r]) {
            for (c, &s) in layer.set.features[..k].iter().enumerate() {
                anchors[r * k + c] = anchor(layer.set, s, row_langs[r])?;
                weights[r * k + c] = T::one();
            }
        }
        if n == 0 {
            continue;
        }
        let a = g.constant(Tensor::new(&[rows, k], anchors)?);
        let w = g.constant(Tensor::new(&[rows, k], weights)?);
        let diff = if above { g.sub(layer.f, a)? } else { g.sub(a, layer.f)? };
        let h = g.relu(diff);
        let h = g.mul(h, w)?;
        let s = g.sum(h);
        let s = g.scale(s, T::lit(1.0 / n as f64));
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    Ok(total.unwrap_or_else(|| g.constant(Tensor::scalar(T::zero()))))
}

/// Mean over masked rows of non-`target` samples of
/// `Σ_s ReLU(f_s − α[s][lang])`, summed over layers.
pub fn loss_reduce<T: Scalar>(
    g: &mut Graph<T>,
    layers: &[LayerPreacts<'_>],
    row_langs: &[&LanguageId],
    row_mask: &[bool],
    target: &LanguageId,
) -> Result<Var> {
    hinge_mean(
        g,
        layers,
        row_langs,
        row_mask,
        |l| l != target,
        |set, s, lang| {
            set.alpha
                .get(&s)
                .and_then(|m| m.get(lang))
                .map(|&v| T::lit(v))
                .ok_or_else(|| Error::MissingThreshold(format!("alpha[{s}][{lang}] at layer {}", set.layer_index)))
        },
        true,
    )
}

/// Mean over masked rows of `original` samples of `Σ_s ReLU(β[s] − f_s)`,
/// summed over layers.
pub fn loss_enhance<T: Scalar>(
    g: &mut Graph<T>,
    layers: &[LayerPreacts<'_>],
    row_langs: &[&LanguageId],
    row_mask: &[bool],
    original: &LanguageId,
) -> Result<Var> {
    hinge_mean(
        g,
        layers,
        row_langs,
        row_mask,
        |l| l == original,
        |set, s, _| {
            set.beta
                .get(&s)
                .map(|&v| T::lit(v))
                .ok_or_else(|| Error::MissingThreshold(format!("beta[{s}] at layer {}", set.layer_index)))
        },
        false,
    )
}

/// `ce + aux_weight · aux`. A zero weight returns `ce` itself, so the
/// auxiliary branch contributes nothing to the gradient.
pub fn total_loss<T: Scalar>(g: &mut Graph<T>, ce: Var, aux: Var, aux_weight: f64) -> Result<Var> {
    if aux_weight == 0.0 {
        return Ok(ce);
    }
    let w = g.scale(aux, T::lit(aux_weight));
    g.add(ce, w)
}

/// One SAE plus the feature set read from it.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxLayer<T: Scalar = f32> {
    pub sae: SaeParams<T>,
    pub set: LanguageFeatureSet,
}

/// Loss terms of one minibatch.
pub struct StepLoss {
    pub ce: Var,
    pub aux: Var,
    pub total: Var,
}

/// Builds cross-entropy, auxiliary and total loss for `examples` into `g`.
pub fn batch_loss<T: Scalar>(
    g: &mut Graph<T>,
    lm: &LmParams<T>,
    pv: &crate::microlm::ParamVars,
    examples: &[&Example],
    aux: &[AuxLayer<T>],
    cfg: &SasftConfig,
) -> Result<StepLoss> {
    let masks: Vec<Vec<bool>> = examples.iter().map(|e| e.target_mask()).collect();
    let batch = Batch { sequences: examples.iter().map(|e| e.tokens.clone()).collect(), mask: Some(masks.clone()) };
    let capture: Vec<usize> = if cfg.aux_active() { cfg.layers.clone() } else { Vec::new() };
    let (ce, fwd) = lm_loss(g, lm, pv, &batch, &capture)?;
    let aux_loss = if cfg.aux_active() {
        let seq = batch.seq_len() - 1;
        let row_langs: Vec<&LanguageId> = examples.iter().flat_map(|e| std::iter::repeat_n(&e.lang, seq)).collect();
        let row_mask: Vec<bool> = masks.concat();
        let mut layers = Vec::with_capacity(cfg.layers.len());
        for &(layer, x) in &fwd.residuals {
            let a = aux
                .iter()
                .find(|a| a.sae.layer_index == layer)
                .ok_or_else(|| Error::InvalidConfig(format!("no SAE for layer {layer}")))?;
            let f = a.sae.preact_graph(g, x, &a.set.features[..cfg.features_per_layer])?;
            layers.push(LayerPreacts { f, set: &a.set });
        }
        match cfg.mode {
            SasftMode::Enhance => loss_enhance(g, &layers, &row_langs, &row_mask, &cfg.target_language)?,
            _ => loss_reduce(g, &layers, &row_langs, &row_mask, &cfg.target_language)?,
        }
    } else {
        g.constant(Tensor::scalar(T::zero()))
    };
    let total = total_loss(g, ce, aux_loss, cfg.aux_weight)?;
    Ok(StepLoss { ce, aux: aux_loss, total })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub ce: f64,
    pub aux: f64,
    pub total: f64,
    pub lr: f64,
}

pub fn write_log_csv(rows: &[LogRow], w: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn check_inputs(examples: &[Example], aux: &[AuxLayer], cfg: &SasftConfig) -> Result<()> {
    let len = examples.first().ok_or_else(|| Error::Empty("training examples".into()))?.tokens.len();
    if len < 2 || examples.iter().any(|e| e.tokens.len() != len) {
        return Err(Error::InvalidConfig("training examples must share a length of at least 2".into()));
    }
    if !cfg.aux_active() {
        return Ok(());
    }
    let langs: BTreeSet<&LanguageId> = examples.iter().map(|e| &e.lang).collect();
    for &layer in &cfg.layers {
        let a = aux
            .iter()
            .find(|a| a.sae.layer_index == layer)
            .ok_or_else(|| Error::InvalidConfig(format!("no SAE for layer {layer}")))?;
        if a.set.layer_index != layer || a.set.language != cfg.target_language {
            return Err(Error::InvalidConfig(format!(
                "feature set for {} at layer {} does not match {} at layer {layer}",
                a.set.language, a.set.layer_index, cfg.target_language
            )));
        }
        if a.set.features.len() < cfg.features_per_layer {
            return Err(Error::InvalidConfig(format!(
                "layer {layer} has {} features, {} requested",
                a.set.features.len(),
                cfg.features_per_layer
            )));
        }
        for &s in &a.set.features[..cfg.features_per_layer] {
            match cfg.mode {
                SasftMode::Enhance => {
                    if !a.set.beta.contains_key(&s) {
                        return Err(Error::MissingThreshold(format!("beta[{s}] at layer {layer}")));
                    }
                }
                _ => {
                    for l in langs.iter().filter(|&&l| l != &cfg.target_language) {
                        if a.set.alpha.get(&s).and_then(|m| m.get(*l)).is_none() {
                            return Err(Error::MissingThreshold(format!("alpha[{s}][{l}] at layer {layer}")));
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

/// AdamW with linear warmup and cosine decay over `cfg.steps` minibatches,
/// drawn by reshuffling `examples` every epoch. The SAEs stay fixed.
pub fn train(
    lm_init: &LmParams,
    examples: &[Example],
    aux: &[AuxLayer],
    cfg: &SasftConfig,
) -> Result<(LmParams, Vec<LogRow>)> {
    cfg.validate()?;
    check_inputs(examples, aux, cfg)?;
    let aux: Vec<AuxLayer> = if cfg.mode == SasftMode::ReduceZero {
        aux.iter().map(|a| AuxLayer { sae: a.sae.clone(), set: a.set.zeroed() }).collect()
    } else {
        aux.to_vec()
    };
    let mut lm = lm_init.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut cursor = examples.len();
    let mut state = AdamState::new();
    let adam = AdamConfig { weight_decay: cfg.weight_decay, ..AdamConfig::default() };
    let bsz = cfg.batch.min(examples.len());
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut picked = Vec::with_capacity(bsz);
        for _ in 0..bsz {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picked.push(&examples[order[cursor]]);
            cursor += 1;
        }
        let mut g = Graph::<f32>::new();
        let pv = lm.insert(&mut g, true);
        let loss = batch_loss(&mut g, &lm, &pv, &picked, &aux, cfg)?;
        let row = LogRow {
            step,
            ce: g.value(loss.ce).item() as f64,
            aux: g.value(loss.aux).item() as f64,
            total: g.value(loss.total).item() as f64,
            lr: warmup_cosine(step, cfg.warmup, cfg.steps, cfg.lr),
        };
        if !row.total.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {step}")));
        }
        g.backward(loss.total)?;
        let grads: Vec<Tensor<f32>> = pv.vars.iter().map(|&v| g.grad(v)).collect();
        drop(g);
        adam_step(&mut lm.tensors_mut(), &grads, &mut state, row.lr, &adam)?;
        log.push(row);
    }
    Ok((lm, log))
}
