use super::{LmParams, ParamVars, Slot, LN_EPS};
use crate::autodiff::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// Adds `delta` to the residual at one `(layer, row)` after the block
/// output is formed, before any later computation reads it.
#[derive(Clone, Debug, PartialEq)]
pub struct Intervention<T: Scalar = f32> {
    pub layer_index: usize,
    /// Row in the flattened `[batch * seq]` layout (the token position for a
    /// single sequence).
    pub position: usize,
    pub delta: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct GraphForward {
    /// `[batch * seq, vocab]`
    pub logits: Var,
    /// `(layer_index, [batch * seq, d_model])` for every requested layer.
    pub residuals: Vec<(usize, Var)>,
}

/// Builds the forward pass into `g`.
#[allow(clippy::too_many_arguments)]
pub fn forward_graph<T: Scalar>(
    g: &mut Graph<T>,
    params: &LmParams<T>,
    pv: &ParamVars,
    tokens: &[usize],
    batch: usize,
    seq: usize,
    capture: &[usize],
    interventions: &[Intervention<T>],
) -> Result<GraphForward> {
    let cfg = &params.config;
    if seq == 0 || seq > cfg.ctx_len || tokens.len() != batch * seq {
        return Err(Error::Shape(format!(
            "forward: {} tokens for batch {batch} × seq {seq} (ctx_len {})",
            tokens.len(),
            cfg.ctx_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab) {
        return Err(Error::IndexOutOfRange { what: "token id", index: bad, len: cfg.vocab });
    }
    for &l in capture {
        cfg.block_of(l)?;
    }
    let d = cfg.d_model;
    for iv in interventions {
        cfg.block_of(iv.layer_index)?;
        if iv.position >= tokens.len() || iv.delta.len() != d {
            return Err(Error::Shape(format!(
                "intervention at row {} with width {} (rows {}, d_model {d})",
                iv.position,
                iv.delta.len(),
                tokens.len()
            )));
        }
    }

    let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
    let tok = g.gather_rows(pv.tok_emb(), tokens)?;
    let pos = g.gather_rows(pv.pos_emb(), &positions)?;
    let mut x = g.add(tok, pos)?;
    let mut residuals = Vec::new();
    for b in 0..cfg.n_layers {
        let w = |s: Slot| pv.block(b, s);
        let h = g.layer_norm(x, w(Slot::Ln1G), w(Slot::Ln1B), LN_EPS)?;
        let qkv = g.matmul(h, w(Slot::WQkv))?;
        let qkv = g.add(qkv, w(Slot::BQkv))?;
        let att = g.causal_attention(qkv, batch, seq, cfg.n_heads)?;
        let o = g.matmul(att, w(Slot::WO))?;
        let o = g.add(o, w(Slot::BO))?;
        x = g.add(x, o)?;
        let h = g.layer_norm(x, w(Slot::Ln2G), w(Slot::Ln2B), LN_EPS)?;
        let f = g.matmul(h, w(Slot::WFc))?;
        let f = g.add(f, w(Slot::BFc))?;
        let f = g.relu(f);
        let p = g.matmul(f, w(Slot::WProj))?;
        let p = g.add(p, w(Slot::BProj))?;
        x = g.add(x, p)?;

        let layer = cfg.layer_of_block(b);
        let here: Vec<&Intervention<T>> = interventions.iter().filter(|iv| iv.layer_index == layer).collect();
        if !here.is_empty() {
            let mut delta = Tensor::zeros(&[tokens.len(), d]);
            for iv in here {
                for (o, &v) in delta.row_mut(iv.position).iter_mut().zip(&iv.delta) {
                    *o = *o + v;
                }
            }
            let delta = g.constant(delta);
            x = g.add(x, delta)?;
        }
        if capture.contains(&layer) {
            residuals.push((layer, x));
        }
    }
    let h = g.layer_norm(x, pv.head(0), pv.head(1), LN_EPS)?;
    let logits = g.matmul(h, pv.head(2))?;
    Ok(GraphForward { logits, residuals })
}

/// Residual vectors captured at one layer, one row per position.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualCapture<T: Scalar = f32> {
    pub layer_index: usize,
    pub positions: Vec<usize>,
    /// `[positions.len(), d_model]`
    pub vectors: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput<T: Scalar = f32> {
    /// `[len, vocab]`
    pub logits: Tensor<T>,
    pub captures: Vec<ResidualCapture<T>>,
}

/// Untracked forward pass over one sequence.
pub fn forward<T: Scalar>(
    params: &LmParams<T>,
    tokens: &[usize],
    capture_layers: &[usize],
    interventions: &[Intervention<T>],
) -> Result<ForwardOutput<T>> {
    let mut g = Graph::new();
    let pv = params.insert(&mut g, false);
    let out = forward_graph(&mut g, params, &pv, tokens, 1, tokens.len(), capture_layers, interventions)?;
    Ok(ForwardOutput {
        logits: g.value(out.logits).clone(),
        captures: out
            .residuals
            .iter()
            .map(|&(layer_index, v)| ResidualCapture {
                layer_index,
                positions: (0..tokens.len()).collect(),
                vectors: g.value(v).clone(),
            })
            .collect(),
    })
}

/// Equal-length token sequences plus, optionally, which next-token targets
/// count toward the loss (`mask[i][t]` covers the prediction of token
/// `t + 1` of sequence `i`).
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub sequences: Vec<Vec<usize>>,
    pub mask: Option<Vec<Vec<bool>>>,
}

impl Batch {
    pub fn new(sequences: Vec<Vec<usize>>) -> Self {
        Self { sequences, mask: None }
    }

    pub fn seq_len(&self) -> usize {
        self.sequences.first().map_or(0, Vec::len)
    }

    /// Inputs (all but the last token) and targets (all but the first).
    pub fn inputs_and_targets(&self) -> Result<(Vec<usize>, Vec<Option<usize>>)> {
        let len = self.seq_len();
        if len < 2 || self.sequences.iter().any(|s| s.len() != len) {
            return Err(Error::Shape("batch sequences must share a length of at least 2".into()));
        }
        let mut inputs = Vec::with_capacity(self.sequences.len() * (len - 1));
        let mut targets = Vec::with_capacity(inputs.capacity());
        for (i, s) in self.sequences.iter().enumerate() {
            inputs.extend_from_slice(&s[..len - 1]);
            for t in 0..len - 1 {
                let keep = self.mask.as_ref().is_none_or(|m| m[i][t]);
                targets.push(keep.then_some(s[t + 1]));
            }
        }
        Ok((inputs, targets))
    }
}

/// Mean next-token cross-entropy over the batch, plus the forward handles
/// (so auxiliary losses can read captured residuals).
pub fn lm_loss<T: Scalar>(
    g: &mut Graph<T>,
    params: &LmParams<T>,
    pv: &ParamVars,
    batch: &Batch,
    capture: &[usize],
) -> Result<(Var, GraphForward)> {
    let (inputs, targets) = batch.inputs_and_targets()?;
    let seq = batch.seq_len() - 1;
    let fwd = forward_graph(g, params, pv, &inputs, batch.sequences.len(), seq, capture, &[])?;
    let ce = g.cross_entropy_with_logits(fwd.logits, &targets)?;
    Ok((ce, fwd))
}

#[cfg(test)]
mod tests {
    use super::super::{LmConfig, LmParams};
    use super::*;
    use crate::autodiff::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> LmConfig {
        LmConfig { vocab: 40, d_model: 16, n_layers: 2, n_heads: 2, d_ff: 32, ctx_len: 16 }
    }

    fn random_params<T: Scalar>(cfg: &LmConfig, seed: u64) -> LmParams<T> {
        // unit-scale weights: at init scale most gradients sit near the
        // finite-difference noise floor
        let p = LmParams::<f64>::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let tensors = p
            .tensors()
            .iter()
            .map(|t| {
                let mut t = t.map(|v| v * 50.0);
                t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.05..0.05));
                t
            })
            .collect();
        LmParams::from_tensors(cfg.clone(), tensors).unwrap().cast()
    }

    #[test]
    fn capture_width_and_purity() {
        let cfg = tiny();
        let p: LmParams<f32> = random_params(&cfg, 1);
        let toks = [1, 5, 7, 39, 0];
        let a = forward(&p, &toks, &[0, 1], &[]).unwrap();
        let b = forward(&p, &toks, &[0, 1], &[]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.logits.shape(), &[5, 40]);
        assert_eq!(a.captures[0].vectors.shape(), &[5, 16]);
        assert!(forward(&p, &[40], &[], &[]).is_err());
        assert!(forward(&p, &[0; 17], &[], &[]).is_err());
    }

    #[test]
    fn zeros_give_finite_logits() {
        let p = LmParams::<f32>::init(&LmConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let out = forward(&p, &[0; 10], &[0], &[]).unwrap();
        assert!(out.logits.is_finite());
    }

    #[test]
    fn zero_intervention_is_bitwise_identity() {
        let cfg = tiny();
        let p: LmParams<f32> = random_params(&cfg, 2);
        let toks = [3, 4, 5, 6];
        let plain = forward(&p, &toks, &[], &[]).unwrap();
        let iv = Intervention { layer_index: 1, position: 2, delta: vec![0.0; 16] };
        assert_eq!(forward(&p, &toks, &[], &[iv]).unwrap().logits, plain.logits);
    }

    #[test]
    fn causality_and_intervention_locality() {
        let cfg = tiny();
        let p: LmParams<f64> = random_params(&cfg, 3);
        let a = forward(&p, &[1, 2, 3, 4, 5], &[], &[]).unwrap();
        let b = forward(&p, &[1, 2, 3, 9, 11], &[], &[]).unwrap();
        assert_eq!(a.logits.data()[..3 * 40], b.logits.data()[..3 * 40]);
        let iv = Intervention { layer_index: 1, position: 3, delta: vec![0.7; 16] };
        let c = forward(&p, &[1, 2, 3, 4, 5], &[], &[iv]).unwrap();
        assert_eq!(a.logits.data()[..3 * 40], c.logits.data()[..3 * 40]);
        assert_ne!(a.logits.data()[3 * 40..], c.logits.data()[3 * 40..]);
    }

    #[test]
    fn final_capture_feeds_output_head() {
        let cfg = tiny();
        let p: LmParams<f64> = random_params(&cfg, 4);
        let out = forward(&p, &[1, 2, 3], &[0], &[]).unwrap();
        let mut g = Graph::<f64>::new();
        let x = g.constant(out.captures[0].vectors.clone());
        let gain = g.constant(p.head(0).clone());
        let bias = g.constant(p.head(1).clone());
        let w = g.constant(p.head(2).clone());
        let h = g.layer_norm(x, gain, bias, LN_EPS).unwrap();
        let l = g.matmul(h, w).unwrap();
        for (a, b) in g.value(l).data().iter().zip(out.logits.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let cfg = tiny();
        let mut p = LmParams::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        for t in p.tensors_mut().into_iter().rev().take(1) {
            *t = Tensor::zeros(t.shape());
        }
        let mut g = Graph::new();
        let pv = p.insert(&mut g, false);
        let batch = Batch::new(vec![vec![1, 2, 3, 4], vec![5, 6, 7, 8]]);
        let (ce, _) = lm_loss(&mut g, &p, &pv, &batch, &[]).unwrap();
        assert!((g.value(ce).item() - 40f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_logits_give_small_loss() {
        // A 1-layer model whose head maps every hidden state onto token 3.
        let cfg = LmConfig { vocab: 5, d_model: 4, n_layers: 1, n_heads: 1, d_ff: 4, ctx_len: 8 };
        let mut p = LmParams::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let mut ts = p.tensors_mut();
        let n = ts.len();
        *ts[n - 3] = Tensor::zeros(&[4]);
        *ts[n - 2] = Tensor::from_f64(&[4], &[1.0, 0.0, 0.0, 0.0]).unwrap();
        let mut w = Tensor::zeros(&[4, 5]);
        w.data_mut()[3] = 1e3;
        *ts[n - 1] = w;
        let mut g = Graph::new();
        let pv = p.insert(&mut g, false);
        let batch = Batch::new(vec![vec![0, 3, 3, 3]]);
        let (ce, _) = lm_loss(&mut g, &p, &pv, &batch, &[]).unwrap();
        assert!(g.value(ce).item() < 1e-9);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let cfg = LmConfig { vocab: 40, d_model: 16, n_layers: 2, n_heads: 2, d_ff: 32, ctx_len: 16 };
        let p: LmParams<f64> = random_params(&cfg, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let batch = Batch::new((0..2).map(|_| (0..6).map(|_| rng.gen_range(0..40)).collect()).collect());
        let r = grad_check(
            |g, vars| {
                let pv = ParamVars { n_layers: cfg.n_layers, vars: vars.to_vec() };
                Ok(lm_loss(g, &p, &pv, &batch, &[])?.0)
            },
            p.tensors(),
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
    }
}
