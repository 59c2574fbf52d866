//! ReLU sparse autoencoder over residual-stream vectors.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, checkpoint, AdamConfig, AdamState, Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::microlm::sidecar;

#[derive(Clone, Debug, PartialEq)]
pub struct SaeParams<T: Scalar = f32> {
    pub layer_index: usize,
    /// `[M, N]`
    pub w_enc: Tensor<T>,
    pub b_enc: Tensor<T>,
    /// `[N, M]`; column `s` is feature direction `d_s`.
    pub w_dec: Tensor<T>,
    pub b_dec: Tensor<T>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
struct SaeSidecar {
    #[serde(rename = "layer_index")]
    layer_index: usize,
    m: usize,
    n: usize,
}

impl<T: Scalar> SaeParams<T> {
    pub fn new(layer_index: usize, w_enc: Tensor<T>, b_enc: Tensor<T>, w_dec: Tensor<T>, b_dec: Tensor<T>) -> Result<Self> {
        let (m, n) = (w_enc.rows(), w_enc.cols());
        if w_enc.ndim() != 2 || b_enc.shape() != [m] || w_dec.shape() != [n, m] || b_dec.shape() != [n] {
            return Err(Error::Shape(format!(
                "SAE tensors {:?} {:?} {:?} {:?}",
                w_enc.shape(),
                b_enc.shape(),
                w_dec.shape(),
                b_dec.shape()
            )));
        }
        Ok(Self { layer_index, w_enc, b_enc, w_dec, b_dec })
    }

    /// Feature count.
    pub fn m(&self) -> usize {
        self.w_enc.rows()
    }

    /// Residual width.
    pub fn n(&self) -> usize {
        self.w_enc.cols()
    }

    fn check_width(&self, got: usize, want: usize) -> Result<()> {
        if got != want {
            return Err(Error::Shape(format!("SAE expected width {want}, got {got}")));
        }
        Ok(())
    }

    /// `W_enc x + b_enc`
    pub fn preact(&self, x: &[T]) -> Result<Vec<T>> {
        self.check_width(x.len(), self.n())?;
        Ok((0..self.m())
            .map(|s| self.w_enc.row(s).iter().zip(x).map(|(&w, &v)| w * v).sum::<T>() + self.b_enc.data()[s])
            .collect())
    }

    pub fn act(&self, x: &[T]) -> Result<Vec<T>> {
        Ok(self.preact(x)?.into_iter().map(|f| f.max(T::zero())).collect())
    }

    /// `W_dec a + b_dec`
    pub fn reconstruct(&self, a: &[T]) -> Result<Vec<T>> {
        self.check_width(a.len(), self.m())?;
        Ok((0..self.n())
            .map(|i| self.w_dec.row(i).iter().zip(a).map(|(&w, &v)| w * v).sum::<T>() + self.b_dec.data()[i])
            .collect())
    }

    pub fn feature_direction(&self, s: usize) -> Result<Vec<T>> {
        if s >= self.m() {
            return Err(Error::IndexOutOfRange { what: "SAE feature", index: s, len: self.m() });
        }
        Ok((0..self.n()).map(|i| self.w_dec.row(i)[s]).collect())
    }

    /// Pre-activations for every row of `x` (`[rows, N]` → `[rows, M]`).
    pub fn preact_batch(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_width(x.cols(), self.n())?;
        let mut f = x.matmul(&self.w_enc.transpose())?;
        let m = self.m();
        for r in 0..f.rows() {
            for (v, &b) in f.row_mut(r).iter_mut().zip(self.b_enc.data()) {
                *v = *v + b;
            }
        }
        debug_assert_eq!(f.cols(), m);
        Ok(f)
    }

    /// Pre-activations of selected features for residual rows `x` already in
    /// `g`. The SAE enters as constants, so no gradient reaches it.
    pub fn preact_graph(&self, g: &mut Graph<T>, x: Var, features: &[usize]) -> Result<Var> {
        let n = self.n();
        let mut w = Vec::with_capacity(n * features.len());
        for i in 0..n {
            for &s in features {
                if s >= self.m() {
                    return Err(Error::IndexOutOfRange { what: "SAE feature", index: s, len: self.m() });
                }
                w.push(self.w_enc.row(s)[i]);
            }
        }
        let b: Vec<T> = features.iter().map(|&s| self.b_enc.data()[s]).collect();
        let w = g.constant(Tensor::new(&[n, features.len()], w)?);
        let b = g.constant(Tensor::vector(b));
        let f = g.matmul(x, w)?;
        g.add(f, b)
    }

    pub fn cast<U: Scalar>(&self) -> SaeParams<U> {
        SaeParams {
            layer_index: self.layer_index,
            w_enc: self.w_enc.cast(),
            b_enc: self.b_enc.cast(),
            w_dec: self.w_dec.cast(),
            b_dec: self.b_dec.cast(),
        }
    }

    /// Rescales every decoder column to unit Euclidean norm.
    pub fn normalize_decoder(&mut self) {
        let (n, m) = (self.n(), self.m());
        let d = self.w_dec.data_mut();
        for s in 0..m {
            let norm = (0..n).map(|i| d[i * m + s] * d[i * m + s]).sum::<T>().sqrt();
            if norm > T::zero() {
                for i in 0..n {
                    d[i * m + s] = d[i * m + s] / norm;
                }
            }
        }
    }

    /// Mean over rows of the squared reconstruction error.
    pub fn mse(&self, x: &Tensor<T>) -> Result<f64> {
        let mut total = 0.0;
        for r in 0..x.rows() {
            let xr = x.row(r);
            let xh = self.reconstruct(&self.act(xr)?)?;
            total += xr.iter().zip(&xh).map(|(&a, &b)| (a - b).as_f64().powi(2)).sum::<f64>();
        }
        Ok(total / x.rows().max(1) as f64)
    }
}

impl SaeParams<f32> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let named = [
            ("W_enc", &self.w_enc),
            ("b_enc", &self.b_enc),
            ("W_dec", &self.w_dec),
            ("b_dec", &self.b_dec),
        ]
        .map(|(k, t)| (k.to_string(), t.clone()));
        checkpoint::save(path, &named)?;
        let side = SaeSidecar { layer_index: self.layer_index, m: self.m(), n: self.n() };
        std::fs::write(sidecar(path), serde_json::to_vec_pretty(&side)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side: SaeSidecar = serde_json::from_slice(&std::fs::read(sidecar(path))?)?;
        let (m, n) = (side.m, side.n);
        let mut named = checkpoint::load(path)?;
        Self::new(
            side.layer_index,
            checkpoint::take(&mut named, "W_enc", &[m, n])?,
            checkpoint::take(&mut named, "b_enc", &[m])?,
            checkpoint::take(&mut named, "W_dec", &[n, m])?,
            checkpoint::take(&mut named, "b_dec", &[n])?,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaeTrainConfig {
    pub sparsity_weight: f64,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    /// M / N
    pub expansion: usize,
}

impl Default for SaeTrainConfig {
    fn default() -> Self {
        Self { sparsity_weight: 1e-3, lr: 1e-3, steps: 2000, batch: 256, expansion: 4 }
    }
}

impl SaeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sparsity_weight >= 0.0) || !(self.lr > 0.0) || self.batch == 0 || self.expansion < 2 {
            return Err(Error::InvalidConfig(format!("invalid SAE training settings {self:?}")));
        }
        Ok(())
    }
}

/// Unit random decoder columns, tied encoder, data-mean decoder bias.
pub fn init_sae(data: &Tensor<f32>, layer_index: usize, expansion: usize, rng: &mut impl Rng) -> Result<SaeParams> {
    if data.ndim() != 2 || data.rows() == 0 {
        return Err(Error::Empty("SAE training data".into()));
    }
    let (rows, n) = (data.rows(), data.cols());
    let m = n * expansion;
    let w: Vec<f32> = (0..n * m).map(|_| StandardNormal.sample(rng)).collect();
    let mut mean = vec![0.0f64; n];
    for r in 0..rows {
        mean.iter_mut().zip(data.row(r)).for_each(|(a, &b)| *a += b as f64);
    }
    let b_dec = Tensor::vector(mean.iter().map(|&v| (v / rows as f64) as f32).collect());
    let mut sae = SaeParams::new(layer_index, Tensor::zeros(&[m, n]), Tensor::zeros(&[m]), Tensor::new(&[n, m], w)?, b_dec)?;
    sae.normalize_decoder();
    sae.w_enc = sae.w_dec.transpose();
    Ok(sae)
}

/// Per-step metrics from [`train_sae`].
#[derive(Clone, Debug, PartialEq)]
pub struct SaeStep {
    pub mse: f64,
    pub l1: f64,
}

/// Fits an SAE to the rows of `data` by Adam on
/// `mean ‖x − x̂‖² + λ_sparse · mean ‖a‖₁`.
pub fn train_sae(
    data: &Tensor<f32>,
    layer_index: usize,
    cfg: &SaeTrainConfig,
    rng: &mut impl Rng,
) -> Result<(SaeParams, Vec<SaeStep>)> {
    cfg.validate()?;
    let mut sae = init_sae(data, layer_index, cfg.expansion, rng)?;
    let n = sae.n();
    let rows = data.rows();
    let mut order: Vec<usize> = (0..rows).collect();
    let mut cursor = rows;
    let mut state = AdamState::new();
    let adam = AdamConfig::default();
    let mut log = Vec::with_capacity(cfg.steps);
    let bsz = cfg.batch.min(rows);
    for _ in 0..cfg.steps {
        let mut xb = Vec::with_capacity(bsz * n);
        for _ in 0..bsz {
            if cursor == rows {
                order.shuffle(rng);
                cursor = 0;
            }
            xb.extend_from_slice(data.row(order[cursor]));
            cursor += 1;
        }
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(&[bsz, n], xb)?);
        let we = g.leaf(sae.w_enc.clone());
        let be = g.leaf(sae.b_enc.clone());
        let wd = g.leaf(sae.w_dec.clone());
        let bd = g.leaf(sae.b_dec.clone());
        let wet = g.transpose(we)?;
        let f = g.matmul(x, wet)?;
        let f = g.add(f, be)?;
        let a = g.relu(f);
        let wdt = g.transpose(wd)?;
        let xh = g.matmul(a, wdt)?;
        let xh = g.add(xh, bd)?;
        let err = g.sub(x, xh)?;
        let sq = g.mul(err, err)?;
        let sq = g.sum(sq);
        let mse = g.scale(sq, 1.0 / bsz as f32);
        let l1 = g.sum(a);
        let l1 = g.scale(l1, 1.0 / bsz as f32);
        let pen = g.scale(l1, cfg.sparsity_weight as f32);
        let loss = g.add(mse, pen)?;
        let step = SaeStep { mse: g.value(mse).item() as f64, l1: g.value(l1).item() as f64 };
        if !step.mse.is_finite() {
            return Err(Error::NonFinite("SAE reconstruction loss".into()));
        }
        g.backward(loss)?;
        let grads = [g.grad(we), g.grad(be), g.grad(wd), g.grad(bd)];
        let mut params = [&mut sae.w_enc, &mut sae.b_enc, &mut sae.w_dec, &mut sae.b_dec];
        adam_step(&mut params, &grads, &mut state, cfg.lr, &adam)?;
        sae.normalize_decoder();
        log.push(step);
    }
    Ok((sae, log))
}
