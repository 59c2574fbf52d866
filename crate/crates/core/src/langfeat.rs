//! Language-specific SAE features: monolinguality ranking and
//! pre-activation thresholds.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::corpus::{Corpus, Vocabulary};
use crate::error::{Error, Result};
use crate::microlm::{forward, LmParams};
use crate::sae::SaeParams;
use crate::scripts::LanguageId;

/// Residual vectors per language at one layer; each tensor is `[count, N]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualDataset {
    pub layer_index: usize,
    pub by_language: BTreeMap<LanguageId, Tensor<f32>>,
}

impl ResidualDataset {
    pub fn get(&self, lang: &LanguageId) -> Result<&Tensor<f32>> {
        self.by_language.get(lang).ok_or_else(|| Error::UnknownLanguage(lang.to_string()))
    }

    /// Every vector from every language, stacked.
    pub fn pooled(&self) -> Result<Tensor<f32>> {
        let n = self.by_language.values().next().map_or(0, Tensor::cols);
        let data: Vec<f32> = self.by_language.values().flat_map(|t| t.data().iter().copied()).collect();
        Tensor::new(&[data.len() / n.max(1), n], data)
    }
}

/// Captures residuals at `layers` over every position of the corpus's
/// non-injected documents, keeping at most `budget` vectors per language.
/// Documents are visited in corpus order.
pub fn collect_residuals(
    lm: &LmParams,
    vocab: &Vocabulary,
    corpus: &Corpus,
    languages: &[LanguageId],
    layers: &[usize],
    budget: usize,
) -> Result<Vec<ResidualDataset>> {
    let d = lm.config.d_model;
    let mut bufs: Vec<BTreeMap<&LanguageId, Vec<f32>>> =
        layers.iter().map(|_| languages.iter().map(|l| (l, Vec::new())).collect()).collect();
    for lang in languages {
        let mut taken = 0;
        for (i, doc) in corpus.documents.iter().enumerate() {
            if taken >= budget {
                break;
            }
            if &doc.lang != lang || corpus.is_injected(i) {
                continue;
            }
            let toks = vocab.encode(&doc.text)?;
            let toks = &toks[..toks.len().min(lm.config.ctx_len)];
            let keep = toks.len().min(budget - taken);
            let out = forward(lm, toks, layers, &[])?;
            for cap in &out.captures {
                let slot = layers.iter().position(|&l| l == cap.layer_index).expect("requested layer");
                bufs[slot].get_mut(lang).expect("language slot").extend_from_slice(&cap.vectors.data()[..keep * d]);
            }
            taken += keep;
        }
        if taken == 0 {
            return Err(Error::Empty(format!("no monolingual documents for language {lang}")));
        }
    }
    layers
        .iter()
        .zip(bufs)
        .map(|(&layer_index, buf)| {
            let by_language = buf
                .into_iter()
                .map(|(l, v)| Ok((l.clone(), Tensor::new(&[v.len() / d, d], v)?)))
                .collect::<Result<_>>()?;
            Ok(ResidualDataset { layer_index, by_language })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureScore {
    pub feature: usize,
    pub mu: f64,
    pub gamma: f64,
    pub nu: f64,
}

/// Per-feature mean of `map(f_s(x))` over the rows of `x`, evaluated in f64.
fn feature_means(sae: &SaeParams<f64>, x: &Tensor<f32>, map: impl Fn(f64) -> f64) -> Result<Vec<f64>> {
    let f = sae.preact_batch(&x.cast())?;
    let rows = f.rows();
    let mut sums = vec![0.0f64; f.cols()];
    for r in 0..rows {
        sums.iter_mut().zip(f.row(r)).for_each(|(s, &v)| *s += map(v));
    }
    Ok(sums.into_iter().map(|s| s / rows as f64).collect())
}

/// Mean SAE activation per feature for every language.
pub fn mean_activations(sae: &SaeParams, data: &ResidualDataset) -> Result<BTreeMap<LanguageId, Vec<f64>>> {
    let sae = sae.cast::<f64>();
    data.by_language
        .iter()
        .map(|(l, x)| {
            if x.rows() == 0 {
                return Err(Error::Empty(format!("residuals for language {l}")));
            }
            Ok((l.clone(), feature_means(&sae, x, |v| v.max(0.0))?))
        })
        .collect()
}

/// Scores from per-language mean activations: `μ` is the mean on `lang`,
/// `γ` the unweighted mean of the other languages' means.
pub fn scores_from_means(means: &BTreeMap<LanguageId, Vec<f64>>, lang: &LanguageId) -> Result<Vec<FeatureScore>> {
    let own = means.get(lang).ok_or_else(|| Error::UnknownLanguage(lang.to_string()))?;
    let others: Vec<&Vec<f64>> = means.iter().filter(|(l, _)| *l != lang).map(|(_, v)| v).collect();
    if others.is_empty() {
        return Err(Error::InvalidConfig("monolinguality needs at least two languages".into()));
    }
    Ok(own
        .iter()
        .enumerate()
        .map(|(s, &mu)| {
            let gamma = others.iter().map(|v| v[s]).sum::<f64>() / others.len() as f64;
            FeatureScore { feature: s, mu, gamma, nu: mu - gamma }
        })
        .collect())
}

pub fn monolinguality(sae: &SaeParams, data: &ResidualDataset, lang: &LanguageId) -> Result<Vec<FeatureScore>> {
    scores_from_means(&mean_activations(sae, data)?, lang)
}

/// Top-`k` features by `ν`, ties to the lower index.
pub fn select_features(scores: &[FeatureScore], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::IndexOutOfRange { what: "feature count k", index: k, len: scores.len() });
    }
    let mut order: Vec<&FeatureScore> = scores.iter().collect();
    order.sort_by(|a, b| b.nu.total_cmp(&a.nu).then(a.feature.cmp(&b.feature)));
    Ok(order[..k].iter().map(|s| s.feature).collect())
}

/// Language-neutral control feature: among features whose mean activation
/// reaches `min_mean` in every language, the one with the smallest spread
/// `max − min` of per-language means. Ties go to the lower index.
pub fn neutral_feature(means: &BTreeMap<LanguageId, Vec<f64>>, min_mean: f64) -> Result<usize> {
    let m = means.values().next().map_or(0, Vec::len);
    (0..m)
        .filter_map(|s| {
            let (lo, hi) = means.values().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v[s]), hi.max(v[s])));
            (lo >= min_mean).then_some((s, hi - lo))
        })
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(s, _)| s)
        .ok_or_else(|| Error::Empty(format!("no feature has mean activation ≥ {min_mean} in every language")))
}

pub type Alpha = BTreeMap<usize, BTreeMap<LanguageId, f64>>;
pub type Beta = BTreeMap<usize, f64>;

/// `α[s][j]`: mean pre-activation of `s` on every language `j ≠ lang`;
/// `β[s]`: the same mean on `lang` itself.
pub fn estimate_thresholds(
    sae: &SaeParams,
    data: &ResidualDataset,
    features: &[usize],
    lang: &LanguageId,
) -> Result<(Alpha, Beta)> {
    if features.is_empty() {
        return Err(Error::Empty("feature selection".into()));
    }
    if let Some(&s) = features.iter().find(|&&s| s >= sae.m()) {
        return Err(Error::IndexOutOfRange { what: "SAE feature", index: s, len: sae.m() });
    }
    data.get(lang)?;
    let sae = sae.cast::<f64>();
    let mut alpha: Alpha = features.iter().map(|&s| (s, BTreeMap::new())).collect();
    let mut beta = Beta::new();
    for (l, x) in &data.by_language {
        if x.rows() == 0 {
            return Err(Error::Empty(format!("residuals for language {l}")));
        }
        let means = feature_means(&sae, x, |v| v)?;
        for &s in features {
            if l == lang {
                beta.insert(s, means[s]);
            } else {
                alpha.get_mut(&s).expect("feature").insert(l.clone(), means[s]);
            }
        }
    }
    Ok((alpha, beta))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageFeatureSet {
    pub language: LanguageId,
    pub layer_index: usize,
    /// Rank 0 first.
    pub features: Vec<usize>,
    /// `ν` of each selected feature, parallel to `features`.
    pub nu: Vec<f64>,
    pub alpha: Alpha,
    pub beta: Beta,
}

impl LanguageFeatureSet {
    pub fn find(sae: &SaeParams, data: &ResidualDataset, lang: &LanguageId, k: usize) -> Result<Self> {
        let scores = monolinguality(sae, data, lang)?;
        let features = select_features(&scores, k)?;
        let (alpha, beta) = estimate_thresholds(sae, data, &features, lang)?;
        Ok(Self {
            language: lang.clone(),
            layer_index: data.layer_index,
            nu: features.iter().map(|&s| scores[s].nu).collect(),
            features,
            alpha,
            beta,
        })
    }

    /// Every `α` set to zero.
    pub fn zeroed(&self) -> Self {
        let mut out = self.clone();
        out.alpha.values_mut().flat_map(|m| m.values_mut()).for_each(|v| *v = 0.0);
        out
    }

    pub fn write_json(&self, w: impl Write) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }

    pub fn read_json(r: impl Read) -> Result<Self> {
        Ok(serde_json::from_reader(r)?)
    }
}
