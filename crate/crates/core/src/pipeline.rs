//! End-to-end bilingual experiment: corpus, pretraining, SAEs, feature
//! discovery, SFT and SASFT variants, then every evaluation.

use std::collections::BTreeMap;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::corpus::{build_clean, build_corpus, Corpus, Document, MixtureConfig, Role, SyntheticLanguage, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::{cs_ratio, make_prompts, perplexity_per_language, preact_profile, CsReport, PositionProfile, Prompt};
use crate::langfeat::{collect_residuals, mean_activations, neutral_feature, LanguageFeatureSet, ResidualDataset};
use crate::microlm::{DecodeConfig, LmConfig, LmParams};
use crate::sae::{train_sae, SaeParams, SaeStep, SaeTrainConfig};
use crate::sasft::{examples_from_docs, train, AuxLayer, LogRow, SasftConfig, SasftMode};
use crate::scripts::{LanguageId, ScriptRegistry};
use crate::steer::{ablation_sweep, PositionPolicy, SweepRow};
use crate::stream_rng;

/// Fixed per-stage stream ids under the master seed.
pub mod stage {
    pub const CORPUS: u64 = 1;
    pub const LM_INIT: u64 = 2;
    pub const PRETRAIN: u64 = 3;
    pub const SAE: u64 = 4;
    pub const SFT: u64 = 5;
    pub const PROMPTS: u64 = 6;
    pub const DECODE: u64 = 7;
    pub const HELDOUT: u64 = 8;
}

/// Seed for one stage, derived from the master seed.
pub fn stage_seed(seed: u64, stage: u64) -> u64 {
    stream_rng(seed, stage).next_u64()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup: usize,
    pub steps: usize,
    pub batch: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { lr: 3e-3, weight_decay: 0.1, warmup: 100, steps: 1500, batch: 32 }
    }
}

impl PretrainConfig {
    /// Next-token training on every position, as a plain SFT run.
    pub fn as_sft(&self, seed: u64) -> SasftConfig {
        SasftConfig {
            mode: SasftMode::SftOnly,
            layers: Vec::new(),
            aux_weight: 0.0,
            lr: self.lr,
            weight_decay: self.weight_decay,
            warmup: self.warmup,
            steps: self.steps,
            batch: self.batch,
            seed,
            ..SasftConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    /// Layers that get an SAE (reverse-counted).
    pub layers: Vec<usize>,
    pub k: usize,
    /// Residual vectors per language for SAE training and scoring.
    pub residual_budget: usize,
    /// Smallest per-language mean activation a control feature may have.
    pub control_min_mean: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { layers: vec![0, 1], k: 2, residual_budget: 16384, control_min_mean: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_prompts: usize,
    pub prompt_len: usize,
    pub decode: DecodeConfig,
    pub heldout_docs: usize,
    /// SAE layer used for the profile and the ablation sweep.
    pub analysis_layer: usize,
    pub profile_window: usize,
    pub sweep_lambdas: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_prompts: 1000,
            prompt_len: 8,
            decode: DecodeConfig { max_new: 56, ..DecodeConfig::default() },
            heldout_docs: 200,
            analysis_layer: 0,
            profile_window: 6,
            sweep_lambdas: vec![0.0, 0.25, 0.5, 1.0, 2.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Language prompts are written in.
    pub host_language: LanguageId,
    pub mixture: MixtureConfig,
    pub lm: LmConfig,
    pub pretrain: PretrainConfig,
    pub sae: SaeTrainConfig,
    pub features: FeatureConfig,
    /// SFT and SASFT settings; `mode` is set per variant.
    pub sasft: SasftConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mixture = MixtureConfig::default();
        Self {
            seed: 0,
            host_language: "synA".into(),
            lm: LmConfig { vocab: 2 + mixture.languages.len() * mixture.alphabet_size, ..LmConfig::default() },
            mixture,
            pretrain: PretrainConfig::default(),
            sae: SaeTrainConfig::default(),
            features: FeatureConfig::default(),
            sasft: SasftConfig { steps: 300, warmup: 30, lr: 1e-3, ..SasftConfig::default() },
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.mixture.validate()?;
        self.lm.validate()?;
        self.sae.validate()?;
        self.sasft.validate()?;
        if !self.mixture.languages.contains(&self.host_language) || self.host_language == self.mixture.injection_lang {
            return Err(Error::InvalidConfig(format!(
                "host language {} must be a corpus language other than the injected one",
                self.host_language
            )));
        }
        if self.mixture.doc_length > self.lm.ctx_len {
            return Err(Error::InvalidConfig(format!(
                "doc_length {} exceeds ctx_len {}",
                self.mixture.doc_length, self.lm.ctx_len
            )));
        }
        let vocab = 2 + self.mixture.languages.len() * self.mixture.alphabet_size;
        if self.lm.vocab != vocab {
            return Err(Error::InvalidConfig(format!("lm.vocab is {} but the corpus needs {vocab}", self.lm.vocab)));
        }
        for l in self.sasft.layers.iter().chain(&self.features.layers) {
            self.lm.block_of(*l)?;
        }
        if self.features.k < self.sasft.features_per_layer {
            return Err(Error::InvalidConfig(format!(
                "features.k {} is below sasft.features_per_layer {}",
                self.features.k, self.sasft.features_per_layer
            )));
        }
        if !self.features.layers.contains(&self.eval.analysis_layer) {
            return Err(Error::InvalidConfig(format!("analysis layer {} has no SAE", self.eval.analysis_layer)));
        }
        self.eval.decode.validate()?;
        if let Some(l) = self.sasft.layers.iter().find(|l| !self.features.layers.contains(l)) {
            return Err(Error::InvalidConfig(format!("SASFT layer {l} has no SAE")));
        }
        Ok(())
    }

    pub fn forbidden(&self) -> &LanguageId {
        &self.mixture.injection_lang
    }
}

/// Corpus-side inputs shared by every stage of one seed.
pub struct Data {
    pub registry: ScriptRegistry,
    pub languages: Vec<SyntheticLanguage>,
    pub vocab: Vocabulary,
    pub corpus: Corpus,
    pub prompts: Vec<Prompt>,
    pub prompt_docs: Vec<Document>,
    pub heldout: Vec<Document>,
}

pub fn build_languages(cfg: &ExperimentConfig) -> Result<(ScriptRegistry, Vec<SyntheticLanguage>)> {
    let registry = ScriptRegistry::with_builtin_scripts();
    let languages = cfg.mixture.build_languages(&registry)?;
    Ok((registry, languages))
}

pub fn build_data(cfg: &ExperimentConfig) -> Result<Data> {
    let (registry, languages) = build_languages(cfg)?;
    let vocab = Vocabulary::new(&languages);
    let corpus = build_corpus(&cfg.mixture, &languages, &mut stream_rng(cfg.seed, stage::CORPUS))?;
    let host: Vec<SyntheticLanguage> = languages.iter().filter(|l| l.lang == cfg.host_language).cloned().collect();
    let prompt_docs = build_clean(
        &host,
        cfg.eval.n_prompts,
        cfg.eval.prompt_len,
        Role::Prompt,
        &mut stream_rng(cfg.seed, stage::PROMPTS),
    );
    let prompts = make_prompts(&prompt_docs, &vocab, cfg.eval.prompt_len)?;
    let heldout = build_clean(
        &languages,
        cfg.eval.heldout_docs,
        cfg.mixture.doc_length,
        Role::Heldout,
        &mut stream_rng(cfg.seed, stage::HELDOUT),
    );
    Ok(Data { registry, languages, vocab, corpus, prompts, prompt_docs, heldout })
}

pub fn pretrain(cfg: &ExperimentConfig, vocab: &Vocabulary, docs: &[Document]) -> Result<(LmParams, Vec<LogRow>)> {
    let init = LmParams::init(&cfg.lm, &mut stream_rng(cfg.seed, stage::LM_INIT))?;
    let examples = examples_from_docs(docs, vocab, 0)?;
    train(&init, &examples, &[], &cfg.pretrain.as_sft(stage_seed(cfg.seed, stage::PRETRAIN)))
}

pub fn residuals(cfg: &ExperimentConfig, vocab: &Vocabulary, corpus: &Corpus, lm: &LmParams) -> Result<Vec<ResidualDataset>> {
    collect_residuals(lm, vocab, corpus, &cfg.mixture.languages, &cfg.features.layers, cfg.features.residual_budget)
}

/// Trains the SAE for one residual dataset. Each layer draws from its own
/// stream so layers can be trained independently.
pub fn fit_sae(cfg: &ExperimentConfig, ds: &ResidualDataset) -> Result<(SaeParams, Vec<SaeStep>)> {
    let pooled: Tensor<f32> = ds.pooled()?;
    let mut rng = stream_rng(stage_seed(cfg.seed, stage::SAE), ds.layer_index as u64);
    train_sae(&pooled, ds.layer_index, &cfg.sae, &mut rng)
}

/// SAEs and residual datasets for every configured layer.
pub fn fit_saes(
    cfg: &ExperimentConfig,
    vocab: &Vocabulary,
    corpus: &Corpus,
    lm: &LmParams,
) -> Result<Vec<(SaeParams, ResidualDataset)>> {
    residuals(cfg, vocab, corpus, lm)?.into_iter().map(|ds| Ok((fit_sae(cfg, &ds)?.0, ds))).collect()
}

/// Language-neutral feature used as the ablation control.
pub fn control_feature(cfg: &ExperimentConfig, sae: &SaeParams, ds: &ResidualDataset) -> Result<usize> {
    neutral_feature(&mean_activations(sae, ds)?, cfg.features.control_min_mean)
}

/// Pairs every SASFT layer's SAE with its feature set.
pub fn aux_layers(cfg: &ExperimentConfig, saes: &[SaeParams], sets: &[LanguageFeatureSet]) -> Result<Vec<AuxLayer>> {
    cfg.sasft
        .layers
        .iter()
        .map(|&l| {
            let sae = saes.iter().find(|s| s.layer_index == l);
            let set = sets.iter().find(|s| s.layer_index == l);
            match (sae, set) {
                (Some(sae), Some(set)) => Ok(AuxLayer { sae: sae.clone(), set: set.clone() }),
                _ => Err(Error::InvalidConfig(format!("SASFT layer {l} needs an SAE and a feature set"))),
            }
        })
        .collect()
}

pub fn find_features(
    saes: &[(SaeParams, ResidualDataset)],
    lang: &LanguageId,
    k: usize,
) -> Result<Vec<LanguageFeatureSet>> {
    saes.iter().map(|(sae, ds)| LanguageFeatureSet::find(sae, ds, lang, k)).collect()
}

/// The SFT-family variant of `cfg.sasft` for `mode`.
pub fn variant(cfg: &ExperimentConfig, mode: SasftMode) -> SasftConfig {
    let mut c = cfg.sasft.clone();
    c.mode = mode;
    c.seed = stage_seed(cfg.seed, stage::SFT);
    c.target_language = match mode {
        SasftMode::Enhance => cfg.host_language.clone(),
        _ => cfg.forbidden().clone(),
    };
    if mode == SasftMode::SftOnly {
        c.aux_weight = 0.0;
    }
    c
}

pub fn fine_tune(
    cfg: &ExperimentConfig,
    vocab: &Vocabulary,
    docs: &[Document],
    base: &LmParams,
    aux: &[AuxLayer],
    mode: SasftMode,
) -> Result<(LmParams, Vec<LogRow>)> {
    let examples = examples_from_docs(docs, vocab, cfg.eval.prompt_len)?;
    train(base, &examples, aux, &variant(cfg, mode))
}

pub const METHODS: [(&str, SasftMode); 3] =
    [("sft", SasftMode::SftOnly), ("sasft", SasftMode::Reduce), ("sasft_zero", SasftMode::ReduceZero)];

/// Everything one seed produces.
pub struct SeedRun {
    pub seed: u64,
    pub base: LmParams,
    pub saes: Vec<SaeParams>,
    pub target_sets: Vec<LanguageFeatureSet>,
    /// Language-neutral feature at the analysis layer.
    pub control_feature: usize,
    /// Keyed by method name (`sft`, `sasft`, `sasft_zero`) plus `pretrain`
    /// for logs.
    pub models: BTreeMap<String, LmParams>,
    pub logs: BTreeMap<String, Vec<LogRow>>,
    pub cs: BTreeMap<String, CsReport>,
    pub ppl: BTreeMap<String, BTreeMap<LanguageId, f64>>,
    pub profile: PositionProfile,
    pub sweep: Vec<SweepRow>,
}

impl SeedRun {
    /// One row per method, compared against plain SFT.
    pub fn summary(&self) -> Vec<SummaryRow> {
        METHODS
            .iter()
            .filter(|(m, _)| self.cs.contains_key(*m))
            .map(|(m, _)| {
                let last = self.logs[*m].last();
                summary_row(
                    self.seed,
                    m,
                    &self.cs[*m],
                    &self.cs["sft"],
                    &self.ppl[*m],
                    &self.ppl["sft"],
                    last.map_or(f64::NAN, |l| l.ce),
                    last.map_or(f64::NAN, |l| l.aux),
                )
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub seed: u64,
    pub method: String,
    pub cs_ratio: f64,
    /// `1 − r / r_sft`, zero when the SFT ratio is zero.
    pub relative_reduction: f64,
    /// Largest per-language relative perplexity change against SFT.
    pub ppl_delta: f64,
    pub final_ce: f64,
    pub final_aux: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn summary_row(
    seed: u64,
    method: &str,
    cs: &CsReport,
    sft_cs: &CsReport,
    ppl: &BTreeMap<LanguageId, f64>,
    sft_ppl: &BTreeMap<LanguageId, f64>,
    final_ce: f64,
    final_aux: f64,
) -> SummaryRow {
    let ppl_delta = ppl
        .iter()
        .filter_map(|(l, v)| sft_ppl.get(l).map(|b| v / b - 1.0))
        .fold(f64::NEG_INFINITY, f64::max);
    SummaryRow {
        seed,
        method: method.to_string(),
        cs_ratio: cs.ratio,
        relative_reduction: if sft_cs.ratio > 0.0 { 1.0 - cs.ratio / sft_cs.ratio } else { 0.0 },
        ppl_delta,
        final_ce,
        final_aux,
    }
}

/// Runs every stage for `cfg.seed`. `progress` receives a line per stage.
pub fn run_seed(cfg: &ExperimentConfig, mut progress: impl FnMut(&str)) -> Result<SeedRun> {
    cfg.validate()?;
    let data = build_data(cfg)?;
    let (base, pre_log) = pretrain(cfg, &data.vocab, &data.corpus.documents)?;
    progress(&format!("pretrain: final ce {:.4}", pre_log.last().map_or(f64::NAN, |l| l.ce)));
    let fitted = fit_saes(cfg, &data.vocab, &data.corpus, &base)?;
    let saes: Vec<SaeParams> = fitted.iter().map(|(s, _)| s.clone()).collect();
    let target_sets = find_features(&fitted, cfg.forbidden(), cfg.features.k)?;
    let (analysis_sae, analysis_ds) = fitted
        .iter()
        .find(|(s, _)| s.layer_index == cfg.eval.analysis_layer)
        .ok_or_else(|| Error::InvalidConfig(format!("analysis layer {} has no SAE", cfg.eval.analysis_layer)))?;
    let control = control_feature(cfg, analysis_sae, analysis_ds)?;
    let target = target_sets.iter().find(|s| s.layer_index == analysis_sae.layer_index).expect("set per SAE").features[0];
    progress(&format!(
        "features: {:?}, control {control}",
        target_sets.iter().map(|s| (s.layer_index, s.features.clone())).collect::<Vec<_>>()
    ));
    let aux = aux_layers(cfg, &saes, &target_sets)?;
    let forbidden = cfg.forbidden();
    let decode_seed = stage_seed(cfg.seed, stage::DECODE);
    let mut models = BTreeMap::new();
    let mut logs = BTreeMap::new();
    let mut cs = BTreeMap::new();
    let mut ppl = BTreeMap::new();
    let mut sft_responses = Vec::new();
    for (name, mode) in METHODS {
        let (lm, log) = fine_tune(cfg, &data.vocab, &data.corpus.documents, &base, &aux, mode)?;
        let (report, responses) =
            cs_ratio(&lm, &data.vocab, &data.registry, &data.prompts, forbidden, &cfg.eval.decode, decode_seed)?;
        progress(&format!("{name}: cs ratio {:.4}", report.ratio));
        if mode == SasftMode::SftOnly {
            sft_responses = responses;
        }
        ppl.insert(name.to_string(), perplexity_per_language(&lm, &data.vocab, &data.heldout)?);
        cs.insert(name.to_string(), report);
        logs.insert(name.to_string(), log);
        models.insert(name.to_string(), lm);
    }
    logs.insert("pretrain".into(), pre_log);
    let sft = &models["sft"];
    let profile = preact_profile(
        sft,
        analysis_sae,
        target,
        &data.prompts,
        &sft_responses,
        &data.vocab,
        &data.registry,
        forbidden,
        cfg.eval.profile_window,
    )?;
    let variants = vec![("target".to_string(), target), ("control".to_string(), control)];
    let sweep = ablation_sweep(
        sft,
        analysis_sae,
        &variants,
        &cfg.eval.sweep_lambdas,
        &data.prompts,
        &data.vocab,
        &data.registry,
        forbidden,
        &cfg.eval.decode,
        decode_seed,
        PositionPolicy::AllGenerated,
    )?;
    progress("sweep done");
    Ok(SeedRun {
        seed: cfg.seed,
        base,
        saes,
        target_sets,
        control_feature: control,
        models,
        logs,
        cs,
        ppl,
        profile,
        sweep,
    })
}
