//! Directional ablation of SAE feature directions during generation.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::Scalar;
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::eval::{generate, CsReport, Prompt};
use crate::microlm::{DecodeConfig, LmParams, ResidualHook};
use crate::sae::SaeParams;
use crate::scripts::{LanguageId, ScriptRegistry};

/// `x − λ d`
pub fn ablate<T: Scalar>(x: &[T], d: &[T], lambda: T) -> Vec<T> {
    x.iter().zip(d).map(|(&a, &b)| a - lambda * b).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PositionPolicy {
    /// Every position whose residual produces a generated token, i.e. the
    /// last prompt position onwards.
    AllGenerated,
    /// Positions where the feature's pre-activation exceeds `threshold`.
    TriggerOnPreact { threshold: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub layer_index: usize,
    pub feature: usize,
    pub lambda: f64,
    pub position_policy: PositionPolicy,
}

impl AblationSpec {
    pub fn validate(&self, sae: &SaeParams) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidConfig(format!("ablation λ must be ≥ 0, got {}", self.lambda)));
        }
        if self.layer_index != sae.layer_index {
            return Err(Error::InvalidConfig(format!(
                "ablation at layer {} but the SAE reads layer {}",
                self.layer_index, sae.layer_index
            )));
        }
        sae.feature_direction(self.feature).map(|_| ())
    }
}

/// Residual hook applying one [`AblationSpec`] during decoding.
pub struct AblationHook<'a> {
    sae: &'a SaeParams,
    spec: AblationSpec,
    direction: Vec<f32>,
    first_generated: usize,
    /// Positions where the ablation fired.
    pub fired: Vec<usize>,
}

impl<'a> AblationHook<'a> {
    pub fn new(sae: &'a SaeParams, spec: AblationSpec, prompt_len: usize) -> Result<Self> {
        spec.validate(sae)?;
        Ok(Self {
            sae,
            spec,
            direction: sae.feature_direction(spec.feature)?,
            first_generated: prompt_len.saturating_sub(1),
            fired: Vec::new(),
        })
    }
}

impl ResidualHook<f32> for AblationHook<'_> {
    fn on_residual(&mut self, layer_index: usize, position: usize, residual: &mut [f32]) {
        if layer_index != self.spec.layer_index || self.spec.lambda == 0.0 {
            return;
        }
        let fire = match self.spec.position_policy {
            PositionPolicy::AllGenerated => position >= self.first_generated,
            PositionPolicy::TriggerOnPreact { threshold } => {
                let s = self.spec.feature;
                let f = self.sae.w_enc.row(s).iter().zip(residual.iter()).map(|(&w, &x)| w * x).sum::<f32>()
                    + self.sae.b_enc.data()[s];
                f as f64 > threshold
            }
        };
        if fire {
            let lambda = self.spec.lambda as f32;
            residual.iter_mut().zip(&self.direction).for_each(|(x, &d)| *x -= lambda * d);
            self.fired.push(position);
        }
    }
}

pub fn generate_with_ablation(
    lm: &LmParams,
    sae: &SaeParams,
    spec: &AblationSpec,
    prompts: &[Prompt],
    decode: &DecodeConfig,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    spec.validate(sae)?;
    generate(lm, prompts, decode, seed, |p| AblationHook::new(sae, *spec, p.tokens.len()).expect("validated"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub feature_role: String,
    pub lambda: f64,
    pub n_prompts: usize,
    pub n_switched: usize,
    pub cs_ratio: f64,
}

/// CS ratio for every `(feature variant, λ)` cell, all cells sharing the
/// same prompts and seed.
#[allow(clippy::too_many_arguments)]
pub fn ablation_sweep(
    lm: &LmParams,
    sae: &SaeParams,
    variants: &[(String, usize)],
    lambdas: &[f64],
    prompts: &[Prompt],
    vocab: &Vocabulary,
    registry: &ScriptRegistry,
    lang: &LanguageId,
    decode: &DecodeConfig,
    seed: u64,
    policy: PositionPolicy,
) -> Result<Vec<SweepRow>> {
    if lambdas.len() < 2 {
        return Err(Error::InvalidConfig("an ablation sweep needs at least two λ values".into()));
    }
    let mut rows = Vec::with_capacity(variants.len() * lambdas.len());
    for (role, feature) in variants {
        for &lambda in lambdas {
            let spec = AblationSpec { layer_index: sae.layer_index, feature: *feature, lambda, position_policy: policy };
            let out = generate_with_ablation(lm, sae, &spec, prompts, decode, seed)?;
            let texts: Vec<String> = out.iter().map(|r| vocab.decode(r)).collect();
            let rep = CsReport::from_responses(registry, lang, prompts, &texts)?;
            rows.push(SweepRow {
                feature_role: role.clone(),
                lambda,
                n_prompts: rep.n_prompts,
                n_switched: rep.n_switched,
                cs_ratio: rep.ratio,
            });
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv(rows: &[SweepRow], w: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sweep_csv(r: impl std::io::Read) -> Result<Vec<SweepRow>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .map(|row| row.map_err(|e| Error::Format(e.to_string())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::microlm::{sample, LmConfig, NoHook};
    use crate::sae::init_sae;
    use crate::stream_rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hand_ablation() {
        assert_eq!(ablate(&[1.0, 1.0], &[0.0, 1.0], 2.0), vec![1.0, -1.0]);
        assert_eq!(ablate(&[0.3f32, -2.0], &[5.0, 1.0], 0.0), vec![0.3, -2.0]);
    }

    fn setup() -> (LmParams, SaeParams, Vec<Prompt>) {
        let cfg = LmConfig { vocab: 10, d_model: 8, n_layers: 2, n_heads: 2, d_ff: 16, ctx_len: 24 };
        let lm = LmParams::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let lm = LmParams::from_tensors(cfg, lm.tensors().iter().map(|t| t.map(|v| v * 40.0)).collect())
            .unwrap()
            .cast();
        let data = Tensor::new(&[4, 8], (0..32).map(|v| (v % 7) as f32 - 3.0).collect()).unwrap();
        let sae = init_sae(&data, 0, 4, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let prompts = (0..6).map(|id| Prompt { id, lang: "synA".into(), tokens: vec![id % 10, 3] }).collect();
        (lm, sae, prompts)
    }

    #[test]
    fn neutral_specs_match_plain_sampling() {
        let (lm, sae, prompts) = setup();
        let decode = DecodeConfig { max_new: 12, ..Default::default() };
        let plain: Vec<Vec<usize>> = prompts
            .iter()
            .map(|p| sample(&lm, &p.tokens, &decode, &mut stream_rng(5, p.id as u64), &mut NoHook).unwrap())
            .collect();
        let base = AblationSpec { layer_index: 0, feature: 1, lambda: 0.0, position_policy: PositionPolicy::AllGenerated };
        assert_eq!(generate_with_ablation(&lm, &sae, &base, &prompts, &decode, 5).unwrap(), plain);
        let never = AblationSpec {
            lambda: 50.0,
            position_policy: PositionPolicy::TriggerOnPreact { threshold: f64::INFINITY },
            ..base
        };
        assert_eq!(generate_with_ablation(&lm, &sae, &never, &prompts, &decode, 5).unwrap(), plain);
        let strong = AblationSpec { lambda: 1e4, ..base };
        assert_ne!(generate_with_ablation(&lm, &sae, &strong, &prompts, &decode, 5).unwrap(), plain);
        let wrong_layer = AblationSpec { layer_index: 1, ..base };
        assert!(generate_with_ablation(&lm, &sae, &wrong_layer, &prompts, &decode, 5).is_err());
    }

    #[test]
    fn all_generated_starts_at_last_prompt_position() {
        let (lm, sae, _) = setup();
        let spec = AblationSpec { layer_index: 0, feature: 0, lambda: 1.0, position_policy: PositionPolicy::AllGenerated };
        let mut hook = AblationHook::new(&sae, spec, 3).unwrap();
        let decode = DecodeConfig { max_new: 4, ..Default::default() };
        sample(&lm, &[1, 2, 3], &decode, &mut stream_rng(0, 0), &mut hook).unwrap();
        assert_eq!(hook.fired, vec![2, 3, 4, 5]);
    }

    #[test]
    fn sweep_shape_and_csv() {
        let (lm, sae, prompts) = setup();
        let reg = ScriptRegistry::with_builtin_scripts();
        let chars: Vec<char> = (0..10u32).map(|i| char::from_u32(0xE03A + i).unwrap()).collect();
        let vocab = Vocabulary::from_chars(chars);
        let decode = DecodeConfig { max_new: 8, ..Default::default() };
        let variants = vec![("target".to_string(), 0), ("control".to_string(), 1)];
        let rows = ablation_sweep(
            &lm,
            &sae,
            &variants,
            &[0.0, 1.0, 4.0],
            &prompts,
            &vocab,
            &reg,
            &"synB".into(),
            &decode,
            9,
            PositionPolicy::AllGenerated,
        )
        .unwrap();
        assert_eq!(rows.len(), 6);
        assert_eq!(rows[0].cs_ratio, rows[3].cs_ratio);
        assert_eq!(rows[0].n_switched, rows[3].n_switched);
        let mut buf = Vec::new();
        write_sweep_csv(&rows, &mut buf).unwrap();
        assert!(String::from_utf8(buf.clone()).unwrap().starts_with("feature_role,lambda,n_prompts,n_switched,cs_ratio\n"));
        assert_eq!(read_sweep_csv(buf.as_slice()).unwrap(), rows);
        assert!(ablation_sweep(&lm, &sae, &variants, &[0.0], &prompts, &vocab, &reg, &"synB".into(), &decode, 9, PositionPolicy::AllGenerated).is_err());
    }
}
