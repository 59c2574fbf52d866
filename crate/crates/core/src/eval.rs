//! Code-switching ratio, positional pre-activation profile, per-language
//! perplexity and the one-tailed two-proportion Z-test.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::corpus::{Document, Vocabulary};
use crate::error::{Error, Result};
use crate::microlm::{forward, lm_loss, sample, Batch, DecodeConfig, LmParams, NoHook, ResidualHook};
use crate::sae::SaeParams;
use crate::scripts::{LanguageId, ScriptRegistry};
use crate::stream_rng;

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

/// A prompt plus the language its response is expected to stay in.
#[derive(Clone, Debug, PartialEq)]
pub struct Prompt {
    pub id: usize,
    pub lang: LanguageId,
    pub tokens: Vec<usize>,
}

/// The first `prompt_len` characters of each document, numbered in order.
pub fn make_prompts(docs: &[Document], vocab: &Vocabulary, prompt_len: usize) -> Result<Vec<Prompt>> {
    docs.iter()
        .enumerate()
        .map(|(id, d)| {
            let mut tokens = vocab.encode(&d.text)?;
            tokens.truncate(prompt_len);
            if tokens.is_empty() {
                return Err(Error::Empty(format!("prompt {id}")));
            }
            Ok(Prompt { id, lang: d.lang.clone(), tokens })
        })
        .collect()
}

/// One sampled response per prompt. Prompt `id` always draws from RNG
/// stream `id` under `seed`, so responses do not depend on prompt order.
pub fn generate<H: ResidualHook<f32>>(
    lm: &LmParams,
    prompts: &[Prompt],
    decode: &DecodeConfig,
    seed: u64,
    mut make_hook: impl FnMut(&Prompt) -> H,
) -> Result<Vec<Vec<usize>>> {
    prompts
        .iter()
        .map(|p| {
            let mut rng = stream_rng(seed, p.id as u64);
            sample(lm, &p.tokens, decode, &mut rng, &mut make_hook(p))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsReport {
    /// The language whose appearance counts as a switch.
    pub language: LanguageId,
    pub n_prompts: usize,
    pub n_switched: usize,
    pub ratio: f64,
    pub prompt_ids: Vec<usize>,
    pub expected: Vec<LanguageId>,
    pub flags: Vec<bool>,
}

impl CsReport {
    /// Flags every response that contains `lang`'s script.
    pub fn from_responses(
        registry: &ScriptRegistry,
        lang: &LanguageId,
        prompts: &[Prompt],
        responses: &[String],
    ) -> Result<Self> {
        if prompts.is_empty() {
            return Err(Error::Empty("prompt set".into()));
        }
        if prompts.len() != responses.len() {
            return Err(Error::Shape(format!("{} prompts but {} responses", prompts.len(), responses.len())));
        }
        let flags = responses.iter().map(|r| registry.contains_language(lang, r)).collect::<Result<Vec<_>>>()?;
        let n_switched = flags.iter().filter(|&&f| f).count();
        Ok(Self {
            language: lang.clone(),
            n_prompts: flags.len(),
            n_switched,
            ratio: n_switched as f64 / flags.len() as f64,
            prompt_ids: prompts.iter().map(|p| p.id).collect(),
            expected: prompts.iter().map(|p| p.lang.clone()).collect(),
            flags,
        })
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["prompt_id", "lang_expected", "switched"]).map_err(csv_err)?;
        for ((id, lang), flag) in self.prompt_ids.iter().zip(&self.expected).zip(&self.flags) {
            w.write_record([id.to_string(), lang.to_string(), flag.to_string()]).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Samples one response per prompt and reports how many contain `lang`.
pub fn cs_ratio(
    lm: &LmParams,
    vocab: &Vocabulary,
    registry: &ScriptRegistry,
    prompts: &[Prompt],
    lang: &LanguageId,
    decode: &DecodeConfig,
    seed: u64,
) -> Result<(CsReport, Vec<Vec<usize>>)> {
    if let Some(p) = prompts.iter().find(|p| &p.lang == lang) {
        return Err(Error::InvalidConfig(format!("prompt {} already expects {lang}", p.id)));
    }
    let responses = generate(lm, prompts, decode, seed, |_| NoHook)?;
    let texts: Vec<String> = responses.iter().map(|r| vocab.decode(r)).collect();
    Ok((CsReport::from_responses(registry, lang, prompts, &texts)?, responses))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionProfile {
    pub layer_index: usize,
    pub feature: usize,
    /// `-W..=W`; offset 0 is the first switched token.
    pub offsets: Vec<i64>,
    /// `None` where no response reaches the offset.
    pub mean_preact: Vec<Option<f64>>,
    pub counts: Vec<usize>,
}

impl PositionProfile {
    pub fn at(&self, offset: i64) -> Option<f64> {
        self.offsets.iter().position(|&o| o == offset).and_then(|i| self.mean_preact[i])
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["offset", "mean_preact", "count"]).map_err(csv_err)?;
        for ((o, m), c) in self.offsets.iter().zip(&self.mean_preact).zip(&self.counts) {
            let m = m.map_or(String::new(), |v| v.to_string());
            w.write_record([o.to_string(), m, c.to_string()]).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Averages `f_s` around the first `lang` token of every switching response.
#[allow(clippy::too_many_arguments)]
pub fn preact_profile(
    lm: &LmParams,
    sae: &SaeParams,
    feature: usize,
    prompts: &[Prompt],
    responses: &[Vec<usize>],
    vocab: &Vocabulary,
    registry: &ScriptRegistry,
    lang: &LanguageId,
    window: usize,
) -> Result<PositionProfile> {
    if window == 0 {
        return Err(Error::InvalidConfig("profile window must be at least 1".into()));
    }
    sae.feature_direction(feature)?;
    let w = window as i64;
    let offsets: Vec<i64> = (-w..=w).collect();
    let mut sums = vec![0.0f64; offsets.len()];
    let mut counts = vec![0usize; offsets.len()];
    let mut used = 0;
    for (p, r) in prompts.iter().zip(responses) {
        let Some(first) = registry.first_switch(lang, &vocab.decode(r))? else {
            continue;
        };
        used += 1;
        let seq: Vec<usize> = p.tokens.iter().chain(r).copied().collect();
        let seq = &seq[..seq.len().min(lm.config.ctx_len)];
        let zero = (p.tokens.len() + first) as i64;
        let out = forward(lm, seq, &[sae.layer_index], &[])?;
        let x = &out.captures[0].vectors;
        for (k, &o) in offsets.iter().enumerate() {
            let pos = zero + o;
            if pos >= 0 && (pos as usize) < seq.len() {
                sums[k] += sae.preact(x.row(pos as usize))?[feature] as f64;
                counts[k] += 1;
            }
        }
    }
    if used == 0 {
        return Err(Error::Empty(format!("no response switches to {lang}")));
    }
    let mean_preact = sums.iter().zip(&counts).map(|(&s, &c)| (c > 0).then(|| s / c as f64)).collect();
    Ok(PositionProfile { layer_index: sae.layer_index, feature, offsets, mean_preact, counts })
}

/// `exp` of the mean next-token cross-entropy over each language's
/// documents.
pub fn perplexity_per_language(
    lm: &LmParams,
    vocab: &Vocabulary,
    docs: &[Document],
) -> Result<BTreeMap<LanguageId, f64>> {
    const CHUNK: usize = 32;
    let mut groups: BTreeMap<(LanguageId, usize), Vec<Vec<usize>>> = BTreeMap::new();
    for d in docs {
        let mut t = vocab.encode(&d.text)?;
        t.truncate(lm.config.ctx_len + 1);
        if t.len() >= 2 {
            groups.entry((d.lang.clone(), t.len())).or_default().push(t);
        }
    }
    let mut totals: BTreeMap<LanguageId, (f64, usize)> = BTreeMap::new();
    for ((lang, len), seqs) in groups {
        for chunk in seqs.chunks(CHUNK) {
            let mut g = Graph::<f32>::new();
            let pv = lm.insert(&mut g, false);
            let (ce, _) = lm_loss(&mut g, lm, &pv, &Batch::new(chunk.to_vec()), &[])?;
            let n = chunk.len() * (len - 1);
            let e = totals.entry(lang.clone()).or_default();
            e.0 += g.value(ce).item() as f64 * n as f64;
            e.1 += n;
        }
    }
    if totals.is_empty() {
        return Err(Error::Empty("held-out documents".into()));
    }
    Ok(totals.into_iter().map(|(l, (s, n))| (l, (s / n as f64).exp())).collect())
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2)
}

/// Upper tail `1 − Φ(z)`, evaluated without cancellation.
pub fn normal_sf(z: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(z / std::f64::consts::SQRT_2)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZTestResult {
    pub x1: u64,
    pub n1: u64,
    pub x2: u64,
    pub n2: u64,
    /// `None` when the pooled proportion is 0 or 1.
    pub z: Option<f64>,
    pub p: f64,
    pub degenerate: bool,
}

/// One-tailed pooled two-proportion test of `x1/n1 > x2/n2`.
pub fn ztest(x1: u64, n1: u64, x2: u64, n2: u64) -> Result<ZTestResult> {
    if n1 == 0 || n2 == 0 || x1 > n1 || x2 > n2 {
        return Err(Error::InvalidConfig(format!("z-test needs 0 ≤ x ≤ n, n ≥ 1; got {x1}/{n1}, {x2}/{n2}")));
    }
    let (p1, p2) = (x1 as f64 / n1 as f64, x2 as f64 / n2 as f64);
    let pooled = (x1 + x2) as f64 / (n1 + n2) as f64;
    let var = pooled * (1.0 - pooled) * (1.0 / n1 as f64 + 1.0 / n2 as f64);
    if var == 0.0 {
        let p = if p1 <= p2 { 1.0 } else { 0.0 };
        return Ok(ZTestResult { x1, n1, x2, n2, z: None, p, degenerate: true });
    }
    let z = (p1 - p2) / var.sqrt();
    Ok(ZTestResult { x1, n1, x2, n2, z: Some(z), p: normal_sf(z), degenerate: false })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::microlm::LmConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn prompts(n: usize) -> Vec<Prompt> {
        (0..n).map(|id| Prompt { id, lang: "en".into(), tokens: vec![0] }).collect()
    }

    #[test]
    fn canned_responses() {
        let r = ScriptRegistry::with_builtin_scripts();
        let texts: Vec<String> = ["ok", "a中b", "no", "x", "汉字", "fine", "q", "end 了", "s", "t"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let rep = CsReport::from_responses(&r, &"zh".into(), &prompts(10), &texts).unwrap();
        assert_eq!((rep.n_switched, rep.n_prompts, rep.ratio), (3, 10, 0.3));
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        let csv = String::from_utf8(buf).unwrap();
        assert!(csv.starts_with("prompt_id,lang_expected,switched\n0,en,false\n1,en,true\n"));
        let clean = vec!["abc".to_string(); 10];
        assert_eq!(CsReport::from_responses(&r, &"zh".into(), &prompts(10), &clean).unwrap().ratio, 0.0);
        assert!(CsReport::from_responses(&r, &"zh".into(), &[], &[]).is_err());
    }

    #[test]
    fn ztest_spot_values() {
        let r = ztest(50, 1000, 20, 1000).unwrap();
        assert!((r.z.unwrap() - 3.650).abs() < 5e-3);
        assert!((r.p - 1.31e-4).abs() < 2e-5);
        assert_eq!(ztest(30, 100, 60, 200).unwrap().p, 0.5);
        assert_eq!(ztest(30, 100, 60, 200).unwrap().z, Some(0.0));
        let s = ztest(20, 1000, 50, 1000).unwrap();
        assert!((s.z.unwrap() + r.z.unwrap()).abs() < 1e-12);
        assert!((s.p - (1.0 - r.p)).abs() < 1e-12);
    }

    #[test]
    fn ztest_degenerate_and_invalid() {
        let r = ztest(0, 10, 0, 20).unwrap();
        assert!(r.degenerate && r.z.is_none() && r.p == 1.0);
        let r = ztest(10, 10, 20, 20).unwrap();
        assert!(r.degenerate && r.p == 1.0);
        assert!(ztest(11, 10, 0, 5).is_err());
        assert!(ztest(0, 0, 0, 5).is_err());
        let json = serde_json::to_value(ztest(0, 10, 0, 20).unwrap()).unwrap();
        assert_eq!(json, serde_json::json!({"x1":0,"n1":10,"x2":0,"n2":20,"z":null,"p":1.0,"degenerate":true}));
    }

    #[test]
    fn normal_cdf_symmetry() {
        assert_eq!(normal_cdf(0.0), 0.5);
        for i in 0..200 {
            let x = i as f64 * 0.05;
            assert!((normal_cdf(-x) - (1.0 - normal_cdf(x))).abs() < 1e-12);
        }
    }

    #[test]
    fn z_grows_with_sample_size() {
        let mut last = 0.0;
        for k in 1..6 {
            let z = ztest(30 * k, 500 * k, 20 * k, 500 * k).unwrap().z.unwrap();
            assert!(z > last);
            last = z;
        }
    }

    fn zero_head_lm() -> LmParams {
        let cfg = LmConfig { vocab: 8, d_model: 8, n_layers: 2, n_heads: 2, d_ff: 8, ctx_len: 16 };
        let mut p = LmParams::<f32>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let last = p.tensors_mut().pop().unwrap();
        *last = Tensor::zeros(last.shape());
        p
    }

    #[test]
    fn uniform_model_perplexity_is_vocab_size() {
        let lm = zero_head_lm();
        let chars: Vec<char> = (0..8u32).map(|i| char::from_u32(0xE000 + i).unwrap()).collect();
        let vocab = Vocabulary::from_chars(chars.clone());
        let docs: Vec<Document> = (0..3)
            .map(|i| Document {
                lang: if i == 0 { "synA".into() } else { "synB".into() },
                role: crate::corpus::Role::Heldout,
                text: chars.iter().cycle().skip(i).take(10 + i).collect(),
            })
            .collect();
        let ppl = perplexity_per_language(&lm, &vocab, &docs).unwrap();
        assert_eq!(ppl.len(), 2);
        for v in ppl.values() {
            assert!((v - 8.0).abs() < 1e-4, "{v}");
        }
    }

    #[test]
    fn single_response_profile_is_raw_preact() {
        let lm = zero_head_lm();
        let reg = ScriptRegistry::with_builtin_scripts();
        let chars: Vec<char> = "ab\u{E040}\u{E041}cdef".chars().collect();
        let vocab = Vocabulary::from_chars(chars);
        let sae = crate::sae::init_sae(
            &Tensor::new(&[2, 8], (0..16).map(|v| v as f32 * 0.1).collect()).unwrap(),
            1,
            2,
            &mut ChaCha8Rng::seed_from_u64(3),
        )
        .unwrap();
        let p = [Prompt { id: 0, lang: "synA".into(), tokens: vec![0, 1, 4] }];
        let r = [vec![5, 2, 3, 6], vec![5, 6]];
        let prof =
            preact_profile(&lm, &sae, 3, &p[..1], &r[..1], &vocab, &reg, &"synB".into(), 1).unwrap();
        let seq = [0, 1, 4, 5, 2, 3, 6];
        let x = forward(&lm, &seq, &[1], &[]).unwrap().captures[0].vectors.clone();
        for (k, pos) in [3usize, 4, 5].into_iter().enumerate() {
            assert_eq!(prof.mean_preact[k], Some(sae.preact(x.row(pos)).unwrap()[3] as f64));
            assert_eq!(prof.counts[k], 1);
        }
        let none = preact_profile(&lm, &sae, 3, &p[..1], &r[1..], &vocab, &reg, &"synB".into(), 1);
        assert!(none.is_err());
    }
}
