//! Synthetic multi-script languages and mixed corpora.
//!
//! Every synthetic language owns a Private Use Area block, so the same
//! script registry detects real and synthetic switches. Text is generated by
//! a first-order Markov chain over the language's alphabet plus two shared
//! separators (space and period) that carry no script.
//!
//! Foreign spans are injected behind a short host-language *cue*: a fixed
//! high-probability letter path of the host chain. Because the cue also
//! occurs naturally, a model trained on the mixture learns a moderate switch
//! probability after it rather than a vanishing one spread over every
//! position, which is what lets switches survive nucleus truncation.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scripts::{LanguageId, ScriptRegistry};

pub struct SyntheticBlock {
    pub language: &'static str,
    pub script: &'static str,
    pub lo: u32,
    pub hi: u32,
}

/// Private Use Area sub-blocks reserved for synthetic languages.
pub const SYNTHETIC_BLOCKS: &[SyntheticBlock] = &[
    SyntheticBlock { language: "synA", script: "SynA", lo: 0xE000, hi: 0xE03F },
    SyntheticBlock { language: "synB", script: "SynB", lo: 0xE040, hi: 0xE07F },
    SyntheticBlock { language: "synC", script: "SynC", lo: 0xE080, hi: 0xE0BF },
    SyntheticBlock { language: "synD", script: "SynD", lo: 0xE0C0, hi: 0xE0FF },
];

pub const SEPARATORS: [char; 2] = [' ', '.'];

const SPACE_MASS: f64 = 0.15;
const PERIOD_MASS: f64 = 0.02;
const LETTER_SHARPNESS: f64 = 2.0;
const ONSET_SHARPNESS: f64 = 1.5;

pub fn block_for(lang: &LanguageId) -> Option<&'static SyntheticBlock> {
    SYNTHETIC_BLOCKS.iter().find(|b| b.language == lang.as_str())
}

/// First-order Markov language over a contiguous PUA alphabet.
///
/// States are the alphabet letters followed by [`SEPARATORS`]; every row of
/// `transition` is a probability distribution over the same state list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticLanguage {
    pub lang: LanguageId,
    pub alphabet: Vec<char>,
    pub transition: Vec<Vec<f64>>,
    pub seed: u64,
}

impl SyntheticLanguage {
    pub fn n_states(&self) -> usize {
        self.alphabet.len() + SEPARATORS.len()
    }

    pub fn state_char(&self, s: usize) -> char {
        if s < self.alphabet.len() {
            self.alphabet[s]
        } else {
            SEPARATORS[s - self.alphabet.len()]
        }
    }

    pub fn state_of(&self, c: char) -> Option<usize> {
        if let Some(i) = self.alphabet.iter().position(|&a| a == c) {
            return Some(i);
        }
        SEPARATORS.iter().position(|&s| s == c).map(|i| self.alphabet.len() + i)
    }

    fn step(&self, state: usize, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.gen();
        let row = &self.transition[state];
        let mut acc = 0.0;
        for (j, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return j;
            }
        }
        row.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }

    /// Letter path of `len` states starting at the second letter, following
    /// the most likely letter successor at every step.
    pub fn cue(&self, len: usize) -> Vec<char> {
        let n = self.alphabet.len();
        let mut out = Vec::with_capacity(len);
        let mut s = 1 % n;
        for _ in 0..len {
            out.push(self.alphabet[s]);
            let row = &self.transition[s][..n];
            s = (0..n).max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a))).unwrap_or(0);
        }
        out
    }

    /// Draws `length` codepoints from the chain, starting at the first
    /// letter of the alphabet.
    pub fn sample_text(&self, length: usize, rng: &mut impl Rng) -> String {
        let mut out = String::with_capacity(length * 3);
        let mut s = 0usize;
        for i in 0..length {
            if i > 0 {
                s = self.step(s, rng);
            }
            out.push(self.state_char(s));
        }
        out
    }
}

fn normalise(row: &mut [f64]) {
    let s: f64 = row.iter().sum();
    for x in row.iter_mut() {
        *x /= s;
    }
}

/// Builds a deterministic language whose alphabet starts at `block_base`.
///
/// The alphabet may not touch any registered script other than the one
/// registered for `lang` itself.
pub fn make_language(
    registry: &ScriptRegistry,
    lang: LanguageId,
    block_base: u32,
    alphabet_size: usize,
    seed: u64,
) -> Result<SyntheticLanguage> {
    if alphabet_size < 2 {
        return Err(Error::InvalidConfig(format!("alphabet of {alphabet_size} letters is degenerate")));
    }
    let own = registry.script_of_language(&lang).ok();
    let mut alphabet = Vec::with_capacity(alphabet_size);
    for cp in block_base..block_base + alphabet_size as u32 {
        let c = char::from_u32(cp).ok_or_else(|| Error::InvalidConfig(format!("U+{cp:04X} is not a scalar value")))?;
        if let Some(s) = registry.script_of(cp) {
            if Some(s) != own {
                return Err(Error::InvalidConfig(format!(
                    "alphabet of `{lang}` collides with script {s} at U+{cp:04X}"
                )));
            }
        }
        alphabet.push(c);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = alphabet_size;
    let states = n + SEPARATORS.len();
    let mut transition = Vec::with_capacity(states);
    for _ in 0..n {
        let mut row = vec![0.0; states];
        for x in row.iter_mut().take(n) {
            let z: f64 = StandardNormal.sample(&mut rng);
            *x = (LETTER_SHARPNESS * z).exp();
        }
        normalise(&mut row[..n]);
        for x in row.iter_mut().take(n) {
            *x *= 1.0 - SPACE_MASS - PERIOD_MASS;
        }
        row[n] = SPACE_MASS;
        row[n + 1] = PERIOD_MASS;
        transition.push(row);
    }
    // space: word onset over letters
    let mut onset = vec![0.0; states];
    for x in onset.iter_mut().take(n) {
        let z: f64 = StandardNormal.sample(&mut rng);
        *x = (ONSET_SHARPNESS * z).exp();
    }
    normalise(&mut onset);
    transition.push(onset);
    // period: always followed by a space
    let mut stop = vec![0.0; states];
    stop[n] = 1.0;
    transition.push(stop);
    Ok(SyntheticLanguage { lang, alphabet, transition, seed })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Prompt,
    Heldout,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub lang: LanguageId,
    pub role: Role,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixtureConfig {
    pub languages: Vec<LanguageId>,
    pub alphabet_size: usize,
    pub language_seed: u64,
    pub docs_per_language: usize,
    pub doc_length: usize,
    pub injection_rate: f64,
    pub injection_lang: LanguageId,
    pub injection_span: usize,
    pub cue_length: usize,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        Self {
            languages: vec!["synA".into(), "synB".into()],
            alphabet_size: 30,
            language_seed: 7,
            docs_per_language: 2000,
            doc_length: 64,
            injection_rate: 0.05,
            injection_lang: "synB".into(),
            injection_span: 6,
            cue_length: 2,
        }
    }
}

impl MixtureConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(0.0..=1.0).contains(&self.injection_rate) {
            return bad(format!("injection_rate {} outside [0, 1]", self.injection_rate));
        }
        if !self.languages.contains(&self.injection_lang) {
            return bad(format!("injection_lang `{}` is not one of the corpus languages", self.injection_lang));
        }
        if self.languages.is_empty() || self.docs_per_language == 0 {
            return bad("corpus needs at least one language and one document per language".into());
        }
        if self.doc_length < self.cue_length + self.injection_span + 2 {
            return bad(format!(
                "doc_length {} cannot hold a cue of {} and a span of {} with host text on both sides",
                self.doc_length, self.cue_length, self.injection_span
            ));
        }
        if self.alphabet_size < 2 || self.alphabet_size > 64 {
            return bad(format!("alphabet_size {} must lie in 2..=64", self.alphabet_size));
        }
        for l in &self.languages {
            if block_for(l).is_none() {
                return bad(format!("`{l}` is not a synthetic language"));
            }
        }
        Ok(())
    }

    /// Builds the configured languages in order.
    pub fn build_languages(&self, registry: &ScriptRegistry) -> Result<Vec<SyntheticLanguage>> {
        self.validate()?;
        self.languages
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let block = block_for(l).expect("validated");
                make_language(registry, l.clone(), block.lo, self.alphabet_size, self.language_seed.wrapping_add(i as u64))
            })
            .collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub counts: BTreeMap<LanguageId, usize>,
    pub total: usize,
    pub injected: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub documents: Vec<Document>,
    pub manifest: CorpusManifest,
}

impl Corpus {
    pub fn is_injected(&self, index: usize) -> bool {
        self.manifest.injected.binary_search(&index).is_ok()
    }
}

pub fn sample_document(lang: &SyntheticLanguage, length: usize, role: Role, rng: &mut impl Rng) -> Document {
    Document { lang: lang.lang.clone(), role, text: lang.sample_text(length.max(1), rng) }
}

/// Generates `docs_per_language` training documents per language. Documents
/// outside the injection language are, with probability `injection_rate`,
/// given exactly one foreign span preceded by the host cue.
pub fn build_corpus(cfg: &MixtureConfig, languages: &[SyntheticLanguage], rng: &mut impl Rng) -> Result<Corpus> {
    cfg.validate()?;
    let foreign = languages
        .iter()
        .find(|l| l.lang == cfg.injection_lang)
        .ok_or_else(|| Error::UnknownLanguage(cfg.injection_lang.to_string()))?;
    let mut documents = Vec::with_capacity(cfg.languages.len() * cfg.docs_per_language);
    let mut manifest = CorpusManifest::default();
    for lang_id in &cfg.languages {
        let lang = languages
            .iter()
            .find(|l| &l.lang == lang_id)
            .ok_or_else(|| Error::UnknownLanguage(lang_id.to_string()))?;
        let cue = lang.cue(cfg.cue_length);
        for _ in 0..cfg.docs_per_language {
            let mut doc = sample_document(lang, cfg.doc_length, Role::Train, rng);
            let inject = lang.lang != cfg.injection_lang && rng.gen::<f64>() < cfg.injection_rate;
            if inject {
                let lo = cfg.cue_length + 1;
                let hi = cfg.doc_length - cfg.injection_span - 1;
                let at = rng.gen_range(lo..=hi);
                let span = foreign.sample_text(cfg.injection_span, rng);
                let mut chars: Vec<char> = doc.text.chars().collect();
                chars.splice(at - cfg.cue_length..at, cue.iter().copied());
                chars.splice(at..at + cfg.injection_span, span.chars());
                doc.text = chars.into_iter().collect();
                manifest.injected.push(documents.len());
            }
            documents.push(doc);
        }
        manifest.counts.insert(lang_id.clone(), cfg.docs_per_language);
    }
    manifest.total = documents.len();
    Ok(Corpus { documents, manifest })
}

/// Clean documents with the given role, `n` per language.
pub fn build_clean(
    languages: &[SyntheticLanguage],
    n: usize,
    length: usize,
    role: Role,
    rng: &mut impl Rng,
) -> Vec<Document> {
    let mut out = Vec::with_capacity(n * languages.len());
    for lang in languages {
        for _ in 0..n {
            out.push(sample_document(lang, length, role, rng));
        }
    }
    out
}

/// Character-level vocabulary: separators first, then each alphabet in order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl Vocabulary {
    pub fn new(languages: &[SyntheticLanguage]) -> Self {
        let mut chars: Vec<char> = SEPARATORS.to_vec();
        for l in languages {
            chars.extend(&l.alphabet);
        }
        Self::from_chars(chars)
    }

    pub(crate) fn from_chars(chars: Vec<char>) -> Self {
        let index = chars.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        Self { chars, index }
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn id(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn char_of(&self, id: usize) -> Option<char> {
        self.chars.get(id).copied()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| self.id(c).ok_or_else(|| Error::Format(format!("U+{:04X} is not in the vocabulary", c as u32))))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().filter_map(|&i| self.char_of(i)).collect()
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(["codepoint_hex", "token_id"]).map_err(io)?;
        for (i, &c) in self.chars.iter().enumerate() {
            w.write_record([format!("{:04X}", c as u32), i.to_string()]).map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(r: impl std::io::Read) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut chars = Vec::new();
        for (expect, row) in rdr.records().enumerate() {
            let row = row.map_err(|e| Error::Format(e.to_string()))?;
            let cp = u32::from_str_radix(row.get(0).unwrap_or(""), 16)
                .ok()
                .and_then(char::from_u32)
                .ok_or_else(|| Error::Format(format!("bad codepoint in vocabulary row {expect}")))?;
            let id: usize = row.get(1).and_then(|s| s.parse().ok()).ok_or_else(|| Error::Format("bad token id".into()))?;
            if id != expect {
                return Err(Error::Format(format!("token ids must be contiguous from 0; row {expect} has {id}")));
            }
            chars.push(cp);
        }
        Ok(Self::from_chars(chars))
    }
}

pub fn write_jsonl(docs: &[Document], mut w: impl Write) -> Result<()> {
    for d in docs {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl(r: impl BufRead) -> Result<Vec<Document>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
