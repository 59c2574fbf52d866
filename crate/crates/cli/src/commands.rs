use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use cslab_core::corpus::{read_jsonl, write_jsonl, Corpus, CorpusManifest, Document, Vocabulary};
use cslab_core::eval::{cs_ratio, make_prompts, perplexity_per_language, preact_profile, ztest, Prompt};
use cslab_core::langfeat::{collect_residuals, LanguageFeatureSet};
use cslab_core::microlm::{sidecar, LmParams};
use cslab_core::pipeline::{self, build_data, build_languages, stage, stage_seed};
use cslab_core::sae::SaeParams;
use cslab_core::sasft::{write_log_csv, AuxLayer, SasftMode};
use cslab_core::scripts::{LanguageId, ScriptRegistry};
use cslab_core::steer::{ablation_sweep, write_sweep_csv, PositionPolicy};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult, Context};
use crate::run::{Run, Stage};

fn open(path: &Path) -> CliResult<BufReader<File>> {
    Ok(BufReader::new(File::open(path).at(path)?))
}

pub fn mode_name(mode: SasftMode) -> String {
    serde_json::to_value(mode).ok().and_then(|v| v.as_str().map(str::to_string)).expect("unit variant")
}

pub fn lm_path(run: &Run, model: &str) -> PathBuf {
    run.checkpoint(&format!("lm_{model}.ckpt"))
}

fn sae_path(run: &Run, layer: usize) -> PathBuf {
    run.checkpoint(&format!("sae_L{layer}.ckpt"))
}

fn features_path(run: &Run, lang: &LanguageId, layer: usize) -> PathBuf {
    run.checkpoint(&format!("features_{lang}_L{layer}.json"))
}

fn control_path(run: &Run, layer: usize) -> PathBuf {
    run.checkpoint(&format!("control_L{layer}.json"))
}

fn read_vocab(st: &mut Stage, run: &Run) -> CliResult<Vocabulary> {
    let p = st.input(run.corpus("vocab.csv"))?;
    Vocabulary::read_csv(open(&p)?).at(&p)
}

fn read_docs(st: &mut Stage, path: PathBuf) -> CliResult<Vec<Document>> {
    let p = st.input(path)?;
    read_jsonl(open(&p)?).at(&p)
}

fn read_corpus(st: &mut Stage, run: &Run) -> CliResult<Corpus> {
    let documents = read_docs(st, run.corpus("corpus.jsonl"))?;
    let p = st.input(run.corpus("corpus_manifest.json"))?;
    let manifest: CorpusManifest = serde_json::from_reader(open(&p)?).at(&p)?;
    Ok(Corpus { documents, manifest })
}

fn read_prompts(st: &mut Stage, run: &Run, vocab: &Vocabulary) -> CliResult<Vec<Prompt>> {
    let docs = read_docs(st, run.corpus("prompts.jsonl"))?;
    Ok(make_prompts(&docs, vocab, run.exp().eval.prompt_len)?)
}

fn read_lm(st: &mut Stage, path: PathBuf) -> CliResult<LmParams> {
    st.input(sidecar(&path))?;
    let p = st.input(path)?;
    LmParams::load(&p).at(&p)
}

fn write_lm(st: &mut Stage, lm: &LmParams, path: PathBuf) -> CliResult<()> {
    st.output(sidecar(&path))?;
    let p = st.output(path)?;
    lm.save(&p).at(&p)
}

fn read_sae(st: &mut Stage, path: PathBuf) -> CliResult<SaeParams> {
    st.input(sidecar(&path))?;
    let p = st.input(path)?;
    SaeParams::load(&p).at(&p)
}

fn read_features(st: &mut Stage, path: PathBuf) -> CliResult<LanguageFeatureSet> {
    let p = st.input(path)?;
    LanguageFeatureSet::read_json(open(&p)?).at(&p)
}

fn registry(run: &Run) -> CliResult<ScriptRegistry> {
    Ok(build_languages(run.exp())?.0)
}

#[derive(Debug, Serialize, Deserialize)]
struct ControlFeature {
    layer_index: usize,
    feature: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Response {
    prompt_id: usize,
    text: String,
}

pub fn gen_corpus(run: &Run) -> CliResult<()> {
    let mut st = run.stage("gen-corpus")?;
    let data = build_data(run.exp())?;
    data.registry.write_table(st.create(run.corpus("scripts.csv"))?)?;
    data.vocab.write_csv(st.create(run.corpus("vocab.csv"))?)?;
    write_jsonl(&data.corpus.documents, st.create(run.corpus("corpus.jsonl"))?)?;
    serde_json::to_writer_pretty(st.create(run.corpus("corpus_manifest.json"))?, &data.corpus.manifest)?;
    write_jsonl(&data.prompt_docs, st.create(run.corpus("prompts.jsonl"))?)?;
    write_jsonl(&data.heldout, st.create(run.corpus("heldout.jsonl"))?)?;
    run.log(&format!(
        "corpus: {} documents, {} injected",
        data.corpus.manifest.total,
        data.corpus.manifest.injected.len()
    ));
    st.finish("gen-corpus")?;
    Ok(())
}

pub fn train_lm(run: &Run) -> CliResult<()> {
    let mut st = run.stage("train-lm")?;
    let vocab = read_vocab(&mut st, run)?;
    let docs = read_docs(&mut st, run.corpus("corpus.jsonl"))?;
    let (lm, log) = pipeline::pretrain(run.exp(), &vocab, &docs)?;
    write_lm(&mut st, &lm, lm_path(run, "base"))?;
    write_log_csv(&log, st.create(run.report("train_base.csv"))?)?;
    if let Some(last) = log.last() {
        run.log(&format!("pretrain: final ce {:.4}", last.ce));
    }
    st.finish("train-lm")?;
    Ok(())
}

pub fn train_sae(run: &Run, layer: Option<usize>) -> CliResult<()> {
    let layers = match layer {
        Some(l) => vec![l],
        None => run.exp().features.layers.clone(),
    };
    let name = match layer {
        Some(l) => format!("train-sae-L{l}"),
        None => "train-sae".to_string(),
    };
    let mut st = run.stage("train-sae")?;
    let vocab = read_vocab(&mut st, run)?;
    let corpus = read_corpus(&mut st, run)?;
    let lm = read_lm(&mut st, lm_path(run, "base"))?;
    let exp = run.exp();
    let datasets = collect_residuals(&lm, &vocab, &corpus, &exp.mixture.languages, &layers, exp.features.residual_budget)?;
    for ds in &datasets {
        let (sae, steps) = pipeline::fit_sae(exp, ds)?;
        let path = sae_path(run, ds.layer_index);
        st.output(sidecar(&path))?;
        sae.save(&st.output(path.clone())?).at(&path)?;
        let mut w = csv::Writer::from_writer(st.create(run.report(&format!("sae_L{}.csv", ds.layer_index)))?);
        w.write_record(["step", "mse", "l1"])?;
        for (i, s) in steps.iter().enumerate() {
            w.write_record([i.to_string(), s.mse.to_string(), s.l1.to_string()])?;
        }
        w.flush()?;
        if let Some(last) = steps.last() {
            run.log(&format!("sae layer {}: mse {:.4}, l1 {:.4}", ds.layer_index, last.mse, last.l1));
        }
    }
    st.finish(&name)?;
    Ok(())
}

pub fn find_features(run: &Run) -> CliResult<()> {
    let exp = run.exp();
    let mut st = run.stage("find-features")?;
    let vocab = read_vocab(&mut st, run)?;
    let corpus = read_corpus(&mut st, run)?;
    let lm = read_lm(&mut st, lm_path(run, "base"))?;
    let saes = exp.features.layers.iter().map(|&l| read_sae(&mut st, sae_path(run, l))).collect::<CliResult<Vec<_>>>()?;
    let datasets = pipeline::residuals(exp, &vocab, &corpus, &lm)?;
    for (sae, ds) in saes.iter().zip(&datasets) {
        for lang in [exp.forbidden(), &exp.host_language] {
            let set = LanguageFeatureSet::find(sae, ds, lang, exp.features.k)?;
            run.log(&format!("{lang} layer {}: features {:?}, nu {:?}", set.layer_index, set.features, set.nu));
            set.write_json(st.create(features_path(run, lang, sae.layer_index))?)?;
        }
        let control = ControlFeature { layer_index: sae.layer_index, feature: pipeline::control_feature(exp, sae, ds)? };
        serde_json::to_writer_pretty(st.create(control_path(run, sae.layer_index))?, &control)?;
    }
    st.finish("find-features")?;
    Ok(())
}

pub fn sasft(run: &Run, mode: Option<SasftMode>) -> CliResult<()> {
    let exp = run.exp();
    let mode = mode.unwrap_or(exp.sasft.mode);
    let name = mode_name(mode);
    let mut st = run.stage("sasft")?;
    let vocab = read_vocab(&mut st, run)?;
    let docs = read_docs(&mut st, run.corpus("corpus.jsonl"))?;
    let base = read_lm(&mut st, lm_path(run, "base"))?;
    let target = pipeline::variant(exp, mode).target_language;
    let aux = if mode == SasftMode::SftOnly {
        Vec::new()
    } else {
        exp.sasft
            .layers
            .iter()
            .map(|&l| {
                Ok(AuxLayer {
                    sae: read_sae(&mut st, sae_path(run, l))?,
                    set: read_features(&mut st, features_path(run, &target, l))?,
                })
            })
            .collect::<CliResult<Vec<_>>>()?
    };
    let (lm, log) = pipeline::fine_tune(exp, &vocab, &docs, &base, &aux, mode)?;
    write_lm(&mut st, &lm, lm_path(run, &name))?;
    write_log_csv(&log, st.create(run.report(&format!("train_{name}.csv")))?)?;
    if let Some(last) = log.last() {
        run.log(&format!("{name}: final ce {:.4}, aux {:.4}", last.ce, last.aux));
    }
    st.finish(&format!("sasft-{name}"))?;
    Ok(())
}

pub fn eval_cs(run: &Run, model: &str) -> CliResult<()> {
    let exp = run.exp();
    let mut st = run.stage("eval-cs")?;
    let vocab = read_vocab(&mut st, run)?;
    let prompts = read_prompts(&mut st, run, &vocab)?;
    let lm = read_lm(&mut st, lm_path(run, model))?;
    let seed = stage_seed(exp.seed, stage::DECODE);
    let (report, responses) = cs_ratio(&lm, &vocab, &registry(run)?, &prompts, exp.forbidden(), &exp.eval.decode, seed)?;
    report.write_csv(st.create(run.report(&format!("cs_{model}.csv")))?)?;
    let mut w = st.create(run.report(&format!("responses_{model}.jsonl")))?;
    for (p, r) in prompts.iter().zip(&responses) {
        serde_json::to_writer(&mut w, &Response { prompt_id: p.id, text: vocab.decode(r) })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    run.log(&format!("{model}: cs ratio {}/{} = {:.4}", report.n_switched, report.n_prompts, report.ratio));
    st.finish(&format!("eval-cs-{model}"))?;
    Ok(())
}

pub fn eval_ppl(run: &Run, model: &str) -> CliResult<()> {
    let mut st = run.stage("eval-ppl")?;
    let vocab = read_vocab(&mut st, run)?;
    let heldout = read_docs(&mut st, run.corpus("heldout.jsonl"))?;
    let lm = read_lm(&mut st, lm_path(run, model))?;
    let ppl = perplexity_per_language(&lm, &vocab, &heldout)?;
    let mut w = csv::Writer::from_writer(st.create(run.report(&format!("ppl_{model}.csv")))?);
    w.write_record(["language", "perplexity"])?;
    for (lang, v) in &ppl {
        w.write_record([lang.to_string(), v.to_string()])?;
        run.log(&format!("{model}: {lang} perplexity {v:.4}"));
    }
    w.flush()?;
    st.finish(&format!("eval-ppl-{model}"))?;
    Ok(())
}

fn read_responses(st: &mut Stage, path: PathBuf, prompts: &[Prompt], vocab: &Vocabulary) -> CliResult<Vec<Vec<usize>>> {
    let p = st.input(path)?;
    let text = fs::read_to_string(&p).at(&p)?;
    let rows: Vec<Response> =
        text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect::<Result<_, _>>().at(&p)?;
    if rows.len() != prompts.len() || rows.iter().zip(prompts).any(|(r, q)| r.prompt_id != q.id) {
        return Err(CliError::invalid(format!("{} does not match the prompt set", p.display())));
    }
    rows.iter().map(|r| Ok(vocab.encode(&r.text)?)).collect()
}

pub fn profile_preact(run: &Run, model: &str, layer: Option<usize>) -> CliResult<()> {
    let exp = run.exp();
    let layer = layer.unwrap_or(exp.eval.analysis_layer);
    let mut st = run.stage("profile-preact")?;
    let vocab = read_vocab(&mut st, run)?;
    let prompts = read_prompts(&mut st, run, &vocab)?;
    let responses = read_responses(&mut st, run.report(&format!("responses_{model}.jsonl")), &prompts, &vocab)?;
    let lm = read_lm(&mut st, lm_path(run, model))?;
    let sae = read_sae(&mut st, sae_path(run, layer))?;
    let set = read_features(&mut st, features_path(run, exp.forbidden(), layer))?;
    let profile = preact_profile(
        &lm,
        &sae,
        set.features[0],
        &prompts,
        &responses,
        &vocab,
        &registry(run)?,
        exp.forbidden(),
        exp.eval.profile_window,
    )?;
    profile.write_csv(st.create(run.report(&format!("profile_{model}.csv")))?)?;
    run.log(&format!(
        "profile of feature {} at layer {layer}: offset -4 {:?}, offset -1 {:?}",
        profile.feature,
        profile.at(-4),
        profile.at(-1)
    ));
    st.finish(&format!("profile-preact-{model}"))?;
    Ok(())
}

pub fn ablate_sweep(run: &Run, model: &str, trigger: Option<f64>) -> CliResult<()> {
    let exp = run.exp();
    let layer = exp.eval.analysis_layer;
    let mut st = run.stage("ablate-sweep")?;
    let vocab = read_vocab(&mut st, run)?;
    let prompts = read_prompts(&mut st, run, &vocab)?;
    let lm = read_lm(&mut st, lm_path(run, model))?;
    let sae = read_sae(&mut st, sae_path(run, layer))?;
    let set = read_features(&mut st, features_path(run, exp.forbidden(), layer))?;
    let cp = st.input(control_path(run, layer))?;
    let control: ControlFeature = serde_json::from_reader(open(&cp)?).at(&cp)?;
    let variants = vec![("target".to_string(), set.features[0]), ("control".to_string(), control.feature)];
    let policy = match trigger {
        Some(threshold) => PositionPolicy::TriggerOnPreact { threshold },
        None => PositionPolicy::AllGenerated,
    };
    let rows = ablation_sweep(
        &lm,
        &sae,
        &variants,
        &exp.eval.sweep_lambdas,
        &prompts,
        &vocab,
        &registry(run)?,
        exp.forbidden(),
        &exp.eval.decode,
        stage_seed(exp.seed, stage::DECODE),
        policy,
    )?;
    for r in &rows {
        run.log(&format!("{} λ={}: {:.4}", r.feature_role, r.lambda, r.cs_ratio));
    }
    write_sweep_csv(&rows, st.create(run.report(&format!("sweep_{model}.csv")))?)?;
    st.finish(&format!("ablate-sweep-{model}"))?;
    Ok(())
}

/// `(n_switched, n_prompts)` from a CS report CSV.
pub fn cs_counts(path: &Path) -> CliResult<(u64, u64)> {
    let mut r = csv::Reader::from_reader(open(path)?);
    let (mut x, mut n) = (0, 0);
    for row in r.records() {
        let row = row.at(path)?;
        n += 1;
        if row.get(2).map(str::trim) == Some("true") {
            x += 1;
        }
    }
    Ok((x, n))
}

pub enum ZInput {
    Counts([u64; 4]),
    Compare(String, String),
}

pub fn ztest_cmd(run: &Run, input: ZInput) -> CliResult<()> {
    let mut st = run.stage("ztest")?;
    let (x1, n1, x2, n2, name) = match input {
        ZInput::Counts([x1, n1, x2, n2]) => (x1, n1, x2, n2, "ztest".to_string()),
        ZInput::Compare(a, b) => {
            let (x1, n1) = cs_counts(&st.input(run.report(&format!("cs_{a}.csv")))?)?;
            let (x2, n2) = cs_counts(&st.input(run.report(&format!("cs_{b}.csv")))?)?;
            (x1, n1, x2, n2, format!("ztest_{a}_vs_{b}"))
        }
    };
    let result = ztest(x1, n1, x2, n2)?;
    let json = serde_json::to_string_pretty(&result)?;
    let mut w = st.create(run.report(&format!("{name}.json")))?;
    writeln!(w, "{json}")?;
    w.flush()?;
    println!("{json}");
    st.finish(&name)?;
    Ok(())
}

/// Reads a two-column `language,perplexity` CSV.
pub fn read_ppl(path: &Path) -> CliResult<BTreeMap<String, f64>> {
    let mut r = csv::Reader::from_reader(open(path)?);
    r.deserialize::<(String, f64)>().map(|row| row.at(path)).collect()
}
