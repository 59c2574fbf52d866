//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. The end-to-end criteria train three seeds on the default toy
//! configuration and take a while on one core; pass `--quick` to skip them.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use cslab_core::autodiff::{grad_check, Graph, Tensor, Var};
use cslab_core::eval::{generate, ztest, CsReport, Prompt};
use cslab_core::langfeat::{estimate_thresholds, monolinguality, LanguageFeatureSet, ResidualDataset};
use cslab_core::microlm::{sample, DecodeConfig, Decoder, LmConfig, LmParams, NoHook, ParamVars};
use cslab_core::pipeline::{build_data, run_seed, stage, stage_seed, ExperimentConfig, SeedRun};
use cslab_core::sae::{init_sae, train_sae, SaeParams, SaeTrainConfig};
use cslab_core::sasft::{batch_loss, AuxLayer, Example, SasftConfig, SasftMode};
use cslab_core::scripts::{LanguageId, ScriptId, ScriptRegistry};
use cslab_core::steer::{ablate, AblationHook, AblationSpec, PositionPolicy};
use cslab_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

// ---------------------------------------------------------------- 1

fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.value(y).shape().to_vec();
    let w = g.constant(rand_t(&mut rng, &shape, 1.5));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn primitive_checks() -> Vec<(&'static str, f64)> {
    type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (m, k, n) = (4, 16, 8);
    let idx: Vec<usize> = (0..6).map(|i| (i * 3) % m).collect();
    let targets: Vec<Option<usize>> = (0..m).map(|r| if r == 1 { None } else { Some((r * 5) % n) }).collect();
    let cases: Vec<(&'static str, Vec<Tensor<f64>>, Build)> = vec![
        ("matmul", vec![rand_t(&mut rng, &[m, k], 1.5), rand_t(&mut rng, &[k, n], 1.5)], Box::new(|g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y, 2)
        })),
        ("transpose", vec![rand_t(&mut rng, &[m, n], 1.5)], Box::new(|g, v| {
            let y = g.transpose(v[0])?;
            project(g, y, 3)
        })),
        ("add", vec![rand_t(&mut rng, &[m, n], 1.5), rand_t(&mut rng, &[n], 1.5)], Box::new(|g, v| {
            let y = g.add(v[0], v[1])?;
            project(g, y, 4)
        })),
        ("sub", vec![rand_t(&mut rng, &[m, n], 1.5), rand_t(&mut rng, &[m, n], 1.5)], Box::new(|g, v| {
            let y = g.sub(v[0], v[1])?;
            project(g, y, 5)
        })),
        ("mul", vec![rand_t(&mut rng, &[m, n], 1.5), rand_t(&mut rng, &[m, n], 1.5)], Box::new(|g, v| {
            let y = g.mul(v[0], v[1])?;
            project(g, y, 6)
        })),
        ("scale", vec![rand_t(&mut rng, &[m, n], 1.5)], Box::new(|g, v| {
            let y = g.scale(v[0], 0.3);
            project(g, y, 7)
        })),
        ("relu", vec![rand_t(&mut rng, &[m, n], 1.5)], Box::new(|g, v| {
            let y = g.relu(v[0]);
            project(g, y, 8)
        })),
        ("softmax", vec![rand_t(&mut rng, &[m, n], 1.5)], Box::new(|g, v| {
            let y = g.softmax(v[0])?;
            project(g, y, 9)
        })),
        (
            "layer_norm",
            vec![rand_t(&mut rng, &[m, k], 1.5), rand_t(&mut rng, &[k], 1.5), rand_t(&mut rng, &[k], 1.5)],
            Box::new(|g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
                project(g, y, 10)
            }),
        ),
        ("gather_rows", vec![rand_t(&mut rng, &[m, n], 1.5)], Box::new(move |g, v| {
            let y = g.gather_rows(v[0], &idx)?;
            project(g, y, 11)
        })),
        ("sum", vec![rand_t(&mut rng, &[m, n], 1.5)], Box::new(|g, v| {
            let y = g.mul(v[0], v[0])?;
            Ok(g.sum(y))
        })),
        ("mean", vec![rand_t(&mut rng, &[m, n], 1.5)], Box::new(|g, v| {
            let y = g.mul(v[0], v[0])?;
            Ok(g.mean(y))
        })),
        ("cross_entropy", vec![rand_t(&mut rng, &[m, n], 1.5)], Box::new(move |g, v| {
            g.cross_entropy_with_logits(v[0], &targets)
        })),
        ("causal_attention", vec![rand_t(&mut rng, &[4 * 16, 3 * 16], 1.5)], Box::new(|g, v| {
            let y = g.causal_attention(v[0], 4, 16, 2)?;
            project(g, y, 12)
        })),
    ];
    cases
        .into_iter()
        .map(|(name, params, f)| (name, grad_check(f, &params, 1e-5).unwrap().max_rel_error))
        .collect()
}

fn micro_lm() -> LmParams<f64> {
    let cfg = LmConfig { vocab: 40, d_model: 16, n_layers: 2, n_heads: 2, d_ff: 32, ctx_len: 16 };
    // Init-scale embeddings put the layer norms in a high-curvature regime and
    // push attention gradients to the rounding floor, so they are enlarged and
    // the step is 3e-4 rather than 1e-5.
    let p = LmParams::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(21)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let tensors = p
        .tensors()
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let mut t = if i < 2 { t.map(|v| v * 10.0) } else { t.clone() };
            t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.05..0.05));
            t
        })
        .collect();
    LmParams::from_tensors(cfg, tensors).unwrap()
}

fn total_loss_check() -> f64 {
    let lm = micro_lm();
    let cfg = lm.config.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let sae = SaeParams::new(
        1,
        rand_t(&mut rng, &[8, 16], 0.5),
        rand_t(&mut rng, &[8], 0.5),
        rand_t(&mut rng, &[16, 8], 0.5),
        rand_t(&mut rng, &[16], 0.5),
    )
    .unwrap();
    let (a, b) = (LanguageId::new("synA"), LanguageId::new("synB"));
    let set = LanguageFeatureSet {
        language: b.clone(),
        layer_index: 1,
        features: vec![2, 5],
        nu: vec![0.5, 0.4],
        alpha: [2usize, 5].iter().map(|&s| (s, BTreeMap::from([(a.clone(), -0.2)]))).collect(),
        beta: BTreeMap::from([(2, 0.3), (5, 0.3)]),
    };
    let aux = vec![AuxLayer { sae, set }];
    let examples: Vec<Example> = (0..4)
        .map(|i| Example {
            lang: if i < 3 { a.clone() } else { b.clone() },
            tokens: (0..16).map(|_| rng.gen_range(0..40)).collect(),
            response_start: 4,
        })
        .collect();
    let refs: Vec<&Example> = examples.iter().collect();
    let sc = SasftConfig {
        target_language: b,
        layers: vec![1],
        features_per_layer: 2,
        aux_weight: 0.5,
        mode: SasftMode::Reduce,
        ..SasftConfig::default()
    };
    let r = grad_check(
        |g, vars| {
            let pv = ParamVars::from_vars(&cfg, vars.to_vec())?;
            let loss = batch_loss(g, &lm, &pv, &refs, &aux, &sc)?;
            assert!(g.value(loss.aux).item() > 0.0, "auxiliary term inactive");
            Ok(loss.total)
        },
        lm.tensors(),
        3e-4,
    )
    .unwrap();
    r.max_rel_error
}

fn criterion_1() -> Outcome {
    let mut worst = ("", 0.0f64);
    for (name, e) in primitive_checks() {
        if e > worst.1 {
            worst = (name, e);
        }
    }
    let total = total_loss_check();
    let pass = worst.1 <= 1e-4 && total <= 1e-4;
    outcome(pass, format!("worst primitive {} {:.2e}, total_loss {:.2e} (tol 1e-4)", worst.0, worst.1, total))
}

// ---------------------------------------------------------------- 2

/// `Φ(z)` by composite Simpson integration of the standard normal density.
fn phi_reference(z: f64) -> f64 {
    let n = 20_000;
    let h = z.abs() / n as f64;
    let dens = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = dens(0.0) + dens(z.abs());
    for i in 1..n {
        s += dens(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    let half = s * h / 3.0;
    if z >= 0.0 { 0.5 + half } else { 0.5 - half }
}

fn naive_ztest(x1: u64, n1: u64, x2: u64, n2: u64) -> Option<(f64, f64)> {
    let p1 = x1 as f64 / n1 as f64;
    let p2 = x2 as f64 / n2 as f64;
    let p = (x1 + x2) as f64 / (n1 + n2) as f64;
    let se = (p * (1.0 - p) * (1.0 / n1 as f64 + 1.0 / n2 as f64)).sqrt();
    if se == 0.0 {
        return None;
    }
    let z = (p1 - p2) / se;
    Some((z, 1.0 - phi_reference(z)))
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut cs_err = 0.0f64;
    let mut nu_err = 0.0f64;
    let mut mean_err = 0.0f64;
    let mut z_err = 0.0f64;
    let instances = 200;

    let mut registry = ScriptRegistry::new();
    registry.register_range(ScriptId::new("X"), 0x400, 0x4ff).unwrap();
    registry.register_range(ScriptId::new("Y"), 0x3040, 0x30ff).unwrap();
    let lx = LanguageId::new("lx");
    registry.register_language(lx.clone(), ScriptId::new("X"));
    registry.register_language(LanguageId::new("ly"), ScriptId::new("Y"));
    for _ in 0..instances {
        let n = rng.gen_range(1..40);
        let prompts: Vec<Prompt> = (0..n).map(|id| Prompt { id, lang: "ly".into(), tokens: vec![0] }).collect();
        let texts: Vec<String> = (0..n)
            .map(|_| {
                (0..rng.gen_range(0..12))
                    .map(|_| {
                        let cp = match rng.gen_range(0..4) {
                            0 => rng.gen_range(0x3f0..0x510),
                            1 => rng.gen_range(0x3040..0x3100),
                            _ => rng.gen_range(0x61..0x7b),
                        };
                        char::from_u32(cp).unwrap()
                    })
                    .collect()
            })
            .collect();
        let rep = CsReport::from_responses(&registry, &lx, &prompts, &texts).unwrap();
        let mut hits = 0usize;
        for t in &texts {
            let mut found = false;
            for c in t.chars() {
                let cp = c as u32;
                if (0x400..=0x4ff).contains(&cp) {
                    found = true;
                }
            }
            if found {
                hits += 1;
            }
        }
        cs_err = cs_err.max((rep.ratio - hits as f64 / n as f64).abs());
    }

    for _ in 0..instances {
        let dim = rng.gen_range(2..6);
        let m = rng.gen_range(2..8);
        let mut w = vec![0.0f64; m * dim];
        w.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        let b: Vec<f64> = (0..m).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let sae = SaeParams::new(
            0,
            Tensor::<f32>::from_f64(&[m, dim], &w).unwrap(),
            Tensor::<f32>::from_f64(&[m], &b).unwrap(),
            Tensor::<f32>::zeros(&[dim, m]),
            Tensor::<f32>::zeros(&[dim]),
        )
        .unwrap();
        let n_langs = rng.gen_range(2..4);
        let langs: Vec<LanguageId> = (0..n_langs).map(|i| LanguageId::new(format!("l{i}"))).collect();
        let mut by_language = BTreeMap::new();
        let mut raw: BTreeMap<LanguageId, Vec<Vec<f32>>> = BTreeMap::new();
        for l in &langs {
            let rows = rng.gen_range(1..10);
            let data: Vec<Vec<f32>> = (0..rows).map(|_| (0..dim).map(|_| rng.gen_range(-2.0f32..2.0)).collect()).collect();
            by_language.insert(l.clone(), Tensor::new(&[rows, dim], data.concat()).unwrap());
            raw.insert(l.clone(), data);
        }
        let ds = ResidualDataset { layer_index: 0, by_language };
        // naive per-language means of preact and activation, in f64 from the
        // same f32 parameters
        let preact = |s: usize, x: &[f32]| -> f64 {
            let mut acc = b[s] as f32 as f64;
            for i in 0..dim {
                acc += (w[s * dim + i] as f32 as f64) * x[i] as f64;
            }
            acc
        };
        let mut mean_pre: BTreeMap<&LanguageId, Vec<f64>> = BTreeMap::new();
        let mut mean_act: BTreeMap<&LanguageId, Vec<f64>> = BTreeMap::new();
        for (l, rows) in &raw {
            let mut p = vec![0.0; m];
            let mut a = vec![0.0; m];
            for x in rows {
                for s in 0..m {
                    let f = preact(s, x);
                    p[s] += f;
                    a[s] += if f > 0.0 { f } else { 0.0 };
                }
            }
            mean_pre.insert(l, p.iter().map(|v| v / rows.len() as f64).collect());
            mean_act.insert(l, a.iter().map(|v| v / rows.len() as f64).collect());
        }
        let target = &langs[rng.gen_range(0..n_langs)];
        let scores = monolinguality(&sae, &ds, target).unwrap();
        for s in 0..m {
            let mu = mean_act[target][s];
            let mut gamma = 0.0;
            for l in langs.iter().filter(|l| *l != target) {
                gamma += mean_act[l][s];
            }
            gamma /= (n_langs - 1) as f64;
            nu_err = nu_err.max((scores[s].nu - (mu - gamma)).abs());
        }
        let mut features: Vec<usize> = (1..m).filter(|_| rng.gen_bool(0.5)).collect();
        features.insert(0, 0);
        let (alpha, beta) = estimate_thresholds(&sae, &ds, &features, target).unwrap();
        for &s in &features {
            mean_err = mean_err.max((beta[&s] - mean_pre[target][s]).abs());
            for l in langs.iter().filter(|l| *l != target) {
                mean_err = mean_err.max((alpha[&s][l] - mean_pre[l][s]).abs());
            }
        }
    }

    for _ in 0..instances {
        let n1 = rng.gen_range(1..3000u64);
        let n2 = rng.gen_range(1..3000u64);
        let x1 = rng.gen_range(0..=n1);
        let x2 = rng.gen_range(0..=n2);
        let got = ztest(x1, n1, x2, n2).unwrap();
        match naive_ztest(x1, n1, x2, n2) {
            Some((z, p)) => {
                z_err = z_err.max((got.z.unwrap() - z).abs()).max((got.p - p).abs());
            }
            None => {
                if !got.degenerate {
                    z_err = f64::INFINITY;
                }
            }
        }
    }
    let pass = cs_err <= 1e-6 && nu_err <= 1e-10 && mean_err <= 1e-10 && z_err <= 1e-6;
    outcome(
        pass,
        format!(
            "{instances} instances each: cs {cs_err:.1e}, nu {nu_err:.1e}, means {mean_err:.1e}, ztest {z_err:.1e}"
        ),
    )
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Outcome {
    const N: usize = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut dirs: Vec<Vec<f64>> = Vec::new();
    while dirs.len() < 4 {
        let mut v: Vec<f64> = (0..N).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for u in &dirs {
            let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        dirs.push(v.into_iter().map(|a| a / norm).collect());
    }
    let noise = Normal::new(0.0, 0.05).unwrap();
    let rows = 4096;
    let mut data = Vec::with_capacity(rows * N);
    for _ in 0..rows {
        let mut x: Vec<f64> = (0..N).map(|_| noise.sample(&mut rng)).collect();
        for u in &dirs {
            if rng.gen_bool(0.25) {
                let c = rng.gen_range(0.5..2.0);
                x.iter_mut().zip(u).for_each(|(a, b)| *a += c * b);
            }
        }
        data.extend(x.into_iter().map(|v| v as f32));
    }
    let data = Tensor::new(&[rows, N], data).unwrap();
    let cfg = SaeTrainConfig { sparsity_weight: 0.05, lr: 3e-3, steps: 3000, batch: 128, expansion: 4 };
    let init = init_sae(&data, 0, 4, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
    let (sae, _) = train_sae(&data, 0, &cfg, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
    let cosines: Vec<f64> = dirs
        .iter()
        .map(|u| {
            (0..sae.m())
                .map(|s| {
                    let d = sae.feature_direction(s).unwrap();
                    let dot: f64 = d.iter().zip(u).map(|(&a, &b)| a as f64 * b).sum();
                    let norm = d.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
                    (dot / norm).abs()
                })
                .fold(0.0, f64::max)
        })
        .collect();
    let (before, after) = (init.mse(&data).unwrap(), sae.mse(&data).unwrap());
    let min_cos = cosines.iter().copied().fold(f64::INFINITY, f64::min);
    outcome(
        sae.m() == 64 && min_cos >= 0.9 && after <= 0.1 * before,
        format!("M {}, min max-cosine {min_cos:.4}, mse {before:.4} -> {after:.4}", sae.m()),
    )
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.gen_range(1..64);
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let d: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let lambda = rng.gen_range(0.0..5.0);
        let y = ablate(&x, &d, lambda);
        let dot = |a: &[f64], b: &[f64]| -> f64 {
            let mut s = 0.0;
            for i in 0..a.len() {
                s += a[i] * b[i];
            }
            s
        };
        worst = worst.max((dot(&y, &d) - (dot(&x, &d) - lambda * dot(&d, &d))).abs());
    }

    // λ = 0 against no hook at all, on a model with real structure.
    let cfg = LmConfig { vocab: 20, d_model: 16, n_layers: 2, n_heads: 2, d_ff: 32, ctx_len: 32 };
    let lm = LmParams::<f32>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(52)).unwrap();
    let sae = SaeParams::new(
        1,
        rand_t(&mut rng, &[32, 16], 1.0).cast(),
        rand_t(&mut rng, &[32], 1.0).cast(),
        rand_t(&mut rng, &[16, 32], 1.0).cast(),
        Tensor::zeros(&[16]),
    )
    .unwrap();
    let prompts: Vec<Prompt> = (0..50)
        .map(|id| Prompt { id, lang: "synA".into(), tokens: (0..6).map(|_| rng.gen_range(0..20)).collect() })
        .collect();
    let decode = DecodeConfig { max_new: 24, ..DecodeConfig::default() };
    let plain = generate(&lm, &prompts, &decode, 53, |_| NoHook).unwrap();
    let mut identical = true;
    for policy in [PositionPolicy::AllGenerated, PositionPolicy::TriggerOnPreact { threshold: -10.0 }] {
        let spec = AblationSpec { layer_index: 1, feature: 3, lambda: 0.0, position_policy: policy };
        let hooked = generate(&lm, &prompts, &decode, 53, |p| AblationHook::new(&sae, spec, p.tokens.len()).unwrap()).unwrap();
        identical &= hooked == plain;
    }
    // logits, bit for bit
    let spec = AblationSpec { layer_index: 1, feature: 3, lambda: 0.0, position_policy: PositionPolicy::AllGenerated };
    let mut hook = AblationHook::new(&sae, spec, 1).unwrap();
    let (mut a, mut b) = (Decoder::new(&lm), Decoder::new(&lm));
    for t in (0..20).chain(0..10) {
        let la = a.step(t, &mut NoHook).unwrap();
        let lb = b.step(t, &mut hook).unwrap();
        identical &= la.iter().zip(&lb).all(|(x, y)| x.to_bits() == y.to_bits());
    }
    let mut r1 = ChaCha8Rng::seed_from_u64(54);
    let mut r2 = ChaCha8Rng::seed_from_u64(54);
    identical &= sample(&lm, &[1, 2, 3], &decode, &mut r1, &mut NoHook).unwrap()
        == sample(&lm, &[1, 2, 3], &decode, &mut r2, &mut AblationHook::new(&sae, spec, 3).unwrap()).unwrap();
    outcome(worst <= 1e-6 && identical, format!("max projection error {worst:.1e}, λ=0 bitwise identical: {identical}"))
}

// ---------------------------------------------------------------- 5-8, 10

fn e2e_config(seed: u64) -> ExperimentConfig {
    ExperimentConfig { seed, ..ExperimentConfig::default() }
}

fn run(seed: u64) -> SeedRun {
    let t = Instant::now();
    let out = run_seed(&e2e_config(seed), |msg| eprintln!("  [seed {seed} {:>6.0}s] {msg}", t.elapsed().as_secs_f64()))
        .expect("seed run");
    eprintln!("  [seed {seed}] finished in {:.0}s", t.elapsed().as_secs_f64());
    out
}

fn ratio(r: &SeedRun, m: &str) -> f64 {
    r.cs[m].ratio
}

fn criterion_5(runs: &[SeedRun], secs: &[f64]) -> Outcome {
    let sft = median(runs.iter().map(|r| ratio(r, "sft")).collect());
    let rows: Vec<_> = runs.iter().map(|r| r.summary().into_iter().find(|s| s.method == "sasft").unwrap()).collect();
    let reduction = median(rows.iter().map(|s| s.relative_reduction).collect());
    let ppl = median(rows.iter().map(|s| s.ppl_delta).collect());
    let slowest = secs.iter().copied().fold(0.0, f64::max);
    let pass = sft >= 0.01 && reduction >= 0.5 && ppl <= 0.05 && slowest <= 1800.0;
    outcome(
        pass,
        format!(
            "median SFT CS {:.2}%, SASFT reduction {:.1}% (need 50%), ppl delta {:+.2}%, slowest seed {slowest:.0}s",
            100.0 * sft,
            100.0 * reduction,
            100.0 * ppl
        ),
    )
}

fn criterion_6(runs: &[SeedRun]) -> Outcome {
    let med = |m: &str| median(runs.iter().map(|r| ratio(r, m)).collect());
    let (sft, red, zero) = (med("sft"), med("sasft"), med("sasft_zero"));
    let strict = red < sft && zero < sft && red <= zero;
    let spread = sft.max(red).max(zero) - sft.min(red).min(zero);
    let soft = !strict && spread <= 0.002;
    outcome(
        strict || soft,
        format!(
            "median CS sft {:.2}%, reduce {:.2}%, reduce_zero {:.2}%{}",
            100.0 * sft,
            100.0 * red,
            100.0 * zero,
            if soft { " (soft pass: within 0.2 pp)" } else { "" }
        ),
    )
}

fn criterion_7(runs: &[SeedRun]) -> Outcome {
    let pairs: Vec<(f64, f64)> =
        runs.iter().map(|r| (r.profile.at(-1).unwrap_or(f64::NAN), r.profile.at(-4).unwrap_or(f64::NAN))).collect();
    let (m1, m4) = (median(pairs.iter().map(|p| p.0).collect()), median(pairs.iter().map(|p| p.1).collect()));
    outcome(m1 > m4, format!("median f at offset -1 {m1:.3} vs -4 {m4:.3}; per seed {pairs:.3?}"))
}

fn criterion_8(runs: &[SeedRun]) -> Outcome {
    let cell = |r: &SeedRun, role: &str, first: bool| {
        let rows: Vec<_> = r.sweep.iter().filter(|s| s.feature_role == role).collect();
        let row = if first { rows.first() } else { rows.last() };
        row.map_or(f64::NAN, |s| s.cs_ratio)
    };
    let t0 = median(runs.iter().map(|r| cell(r, "target", true)).collect());
    let t1 = median(runs.iter().map(|r| cell(r, "target", false)).collect());
    let c0 = median(runs.iter().map(|r| cell(r, "control", true)).collect());
    let c1 = median(runs.iter().map(|r| cell(r, "control", false)).collect());
    let control_change = if c0 > 0.0 { (c1 - c0).abs() / c0 } else { f64::INFINITY };
    outcome(
        t1 <= 0.5 * t0 && control_change < 0.25,
        format!(
            "target {:.2}% -> {:.2}% (limit {:.2}%), control {:.2}% -> {:.2}% (change {:.1}%)",
            100.0 * t0,
            100.0 * t1,
            50.0 * t0,
            100.0 * c0,
            100.0 * c1,
            100.0 * control_change
        ),
    )
}

fn checkpoint_bytes(r: &SeedRun, dir: &std::path::Path, tag: &str) -> Vec<Vec<u8>> {
    let mut out = vec![r.base.to_bytes().unwrap()];
    for m in r.models.values() {
        out.push(m.to_bytes().unwrap());
    }
    for (i, s) in r.saes.iter().enumerate() {
        let p = dir.join(format!("{tag}_sae{i}.ckpt"));
        s.save(&p).unwrap();
        out.push(std::fs::read(&p).unwrap());
    }
    out
}

fn reports(r: &SeedRun) -> String {
    let mut s = String::new();
    for rep in r.cs.values() {
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        s.push_str(&String::from_utf8(buf).unwrap());
    }
    let mut buf = Vec::new();
    r.profile.write_csv(&mut buf).unwrap();
    cslab_core::steer::write_sweep_csv(&r.sweep, &mut buf).unwrap();
    s.push_str(&String::from_utf8(buf).unwrap());
    s.push_str(&serde_json::to_string(&r.target_sets).unwrap());
    s.push_str(&format!("{:?}{:?}", r.ppl, r.summary()));
    s
}

fn criterion_10(first: &SeedRun) -> Outcome {
    let again = run(0);
    let dir = tempfile::tempdir().unwrap();
    let same_ckpt = checkpoint_bytes(first, dir.path(), "a") == checkpoint_bytes(&again, dir.path(), "b");
    let same_reports = reports(first) == reports(&again);
    outcome(same_ckpt && same_reports, format!("checkpoints identical: {same_ckpt}, reports identical: {same_reports}"))
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Outcome {
    let r = ztest(50, 1000, 20, 1000).unwrap();
    let z = r.z.unwrap_or(f64::NAN);
    let eq = ztest(30, 1000, 30, 1000).unwrap();
    let pass = (z - 3.650).abs() <= 0.005 && (r.p - 1.31e-4).abs() <= 2e-5 && eq.p == 0.5;
    outcome(pass, format!("z {z:.4}, p {:.3e}; equal proportions p {}", r.p, eq.p))
}

fn main() -> ExitCode {
    let mut results: Vec<(u32, Outcome)> = Vec::new();
    let mut timed = |n: u32, f: &dyn Fn() -> Outcome| {
        let t = Instant::now();
        let o = f();
        eprintln!("  criterion {n} took {:.1}s", t.elapsed().as_secs_f64());
        results.push((n, o));
    };
    timed(1, &criterion_1);
    timed(2, &criterion_2);
    timed(3, &criterion_3);
    timed(4, &criterion_4);
    timed(9, &criterion_9);

    if std::env::args().any(|a| a == "--quick") {
        eprintln!("  --quick: skipping the end-to-end criteria 5-8 and 10");
        return report(results);
    }

    let data = build_data(&e2e_config(0)).expect("toy data");
    eprintln!(
        "  toy: {} documents, {} injected, {} prompts, decode seed {}",
        data.corpus.documents.len(),
        data.corpus.manifest.injected.len(),
        data.prompts.len(),
        stage_seed(0, stage::DECODE)
    );
    let mut runs = Vec::new();
    let mut secs = Vec::new();
    for seed in 0..3 {
        let t = Instant::now();
        runs.push(run(seed));
        secs.push(t.elapsed().as_secs_f64());
    }
    for r in &runs {
        for s in r.summary() {
            eprintln!(
                "  seed {} {:<10} cs {:.4} reduction {:+.3} ppl_delta {:+.4} ce {:.4} aux {:.4}",
                s.seed, s.method, s.cs_ratio, s.relative_reduction, s.ppl_delta, s.final_ce, s.final_aux
            );
        }
    }
    results.push((5, criterion_5(&runs, &secs)));
    results.push((6, criterion_6(&runs)));
    results.push((7, criterion_7(&runs)));
    results.push((8, criterion_8(&runs)));
    results.push((10, criterion_10(&runs[0])));
    report(results)
}

fn report(mut results: Vec<(u32, Outcome)>) -> ExitCode {
    results.sort_by_key(|r| r.0);
    let mut failed = 0;
    for (n, o) in &results {
        println!("criterion {n:>2}: {} - {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}
