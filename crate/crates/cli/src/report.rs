//! Summary table and SVG line charts from whatever stage outputs exist.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use cslab_core::sasft::LogRow;
use cslab_core::steer::read_sweep_csv;

use crate::commands::{cs_counts, read_ppl};
use crate::error::{CliResult, Context};
use crate::run::Run;

const ORDER: [&str; 5] = ["base", "sft_only", "reduce", "reduce_zero", "enhance"];
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

pub type Series = (String, Vec<(f64, f64)>);

/// `(prefix, method)` pairs for files named `{prefix}_{method}.{ext}`.
fn scan(dir: &Path, ext: &str) -> CliResult<Vec<(String, String)>> {
    let mut out = Vec::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir).at(dir)? {
        let path = entry.at(dir)?.path();
        if path.extension().and_then(|e| e.to_str()) != Some(ext) {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        if let Some((prefix, method)) = stem.split_once('_') {
            out.push((prefix.to_string(), method.to_string()));
        }
    }
    out.sort();
    Ok(out)
}

fn method_rank(m: &str) -> (usize, String) {
    (ORDER.iter().position(|o| *o == m).unwrap_or(ORDER.len()), m.to_string())
}

fn fmt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| v.to_string())
}

pub fn report(run: &Run) -> CliResult<()> {
    let dir = run.report("");
    let files = scan(&dir, "csv")?;
    let methods: BTreeSet<(usize, String)> = files
        .iter()
        .filter(|(p, _)| matches!(p.as_str(), "cs" | "ppl" | "train"))
        .map(|(_, m)| method_rank(m))
        .collect();
    let mut st = run.stage("report")?;
    if files.is_empty() {
        eprintln!("warning: no stage outputs under {}; writing an empty summary", dir.display());
    }

    let mut cs = BTreeMap::new();
    let mut ppl = BTreeMap::new();
    let mut train = BTreeMap::new();
    for (_, m) in &methods {
        let p = run.report(&format!("cs_{m}.csv"));
        if p.is_file() {
            cs.insert(m.clone(), cs_counts(&st.input(p)?)?);
        }
        let p = run.report(&format!("ppl_{m}.csv"));
        if p.is_file() {
            ppl.insert(m.clone(), read_ppl(&st.input(p)?)?);
        }
        let p = run.report(&format!("train_{m}.csv"));
        if p.is_file() {
            let p = st.input(p)?;
            let rows: Vec<LogRow> =
                csv::Reader::from_path(&p).at(&p)?.deserialize().collect::<Result<_, _>>().at(&p)?;
            train.insert(m.clone(), rows);
        }
    }
    let langs: BTreeSet<String> = ppl.values().flat_map(|m| m.keys().cloned()).collect();
    let ratio = |m: &str| cs.get(m).map(|&(x, n)| x as f64 / n as f64);
    let base_ratio = ratio("sft_only");
    let mut w = csv::Writer::from_writer(st.create(run.report("summary.csv"))?);
    let mut header: Vec<String> =
        ["method", "n_prompts", "n_switched", "cs_ratio", "relative_reduction", "final_ce", "final_aux"]
            .map(String::from)
            .to_vec();
    for l in &langs {
        header.push(format!("ppl_{l}"));
        header.push(format!("ppl_delta_{l}"));
    }
    w.write_record(&header)?;
    for (_, m) in &methods {
        let last = train.get(m).and_then(|r| r.last());
        let r = ratio(m);
        let reduction = match (r, base_ratio) {
            (Some(r), Some(b)) if b > 0.0 => Some(1.0 - r / b),
            _ => None,
        };
        let mut row = vec![
            m.clone(),
            cs.get(m).map_or(String::new(), |c| c.1.to_string()),
            cs.get(m).map_or(String::new(), |c| c.0.to_string()),
            fmt(r),
            fmt(reduction),
            fmt(last.map(|l| l.ce)),
            fmt(last.map(|l| l.aux)),
        ];
        for l in &langs {
            let v = ppl.get(m).and_then(|p| p.get(l)).copied();
            let b = ppl.get("sft_only").and_then(|p| p.get(l)).copied();
            row.push(fmt(v));
            row.push(fmt(v.zip(b).map(|(v, b)| v / b - 1.0)));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    drop(w);

    for (prefix, model) in &files {
        let src = run.report(&format!("{prefix}_{model}.csv"));
        let chart = match prefix.as_str() {
            "sweep" => {
                let rows = read_sweep_csv(fs::File::open(&src).at(&src)?).at(&src)?;
                let mut series: Vec<Series> = Vec::new();
                for r in rows {
                    match series.iter_mut().find(|s| s.0 == r.feature_role) {
                        Some(s) => s.1.push((r.lambda, r.cs_ratio)),
                        None => series.push((r.feature_role.clone(), vec![(r.lambda, r.cs_ratio)])),
                    }
                }
                line_chart(&format!("Ablation sweep ({model})"), "lambda", "CS ratio", &series)
            }
            "profile" => {
                let mut r = csv::Reader::from_path(&src).at(&src)?;
                let mut pts = Vec::new();
                for row in r.records() {
                    let row = row.at(&src)?;
                    if let (Ok(o), Ok(v)) = (row[0].parse::<f64>(), row[1].parse::<f64>()) {
                        pts.push((o, v));
                    }
                }
                line_chart(&format!("Pre-activation profile ({model})"), "offset", "mean pre-activation", &[(
                    "target feature".into(),
                    pts,
                )])
            }
            _ => continue,
        };
        st.input(src)?;
        let out = st.output(run.report(&format!("{prefix}_{model}.svg")))?;
        fs::write(&out, chart).at(&out)?;
    }
    if !train.is_empty() {
        let series: Vec<Series> = train
            .iter()
            .map(|(m, rows)| (m.clone(), rows.iter().map(|r| (r.step as f64, r.ce)).collect()))
            .collect();
        let out = st.output(run.report("training_ce.svg"))?;
        fs::write(&out, line_chart("Training cross-entropy", "step", "ce", &series)).at(&out)?;
    }
    run.log(&format!("summary of {} methods written to {}", methods.len(), run.report("summary.csv").display()));
    st.finish("report")?;
    Ok(())
}

/// A self-contained SVG line chart with one polyline per series.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h, left, right, top, bottom) = (640.0, 400.0, 70.0, 150.0, 40.0, 50.0);
    let pts = series.iter().flat_map(|s| s.1.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let pw = w - left - right;
    let ph = h - top - bottom;
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" font-size="16" text-anchor="middle">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<path d="M{left},{top} V{} H{}" fill="none" stroke="black"/>"#,
        top + ph,
        left + pw
    );
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">{}</text>"#,
            sx(fx),
            top + ph + 16.0,
            tick(fx)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="end">{}</text>"#,
            left - 6.0,
            sy(fy) + 4.0,
            tick(fy)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        h - 10.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" font-size="12" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        escape(y_label)
    );
    for (i, (name, points)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let coords: Vec<String> = points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            coords.join(" ")
        );
        let ly = top + 16.0 * i as f64 + 8.0;
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>"#,
            left + pw + 12.0,
            left + pw + 32.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="11">{}</text>"#,
            left + pw + 38.0,
            ly + 4.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    let t = format!("{v:.3}");
    let t = t.trim_end_matches('0').trim_end_matches('.');
    if t == "-0" { "0".into() } else { t.to_string() }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
