//! Run artifacts: metrics CSV, test-set embeddings, an SVG of the curves and
//! a plain-text summary.

use std::fmt::Write as _;
use std::path::Path;

use super::{predict, EpochMetrics, LossComponents, Phase, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, Model};
use crate::synth::Dataset;

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn metrics_header(types: usize) -> String {
    let mut h = String::from("epoch,phase,loss_vqa,loss_vib,loss_b,loss_c,loss_total,train_acc,test_acc");
    for q in 0..types {
        let _ = write!(h, ",test_acc_q{q}");
    }
    h.push_str(",lr,k");
    h
}

pub fn write_metrics(history: &[EpochMetrics], path: &Path) -> Result<()> {
    let types = history.first().map_or(0, |m| m.test_per_type.len());
    let mut out = metrics_header(types);
    out.push('\n');
    for m in history {
        let l = &m.losses;
        let _ = write!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            m.epoch,
            m.phase.tag(),
            l.vqa,
            l.vib,
            l.relation,
            l.class,
            m.total,
            m.train_acc,
            m.test_acc
        );
        for a in &m.test_per_type {
            let _ = write!(out, ",{a}");
        }
        let _ = writeln!(out, ",{},{}", m.lr, m.k);
    }
    write(path, &out)
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.split_inclusive('\n');
    let header = lines.next().ok_or_else(|| Error::format(path, 0, "empty metrics file"))?;
    let cols = header.trim_end().split(',').count();
    if cols < 11 {
        return Err(Error::format(path, 0, "metrics header has too few columns"));
    }
    let types = cols - 11;
    let mut offset = header.len() as u64;
    let mut out = Vec::new();
    for line in lines {
        let at = offset;
        offset += line.len() as u64;
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != cols {
            return Err(Error::format(path, at, format!("expected {cols} fields, found {}", f.len())));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::format(path, at, format!("bad number {s:?}")))
        };
        let int = |s: &str| -> Result<usize> {
            s.parse::<usize>()
                .map_err(|_| Error::format(path, at, format!("bad integer {s:?}")))
        };
        out.push(EpochMetrics {
            epoch: int(f[0])?,
            phase: Phase::from_tag(f[1]).ok_or_else(|| Error::format(path, at, format!("bad phase {:?}", f[1])))?,
            losses: LossComponents {
                vqa: num(f[2])?,
                vib: num(f[3])?,
                relation: num(f[4])?,
                class: num(f[5])?,
            },
            total: num(f[6])?,
            train_acc: num(f[7])?,
            test_acc: num(f[8])?,
            test_per_type: f[9..9 + types].iter().map(|s| num(s)).collect::<Result<_>>()?,
            lr: num(f[9 + types])?,
            k: int(f[10 + types])?,
        });
    }
    Ok(out)
}

/// One row per test instance: question type, majority answer, predicted
/// answer, then the posterior mean.
pub fn write_embeddings(model: &Model, ds: &Dataset, path: &Path) -> Result<()> {
    let preds = predict(model, &ds.test)?;
    let mut out = String::from("question_type,true_answer,predicted_answer");
    for d in 0..model.dims.d_z {
        let _ = write!(out, ",mu{d}");
    }
    out.push('\n');
    for (r, p) in ds.test.iter().zip(&preds) {
        let _ = write!(out, "{},{},{}", r.question_type, r.majority_answer(), p.answer);
        for v in &p.mu {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    write(path, &out)
}

fn polyline(points: &[(f64, f64)], x0: f64, y0: f64, w: f64, h: f64, xr: (f64, f64), yr: (f64, f64)) -> String {
    let sx = |x: f64| x0 + (x - xr.0) / (xr.1 - xr.0).max(1e-12) * w;
    let sy = |y: f64| y0 + h - (y - yr.0) / (yr.1 - yr.0).max(1e-12) * h;
    points
        .iter()
        .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Loss and accuracy against epoch as a standalone SVG.
pub fn write_curves(history: &[EpochMetrics], path: &Path) -> Result<()> {
    let (w, h, pad) = (360.0, 240.0, 40.0);
    let last = history.last().map_or(1, |m| m.epoch).max(2) as f64;
    let xr = (1.0, last);
    type Series<'a> = (&'a str, &'a str, Box<dyn Fn(&EpochMetrics) -> f64>);
    let panels: [(&str, Vec<Series>); 2] = [
        (
            "loss",
            vec![
                ("vqa", "#1f77b4", Box::new(|m: &EpochMetrics| m.losses.vqa)),
                ("total", "#d62728", Box::new(|m: &EpochMetrics| m.total)),
                ("L_b", "#2ca02c", Box::new(|m: &EpochMetrics| m.losses.relation)),
                ("L_c", "#9467bd", Box::new(|m: &EpochMetrics| m.losses.class)),
            ],
        ),
        (
            "accuracy",
            vec![
                ("train", "#1f77b4", Box::new(|m: &EpochMetrics| m.train_acc)),
                ("test", "#d62728", Box::new(|m: &EpochMetrics| m.test_acc)),
            ],
        ),
    ];
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" font-family=\"sans-serif\" font-size=\"11\">\n",
        2.0 * (w + 2.0 * pad),
        h + 2.0 * pad
    );
    for (i, (title, series)) in panels.iter().enumerate() {
        let x0 = i as f64 * (w + 2.0 * pad) + pad;
        let values: Vec<f64> = series.iter().flat_map(|(_, _, f)| history.iter().map(f)).collect();
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let yr = if values.is_empty() { (0.0, 1.0) } else { (lo.min(0.0), hi.max(lo + 1e-9)) };
        let _ = writeln!(
            svg,
            "<rect x=\"{x0}\" y=\"{pad}\" width=\"{w}\" height=\"{h}\" fill=\"none\" stroke=\"#888\"/>"
        );
        let _ = writeln!(svg, "<text x=\"{x0}\" y=\"{}\">{title} (epochs 1-{last})</text>", pad - 8.0);
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\">{:.3}</text><text x=\"{}\" y=\"{}\">{:.3}</text>",
            x0 - pad + 2.0,
            pad + 10.0,
            yr.1,
            x0 - pad + 2.0,
            pad + h,
            yr.0
        );
        for (j, (name, colour, f)) in series.iter().enumerate() {
            let pts: Vec<(f64, f64)> = history.iter().map(|m| (m.epoch as f64, f(m))).collect();
            let _ = writeln!(
                svg,
                "<polyline fill=\"none\" stroke=\"{colour}\" stroke-width=\"1.5\" points=\"{}\"/>",
                polyline(&pts, x0, pad, w, h, xr, yr)
            );
            let _ = writeln!(
                svg,
                "<text x=\"{}\" y=\"{}\" fill=\"{colour}\">{name}</text>",
                x0 + 6.0,
                pad + 14.0 + 12.0 * j as f64
            );
        }
    }
    svg.push_str("</svg>\n");
    write(path, &svg)
}

pub fn write_summary(history: &[EpochMetrics], path: &Path) -> Result<()> {
    let mut out = String::new();
    if let Some(last) = history.last() {
        let best = history.iter().map(|m| m.test_acc).fold(f64::NEG_INFINITY, f64::max);
        let _ = writeln!(out, "epochs={}", history.len());
        let _ = writeln!(out, "final_phase={}", last.phase.tag());
        let _ = writeln!(out, "final_train_acc={:.4}", last.train_acc);
        let _ = writeln!(out, "final_test_acc={:.4}", last.test_acc);
        let _ = writeln!(out, "best_test_acc={best:.4}");
        let per: Vec<String> = last.test_per_type.iter().map(|a| format!("{a:.4}")).collect();
        let _ = writeln!(out, "final_test_acc_per_type={}", per.join(","));
        let _ = writeln!(out, "final_loss_total={:.6}", last.total);
    }
    write(path, &out)
}

/// Writes every artifact of a finished run into `dir`.
pub fn export_report(history: &[EpochMetrics], model: &Model, ds: &Dataset, cfg: &TrainConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join("config.txt"), &cfg.to_kv_lines())?;
    write_metrics(history, &dir.join("metrics.csv"))?;
    write_embeddings(model, ds, &dir.join("embeddings.csv"))?;
    write_curves(history, &dir.join("curves.svg"))?;
    write_summary(history, &dir.join("summary.txt"))?;
    save_checkpoint(model, &dir.join("model.ckpt"))
}
