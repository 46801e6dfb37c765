//! Charts and a markdown summary built only from training logs and metric
//! reports already on disk.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use image::{Rgb, RgbImage};
use vllve::eval::{MetricReport, Psnr};
use vllve::loss::LossReport;
use vllve::train::{read_log, StepLog};

pub const REPORT_FILE: &str = "report.md";

const WIDTH: u32 = 640;
const HEIGHT: u32 = 360;
const MARGIN: u32 = 24;

const PALETTE: [(&str, [u8; 3]); 8] = [
    ("blue", [31, 119, 180]),
    ("orange", [255, 127, 14]),
    ("green", [44, 160, 44]),
    ("red", [214, 39, 40]),
    ("purple", [148, 103, 189]),
    ("brown", [140, 86, 75]),
    ("pink", [227, 119, 194]),
    ("grey", [127, 127, 127]),
];

type Term = (&'static str, fn(&LossReport) -> f64);

const TERMS: [Term; 8] = [
    ("total", |r| r.total),
    ("rec", |r| r.rec),
    ("rec_prime", |r| r.rec_prime),
    ("smooth_l", |r| r.smooth_l),
    ("smooth_b", |r| r.smooth_b),
    ("corr_r", |r| r.corr_r),
    ("corr_r_prime", |r| r.corr_r_prime),
    ("corr_r_dblprime", |r| r.corr_r_dblprime),
];

/// Unique, file-name-safe labels taken from each input's parent directory.
fn labels(paths: &[PathBuf]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    paths
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let base = p
                .parent()
                .and_then(|d| d.file_name())
                .or_else(|| p.file_stem())
                .and_then(|s| s.to_str())
                .unwrap_or("run");
            let clean: String = base
                .chars()
                .map(|c| {
                    if c.is_ascii_alphanumeric() || c == '-' {
                        c
                    } else {
                        '_'
                    }
                })
                .collect();
            let mut label = clean.clone();
            if !seen.insert(label.clone()) {
                label = format!("{clean}_{i}");
                seen.insert(label.clone());
            }
            label
        })
        .collect()
}

/// Running mean over a trailing window, to make per-step losses readable.
fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, v) in values.iter().enumerate() {
        sum += v;
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

struct Series {
    name: String,
    points: Vec<(f64, f64)>,
}

struct Canvas {
    img: RgbImage,
}

impl Canvas {
    fn new() -> Self {
        let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
        let axis = Rgb([60, 60, 60]);
        for x in MARGIN..WIDTH - MARGIN {
            img.put_pixel(x, HEIGHT - MARGIN, axis);
        }
        for y in MARGIN..=HEIGHT - MARGIN {
            img.put_pixel(MARGIN, y, axis);
        }
        Self { img }
    }

    fn plot(&mut self, x: f64, y: f64, color: Rgb<u8>) {
        let (xi, yi) = (x.round() as i64, y.round() as i64);
        for (dx, dy) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            let (px, py) = (xi + dx, yi + dy);
            if px >= 0 && py >= 0 && (px as u32) < WIDTH && (py as u32) < HEIGHT {
                self.img.put_pixel(px as u32, py as u32, color);
            }
        }
    }

    fn line(&mut self, a: (f64, f64), b: (f64, f64), color: Rgb<u8>) {
        let n = (b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil().max(1.0) as usize;
        for i in 0..=n {
            let t = i as f64 / n as f64;
            self.plot(a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1), color);
        }
    }

    fn hline(&mut self, y: f64, color: Rgb<u8>) {
        let yi = y.round() as u32;
        for x in MARGIN + 1..WIDTH - MARGIN {
            self.img.put_pixel(x, yi, color);
        }
    }

    fn rect(&mut self, x0: f64, x1: f64, y0: f64, color: Rgb<u8>) {
        let bottom = HEIGHT - MARGIN;
        for x in x0.round() as u32..x1.round() as u32 {
            for y in y0.round() as u32..bottom {
                self.img.put_pixel(x, y, color);
            }
        }
    }

    fn save(self, path: &Path) -> Result<()> {
        self.img
            .save(path)
            .with_context(|| format!("writing {}", path.display()))
    }
}

fn inner() -> (f64, f64) {
    ((WIDTH - 2 * MARGIN) as f64, (HEIGHT - 2 * MARGIN) as f64)
}

/// Line chart with a log10 y axis; returns the decade range drawn.
fn line_chart(series: &[Series], path: &Path) -> Result<(i32, i32)> {
    let positive = series
        .iter()
        .flat_map(|s| s.points.iter())
        .filter(|p| p.1 > 0.0 && p.1.is_finite());
    let (mut lo, mut hi, mut xmax) = (f64::INFINITY, f64::NEG_INFINITY, 1.0f64);
    for &(x, y) in positive {
        lo = lo.min(y.log10());
        hi = hi.max(y.log10());
        xmax = xmax.max(x);
    }
    let (lo, hi) = if lo.is_finite() {
        (
            lo.floor() as i32,
            (hi.ceil() as i32).max(lo.floor() as i32 + 1),
        )
    } else {
        (0, 1)
    };
    let (w, h) = inner();
    let to_px = |x: f64, y: f64| {
        let u = MARGIN as f64 + x / xmax * w;
        let v = MARGIN as f64 + (1.0 - (y.log10() - lo as f64) / (hi - lo) as f64) * h;
        (u, v)
    };
    let mut canvas = Canvas::new();
    for d in lo..=hi {
        canvas.hline(to_px(0.0, 10f64.powi(d)).1, Rgb([225, 225, 225]));
    }
    for (i, s) in series.iter().enumerate() {
        let color = Rgb(PALETTE[i % PALETTE.len()].1);
        let pts: Vec<_> = s
            .points
            .iter()
            .filter(|p| p.1 > 0.0 && p.1.is_finite())
            .map(|&(x, y)| to_px(x, y))
            .collect();
        for pair in pts.windows(2) {
            canvas.line(pair[0], pair[1], color);
        }
        if let [only] = pts.as_slice() {
            canvas.plot(only.0, only.1, color);
        }
    }
    canvas.save(path)?;
    Ok((lo, hi))
}

/// Grouped bars starting at zero; returns the y maximum drawn.
fn bar_chart(groups: &[Vec<f64>], path: &Path) -> Result<f64> {
    let top = groups
        .iter()
        .flatten()
        .copied()
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max)
        .max(1e-9)
        * 1.1;
    let (w, h) = inner();
    let slot = w / groups.len().max(1) as f64;
    let mut canvas = Canvas::new();
    for (g, values) in groups.iter().enumerate() {
        let bar = slot * 0.8 / values.len().max(1) as f64;
        for (k, v) in values.iter().enumerate() {
            if !v.is_finite() {
                continue;
            }
            let x0 = MARGIN as f64 + g as f64 * slot + slot * 0.1 + k as f64 * bar;
            let y0 = MARGIN as f64 + (1.0 - v.max(0.0) / top) * h;
            canvas.rect(x0, x0 + bar, y0, Rgb(PALETTE[k % PALETTE.len()].1));
        }
    }
    canvas.save(path)?;
    Ok(top)
}

fn legend(names: impl Iterator<Item = String>) -> String {
    names
        .enumerate()
        .map(|(i, n)| format!("{n} ({})", PALETTE[i % PALETTE.len()].0))
        .collect::<Vec<_>>()
        .join(", ")
}

fn fmt_psnr(p: &Psnr) -> String {
    match p.db {
        Some(db) => format!("{db:.2}"),
        None => "identical".into(),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.3e}"))
}

fn tail_mean(log: &[StepLog], f: fn(&LossReport) -> f64) -> f64 {
    let k = (log.len() / 10).max(1);
    log[log.len() - k..]
        .iter()
        .map(|e| f(&e.report))
        .sum::<f64>()
        / k as f64
}

fn training_section(logs: &[PathBuf], out: &Path, md: &mut String) -> Result<()> {
    let names = labels(logs);
    let mut runs = Vec::new();
    for (path, name) in logs.iter().zip(&names) {
        let log = read_log(path)?;
        if log.is_empty() {
            anyhow::bail!("{}: log has no entries", path.display());
        }
        runs.push((name.clone(), log));
    }
    writeln!(md, "## Training\n")?;
    writeln!(
        md,
        "| run | steps | first loss | final loss | final rec | final smooth_l | final corr_r |"
    )?;
    writeln!(md, "|---|---|---|---|---|---|---|")?;
    for (name, log) in &runs {
        writeln!(
            md,
            "| {name} | {} | {:.4e} | {:.4e} | {:.4e} | {:.4e} | {:.4e} |",
            log.len(),
            log[0].report.total,
            tail_mean(log, |r| r.total),
            tail_mean(log, |r| r.rec),
            tail_mean(log, |r| r.smooth_l),
            tail_mean(log, |r| r.corr_r),
        )?;
    }
    writeln!(md, "\nFinal values average the last tenth of each run.\n")?;

    let window = |log: &[StepLog]| (log.len() / 50).max(1);
    for (name, log) in &runs {
        let series: Vec<Series> = TERMS
            .iter()
            .filter(|(_, f)| log.iter().any(|e| f(&e.report) > 0.0))
            .map(|(term, f)| {
                let raw: Vec<f64> = log.iter().map(|e| f(&e.report)).collect();
                Series {
                    name: term.to_string(),
                    points: log
                        .iter()
                        .zip(smoothed(&raw, window(log)))
                        .map(|(e, v)| (e.step as f64, v))
                        .collect(),
                }
            })
            .collect();
        let file = format!("loss_{name}.png");
        let (lo, hi) = line_chart(&series, &out.join(&file))?;
        writeln!(md, "### {name}\n")?;
        writeln!(md, "![{name} loss terms]({file})\n")?;
        writeln!(
            md,
            "Loss terms against step, log scale from 1e{lo} to 1e{hi}, running mean over {} steps: {}.\n",
            window(log),
            legend(series.iter().map(|s| s.name.clone()))
        )?;
    }
    if runs.len() > 1 {
        let series: Vec<Series> = runs
            .iter()
            .map(|(name, log)| {
                let raw: Vec<f64> = log.iter().map(|e| e.report.total).collect();
                Series {
                    name: name.clone(),
                    points: log
                        .iter()
                        .zip(smoothed(&raw, window(log)))
                        .map(|(e, v)| (e.step as f64, v))
                        .collect(),
                }
            })
            .collect();
        let (lo, hi) = line_chart(&series, &out.join("loss_total.png"))?;
        writeln!(md, "### All runs\n")?;
        writeln!(md, "![total loss](loss_total.png)\n")?;
        writeln!(
            md,
            "Total loss against step, log scale from 1e{lo} to 1e{hi}: {}.\n",
            legend(series.iter().map(|s| s.name.clone()))
        )?;
    }
    Ok(())
}

fn metrics_section(metrics: &[PathBuf], out: &Path, md: &mut String) -> Result<()> {
    let names = labels(metrics);
    let mut reports = Vec::new();
    for (path, name) in metrics.iter().zip(&names) {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let report: MetricReport =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        reports.push((name.clone(), report));
    }
    writeln!(md, "## Evaluation\n")?;
    writeln!(
        md,
        "| report | clips | PSNR (dB) | input PSNR (dB) | SSIM | temporal short | temporal long | alignment |"
    )?;
    writeln!(md, "|---|---|---|---|---|---|---|---|")?;
    for (name, r) in &reports {
        let m = &r.mean;
        writeln!(
            md,
            "| {name} | {} | {} | {} | {:.4} | {} | {} | {} |",
            m.clips,
            fmt_psnr(&m.psnr),
            fmt_psnr(&m.psnr_input),
            m.ssim,
            fmt_opt(m.temporal_short),
            fmt_opt(m.temporal_long),
            fmt_opt(m.alignment_error),
        )?;
    }
    let groups: Vec<Vec<f64>> = reports
        .iter()
        .map(|(_, r)| vec![r.mean.psnr.value(), r.mean.psnr_input.value()])
        .collect();
    let top = bar_chart(&groups, &out.join("psnr.png"))?;
    writeln!(md, "\n![mean PSNR](psnr.png)\n")?;
    writeln!(
        md,
        "Mean PSNR per report ({}), 0 to {top:.1} dB: {}.\n",
        names.join(", "),
        legend(["enhanced".to_string(), "input".to_string()].into_iter())
    )?;
    Ok(())
}

/// Writes `report.md` and its PNG charts into `out`.
pub fn render(logs: &[PathBuf], metrics: &[PathBuf], out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut md = String::from("# Report\n\n");
    if !logs.is_empty() {
        training_section(logs, out, &mut md)?;
    }
    if !metrics.is_empty() {
        metrics_section(metrics, out, &mut md)?;
    }
    let path = out.join(REPORT_FILE);
    fs::write(&path, md).with_context(|| format!("writing {}", path.display()))
}
