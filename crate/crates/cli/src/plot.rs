//! Figure export: CSV data files plus small self-contained SVG charts.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use faceswap::archive::write_atomic;
use faceswap::calibration::CalibrationReport;
use faceswap::trainer::{read_metrics, AttentionRecord, StepReport, ATTENTION_FILE, METRICS_FILE};
use faceswap::{Error, Result};

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];
const PANEL_W: f64 = 480.0;
const PANEL_H: f64 = 160.0;
const MARGIN: f64 = 48.0;
/// Attention grids show at most this many dumps per resolution, latest last.
const MAX_ATTENTION_DUMPS: usize = 8;

struct Svg {
    w: f64,
    h: f64,
    body: String,
}

impl Svg {
    fn new(w: f64, h: f64) -> Self {
        Self { w, h, body: String::new() }
    }

    fn text(&mut self, x: f64, y: f64, size: u32, anchor: &str, s: &str) {
        let _ = writeln!(
            self.body,
            r#"<text x="{x:.1}" y="{y:.1}" font-size="{size}" text-anchor="{anchor}">{}</text>"#,
            escape(s)
        );
    }

    fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str) {
        let _ = writeln!(
            self.body,
            r#"<line x1="{x1:.1}" y1="{y1:.1}" x2="{x2:.1}" y2="{y2:.1}" stroke="{stroke}"/>"#
        );
    }

    fn polyline(&mut self, pts: &[(f64, f64)], stroke: &str) {
        let p: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        let _ = writeln!(
            self.body,
            r#"<polyline fill="none" stroke="{stroke}" stroke-width="1.2" points="{}"/>"#,
            p.join(" ")
        );
    }

    fn circle(&mut self, x: f64, y: f64, fill: &str) {
        let _ = writeln!(self.body, r#"<circle cx="{x:.2}" cy="{y:.2}" r="3" fill="{fill}"/>"#);
    }

    fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str) {
        let _ = writeln!(
            self.body,
            r#"<rect x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{h:.2}" fill="{fill}"/>"#
        );
    }

    fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{:.0}\" height=\"{:.0}\" viewBox=\"0 0 {:.0} {:.0}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}</svg>\n",
            self.w, self.h, self.w, self.h, self.body
        )
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 || (1e-3..1e4).contains(&v.abs()) {
        format!("{v:.3}")
    } else {
        format!("{v:.2e}")
    }
}

/// One chart panel at `(ox, oy)` with shared axes for all series.
fn panel(svg: &mut Svg, ox: f64, oy: f64, title: &str, series: &[(String, Vec<(f64, f64)>)], markers: bool) {
    let pts = series.iter().flat_map(|(_, s)| s.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
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
    let (w, h) = (PANEL_W - 2.0 * MARGIN, PANEL_H - 2.0 * MARGIN + 40.0);
    let (left, top) = (ox + MARGIN, oy + 24.0);
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * w;
    let sy = |y: f64| top + h - (y - y0) / (y1 - y0) * h;
    svg.text(ox + PANEL_W / 2.0, oy + 14.0, 12, "middle", title);
    svg.line(left, top + h, left + w, top + h, "#444");
    svg.line(left, top, left, top + h, "#444");
    svg.text(left - 4.0, top + 4.0, 9, "end", &fmt_tick(y1));
    svg.text(left - 4.0, top + h, 9, "end", &fmt_tick(y0));
    svg.text(left, top + h + 12.0, 9, "middle", &fmt_tick(x0));
    svg.text(left + w, top + h + 12.0, 9, "middle", &fmt_tick(x1));
    for (i, (name, s)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let p: Vec<(f64, f64)> = s
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| (sx(x), sy(y)))
            .collect();
        svg.polyline(&p, color);
        if markers {
            for &(x, y) in &p {
                svg.circle(x, y, color);
            }
        }
        if series.len() > 1 {
            svg.text(left + w + 4.0, top + 10.0 + 11.0 * i as f64, 9, "start", name);
            svg.line(left + w - 10.0, top + 7.0 + 11.0 * i as f64, left + w, top + 7.0 + 11.0 * i as f64, color);
        }
    }
}

fn grid_height(panels: usize) -> f64 {
    panels as f64 * (PANEL_H + 8.0) + 8.0
}

/// Rendered files, written only once every figure has been built.
#[derive(Default)]
pub struct Figures {
    files: Vec<(String, String)>,
}

impl Figures {
    fn add(&mut self, name: impl Into<String>, body: String) {
        self.files.push((name.into(), body));
    }

    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.files
            .iter()
            .map(|(name, body)| {
                let p = dir.join(name);
                write_atomic(&p, body.as_bytes())?;
                Ok(p)
            })
            .collect()
    }
}

/// Loss curves for the generator terms and the critic terms, one panel per
/// term, plus the data as CSV.
pub fn metrics_figures(reports: &[StepReport], attention: &[AttentionRecord]) -> Result<Figures> {
    if reports.is_empty() {
        return Err(Error::NoData);
    }
    let mut cols: BTreeMap<String, BTreeMap<u64, f64>> = BTreeMap::new();
    for r in reports {
        cols.entry("total".into()).or_default().insert(r.step, r.g.total);
        for (k, v) in &r.g.terms {
            cols.entry(k.clone()).or_default().insert(r.step, *v);
        }
        for (k, v) in r.d.iter().flat_map(|d| d.terms.iter()) {
            cols.entry(format!("critic.{k}")).or_default().insert(r.step, *v);
        }
    }
    let steps: BTreeSet<u64> = reports.iter().map(|r| r.step).collect();
    let mut csv = String::from("step");
    for k in cols.keys() {
        csv += &format!(",{k}");
    }
    csv.push('\n');
    for s in &steps {
        csv += &s.to_string();
        for c in cols.values() {
            csv.push(',');
            if let Some(v) = c.get(s) {
                csv += &v.to_string();
            }
        }
        csv.push('\n');
    }
    let mut svg = Svg::new(PANEL_W + 80.0, grid_height(cols.len()));
    for (i, (k, c)) in cols.iter().enumerate() {
        let s: Vec<(f64, f64)> = c.iter().map(|(x, y)| (*x as f64, *y)).collect();
        panel(&mut svg, 0.0, 8.0 + i as f64 * (PANEL_H + 8.0), k, &[(k.clone(), s)], false);
    }
    let mut f = Figures::default();
    f.add("loss_curves.csv", csv);
    f.add("loss_curves.svg", svg.finish());
    attention_figures(attention, &mut f);
    Ok(f)
}

fn attention_figures(records: &[AttentionRecord], f: &mut Figures) {
    let mut by_res: BTreeMap<usize, Vec<&AttentionRecord>> = BTreeMap::new();
    for r in records {
        by_res.entry(r.resolution).or_default().push(r);
    }
    for (res, mut recs) in by_res {
        recs.sort_by_key(|r| r.step);
        let mut csv = String::from("step,values\n");
        for r in &recs {
            let v: Vec<String> = r.values.iter().map(|x| x.to_string()).collect();
            csv += &format!("{},{}\n", r.step, v.join(" "));
        }
        let shown = &recs[recs.len().saturating_sub(MAX_ATTENTION_DUMPS)..];
        let cell = (128.0 / res as f64).max(1.0);
        let side = cell * res as f64;
        let mut svg = Svg::new(shown.len() as f64 * (side + 12.0) + 12.0, side + 40.0);
        for (i, r) in shown.iter().enumerate() {
            let ox = 12.0 + i as f64 * (side + 12.0);
            svg.text(ox + side / 2.0, 16.0, 10, "middle", &format!("step {}", r.step));
            for (p, v) in r.values.iter().enumerate() {
                let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                svg.rect(
                    ox + (p % res) as f64 * cell,
                    24.0 + (p / res) as f64 * cell,
                    cell,
                    cell,
                    &format!("#{g:02x}{g:02x}{g:02x}"),
                );
            }
        }
        f.add(format!("attention_{res}.csv"), csv);
        f.add(format!("attention_{res}.svg"), svg.finish());
    }
}

/// EER per block, margins, and per-block distance histograms.
pub fn calibration_figures(report: &CalibrationReport) -> Result<Figures> {
    if report.blocks.is_empty() {
        return Err(Error::NoData);
    }
    let mut csv = String::from("block,eer,c2t_mean,c2s_mean,neg_mean,margin\n");
    for b in &report.blocks {
        let m = report.margins.get(&b.block_index).map(|m| m.to_string()).unwrap_or_default();
        csv += &format!("{},{},{},{},{},{m}\n", b.block_index, b.eer, b.c2t_mean, b.c2s_mean, b.neg_mean);
    }
    let eer: Vec<(f64, f64)> = report.eer_curve().iter().map(|&(b, e)| (b as f64, e)).collect();
    let mut svg = Svg::new(PANEL_W + 80.0, grid_height(1));
    panel(&mut svg, 0.0, 8.0, "EER (c2t vs c2s) per block", &[("eer".into(), eer)], true);
    let mut f = Figures::default();
    f.add("eer.csv", csv);
    f.add("eer.svg", svg.finish());

    let (lo, hi) = report.histogram_range;
    let mut hcsv = String::from("block,distribution,counts\n");
    let mut hsvg = Svg::new(PANEL_W + 80.0, grid_height(report.blocks.len()));
    for (i, b) in report.blocks.iter().enumerate() {
        let mut series = Vec::new();
        for (name, h) in [("c2t", &b.c2t_hist), ("c2s", &b.c2s_hist), ("neg", &b.neg_hist)] {
            let counts: Vec<String> = h.iter().map(|c| c.to_string()).collect();
            hcsv += &format!("{},{name},{}\n", b.block_index, counts.join(" "));
            let width = (hi - lo) / h.len().max(1) as f64;
            let pts = h
                .iter()
                .enumerate()
                .flat_map(|(k, &c)| {
                    let x = lo + k as f64 * width;
                    [(x, c as f64), (x + width, c as f64)]
                })
                .collect();
            series.push((name.to_string(), pts));
        }
        let title = format!("block {} distances", b.block_index);
        panel(&mut hsvg, 0.0, 8.0 + i as f64 * (PANEL_H + 8.0), &title, &series, false);
    }
    f.add("histograms.csv", hcsv);
    f.add("histograms.svg", hsvg.finish());
    Ok(f)
}

fn read_attention(path: &Path) -> Result<Vec<AttentionRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Parse(format!("{}: {e}", path.display()))))
        .collect()
}

/// Builds figures for a training directory, a metrics log, or a
/// calibration report (`.json`).
pub fn figures_for(input: &Path) -> Result<Figures> {
    if !input.exists() {
        return Err(Error::io(input, std::io::ErrorKind::NotFound.into()));
    }
    let (metrics, attention) = if input.is_dir() {
        (input.join(METRICS_FILE), input.join(ATTENTION_FILE))
    } else if input.extension().is_some_and(|e| e == "json") {
        return calibration_figures(&CalibrationReport::load(input)?);
    } else {
        (input.to_path_buf(), input.with_file_name(ATTENTION_FILE))
    };
    metrics_figures(&read_metrics(&metrics)?, &read_attention(&attention)?)
}
