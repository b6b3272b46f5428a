// SPDX-License-Identifier: MIT OR Apache-2.0

//! SVG figures drawn from the result tables. The CSVs are canonical; the
//! figures only restate them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{ProbeError, Result};
use crate::pipeline::manifest::RunManifest;
use crate::pipeline::tables::{self, producer};

/// Emitted figures plus notices about skipped ones.
#[derive(Debug, Clone, Default)]
pub struct ReportSummary {
    pub figures: Vec<PathBuf>,
    pub notices: Vec<String>,
}

/// A CSV loaded as rows of named string fields.
struct Table {
    rows: Vec<BTreeMap<String, String>>,
}

impl Table {
    fn load(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            rows.push(header.iter().cloned().zip(rec.iter().map(str::to_string)).collect());
        }
        Ok(Self { rows })
    }

    fn models(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r["model"]) {
                out.push(r["model"].clone());
            }
        }
        out
    }
}

fn f(row: &BTreeMap<String, String>, key: &str) -> f64 {
    row.get(key).and_then(|v| v.parse().ok()).unwrap_or(f64::NAN)
}

fn u(row: &BTreeMap<String, String>, key: &str) -> u64 {
    row.get(key).and_then(|v| v.parse().ok()).unwrap_or(0)
}

const PALETTE: [&str; 8] = [
    "#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666",
];

/// Minimal SVG canvas with a plotting frame.
struct Svg {
    w: f64,
    h: f64,
    body: String,
    meta: Vec<(String, String)>,
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
    left: f64,
    top: f64,
    width: f64,
    height: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        self.left + (x - self.x0) / (self.x1 - self.x0).max(1e-12) * self.width
    }

    fn py(&self, y: f64) -> f64 {
        self.top + self.height - (y - self.y0) / (self.y1 - self.y0).max(1e-12) * self.height
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.round() {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

impl Svg {
    fn new(w: f64, h: f64) -> Self {
        Self {
            w,
            h,
            body: String::new(),
            meta: Vec::new(),
        }
    }

    fn text(&mut self, x: f64, y: f64, size: f64, anchor: &str, s: &str) {
        let _ = writeln!(
            self.body,
            r#"<text x="{x:.1}" y="{y:.1}" font-size="{size}" text-anchor="{anchor}" font-family="sans-serif">{}</text>"#,
            esc(s)
        );
    }

    fn title(&mut self, s: &str) {
        let w = self.w;
        self.text(w / 2.0, 20.0, 14.0, "middle", s);
    }

    fn no_data(&mut self, what: &str) {
        let (w, h) = (self.w, self.h);
        self.body.push_str(r#"<g class="no-data">"#);
        self.text(w / 2.0, h / 2.0, 16.0, "middle", &format!("no data: {what}"));
        self.body.push_str("</g>\n");
    }

    /// Axes with ticks; returns the frame mapping data to pixels.
    fn axes(&mut self, x: (f64, f64), y: (f64, f64), xlabel: &str, ylabel: &str, rect: (f64, f64, f64, f64)) -> Frame {
        let (left, top, width, height) = rect;
        let pad = |(a, b): (f64, f64)| {
            if (b - a).abs() < 1e-12 {
                (a - 0.5, b + 0.5)
            } else {
                (a, b)
            }
        };
        let (x0, x1) = pad(x);
        let (y0, y1) = pad(y);
        let fr = Frame {
            x0,
            x1,
            y0,
            y1,
            left,
            top,
            width,
            height,
        };
        let _ = writeln!(
            self.body,
            r##"<rect x="{left:.1}" y="{top:.1}" width="{width:.1}" height="{height:.1}" fill="none" stroke="#333"/>"##
        );
        for i in 0..=4 {
            let xv = x0 + (x1 - x0) * i as f64 / 4.0;
            let yv = y0 + (y1 - y0) * i as f64 / 4.0;
            let (px, py) = (fr.px(xv), fr.py(yv));
            self.text(px, top + height + 14.0, 10.0, "middle", &fmt_tick(xv));
            self.text(left - 4.0, py + 3.0, 10.0, "end", &fmt_tick(yv));
        }
        self.text(left + width / 2.0, top + height + 30.0, 11.0, "middle", xlabel);
        let _ = writeln!(
            self.body,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle" font-family="sans-serif" transform="rotate(-90 {:.1} {:.1})">{}</text>"#,
            left - 36.0,
            top + height / 2.0,
            left - 36.0,
            top + height / 2.0,
            esc(ylabel)
        );
        fr
    }

    fn polyline(&mut self, fr: &Frame, pts: &[(f64, f64)], color: &str, width: f64, label: &str) {
        let pts: Vec<String> = pts
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|(x, y)| format!("{:.2},{:.2}", fr.px(*x), fr.py(*y)))
            .collect();
        if pts.is_empty() {
            return;
        }
        let _ = writeln!(
            self.body,
            r#"<polyline fill="none" stroke="{color}" stroke-width="{width}" points="{}"><title>{}</title></polyline>"#,
            pts.join(" "),
            esc(label)
        );
    }

    fn legend(&mut self, x: f64, y: f64, items: &[(String, &str)]) {
        for (i, (name, color)) in items.iter().enumerate() {
            let yy = y + 14.0 * i as f64;
            let _ = writeln!(
                self.body,
                r#"<rect x="{x:.1}" y="{:.1}" width="10" height="10" fill="{color}"/>"#,
                yy - 9.0
            );
            self.text(x + 14.0, yy, 10.0, "start", name);
        }
    }

    fn finish(self, path: &Path) -> Result<PathBuf> {
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}">"#,
            self.w, self.h, self.w, self.h
        );
        if !self.meta.is_empty() {
            s.push_str("<metadata>");
            for (k, v) in &self.meta {
                let _ = write!(s, r#"<entry key="{}">{}</entry>"#, esc(k), esc(v));
            }
            s.push_str("</metadata>\n");
        }
        s.push_str(r#"<rect width="100%" height="100%" fill="white"/>"#);
        s.push('\n');
        s.push_str(&self.body);
        s.push_str("</svg>\n");
        std::fs::write(path, s).map_err(|e| ProbeError::io(path, e))?;
        Ok(path.to_path_buf())
    }
}

fn log_step(s: u64) -> f64 {
    (s as f64 + 1.0).log10()
}

fn bounds(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in vals.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo > hi {
        (0.0, 1.0)
    } else {
        (lo, hi)
    }
}

fn slug(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "._-".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// R² against log step, one line per hidden layer.
fn r2_figure(t: &Table, model: &str, tracked: Option<usize>, path: &Path) -> Result<PathBuf> {
    let mut svg = Svg::new(640.0, 420.0);
    svg.title(&format!("{model}: layer R² across training"));
    let rows: Vec<_> = t.rows.iter().filter(|r| r["model"] == model).collect();
    if rows.is_empty() {
        svg.no_data("layer_scores.csv has no rows");
        return svg.finish(path);
    }
    let mut by_layer: BTreeMap<u64, Vec<(f64, f64)>> = BTreeMap::new();
    for r in &rows {
        by_layer
            .entry(u(r, "layer"))
            .or_default()
            .push((log_step(u(r, "step")), f(r, "r2")));
    }
    let fr = svg.axes(
        bounds(rows.iter().map(|r| log_step(u(r, "step")))),
        bounds(rows.iter().map(|r| f(r, "r2"))),
        "log10(step + 1)",
        "R²",
        (70.0, 40.0, 440.0, 320.0),
    );
    let mut legend = Vec::new();
    for (i, (layer, pts)) in by_layer.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let width = if tracked == Some(*layer as usize) { 3.0 } else { 1.2 };
        svg.polyline(&fr, pts, color, width, &format!("layer {layer}"));
        let mark = if tracked == Some(*layer as usize) {
            " (tracked)"
        } else {
            ""
        };
        legend.push((format!("layer {layer}{mark}"), color));
    }
    svg.legend(530.0, 60.0, &legend);
    svg.finish(path)
}

/// Cue attention against log step for the heads of one layer.
fn attention_figure(t: &Table, model: &str, layer: usize, path: &Path) -> Result<PathBuf> {
    let mut svg = Svg::new(640.0, 420.0);
    svg.title(&format!("{model}: cue attention, layer {layer} heads"));
    let rows: Vec<_> = t
        .rows
        .iter()
        .filter(|r| r["model"] == model && r["dataset"] == "noun" && u(r, "layer") as usize == layer)
        .collect();
    if rows.is_empty() {
        svg.no_data("no noun attention rows for this layer");
        return svg.finish(path);
    }
    let mut by_head: BTreeMap<u64, Vec<(f64, f64)>> = BTreeMap::new();
    for r in &rows {
        by_head
            .entry(u(r, "head"))
            .or_default()
            .push((log_step(u(r, "step")), f(r, "mean_attention")));
    }
    let fr = svg.axes(
        bounds(rows.iter().map(|r| log_step(u(r, "step")))),
        bounds(rows.iter().map(|r| f(r, "mean_attention"))),
        "log10(step + 1)",
        "attention to cue",
        (70.0, 40.0, 440.0, 320.0),
    );
    let mut legend = Vec::new();
    for (i, (head, pts)) in by_head.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        svg.polyline(&fr, pts, color, 1.8, &format!("({layer},{head})"));
        legend.push((format!("({layer},{head})"), color));
    }
    svg.legend(530.0, 60.0, &legend);
    svg.finish(path)
}

/// Diverging colour for `z` on a domain symmetric about zero.
fn diverging(z: f64, m: f64) -> String {
    let t = if m > 0.0 { (z / m).clamp(-1.0, 1.0) } else { 0.0 };
    let (r, g, b) = if t >= 0.0 {
        (255.0, 255.0 * (1.0 - t), 255.0 * (1.0 - t))
    } else {
        (255.0 * (1.0 + t), 255.0 * (1.0 + t), 255.0)
    };
    format!("#{:02x}{:02x}{:02x}", r.round() as u8, g.round() as u8, b.round() as u8)
}

/// Head × layer heatmap of final-step cue attention, z-scored across heads.
fn heatmap_figure(t: &Table, model: &str, path: &Path) -> Result<PathBuf> {
    let rows: Vec<_> = t
        .rows
        .iter()
        .filter(|r| r["model"] == model && r["dataset"] == "noun")
        .collect();
    let mut svg = Svg::new(560.0, 460.0);
    let Some(final_step) = rows.iter().map(|r| u(r, "step")).max() else {
        svg.title(&format!("{model}: cue attention (z)"));
        svg.meta.push(("domain".into(), "[0,0]".into()));
        svg.no_data("no noun attention rows");
        return svg.finish(path);
    };
    svg.title(&format!("{model}: cue attention z-score at step {final_step}"));
    let cells: Vec<(u64, u64, f64)> = rows
        .iter()
        .filter(|r| u(r, "step") == final_step)
        .map(|r| (u(r, "layer"), u(r, "head"), f(r, "mean_attention")))
        .collect();
    let vals: Vec<f64> = cells.iter().map(|c| c.2).collect();
    let z = crate::stats::zscore(&vals).unwrap_or_else(|_| vec![0.0; vals.len()]);
    let m = z.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    svg.meta.push(("domain".into(), format!("[{},{}]", -m, m)));
    svg.meta.push(("center".into(), "0".into()));
    svg.meta.push(("step".into(), final_step.to_string()));
    let n_layers = cells.iter().map(|c| c.0).max().unwrap_or(1);
    let n_heads = cells.iter().map(|c| c.1).max().unwrap_or(1);
    let (left, top, w, h) = (70.0, 50.0, 380.0, 340.0);
    let cw = w / n_heads as f64;
    let ch = h / n_layers as f64;
    for ((layer, head, raw), zv) in cells.iter().zip(&z) {
        let x = left + (*head as f64 - 1.0) * cw;
        let y = top + (*layer as f64 - 1.0) * ch;
        let _ = writeln!(
            svg.body,
            r#"<rect x="{x:.1}" y="{y:.1}" width="{cw:.1}" height="{ch:.1}" fill="{}" data-z="{zv}"><title>({layer},{head}) z={zv:.2} attention={raw:.3}</title></rect>"#,
            diverging(*zv, m)
        );
    }
    for l in 1..=n_layers {
        svg.text(
            left - 6.0,
            top + (l as f64 - 0.5) * ch + 4.0,
            10.0,
            "end",
            &l.to_string(),
        );
    }
    for hd in 1..=n_heads {
        svg.text(
            left + (hd as f64 - 0.5) * cw,
            top + h + 14.0,
            10.0,
            "middle",
            &hd.to_string(),
        );
    }
    svg.text(left + w / 2.0, top + h + 30.0, 11.0, "middle", "head");
    svg.text(20.0, top + h / 2.0, 11.0, "middle", "layer");
    // colour bar
    for i in 0..=20 {
        let v = -m + 2.0 * m * i as f64 / 20.0;
        let y = top + h - (i as f64 + 1.0) * h / 21.0;
        let _ = writeln!(
            svg.body,
            r#"<rect x="480" y="{y:.1}" width="16" height="{:.1}" fill="{}"/>"#,
            h / 21.0,
            diverging(v, m)
        );
    }
    svg.text(500.0, top + 8.0, 10.0, "start", &format!("{m:.2}"));
    svg.text(500.0, top + h / 2.0, 10.0, "start", "0");
    svg.text(500.0, top + h, 10.0, "start", &format!("{:.2}", -m));
    svg.finish(path)
}

/// Final-step cue attention per head in each stress dataset, plus the
/// 1-back t statistic.
fn stress_figure(heads: &Table, tests: Option<&Table>, model: &str, path: &Path) -> Result<PathBuf> {
    let rows: Vec<_> = heads.rows.iter().filter(|r| r["model"] == model).collect();
    let final_step = rows.iter().map(|r| u(r, "step")).max().unwrap_or(0);
    let datasets = ["noun", "positional", "pos_noun", "pos_verb"];
    let mut panels: Vec<(String, Vec<(String, f64)>)> = datasets
        .iter()
        .map(|d| {
            let vals = rows
                .iter()
                .filter(|r| r["dataset"] == *d && u(r, "step") == final_step)
                .map(|r| (format!("{}.{}", r["layer"], r["head"]), f(r, "mean_attention")))
                .collect();
            (format!("{d} attention"), vals)
        })
        .collect();
    if let Some(t) = tests {
        let vals = t
            .rows
            .iter()
            .filter(|r| r["model"] == model && u(r, "step") == final_step)
            .map(|r| (format!("{}.{}", r["layer"], r["head"]), f(r, "t")))
            .collect();
        panels.push(("1-back t".into(), vals));
    }
    let ph = 150.0;
    let mut svg = Svg::new(720.0, 50.0 + ph * panels.len() as f64);
    svg.title(&format!("{model}: stress tests at step {final_step}"));
    for (i, (name, vals)) in panels.iter().enumerate() {
        let top = 40.0 + ph * i as f64;
        if vals.is_empty() {
            let _ = writeln!(svg.body, r#"<g class="no-data">"#);
            svg.text(360.0, top + ph / 2.0, 12.0, "middle", &format!("no data: {name}"));
            svg.body.push_str("</g>\n");
            continue;
        }
        let (lo, hi) = bounds(vals.iter().map(|v| v.1).chain([0.0]));
        let fr = svg.axes(
            (0.0, vals.len() as f64),
            (lo, hi),
            "",
            name,
            (70.0, top + 10.0, 620.0, ph - 50.0),
        );
        let bw = 620.0 / vals.len() as f64;
        for (k, (label, v)) in vals.iter().enumerate() {
            if !v.is_finite() {
                continue;
            }
            let (y0, y1) = (fr.py(0.0), fr.py(*v));
            let _ = writeln!(
                svg.body,
                r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{}"><title>{label}: {v:.4}</title></rect>"#,
                fr.px(k as f64) + 1.0,
                y0.min(y1),
                (bw - 2.0).max(0.5),
                (y1 - y0).abs(),
                PALETTE[i % PALETTE.len()]
            );
        }
    }
    svg.finish(path)
}

/// Tracked-layer ΔR² against log step, mean over head groups per condition.
fn ablation_figure(t: &Table, model: &str, path: &Path) -> Result<PathBuf> {
    let rows: Vec<_> = t
        .rows
        .iter()
        .filter(|r| r["model"] == model && r["tracked"] == "true")
        .collect();
    let mut svg = Svg::new(640.0, 420.0);
    svg.title(&format!("{model}: ΔR² under Q/K ablation"));
    if rows.is_empty() {
        svg.no_data("ablation_outcomes.csv has no tracked-layer rows");
        return svg.finish(path);
    }
    let mut series: BTreeMap<(String, String), BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
    for r in &rows {
        series
            .entry((r["kind"].clone(), r["condition"].clone()))
            .or_default()
            .entry(u(r, "step"))
            .or_default()
            .push(f(r, "delta_r2"));
    }
    let fr = svg.axes(
        bounds(rows.iter().map(|r| log_step(u(r, "step")))),
        bounds(rows.iter().map(|r| f(r, "delta_r2")).chain([0.0])),
        "log10(step + 1)",
        "ΔR² (intact − ablated)",
        (70.0, 40.0, 400.0, 320.0),
    );
    let mut legend = Vec::new();
    for (i, ((kind, cond), by_step)) in series.iter().enumerate() {
        let pts: Vec<(f64, f64)> = by_step
            .iter()
            .map(|(s, v)| (log_step(*s), v.iter().sum::<f64>() / v.len() as f64))
            .collect();
        let color = PALETTE[i % PALETTE.len()];
        let name = format!("{kind} / {cond}");
        svg.polyline(&fr, &pts, color, 2.0, &name);
        legend.push((name, color));
    }
    svg.legend(490.0, 60.0, &legend);
    svg.finish(path)
}

/// Composite index by rank.
fn composite_figure(t: &Table, model: &str, path: &Path) -> Result<PathBuf> {
    let rows: Vec<_> = t.rows.iter().filter(|r| r["model"] == model).collect();
    let mut svg = Svg::new(720.0, 360.0);
    svg.title(&format!("{model}: composite disambiguation index"));
    if rows.is_empty() {
        svg.no_data("composite.csv has no rows");
        return svg.finish(path);
    }
    let vals: Vec<(String, f64)> = rows
        .iter()
        .map(|r| (format!("{}.{}", r["layer"], r["head"]), f(r, "composite")))
        .collect();
    let (lo, hi) = bounds(vals.iter().map(|v| v.1).chain([0.0]));
    let fr = svg.axes(
        (0.0, vals.len() as f64),
        (lo, hi),
        "heads by rank",
        "composite",
        (70.0, 40.0, 620.0, 270.0),
    );
    let bw = 620.0 / vals.len() as f64;
    for (k, (label, v)) in vals.iter().enumerate() {
        let (y0, y1) = (fr.py(0.0), fr.py(*v));
        let _ = writeln!(
            svg.body,
            r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{}"><title>{label}: {v:.3}</title></rect>"#,
            fr.px(k as f64) + 1.0,
            y0.min(y1),
            (bw - 2.0).max(0.5),
            (y1 - y0).abs(),
            PALETTE[0]
        );
    }
    svg.finish(path)
}

fn load_optional(dir: &Path, name: &str, notices: &mut Vec<String>, figure: &str) -> Result<Option<Table>> {
    let path = dir.join(name);
    if path.is_file() {
        return Table::load(&path).map(Some);
    }
    let analysis = producer(name).map_or("unknown".into(), |a| a.to_string());
    notices.push(format!(
        "{figure} skipped: {name} missing (run the `{analysis}` analysis)"
    ));
    Ok(None)
}

/// Draw every figure the tables in `output_dir` support into `figures/`.
pub fn render_report(output_dir: &Path) -> Result<ReportSummary> {
    let layer_path = output_dir.join(tables::LAYER_SCORES);
    if !layer_path.is_file() {
        return Err(ProbeError::NotFound {
            what: format!(
                "{} (produced by the `{}` analysis)",
                layer_path.display(),
                producer(tables::LAYER_SCORES).expect("known table")
            ),
            nearby: Vec::new(),
        });
    }
    let fig_dir = output_dir.join("figures");
    std::fs::create_dir_all(&fig_dir).map_err(|e| ProbeError::io(&fig_dir, e))?;
    let manifest = RunManifest::load(output_dir)?;
    let mut out = ReportSummary::default();

    let layers = Table::load(&layer_path)?;
    let heads = load_optional(output_dir, tables::HEAD_SCORES, &mut out.notices, "attention figures")?;
    let mut models = layers.models();
    if let Some(h) = &heads {
        for m in h.models() {
            if !models.contains(&m) {
                models.push(m);
            }
        }
    }
    if models.is_empty() {
        let p = r2_figure(&layers, "all models", None, &fig_dir.join("r2_trajectory.svg"))?;
        out.figures.push(p);
        out.notices.push("layer_scores.csv is empty".into());
        return Ok(out);
    }
    let tests = load_optional(output_dir, tables::TESTS, &mut out.notices, "1-back panel")?;
    let ablation = load_optional(
        output_dir,
        tables::ABLATION_OUTCOMES,
        &mut out.notices,
        "ablation figure",
    )?;
    let composite = load_optional(output_dir, tables::COMPOSITE, &mut out.notices, "composite figure")?;

    for model in &models {
        let s = slug(model);
        let tracked = manifest.as_ref().and_then(|m| m.tracked_layers.get(model).copied());
        out.figures.push(r2_figure(
            &layers,
            model,
            tracked,
            &fig_dir.join(format!("{s}_r2.svg")),
        )?);
        if let Some(h) = &heads {
            out.figures
                .push(heatmap_figure(h, model, &fig_dir.join(format!("{s}_heatmap.svg")))?);
            if let Some(layer) = tracked.filter(|l| *l > 0) {
                out.figures.push(attention_figure(
                    h,
                    model,
                    layer,
                    &fig_dir.join(format!("{s}_attention.svg")),
                )?);
            }
            let has_stress = h.rows.iter().any(|r| r["model"] == *model && r["dataset"] != "noun");
            if has_stress || tests.is_some() {
                out.figures.push(stress_figure(
                    h,
                    tests.as_ref(),
                    model,
                    &fig_dir.join(format!("{s}_stress.svg")),
                )?);
            } else {
                out.notices.push(format!(
                    "{model}: stress panels skipped (no stress_positional / stress_pos / stress_1back results)"
                ));
            }
        }
        if let Some(a) = &ablation {
            out.figures
                .push(ablation_figure(a, model, &fig_dir.join(format!("{s}_ablation.svg")))?);
        }
        if let Some(c) = &composite {
            out.figures
                .push(composite_figure(c, model, &fig_dir.join(format!("{s}_composite.svg")))?);
        }
    }
    for n in &out.notices {
        log::info!("{n}");
    }
    Ok(out)
}

/// The `[lo, hi]` colour domain recorded in a heatmap SVG.
pub fn heatmap_domain(svg: &str) -> Option<(f64, f64)> {
    let start = svg.find(r#"<entry key="domain">["#)? + r#"<entry key="domain">["#.len();
    let end = start + svg[start..].find(']')?;
    let (a, b) = svg[start..end].split_once(',')?;
    Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
}
