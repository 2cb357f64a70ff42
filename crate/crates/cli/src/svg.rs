//! Minimal SVG line plots: panels laid out on a grid, linear or log y axis.

use std::fmt::Write;

const PANEL_W: f64 = 460.0;
const PANEL_H: f64 = 320.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 34.0;
const MARGIN_B: f64 = 48.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mark {
    Line,
    Dashed,
    Dots,
}

#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub mark: Mark,
    pub color: Option<&'static str>,
    /// Omit from the legend (used for bundles of rollouts).
    pub hidden: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Panel {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_y: bool,
    pub series: Vec<Series>,
}

impl Panel {
    pub fn new(title: &str, x_label: &str, y_label: &str) -> Self {
        Self {
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            ..Self::default()
        }
    }

    pub fn log_y(mut self, on: bool) -> Self {
        self.log_y = on;
        self
    }

    pub fn add(&mut self, name: &str, points: Vec<(f64, f64)>, mark: Mark, color: Option<&'static str>) {
        self.series.push(Series {
            name: name.into(),
            points,
            mark,
            color,
            hidden: false,
        });
    }

    /// Adds a series that shares a legend entry with its first sibling.
    pub fn add_quiet(&mut self, points: Vec<(f64, f64)>, mark: Mark, color: &'static str) {
        self.series.push(Series {
            name: String::new(),
            points,
            mark,
            color: Some(color),
            hidden: true,
        });
    }

    fn transform_y(&self, y: f64) -> Option<f64> {
        if !y.is_finite() {
            None
        } else if self.log_y {
            (y > 0.0).then(|| y.log10())
        } else {
            Some(y)
        }
    }

    fn bounds(&self) -> ((f64, f64), (f64, f64)) {
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for s in &self.series {
            for &(x, y) in &s.points {
                let Some(ty) = self.transform_y(y) else { continue };
                if !x.is_finite() {
                    continue;
                }
                x0 = x0.min(x);
                x1 = x1.max(x);
                y0 = y0.min(ty);
                y1 = y1.max(ty);
            }
        }
        if !x0.is_finite() {
            return ((0.0, 1.0), (0.0, 1.0));
        }
        let pad = |a: f64, b: f64| {
            if b - a > 1e-12 * (1.0 + a.abs().max(b.abs())) {
                (a, b)
            } else {
                (a - 0.5, b + 0.5)
            }
        };
        let (x0, x1) = pad(x0, x1);
        let (y0, y1) = pad(y0, y1);
        let dy = 0.04 * (y1 - y0);
        ((x0, x1), (y0 - dy, y1 + dy))
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn nice_ticks(lo: f64, hi: f64, target: usize) -> Vec<f64> {
    let raw = (hi - lo) / target as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() as i64;
    let last = (hi / step).floor() as i64;
    (first..=last).map(|k| k as f64 * step).collect()
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e4 || v.abs() < 1e-2 {
        format!("{v:.0e}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn render_panel(out: &mut String, p: &Panel, ox: f64, oy: f64) {
    let ((x0, x1), (y0, y1)) = p.bounds();
    let (w, h) = (PANEL_W - MARGIN_L - MARGIN_R, PANEL_H - MARGIN_T - MARGIN_B);
    let (left, top) = (ox + MARGIN_L, oy + MARGIN_T);
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * w;
    let sy = |y: f64| top + h - (y - y0) / (y1 - y0) * h;

    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="14" font-weight="bold">{}</text>"#,
        left + w / 2.0,
        oy + 20.0,
        escape(&p.title)
    );
    let _ = writeln!(
        out,
        r##"<rect x="{left:.1}" y="{top:.1}" width="{w:.1}" height="{h:.1}" fill="none" stroke="#333"/>"##
    );
    for t in nice_ticks(x0, x1, 5) {
        let x = sx(t);
        let _ = writeln!(
            out,
            r##"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="#333"/><text x="{x:.1}" y="{:.1}" text-anchor="middle" font-size="11">{}</text>"##,
            top + h,
            top + h + 5.0,
            top + h + 18.0,
            escape(&fmt_tick(t))
        );
    }
    let y_ticks: Vec<(f64, String)> = if p.log_y {
        let (a, b) = (y0.ceil() as i64, y1.floor() as i64);
        let stride = ((b - a) / 6).max(1);
        (a..=b)
            .filter(|k| (k - a) % stride == 0)
            .map(|k| (k as f64, format!("1e{k}")))
            .collect()
    } else {
        nice_ticks(y0, y1, 5).into_iter().map(|t| (t, fmt_tick(t))).collect()
    };
    for (t, label) in y_ticks {
        let y = sy(t);
        let _ = writeln!(
            out,
            r##"<line x1="{:.1}" y1="{y:.1}" x2="{left:.1}" y2="{y:.1}" stroke="#333"/><text x="{:.1}" y="{:.1}" text-anchor="end" font-size="11">{}</text>"##,
            left - 5.0,
            left - 8.0,
            y + 4.0,
            escape(&label)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="12">{}</text>"#,
        left + w / 2.0,
        top + h + 38.0,
        escape(&p.x_label)
    );
    let (lx, ly) = (ox + 16.0, top + h / 2.0);
    let _ = writeln!(
        out,
        r#"<text x="{lx:.1}" y="{ly:.1}" text-anchor="middle" font-size="12" transform="rotate(-90 {lx:.1} {ly:.1})">{}</text>"#,
        escape(&p.y_label)
    );

    let _ = writeln!(
        out,
        r#"<clipPath id="clip{0}_{1}"><rect x="{left:.1}" y="{top:.1}" width="{w:.1}" height="{h:.1}"/></clipPath><g clip-path="url(#clip{0}_{1})">"#,
        ox as i64, oy as i64
    );
    let mut legend = Vec::new();
    for (i, s) in p.series.iter().enumerate() {
        let color = s.color.unwrap_or(PALETTE[i % PALETTE.len()]);
        if !s.hidden && !s.name.is_empty() {
            legend.push((s.name.as_str(), color, s.mark));
        }
        match s.mark {
            Mark::Dots => {
                for &(x, y) in &s.points {
                    if let (true, Some(ty)) = (x.is_finite(), p.transform_y(y)) {
                        let _ = writeln!(
                            out,
                            r#"<circle cx="{:.1}" cy="{:.1}" r="1.6" fill="{color}" fill-opacity="0.6"/>"#,
                            sx(x),
                            sy(ty)
                        );
                    }
                }
            }
            Mark::Line | Mark::Dashed => {
                let dash = if s.mark == Mark::Dashed { r#" stroke-dasharray="6 4""# } else { "" };
                let mut runs: Vec<Vec<(f64, f64)>> = vec![Vec::new()];
                for &(x, y) in &s.points {
                    match (x.is_finite(), p.transform_y(y)) {
                        (true, Some(ty)) => runs.last_mut().expect("nonempty").push((sx(x), sy(ty))),
                        _ => runs.push(Vec::new()),
                    }
                }
                for run in runs.iter().filter(|r| r.len() > 1) {
                    let pts: Vec<String> = run.iter().map(|(a, b)| format!("{a:.1},{b:.1}")).collect();
                    let _ = writeln!(
                        out,
                        r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.4"{dash}/>"#,
                        pts.join(" ")
                    );
                }
            }
        }
    }
    out.push_str("</g>\n");
    for (k, (name, color, mark)) in legend.iter().enumerate() {
        let y = top + 14.0 + 16.0 * k as f64;
        let x = left + w - 150.0;
        let dash = if *mark == Mark::Dashed { r#" stroke-dasharray="6 4""# } else { "" };
        let _ = writeln!(
            out,
            r#"<line x1="{x:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="{color}" stroke-width="2"{dash}/><text x="{:.1}" y="{:.1}" font-size="11">{}</text>"#,
            x + 20.0,
            x + 25.0,
            y + 4.0,
            escape(name)
        );
    }
}

/// Renders `panels` row by row, `cols` per row, as a standalone SVG document.
pub fn render(panels: &[Panel], cols: usize) -> String {
    let cols = cols.max(1);
    let rows = panels.len().div_ceil(cols).max(1);
    let (width, height) = (PANEL_W * cols.min(panels.len().max(1)) as f64, PANEL_H * rows as f64);
    let mut out = String::new();
    let _ = writeln!(out, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (i, p) in panels.iter().enumerate() {
        let (r, c) = (i / cols, i % cols);
        render_panel(&mut out, p, c as f64 * PANEL_W, r as f64 * PANEL_H);
    }
    out.push_str("</svg>\n");
    out
}
