//! CSV, SVG and JSON artifacts.

use std::fmt::Write as _;
use std::io;
use std::path::Path;

use serde::Serialize;

use crate::extinction::ExtinctionVector;
use crate::fixedpoints::ScanGrid;
use crate::model::TypeId;

/// Formats `v` in plain decimal with 17 significant digits.
///
/// Magnitudes outside `[1e-5, 1e17)` fall back to scientific notation.
pub fn fmt_sig17(v: f64) -> String {
    if v.is_nan() {
        return "NaN".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.16e}");
    let exp: i32 = sci[sci.find('e').expect("exponent") + 1..]
        .parse()
        .expect("integer exponent");
    if (-5..17).contains(&exp) {
        format!("{:.*}", (16 - exp) as usize, v)
    } else {
        sci
    }
}

/// A CSV table built row by row; fields are written verbatim.
#[derive(Clone, Debug, Default)]
pub struct Csv {
    text: String,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        let mut csv = Self::default();
        csv.row(header.iter().map(|s| s.to_string()));
        csv
    }

    pub fn row(&mut self, fields: impl IntoIterator<Item = String>) {
        let line: Vec<String> = fields.into_iter().collect();
        self.text.push_str(&line.join(","));
        self.text.push('\n');
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn write(&self, path: &Path) -> io::Result<()> {
        std::fs::write(path, &self.text)
    }
}

/// Columns `level,phase,value` on levels `0..=levels`.
pub fn extinction_csv(v: &ExtinctionVector, levels: usize) -> Csv {
    let mut csv = Csv::new(&["level", "phase", "value"]);
    for (idx, &value) in v.head(levels).iter().enumerate() {
        let t = TypeId::from_index(idx, v.d);
        csv.row([t.level.to_string(), t.phase.to_string(), fmt_sig17(value)]);
    }
    csv
}

pub fn write_json(path: &Path, value: &impl Serialize) -> io::Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(io::Error::other)?;
    text.push('\n');
    std::fs::write(path, text)
}

const SIZE: f64 = 512.0;
const PAD: f64 = 40.0;

fn svg_open(out: &mut String) {
    let full = SIZE + 2.0 * PAD;
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{full}" height="{full}" viewBox="0 0 {full} {full}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        out,
        r##"<rect x="{PAD}" y="{PAD}" width="{SIZE}" height="{SIZE}" fill="white" stroke="#444"/>"##
    );
}

/// Member cells of the scan in grey and marked points in red.
pub fn scan_svg(grid: &ScanGrid) -> String {
    let mut out = String::new();
    svg_open(&mut out);
    let cell = SIZE * grid.h;
    let px = |s: f64| PAD + s * SIZE;
    let py = |s: f64| PAD + SIZE - s * SIZE;
    for i1 in 0..grid.n {
        for i2 in 0..grid.n {
            if grid.member_at(i1, i2) {
                let (cx, cy) = (px(grid.coord(i1)), py(grid.coord(i2)));
                let (x0, x1) = (
                    (cx - cell / 2.0).max(PAD),
                    (cx + cell / 2.0).min(PAD + SIZE),
                );
                let (y0, y1) = (
                    (cy - cell / 2.0).max(PAD),
                    (cy + cell / 2.0).min(PAD + SIZE),
                );
                let _ = writeln!(
                    out,
                    r##"<rect x="{x0:.3}" y="{y0:.3}" width="{:.3}" height="{:.3}" fill="#999"/>"##,
                    x1 - x0,
                    y1 - y0
                );
            }
        }
    }
    for m in &grid.marked {
        let (x, y) = (px(m.s1), py(m.s2));
        let _ = writeln!(
            out,
            r##"<circle cx="{x:.3}" cy="{y:.3}" r="3" fill="#c00"/>"##
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.3}" y="{:.3}">{}</text>"#,
            x + 5.0,
            y - 5.0,
            escape(&m.label)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}">s1</text>"#,
        PAD + SIZE / 2.0,
        PAD + SIZE + 25.0
    );
    let _ = writeln!(out, r#"<text x="10" y="{}">s2</text>"#, PAD + SIZE / 2.0);
    out.push_str("</svg>\n");
    out
}

/// One polyline per series over a shared x axis; NaN points are skipped.
pub fn sweep_svg(xs: &[f64], series: &[(String, Vec<f64>)]) -> String {
    const COLOURS: [&str; 6] = [
        "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
    ];
    let mut out = String::new();
    svg_open(&mut out);
    let finite = |v: &f64| v.is_finite();
    let (x_lo, x_hi) = bounds(xs.iter().copied().filter(finite));
    let (y_lo, y_hi) = bounds(
        series
            .iter()
            .flat_map(|(_, v)| v.iter().copied().filter(finite)),
    );
    let px = |x: f64| PAD + (x - x_lo) / (x_hi - x_lo) * SIZE;
    let py = |y: f64| PAD + SIZE - (y - y_lo) / (y_hi - y_lo) * SIZE;
    for (n, (label, values)) in series.iter().enumerate() {
        let colour = COLOURS[n % COLOURS.len()];
        let points: Vec<String> = xs
            .iter()
            .zip(values)
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|(&x, &y)| format!("{:.3},{:.3}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{}"/>"#,
            points.join(" ")
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" fill="{colour}">{}</text>"#,
            PAD + 8.0,
            PAD + 14.0 * (n + 1) as f64,
            escape(label)
        );
    }
    for (v, x, y, anchor) in [
        (x_lo, PAD, PAD + SIZE + 15.0, "start"),
        (x_hi, PAD + SIZE, PAD + SIZE + 15.0, "end"),
    ] {
        let _ = writeln!(
            out,
            r#"<text x="{x}" y="{y}" text-anchor="{anchor}">{v:.4}</text>"#
        );
    }
    for (v, y) in [(y_lo, PAD + SIZE), (y_hi, PAD + 10.0)] {
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{y}" text-anchor="end">{v:.4}</text>"#,
            PAD - 4.0
        );
    }
    out.push_str("</svg>\n");
    out
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
        (a.min(v), b.max(v))
    });
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}
