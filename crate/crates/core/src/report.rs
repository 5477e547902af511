//! Markdown tables from result CSVs and static line charts.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use walkdir::WalkDir;

use crate::experiment::csv_err;
use crate::Result;

const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [148, 103, 189],
    [255, 127, 14],
    [23, 190, 207],
];

/// A named polyline of `(x, y)` points.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// One Markdown table from a CSV file with a header row.
pub fn csv_to_markdown(path: &Path) -> Result<String> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    let mut md = String::new();
    let _ = writeln!(md, "| {} |", header.join(" | "));
    let _ = writeln!(md, "|{}|", vec!["---"; header.len()].join("|"));
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let cells: Vec<&str> = rec.iter().collect();
        let _ = writeln!(md, "| {} |", cells.join(" | "));
    }
    Ok(md)
}

/// Every CSV below `dir` (sorted by path) as a Markdown section; the
/// result is also written to `dir/report.md`.
pub fn build_report(dir: &Path) -> Result<String> {
    let mut files: Vec<_> = WalkDir::new(dir)
        .sort_by_file_name()
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file() && e.path().extension().is_some_and(|x| x == "csv"))
        .map(|e| e.into_path())
        .collect();
    files.sort();
    let mut md = String::from("# Results\n");
    for f in &files {
        let rel = f.strip_prefix(dir).unwrap_or(f);
        let _ = write!(md, "\n## {}\n\n{}", rel.display(), csv_to_markdown(f)?);
    }
    fs::write(dir.join("report.md"), &md)?;
    Ok(md)
}

struct Frame {
    width: f64,
    height: f64,
    left: f64,
    right: f64,
    top: f64,
    bottom: f64,
    x: (f64, f64),
    y: (f64, f64),
    log_x: bool,
}

impl Frame {
    fn new(series: &[Series], width: u32, height: u32, log_x: bool) -> Self {
        let tx = |v: f64| if log_x { v.max(f64::MIN_POSITIVE).log2() } else { v };
        let pts = series.iter().flat_map(|s| s.points.iter());
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in pts {
            x0 = x0.min(tx(x));
            x1 = x1.max(tx(x));
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if !x0.is_finite() {
            (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
        }
        if x1 - x0 < 1e-12 {
            (x0, x1) = (x0 - 0.5, x1 + 0.5);
        }
        if y1 - y0 < 1e-12 {
            (y0, y1) = (y0 - 0.5, y1 + 0.5);
        }
        let pad = 0.05 * (y1 - y0);
        Frame {
            width: width as f64,
            height: height as f64,
            left: 64.0,
            right: 150.0,
            top: 40.0,
            bottom: 50.0,
            x: (x0, x1),
            y: (y0 - pad, y1 + pad),
            log_x,
        }
    }

    fn px(&self, x: f64) -> f64 {
        let x = if self.log_x { x.max(f64::MIN_POSITIVE).log2() } else { x };
        self.left + (x - self.x.0) / (self.x.1 - self.x.0) * (self.width - self.left - self.right)
    }

    fn py(&self, y: f64) -> f64 {
        self.height - self.bottom - (y - self.y.0) / (self.y.1 - self.y.0) * (self.height - self.top - self.bottom)
    }

    fn y_ticks(&self) -> Vec<f64> {
        (0..=4).map(|i| self.y.0 + (self.y.1 - self.y.0) * i as f64 / 4.0).collect()
    }
}

fn x_ticks(series: &[Series]) -> Vec<f64> {
    let mut xs: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    xs
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// SVG line chart with axes, tick labels and a legend. `log_x` spaces the
/// x axis by powers of two.
pub fn line_chart_svg(title: &str, x_label: &str, y_label: &str, series: &[Series], log_x: bool) -> String {
    let (w, h) = (640u32, 400u32);
    let f = Frame::new(series, w, h, log_x);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, w / 2, escape(title));
    let (xa, xb, yb) = (f.left, f.width - f.right, f.height - f.bottom);
    for t in f.y_ticks() {
        let y = f.py(t);
        let _ = writeln!(s, r##"<line x1="{xa:.1}" y1="{y:.1}" x2="{xb:.1}" y2="{y:.1}" stroke="#ddd"/>"##);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{t:.3}</text>"#, xa - 6.0, y + 4.0);
    }
    for t in x_ticks(series) {
        let x = f.px(t);
        let _ = writeln!(s, r##"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{yb:.1}" stroke="#eee"/>"##, f.top);
        let _ = writeln!(s, r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{t}</text>"#, yb + 16.0);
    }
    let _ = writeln!(s, r#"<line x1="{xa:.1}" y1="{yb:.1}" x2="{xb:.1}" y2="{yb:.1}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{xa:.1}" y1="{:.1}" x2="{xa:.1}" y2="{yb:.1}" stroke="black"/>"#, f.top);
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, (xa + xb) / 2.0, f.height - 12.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        (f.top + yb) / 2.0,
        (f.top + yb) / 2.0,
        escape(y_label)
    );
    for (i, se) in series.iter().enumerate() {
        let [r, g, b] = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = se.points.iter().map(|&(x, y)| format!("{:.1},{:.1}", f.px(x), f.py(y))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="rgb({r},{g},{b})" stroke-width="2" points="{}"/>"#, pts.join(" "));
        for &(x, y) in &se.points {
            let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="rgb({r},{g},{b})"/>"#, f.px(x), f.py(y));
        }
        let ly = f.top + 10.0 + 18.0 * i as f64;
        let _ = writeln!(s, r#"<rect x="{:.1}" y="{:.1}" width="12" height="12" fill="rgb({r},{g},{b})"/>"#, xb + 12.0, ly - 10.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{ly:.1}">{}</text>"#, xb + 30.0, escape(&se.name));
    }
    s.push_str("</svg>\n");
    s
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(c));
    }
}

fn line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), c: [u8; 3], thick: i64) {
    let steps = (x1 - x0).abs().max((y1 - y0).abs()).ceil().max(1.0) as i64;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let (x, y) = ((x0 + (x1 - x0) * t).round() as i64, (y0 + (y1 - y0) * t).round() as i64);
        for dx in 0..thick {
            for dy in 0..thick {
                put(img, x + dx - thick / 2, y + dy - thick / 2, c);
            }
        }
    }
}

fn fill(img: &mut RgbImage, cx: f64, cy: f64, half: i64, c: [u8; 3]) {
    let (cx, cy) = (cx.round() as i64, cy.round() as i64);
    for dx in -half..=half {
        for dy in -half..=half {
            put(img, cx + dx, cy + dy, c);
        }
    }
}

/// Raster version of [`line_chart_svg`] without text: gridlines sit at
/// the same ticks and the legend shows one swatch per series, top to
/// bottom in series order.
pub fn line_chart_png(series: &[Series], width: u32, height: u32, log_x: bool) -> RgbImage {
    let f = Frame::new(series, width, height, log_x);
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let (xa, xb, yb) = (f.left, f.width - f.right, f.height - f.bottom);
    for t in f.y_ticks() {
        line(&mut img, (xa, f.py(t)), (xb, f.py(t)), [221, 221, 221], 1);
    }
    for t in x_ticks(series) {
        line(&mut img, (f.px(t), f.top), (f.px(t), yb), [238, 238, 238], 1);
    }
    line(&mut img, (xa, yb), (xb, yb), [0, 0, 0], 2);
    line(&mut img, (xa, f.top), (xa, yb), [0, 0, 0], 2);
    for (i, se) in series.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        for w in se.points.windows(2) {
            line(&mut img, (f.px(w[0].0), f.py(w[0].1)), (f.px(w[1].0), f.py(w[1].1)), c, 2);
        }
        for &(x, y) in &se.points {
            fill(&mut img, f.px(x), f.py(y), 3, c);
        }
        fill(&mut img, xb + 18.0, f.top + 4.0 + 18.0 * i as f64, 6, c);
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn markdown_mirrors_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        fs::write(&p, "dataset,96,48\nsynthetic,0.9,0.8\n").unwrap();
        let md = csv_to_markdown(&p).unwrap();
        assert_eq!(md, "| dataset | 96 | 48 |\n|---|---|---|\n| synthetic | 0.9 | 0.8 |\n");
        let report = build_report(dir.path()).unwrap();
        assert!(report.contains("## t.csv"));
        assert!(dir.path().join("report.md").exists());
    }

    #[test]
    fn charts_draw_series() {
        let s = vec![Series {
            name: "a<b".into(),
            points: vec![(6.0, 0.5), (96.0, 0.9)],
        }];
        let svg = line_chart_svg("t", "x", "y", &s, true);
        assert!(svg.contains("<polyline") && svg.contains("a&lt;b"));
        let png = line_chart_png(&s, 320, 200, true);
        assert_eq!(png.dimensions(), (320, 200));
        assert!(png.pixels().any(|p| p.0 == PALETTE[0]));
        let flat = line_chart_png(&[], 100, 80, false);
        assert_eq!(flat.dimensions(), (100, 80));
    }
}
