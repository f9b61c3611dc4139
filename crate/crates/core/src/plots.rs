//! Static SVG figures: scatter plots with categorical colors, heatmaps with
//! a diverging palette, histograms, and step-series line charts. No external
//! renderer; the files embed the producing config hash as an XML comment.

use std::fmt::Write;
use std::path::Path;

use crate::error::{Error, Result};

const W: f64 = 640.0;
const H: f64 = 480.0;
const MARGIN: f64 = 48.0;

pub struct ScatterPoint {
    pub x: f64,
    pub y: f64,
    /// Color class index (e.g. a geographic region bucket).
    pub class: usize,
    pub highlighted: bool,
}

const PALETTE: [&str; 10] = [
    "#4c78a8", "#f58518", "#54a24b", "#e45756", "#72b7b2", "#eeca3b", "#b279a2", "#ff9da6",
    "#9d755d", "#bab0ac",
];

fn header(title: &str, tag: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\">\n<!-- {tag} -->\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"14\">{title}</text>\n",
        W / 2.0
    )
}

fn write_svg(path: &Path, body: String) -> Result<()> {
    std::fs::write(path, body + "</svg>\n").map_err(|e| Error::io(path, e))
}

struct Range {
    lo: f64,
    hi: f64,
}

impl Range {
    fn of(values: impl Iterator<Item = f64>) -> Range {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in values {
            if v.is_finite() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        if !lo.is_finite() || lo == hi {
            lo -= 1.0;
            hi = lo + 2.0;
        }
        Range { lo, hi }
    }

    fn to_px(&self, v: f64, flip: bool) -> f64 {
        let t = (v - self.lo) / (self.hi - self.lo);
        let t = if flip { 1.0 - t } else { t };
        MARGIN + t * (if flip { H } else { W } - 2.0 * MARGIN)
    }
}

pub fn scatter(path: &Path, title: &str, tag: &str, points: &[ScatterPoint]) -> Result<()> {
    let mut s = header(title, tag);
    let rx = Range::of(points.iter().map(|p| p.x));
    let ry = Range::of(points.iter().map(|p| p.y));
    for p in points {
        let cx = rx.to_px(p.x, false);
        let cy = ry.to_px(p.y, true);
        let color = PALETTE[p.class % PALETTE.len()];
        let (r, stroke) = if p.highlighted {
            (3.5, " stroke=\"black\" stroke-width=\"0.8\"")
        } else {
            (2.0, "")
        };
        writeln!(
            s,
            "<circle cx=\"{cx:.1}\" cy=\"{cy:.1}\" r=\"{r}\" fill=\"{color}\" \
             fill-opacity=\"0.75\"{stroke}/>"
        )
        .unwrap();
    }
    write_svg(path, s)
}

/// Diverging blue-white-red heatmap; `center` maps to white.
pub fn heatmap(
    path: &Path,
    title: &str,
    tag: &str,
    row_labels: &[String],
    col_labels: &[String],
    values: &[Vec<Option<f64>>],
    center: f64,
) -> Result<()> {
    let mut s = header(title, tag);
    let nr = row_labels.len().max(1);
    let nc = col_labels.len().max(1);
    let cell_w = (W - 2.0 * MARGIN - 60.0) / nc as f64;
    let cell_h = (H - 2.0 * MARGIN - 20.0) / nr as f64;
    let mut maxdev: f64 = 1e-9;
    for row in values {
        for v in row.iter().flatten() {
            maxdev = maxdev.max((v - center).abs());
        }
    }
    for (i, row) in values.iter().enumerate() {
        for (j, cell) in row.iter().enumerate() {
            let x = MARGIN + 60.0 + j as f64 * cell_w;
            let y = MARGIN + i as f64 * cell_h;
            match cell {
                Some(v) => {
                    let t = ((v - center) / maxdev).clamp(-1.0, 1.0);
                    let (r, g, b) = if t >= 0.0 {
                        // towards red
                        (255.0, 255.0 * (1.0 - t), 255.0 * (1.0 - t))
                    } else {
                        (255.0 * (1.0 + t), 255.0 * (1.0 + t), 255.0)
                    };
                    writeln!(
                        s,
                        "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{cell_w:.1}\" height=\"{cell_h:.1}\" \
                         fill=\"rgb({r:.0},{g:.0},{b:.0})\" stroke=\"#ddd\"/>"
                    )
                    .unwrap();
                    writeln!(
                        s,
                        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" \
                         font-family=\"sans-serif\" font-size=\"9\">{v:.2}</text>",
                        x + cell_w / 2.0,
                        y + cell_h / 2.0 + 3.0
                    )
                    .unwrap();
                }
                None => {
                    writeln!(
                        s,
                        "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{cell_w:.1}\" height=\"{cell_h:.1}\" \
                         fill=\"#f4f4f4\" stroke=\"#ddd\"/>"
                    )
                    .unwrap();
                }
            }
        }
    }
    for (i, label) in row_labels.iter().enumerate() {
        writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" font-family=\"sans-serif\" \
             font-size=\"9\">{label}</text>",
            MARGIN + 54.0,
            MARGIN + i as f64 * cell_h + cell_h / 2.0 + 3.0
        )
        .unwrap();
    }
    for (j, label) in col_labels.iter().enumerate() {
        writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
             font-size=\"9\">{label}</text>",
            MARGIN + 60.0 + j as f64 * cell_w + cell_w / 2.0,
            MARGIN - 6.0
        )
        .unwrap();
    }
    write_svg(path, s)
}

/// Overlaid histograms (one series per label) with automatic binning.
pub fn histogram(
    path: &Path,
    title: &str,
    tag: &str,
    series: &[(String, Vec<f64>)],
    bins: usize,
) -> Result<()> {
    let mut s = header(title, tag);
    let all = Range::of(series.iter().flat_map(|(_, v)| v.iter().copied()));
    let bins = bins.max(1);
    let bw = (all.hi - all.lo) / bins as f64;
    let mut max_count = 1usize;
    let counts: Vec<Vec<usize>> = series
        .iter()
        .map(|(_, vals)| {
            let mut c = vec![0usize; bins];
            for &v in vals {
                let b = (((v - all.lo) / bw) as usize).min(bins - 1);
                c[b] += 1;
            }
            max_count = max_count.max(c.iter().copied().max().unwrap_or(0));
            c
        })
        .collect();
    let plot_w = W - 2.0 * MARGIN;
    let plot_h = H - 2.0 * MARGIN;
    for (si, c) in counts.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        for (b, &n) in c.iter().enumerate() {
            if n == 0 {
                continue;
            }
            let x = MARGIN + b as f64 / bins as f64 * plot_w;
            let h = n as f64 / max_count as f64 * plot_h;
            writeln!(
                s,
                "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{h:.1}\" \
                 fill=\"{color}\" fill-opacity=\"0.45\"/>",
                H - MARGIN - h,
                plot_w / bins as f64
            )
            .unwrap();
        }
        writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" \
             fill=\"{color}\">{}</text>",
            W - MARGIN - 140.0,
            MARGIN + 14.0 * (si as f64 + 1.0),
            series[si].0
        )
        .unwrap();
    }
    writeln!(
        s,
        "<text x=\"{MARGIN}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"10\">{:.1}</text>\
         <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" font-family=\"sans-serif\" \
         font-size=\"10\">{:.1}</text>",
        H - MARGIN + 14.0,
        all.lo,
        W - MARGIN,
        H - MARGIN + 14.0,
        all.hi
    )
    .unwrap();
    write_svg(path, s)
}

/// Line chart of (step, value) series on a log-x axis.
pub fn step_series(
    path: &Path,
    title: &str,
    tag: &str,
    series: &[(String, Vec<(f64, f64)>)],
) -> Result<()> {
    let mut s = header(title, tag);
    let logx = |v: f64| v.max(1.0).ln();
    let rx = Range::of(series.iter().flat_map(|(_, v)| v.iter().map(|p| logx(p.0))));
    let ry = Range::of(series.iter().flat_map(|(_, v)| v.iter().map(|p| p.1)));
    for (si, (label, pts)) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let mut d = String::new();
        for (i, (x, y)) in pts.iter().enumerate() {
            let px = rx.to_px(logx(*x), false);
            let py = ry.to_px(*y, true);
            write!(d, "{}{px:.1},{py:.1} ", if i == 0 { "M" } else { "L" }).unwrap();
        }
        writeln!(
            s,
            "<path d=\"{d}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>"
        )
        .unwrap();
        writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" \
             fill=\"{color}\">{label}</text>",
            W - MARGIN - 140.0,
            MARGIN + 14.0 * (si as f64 + 1.0)
        )
        .unwrap();
    }
    write_svg(path, s)
}
