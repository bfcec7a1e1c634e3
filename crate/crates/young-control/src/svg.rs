//! Minimal native SVG line plotter: linear or log-log axes, several series,
//! optional reference-slope overlay. Just enough for the experiment
//! artifacts; not a general plotting library.

use std::fmt::Write as _;

#[derive(Clone, Debug)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axes {
    Linear,
    LogLog,
}

#[derive(Clone, Debug)]
pub struct Plot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub axes: Axes,
    pub series: Vec<Series>,
    /// Optional `(slope, intercept_at_first_x)` reference line drawn dashed;
    /// in log-log mode the slope applies to the log10 coordinates.
    pub reference_slope: Option<(f64, f64)>,
}

const W: f64 = 640.0;
const H: f64 = 440.0;
const ML: f64 = 70.0;
const MR: f64 = 20.0;
const MT: f64 = 40.0;
const MB: f64 = 55.0;

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn transform(axes: Axes, v: f64) -> Option<f64> {
    match axes {
        Axes::Linear => v.is_finite().then_some(v),
        Axes::LogLog => (v > 0.0 && v.is_finite()).then(|| v.log10()),
    }
}

/// Round tick positions covering `[lo, hi]` in the transformed coordinate.
fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    if !(hi > lo) {
        return vec![lo];
    }
    let span = hi - lo;
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| span / s <= 6.0)
        .unwrap_or(mag * 10.0);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + 1e-9 * span {
        out.push(t);
        t += step;
    }
    out
}

impl Plot {
    pub fn render(&self) -> String {
        // Collect transformed points per series.
        let txd: Vec<Vec<(f64, f64)>> = self
            .series
            .iter()
            .map(|s| {
                s.points
                    .iter()
                    .filter_map(|(x, y)| Some((transform(self.axes, *x)?, transform(self.axes, *y)?)))
                    .collect()
            })
            .collect();
        let all: Vec<(f64, f64)> = txd.iter().flatten().copied().collect();
        let (mut x0, mut x1, mut y0, mut y1) = all.iter().fold(
            (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY),
            |(a, b, c, d), (x, y)| (a.min(*x), b.max(*x), c.min(*y), d.max(*y)),
        );
        if !x0.is_finite() {
            (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
        }
        if x1 - x0 < 1e-12 {
            x1 = x0 + 1.0;
        }
        if y1 - y0 < 1e-12 {
            y1 = y0 + 1.0;
        }
        let pad_y = 0.05 * (y1 - y0);
        let (y0, y1) = (y0 - pad_y, y1 + pad_y);
        let px = |x: f64| ML + (x - x0) / (x1 - x0) * (W - ML - MR);
        let py = |y: f64| H - MB - (y - y0) / (y1 - y0) * (H - MT - MB);

        let mut svg = String::new();
        let _ = writeln!(
            svg,
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">"
        );
        let _ = writeln!(svg, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">{}</text>",
            W / 2.0,
            escape(&self.title)
        );
        // Axes box.
        let _ = writeln!(
            svg,
            "<rect x=\"{ML}\" y=\"{MT}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>",
            W - ML - MR,
            H - MT - MB
        );
        // Ticks and labels.
        for t in ticks(x0, x1) {
            let x = px(t);
            let _ = writeln!(svg, "<line x1=\"{x:.1}\" y1=\"{}\" x2=\"{x:.1}\" y2=\"{}\" stroke=\"black\"/>", H - MB, H - MB + 5.0);
            let label = match self.axes {
                Axes::Linear => format!("{t:.3}"),
                Axes::LogLog => format!("1e{t:.1}"),
            };
            let _ = writeln!(
                svg,
                "<text x=\"{x:.1}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">{label}</text>",
                H - MB + 18.0
            );
        }
        for t in ticks(y0, y1) {
            let y = py(t);
            let _ = writeln!(svg, "<line x1=\"{}\" y1=\"{y:.1}\" x2=\"{ML}\" y2=\"{y:.1}\" stroke=\"black\"/>", ML - 5.0);
            let label = match self.axes {
                Axes::Linear => format!("{t:.3}"),
                Axes::LogLog => format!("1e{t:.1}"),
            };
            let _ = writeln!(
                svg,
                "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">{label}</text>",
                ML - 8.0,
                y + 4.0
            );
        }
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">{}</text>",
            (ML + W - MR) / 2.0,
            H - 12.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            svg,
            "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\" transform=\"rotate(-90 16 {})\">{}</text>",
            (MT + H - MB) / 2.0,
            (MT + H - MB) / 2.0,
            escape(&self.y_label)
        );
        // Reference slope.
        if let Some((slope, b)) = self.reference_slope {
            let ya = b;
            let yb = b + slope * (x1 - x0);
            let _ = writeln!(
                svg,
                "<line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"gray\" stroke-dasharray=\"6 4\"/>",
                px(x0),
                py(ya),
                px(x1),
                py(yb)
            );
        }
        // Series.
        for (si, pts) in txd.iter().enumerate() {
            if pts.is_empty() {
                continue;
            }
            let color = COLORS[si % COLORS.len()];
            let mut d = String::new();
            for (i, (x, y)) in pts.iter().enumerate() {
                let _ = write!(d, "{}{:.2},{:.2} ", if i == 0 { "M" } else { "L" }, px(*x), py(*y));
            }
            let _ = writeln!(svg, "<path d=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>", d.trim());
            // Legend entry.
            let ly = MT + 16.0 + 16.0 * si as f64;
            let _ = writeln!(svg, "<line x1=\"{}\" y1=\"{ly:.1}\" x2=\"{}\" y2=\"{ly:.1}\" stroke=\"{color}\" stroke-width=\"2\"/>", W - MR - 140.0, W - MR - 115.0);
            let _ = writeln!(
                svg,
                "<text x=\"{}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\">{}</text>",
                W - MR - 110.0,
                ly + 4.0,
                escape(&self.series[si].label)
            );
        }
        svg.push_str("</svg>\n");
        svg
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
