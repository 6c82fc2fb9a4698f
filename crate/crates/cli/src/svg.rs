//! Minimal static SVG plots. Coordinates are printed with fixed precision
//! so identical data gives identical files.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 56.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

pub struct Series<'a> {
    pub name: &'a str,
    pub points: Vec<(f64, f64)>,
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x.0) / (self.x.1 - self.x.0) * (W - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        H - BOTTOM - (y - self.y.0) / (self.y.1 - self.y.0) * (H - TOP - BOTTOM)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(title: &str) -> String {
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    s += &format!("<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n");
    s += &format!("<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n", W / 2.0, escape(title));
    s
}

fn axes(s: &mut String, f: &Frame, xlabel: &str, ylabel: &str, xticks: &[f64], yticks: &[f64]) {
    let (x0, x1, y0, y1) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
    let _ = writeln!(s, "<path d=\"M{x0:.1},{y0:.1} L{x0:.1},{y1:.1} L{x1:.1},{y1:.1}\" fill=\"none\" stroke=\"black\"/>");
    for &t in xticks {
        let x = f.px(t);
        let _ = writeln!(s, "<line x1=\"{x:.1}\" y1=\"{y1:.1}\" x2=\"{x:.1}\" y2=\"{:.1}\" stroke=\"black\"/>", y1 + 4.0);
        let _ = writeln!(s, "<text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{t:.1}</text>", y1 + 18.0);
    }
    for &t in yticks {
        let y = f.py(t);
        let _ = writeln!(s, "<line x1=\"{:.1}\" y1=\"{y:.1}\" x2=\"{x0:.1}\" y2=\"{y:.1}\" stroke=\"black\"/>", x0 - 4.0);
        let _ = writeln!(s, "<line x1=\"{x0:.1}\" y1=\"{y:.1}\" x2=\"{x1:.1}\" y2=\"{y:.1}\" stroke=\"#dddddd\"/>");
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{t:.2}</text>", x0 - 7.0, y + 4.0);
    }
    let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>", (x0 + x1) / 2.0, H - 14.0, escape(xlabel));
    let _ = writeln!(
        s,
        "<text x=\"16\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1})\">{}</text>",
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(ylabel)
    );
}

fn legend(s: &mut String, names: &[&str]) {
    for (i, name) in names.iter().enumerate() {
        let y = TOP + 10.0 + 20.0 * i as f64;
        let x = W - RIGHT + 14.0;
        let c = COLORS[i % COLORS.len()];
        let _ = writeln!(s, "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"12\" height=\"12\" fill=\"{c}\"/>", y - 9.0);
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{y:.1}\">{}</text>", x + 18.0, escape(name));
    }
}

fn ticks(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect()
}

/// Line plot over `x` in `[0, 1]`; `marker` draws a dashed vertical line.
pub fn line_plot(title: &str, xlabel: &str, ylabel: &str, series: &[Series], marker: Option<f64>) -> String {
    let ys = series.iter().flat_map(|s| s.points.iter().map(|p| p.1));
    let (mut lo, mut hi) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), y| (a.min(y), b.max(y)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    lo = (lo * 10.0).floor() / 10.0;
    hi = (hi * 10.0).ceil() / 10.0;
    if hi <= lo {
        hi = lo + 0.1;
    }
    let f = Frame { x: (0.0, 1.0), y: (lo, hi) };
    let mut s = header(title);
    axes(&mut s, &f, xlabel, ylabel, &ticks(0.0, 1.0, 5), &ticks(lo, hi, 4));
    for (i, ser) in series.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        let d: Vec<String> = ser.points.iter().map(|&(x, y)| format!("{:.1},{:.1}", f.px(x), f.py(y))).collect();
        let _ = writeln!(s, "<polyline points=\"{}\" fill=\"none\" stroke=\"{c}\" stroke-width=\"2\"/>", d.join(" "));
        for &(x, y) in &ser.points {
            let _ = writeln!(s, "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{c}\"/>", f.px(x), f.py(y));
        }
    }
    if let Some(m) = marker {
        let x = f.px(m);
        let _ = writeln!(
            s,
            "<line x1=\"{x:.1}\" y1=\"{TOP:.1}\" x2=\"{x:.1}\" y2=\"{:.1}\" stroke=\"black\" stroke-dasharray=\"5,4\"/>",
            H - BOTTOM
        );
    }
    legend(&mut s, &series.iter().map(|s| s.name).collect::<Vec<_>>());
    s + "</svg>\n"
}

/// Gaussian kernel density on `grid` with Silverman's bandwidth.
fn density(values: &[f64], grid: &[f64]) -> Vec<f64> {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let h = (1.06 * sd * n.powf(-0.2)).max(1e-3);
    let norm = 1.0 / (n * h * (2.0 * std::f64::consts::PI).sqrt());
    grid.iter().map(|&g| values.iter().map(|&v| (-0.5 * ((g - v) / h).powi(2)).exp()).sum::<f64>() * norm).collect()
}

/// Horizontal violins of values in `[-1, 1]`, one per group, with a dashed
/// line at each group's mean.
pub fn violin_plot(title: &str, xlabel: &str, groups: &[(&str, &[f64])]) -> String {
    let f = Frame { x: (-1.0, 1.0), y: (0.0, groups.len().max(1) as f64) };
    let mut s = header(title);
    axes(&mut s, &f, xlabel, "", &ticks(-1.0, 1.0, 4), &[]);
    let grid: Vec<f64> = (0..=200).map(|i| -1.0 + i as f64 / 100.0).collect();
    for (i, (_, values)) in groups.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        let dens = density(values, &grid);
        let peak = dens.iter().cloned().fold(0.0, f64::max).max(1e-12);
        let centre = i as f64 + 0.5;
        let half = 0.42;
        let upper = grid.iter().zip(&dens).map(|(&x, &d)| format!("{:.1},{:.1}", f.px(x), f.py(centre + half * d / peak)));
        let lower = grid.iter().zip(&dens).rev().map(|(&x, &d)| format!("{:.1},{:.1}", f.px(x), f.py(centre - half * d / peak)));
        let pts: Vec<String> = upper.chain(lower).collect();
        let _ = writeln!(s, "<polygon points=\"{}\" fill=\"{c}\" fill-opacity=\"0.45\" stroke=\"{c}\"/>", pts.join(" "));
        if !values.is_empty() {
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            let x = f.px(mean);
            let _ = writeln!(
                s,
                "<line x1=\"{x:.1}\" y1=\"{:.1}\" x2=\"{x:.1}\" y2=\"{:.1}\" stroke=\"black\" stroke-dasharray=\"4,3\"/>",
                f.py(centre + half),
                f.py(centre - half)
            );
            let _ = writeln!(s, "<text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\">mean {mean:.3}</text>", f.py(centre + half) - 3.0);
        }
    }
    legend(&mut s, &groups.iter().map(|g| g.0).collect::<Vec<_>>());
    s + "</svg>\n"
}
