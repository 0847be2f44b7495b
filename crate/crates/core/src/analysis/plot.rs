//! Minimal static SVG charts. Output is a pure function of the inputs.

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 440.0;
const MARGIN: (f64, f64, f64, f64) = (70.0, 20.0, 40.0, 60.0); // left, right, top, bottom
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn header(title: &str) -> String {
    header_sized(title, W, H)
}

fn header_sized(title: &str, w: f64, h: f64) -> String {
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    let _ = writeln!(s, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    let _ = writeln!(s, "<text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{}</text>", w / 2.0, escape(title));
    s
}

/// Linear map from data range to pixel range.
#[derive(Clone, Copy)]
struct Axis {
    lo: f64,
    hi: f64,
    p0: f64,
    p1: f64,
    log: bool,
}

impl Axis {
    fn new(values: impl Iterator<Item = f64>, p0: f64, p1: f64, log: bool) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values.filter(|v| v.is_finite() && (!log || *v > 0.0)) {
            let v = if log { v.log10() } else { v };
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if hi - lo < 1e-12 {
            lo -= 0.5;
            hi += 0.5;
        }
        let pad = 0.05 * (hi - lo);
        Axis { lo: lo - pad, hi: hi + pad, p0, p1, log }
    }

    fn map(&self, v: f64) -> f64 {
        let v = if self.log { v.log10() } else { v };
        self.p0 + (v - self.lo) / (self.hi - self.lo) * (self.p1 - self.p0)
    }

    fn ticks(&self) -> Vec<(f64, String)> {
        (0..=4)
            .map(|i| {
                let t = self.lo + (self.hi - self.lo) * i as f64 / 4.0;
                let label = if self.log { format!("{:.3e}", 10f64.powf(t)) } else { format!("{t:.3}") };
                (self.p0 + (t - self.lo) / (self.hi - self.lo) * (self.p1 - self.p0), label)
            })
            .collect()
    }
}

fn frame(s: &mut String, x: &Axis, y: &Axis, xlabel: &str, ylabel: &str) {
    let (l, r, t, b) = MARGIN;
    let _ = writeln!(s, "<rect x=\"{l}\" y=\"{t}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>", W - l - r, H - t - b);
    for (px, label) in x.ticks() {
        let _ = writeln!(s, "<text x=\"{px:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{label}</text>", H - b + 16.0);
    }
    for (py, label) in y.ticks() {
        let _ = writeln!(s, "<text x=\"{:.2}\" y=\"{py:.2}\" text-anchor=\"end\">{label}</text>", l - 4.0);
    }
    let _ = writeln!(s, "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>", (l + W - r) / 2.0, H - 12.0, escape(xlabel));
    let _ = writeln!(
        s,
        "<text x=\"14\" y=\"{:.2}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {:.2})\">{}</text>",
        H / 2.0,
        H / 2.0,
        escape(ylabel)
    );
}

fn axes(xs: &[f64], ys: &[f64], xlog: bool, ylog: bool) -> (Axis, Axis) {
    let (l, r, t, b) = MARGIN;
    (
        Axis::new(xs.iter().copied(), l, W - r, xlog),
        Axis::new(ys.iter().copied(), H - b, t, ylog),
    )
}

pub struct Series<'a> {
    pub label: &'a str,
    pub points: &'a [(f64, f64)],
}

fn legend(s: &mut String, labels: &[&str]) {
    for (i, label) in labels.iter().enumerate() {
        let y = MARGIN.2 + 14.0 + 16.0 * i as f64;
        let x = W - MARGIN.1 - 150.0;
        let _ = writeln!(s, "<rect x=\"{x}\" y=\"{:.2}\" width=\"10\" height=\"10\" fill=\"{}\"/>", y - 9.0, PALETTE[i % PALETTE.len()]);
        let _ = writeln!(s, "<text x=\"{}\" y=\"{y:.2}\">{}</text>", x + 14.0, escape(label));
    }
}

fn polyline(s: &mut String, x: &Axis, y: &Axis, pts: &[(f64, f64)], color: &str, dashed: bool) {
    let path: Vec<String> = pts
        .iter()
        .filter(|(a, b)| a.is_finite() && b.is_finite())
        .map(|&(a, b)| format!("{:.2},{:.2}", x.map(a), y.map(b)))
        .collect();
    let dash = if dashed { " stroke-dasharray=\"6 4\"" } else { "" };
    let _ = writeln!(s, "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"{dash}/>", path.join(" "));
}

fn markers(s: &mut String, x: &Axis, y: &Axis, pts: &[(f64, f64)], color: &str) {
    for &(a, b) in pts.iter().filter(|(a, b)| a.is_finite() && b.is_finite()) {
        let _ = writeln!(s, "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"4\" fill=\"{color}\"/>", x.map(a), y.map(b));
    }
}

/// Log-log scatter of observations with a dense fitted curve overlaid.
pub fn fit_plot(title: &str, observed: &[(f64, f64)], curve: &[(f64, f64)], xlabel: &str, ylabel: &str) -> String {
    let xs: Vec<f64> = observed.iter().chain(curve).map(|p| p.0).collect();
    let ys: Vec<f64> = observed.iter().chain(curve).map(|p| p.1).collect();
    let (x, y) = axes(&xs, &ys, true, true);
    let mut s = header(title);
    frame(&mut s, &x, &y, xlabel, ylabel);
    polyline(&mut s, &x, &y, curve, PALETTE[1], true);
    markers(&mut s, &x, &y, observed, PALETTE[0]);
    legend(&mut s, &["observed", "fit"]);
    s.push_str("</svg>\n");
    s
}

/// One line per series.
pub fn line_plot(title: &str, series: &[Series], xlabel: &str, ylabel: &str, xlog: bool) -> String {
    let xs: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
    let ys: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.1)).collect();
    let (x, y) = axes(&xs, &ys, xlog, false);
    let mut s = header(title);
    frame(&mut s, &x, &y, xlabel, ylabel);
    for (i, ser) in series.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        polyline(&mut s, &x, &y, ser.points, c, false);
        markers(&mut s, &x, &y, ser.points, c);
    }
    legend(&mut s, &series.iter().map(|s| s.label).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

/// Labelled scatter plot.
pub fn scatter_plot(title: &str, points: &[(f64, f64)], labels: &[String], xlabel: &str, ylabel: &str) -> String {
    let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    let (x, y) = axes(&xs, &ys, false, false);
    let mut s = header(title);
    frame(&mut s, &x, &y, xlabel, ylabel);
    markers(&mut s, &x, &y, points, PALETTE[0]);
    for (p, l) in points.iter().zip(labels) {
        let _ = writeln!(s, "<text x=\"{:.2}\" y=\"{:.2}\">{}</text>", x.map(p.0) + 6.0, y.map(p.1) - 6.0, escape(l));
    }
    s.push_str("</svg>\n");
    s
}

/// Grayscale-to-blue heatmap of values in `[0, 1]`, one tick label per row
/// and column.
pub fn heatmap(title: &str, labels: &[String], values: &ndarray::Array2<f64>) -> String {
    let n = labels.len().max(1);
    let (l, t, size) = (110.0, 40.0, 400.0);
    let cell = size / n as f64;
    let mut s = header_sized(title, l + size + 30.0, t + size + 110.0);
    for i in 0..labels.len() {
        for j in 0..labels.len() {
            let v = values[[i, j]].clamp(0.0, 1.0);
            let shade = (255.0 * (1.0 - v)).round() as u8;
            let _ = writeln!(
                s,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{cell:.2}\" height=\"{cell:.2}\" fill=\"rgb({shade},{shade},255)\"><title>{:.4}</title></rect>",
                l + j as f64 * cell,
                t + i as f64 * cell,
                values[[i, j]]
            );
        }
    }
    for (i, label) in labels.iter().enumerate() {
        let c = t + (i as f64 + 0.5) * cell;
        let _ = writeln!(s, "<text class=\"tick-y\" x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>", l - 4.0, c + 4.0, escape(label));
        let cx = l + (i as f64 + 0.5) * cell;
        let _ = writeln!(
            s,
            "<text class=\"tick-x\" x=\"{cx:.2}\" y=\"{:.2}\" text-anchor=\"start\" transform=\"rotate(45 {cx:.2} {:.2})\">{}</text>",
            t + size + 12.0,
            t + size + 12.0,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}
