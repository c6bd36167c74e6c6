//! Plain SVG figures. Output is a pure function of the inputs: coordinates
//! are printed with fixed precision and series keep their input order.

use std::fmt::Write as _;

use crate::{Error, Result};

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD_L: f64 = 64.0;
const PAD_R: f64 = 24.0;
const PAD_T: f64 = 36.0;
const PAD_B: f64 = 56.0;

const PALETTE: [&str; 8] = [
    "#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666",
];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

#[derive(Debug, Clone, Copy)]
struct Axis {
    lo: f64,
    hi: f64,
    a: f64,
    b: f64,
}

impl Axis {
    fn new(lo: f64, hi: f64, a: f64, b: f64) -> Self {
        let (lo, hi) = if (hi - lo).abs() < 1e-12 { (lo - 0.5, hi + 0.5) } else { (lo, hi) };
        let pad = (hi - lo) * 0.05;
        Axis {
            lo: lo - pad,
            hi: hi + pad,
            a,
            b,
        }
    }

    fn map(&self, v: f64) -> f64 {
        self.a + (v - self.lo) / (self.hi - self.lo) * (self.b - self.a)
    }

    /// Five evenly spaced tick values.
    fn ticks(&self) -> Vec<f64> {
        (0..5).map(|i| self.lo + (self.hi - self.lo) * i as f64 / 4.0).collect()
    }
}

fn range(vals: impl Iterator<Item = f64>) -> Result<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in vals {
        if !v.is_finite() {
            return Err(Error::invalid("non-finite value in figure data"));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo > hi {
        return Err(Error::invalid("figure has no data"));
    }
    Ok((lo, hi))
}

struct Svg {
    out: String,
}

impl Svg {
    fn new(w: f64, h: f64) -> Self {
        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(out, r#"<rect width="{w:.0}" height="{h:.0}" fill="white"/>"#);
        Svg { out }
    }

    fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str, width: f64, dash: bool) {
        let d = if dash { r#" stroke-dasharray="4 3""# } else { "" };
        let _ = writeln!(
            self.out,
            r#"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="{stroke}" stroke-width="{width:.1}"{d}/>"#
        );
    }

    fn text(&mut self, x: f64, y: f64, anchor: &str, s: &str) {
        let _ = writeln!(self.out, r#"<text x="{x:.2}" y="{y:.2}" text-anchor="{anchor}">{}</text>"#, esc(s));
    }

    fn circle(&mut self, x: f64, y: f64, r: f64, fill: &str, stroke: &str) {
        let _ = writeln!(
            self.out,
            r#"<circle cx="{x:.2}" cy="{y:.2}" r="{r:.1}" fill="{fill}" stroke="{stroke}"/>"#
        );
    }

    fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str) {
        let (y, h) = if h < 0.0 { (y + h, -h) } else { (y, h) };
        let _ = writeln!(
            self.out,
            r#"<rect x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{h:.2}" fill="{fill}" stroke="black" stroke-width="0.5"/>"#
        );
    }

    fn diamond(&mut self, x: f64, y: f64, r: f64, fill: &str) {
        let _ = writeln!(
            self.out,
            r#"<polygon points="{:.2},{:.2} {:.2},{:.2} {:.2},{:.2} {:.2},{:.2}" fill="{fill}"/>"#,
            x,
            y - r,
            x + r,
            y,
            x,
            y + r,
            x - r,
            y
        );
    }

    fn polyline(&mut self, pts: &[(f64, f64)], stroke: &str) {
        let p: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        let _ = writeln!(
            self.out,
            r#"<polyline points="{}" fill="none" stroke="{stroke}" stroke-width="1.5"/>"#,
            p.join(" ")
        );
    }

    fn axes(&mut self, x: &Axis, y: &Axis, xlabel: &str, ylabel: &str, title: &str) {
        let (x0, x1) = (x.a, x.b);
        let (y0, y1) = (y.a, y.b);
        self.line(x0, y0, x1, y0, "black", 1.0, false);
        self.line(x0, y0, x0, y1, "black", 1.0, false);
        for t in x.ticks() {
            let px = x.map(t);
            self.line(px, y0, px, y0 + 4.0, "black", 1.0, false);
            self.text(px, y0 + 16.0, "middle", &format!("{t:.2}"));
        }
        for t in y.ticks() {
            let py = y.map(t);
            self.line(x0 - 4.0, py, x0, py, "black", 1.0, false);
            self.text(x0 - 6.0, py + 4.0, "end", &format!("{t:.2}"));
        }
        self.text((x0 + x1) / 2.0, y0 + 36.0, "middle", xlabel);
        let _ = writeln!(
            self.out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" transform="rotate(-90 {:.2} {:.2})">{}</text>"#,
            x0 - 46.0,
            (y0 + y1) / 2.0,
            x0 - 46.0,
            (y0 + y1) / 2.0,
            esc(ylabel)
        );
        self.text((x0 + x1) / 2.0, y1 - 14.0, "middle", title);
    }

    fn finish(mut self) -> String {
        self.out.push_str("</svg>\n");
        self.out
    }
}

/// One cash arm: the assigned village transfer and the amounts households received.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferGroup {
    pub label: String,
    pub assigned: f64,
    pub received: Vec<f64>,
}

fn quartiles(v: &[f64]) -> [f64; 5] {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let h = (s.len() - 1) as f64 * p;
        let lo = h.floor() as usize;
        let hi = h.ceil() as usize;
        s[lo] + (h - lo as f64) * (s[hi] - s[lo])
    };
    [s[0], q(0.25), q(0.5), q(0.75), s[s.len() - 1]]
}

/// Box-and-whisker plot of received transfers per arm with the assigned amount marked.
pub fn transfer_box_whisker(groups: &[TransferGroup]) -> Result<String> {
    if groups.is_empty() || groups.iter().any(|g| g.received.is_empty()) {
        return Err(Error::invalid("every transfer group needs received amounts"));
    }
    let (lo, hi) = range(groups.iter().flat_map(|g| g.received.iter().copied().chain([g.assigned])))?;
    let y = Axis::new(lo.min(0.0), hi, H - PAD_B, PAD_T);
    let x = Axis::new(0.0, groups.len() as f64, PAD_L, W - PAD_R);
    let mut svg = Svg::new(W, H);
    svg.axes(&x, &y, "arm", "transfer (USD)", "Assigned and received transfers");
    let slot = (x.b - x.a) / groups.len() as f64;
    for (i, g) in groups.iter().enumerate() {
        let cx = x.a + slot * (i as f64 + 0.5);
        let [mn, q1, md, q3, mx] = quartiles(&g.received);
        let bw = slot * 0.4;
        svg.line(cx, y.map(mn), cx, y.map(q1), "black", 1.0, false);
        svg.line(cx, y.map(q3), cx, y.map(mx), "black", 1.0, false);
        svg.rect(cx - bw / 2.0, y.map(q3), bw, y.map(q1) - y.map(q3), PALETTE[i % PALETTE.len()]);
        svg.line(cx - bw / 2.0, y.map(md), cx + bw / 2.0, y.map(md), "black", 2.0, false);
        svg.line(cx - bw * 0.7, y.map(g.assigned), cx + bw * 0.7, y.map(g.assigned), "red", 1.5, true);
        svg.text(cx, H - PAD_B + 28.0, "middle", &g.label);
    }
    Ok(svg.finish())
}

/// Mean outcome and cost per eligible household of one arm.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmPoint {
    pub label: String,
    pub cost: f64,
    pub mean: f64,
    pub cash: bool,
}

/// Two panels: the cash cost line with the in-kind arm at its cost (left),
/// and benefit-cost rays from the control mean (right).
pub fn cost_equivalence_figure(
    outcome: &str,
    control_mean: f64,
    arms: &[ArmPoint],
    line: (f64, f64),
    benchmark_cost: f64,
) -> Result<String> {
    if arms.is_empty() {
        return Err(Error::invalid("no arms to plot"));
    }
    let (intercept, slope) = line;
    let (clo, chi) = range(arms.iter().map(|a| a.cost).chain([0.0, benchmark_cost]))?;
    let predicted = intercept + slope * benchmark_cost;
    let (ylo, yhi) = range(arms.iter().map(|a| a.mean).chain([control_mean, predicted]))?;
    let half = W;
    let mut svg = Svg::new(2.0 * half, H);
    for panel in 0..2 {
        let ox = panel as f64 * half;
        let x = Axis::new(clo, chi, ox + PAD_L, ox + half - PAD_R);
        let y = Axis::new(ylo, yhi, H - PAD_B, PAD_T);
        let title = if panel == 0 {
            format!("{outcome}: cost equivalence")
        } else {
            format!("{outcome}: cost effectiveness")
        };
        svg.axes(&x, &y, "cost per eligible household (USD)", outcome, &title);
        if panel == 0 {
            let cash: Vec<&ArmPoint> = arms.iter().filter(|a| a.cash).collect();
            if let Some((lo, hi)) = range(cash.iter().map(|a| a.cost)).ok() {
                let lo = lo.min(benchmark_cost);
                let hi = hi.max(benchmark_cost);
                svg.line(
                    x.map(lo),
                    y.map(intercept + slope * lo),
                    x.map(hi),
                    y.map(intercept + slope * hi),
                    "#7b3294",
                    1.5,
                    false,
                );
            }
            svg.circle(x.map(benchmark_cost), y.map(predicted), 5.0, "none", "black");
        } else {
            for a in arms {
                svg.line(x.map(0.0), y.map(control_mean), x.map(a.cost), y.map(a.mean), "#999999", 1.0, true);
            }
        }
        svg.circle(x.map(0.0), y.map(control_mean), 4.0, "#bbbbbb", "black");
        for (i, a) in arms.iter().enumerate() {
            let (px, py) = (x.map(a.cost), y.map(a.mean));
            if a.cash {
                svg.circle(px, py, 4.0, PALETTE[i % PALETTE.len()], "black");
            } else {
                svg.diamond(px, py, 6.0, "black");
            }
            svg.text(px + 7.0, py - 6.0, "start", &a.label);
        }
    }
    Ok(svg.finish())
}

/// Share of households consuming each food group, by arm. `shares[g][a]` is
/// the share for group `g` in arm `a`.
pub fn dietary_diversity_bars(groups: &[String], arms: &[String], shares: &[Vec<f64>]) -> Result<String> {
    if groups.is_empty() || arms.is_empty() || shares.len() != groups.len() || shares.iter().any(|s| s.len() != arms.len()) {
        return Err(Error::invalid("food-group shares do not match the group and arm labels"));
    }
    let (_, hi) = range(shares.iter().flatten().copied())?;
    let y = Axis::new(0.0, hi.max(1.0), H - PAD_B, PAD_T);
    let x = Axis::new(0.0, groups.len() as f64, PAD_L, W - PAD_R);
    let mut svg = Svg::new(W, H);
    svg.axes(&x, &y, "food group", "share consuming", "Dietary diversity by arm");
    let slot = (x.b - x.a) / groups.len() as f64;
    let bw = slot * 0.8 / arms.len() as f64;
    for (g, label) in groups.iter().enumerate() {
        let left = x.a + slot * g as f64 + slot * 0.1;
        for (a, v) in shares[g].iter().enumerate() {
            let top = y.map(*v);
            svg.rect(left + bw * a as f64, top, bw, y.map(0.0) - top, PALETTE[a % PALETTE.len()]);
        }
        svg.text(left + slot * 0.4, H - PAD_B + 28.0, "middle", label);
    }
    for (a, label) in arms.iter().enumerate() {
        let ly = PAD_T + 14.0 * a as f64;
        svg.rect(W - PAD_R - 110.0, ly - 8.0, 10.0, 10.0, PALETTE[a % PALETTE.len()]);
        svg.text(W - PAD_R - 96.0, ly, "start", label);
    }
    Ok(svg.finish())
}

/// Step CDFs of CATE predictions, one series per outcome.
pub fn cate_cdf_plot(series: &[(String, Vec<(f64, f64)>)]) -> Result<String> {
    if series.is_empty() || series.iter().any(|(_, s)| s.is_empty()) {
        return Err(Error::invalid("every CDF series needs points"));
    }
    let (lo, hi) = range(series.iter().flat_map(|(_, s)| s.iter().map(|p| p.0)))?;
    let x = Axis::new(lo, hi, PAD_L, W - PAD_R);
    let y = Axis::new(0.0, 1.0, H - PAD_B, PAD_T);
    let mut svg = Svg::new(W, H);
    svg.axes(&x, &y, "predicted effect of cash relative to in-kind (SD)", "cumulative share", "CATE distributions");
    svg.line(x.map(0.0), y.a, x.map(0.0), y.b, "#999999", 1.0, true);
    for (i, (label, pts)) in series.iter().enumerate() {
        let mut path = vec![(x.map(pts[0].0), y.map(0.0))];
        let mut prev = 0.0;
        for (v, f) in pts {
            path.push((x.map(*v), y.map(prev)));
            path.push((x.map(*v), y.map(*f)));
            prev = *f;
        }
        let colour = PALETTE[i % PALETTE.len()];
        svg.polyline(&path, colour);
        let ly = PAD_T + 14.0 * i as f64;
        svg.line(PAD_L + 10.0, ly - 4.0, PAD_L + 24.0, ly - 4.0, colour, 2.0, false);
        svg.text(PAD_L + 28.0, ly, "start", label);
    }
    Ok(svg.finish())
}
