//! Static SVG figure of a run: two projections of the end-effector path and h(t).

use std::fmt::Write;

use ecbf_core::sim::LogRow;
use ecbf_core::Obstacle;

const PANEL: f64 = 320.0;
const PAD: f64 = 40.0;
const MAX_POINTS: usize = 1500;

struct Panel {
    left: f64,
    x: (f64, f64),
    y: (f64, f64),
}

impl Panel {
    fn px(&self, v: f64) -> f64 {
        self.left + PAD + (v - self.x.0) / (self.x.1 - self.x.0) * PANEL
    }

    fn py(&self, v: f64) -> f64 {
        PAD + PANEL - (v - self.y.0) / (self.y.1 - self.y.0) * PANEL
    }

    fn scale(&self, r: f64) -> f64 {
        r / (self.x.1 - self.x.0) * PANEL
    }

    fn path(&self, svg: &mut String, pts: &[(f64, f64)], style: &str) {
        svg.push_str("<path d=\"");
        for (i, &(x, y)) in pts.iter().enumerate() {
            let cmd = if i == 0 { 'M' } else { 'L' };
            let _ = write!(svg, "{cmd}{:.2} {:.2} ", self.px(x), self.py(y));
        }
        let _ = writeln!(svg, "\" fill=\"none\" {style}/>");
    }

    fn frame(&self, svg: &mut String, title: &str, xl: &str, yl: &str) {
        let (l, t) = (self.left + PAD, PAD);
        let _ = writeln!(
            svg,
            "<rect x=\"{l}\" y=\"{t}\" width=\"{PANEL}\" height=\"{PANEL}\" fill=\"none\" stroke=\"#999\"/>"
        );
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{title}</text>",
            l + PANEL / 2.0,
            t - 12.0
        );
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"11\">{xl} [{:.3}, {:.3}]</text>",
            l + PANEL / 2.0,
            t + PANEL + 18.0,
            self.x.0,
            self.x.1
        );
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" transform=\"rotate(-90 {:.1} {:.1})\" text-anchor=\"middle\">{yl} [{:.3}, {:.3}]</text>",
            l - 10.0,
            t + PANEL / 2.0,
            l - 10.0,
            t + PANEL / 2.0,
            self.y.0,
            self.y.1
        );
    }
}

/// Square window around the points so circles stay circular.
fn square_range(pts: impl Iterator<Item = (f64, f64)>) -> ((f64, f64), (f64, f64)) {
    let (mut xl, mut xh, mut yl, mut yh) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for (x, y) in pts.filter(|(x, y)| x.is_finite() && y.is_finite()) {
        xl = xl.min(x);
        xh = xh.max(x);
        yl = yl.min(y);
        yh = yh.max(y);
    }
    if xl > xh {
        return ((-1.0, 1.0), (-1.0, 1.0));
    }
    let half = ((xh - xl).max(yh - yl) * 0.55).max(1e-3);
    let (cx, cy) = ((xl + xh) / 2.0, (yl + yh) / 2.0);
    ((cx - half, cx + half), (cy - half, cy + half))
}

fn stride(len: usize) -> usize {
    len.div_ceil(MAX_POINTS).max(1)
}

/// Renders the figure; `safe_radius` is the obstacle radius plus clearance.
pub fn trajectory_svg(log: &[LogRow<f64>], obstacle: Option<(&Obstacle<f64>, f64)>) -> String {
    let step = stride(log.len());
    let rows: Vec<&LogRow<f64>> = log.iter().step_by(step).collect();
    let mut svg = String::new();
    let width = 3.0 * (PANEL + 2.0 * PAD);
    let height = PANEL + 2.0 * PAD;
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" font-family=\"sans-serif\" font-size=\"13\">"
    );
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");

    for (view, (a, b, title, xl, yl)) in
        [(0, 1, "top view", "x", "y"), (0, 2, "side view", "x", "z")]
            .into_iter()
            .enumerate()
    {
        let actual: Vec<(f64, f64)> = rows.iter().map(|r| (r.ee[a], r.ee[b])).collect();
        let desired: Vec<(f64, f64)> = rows.iter().map(|r| (r.ee_des[a], r.ee_des[b])).collect();
        let mut extent: Vec<(f64, f64)> = actual.iter().chain(&desired).copied().collect();
        if let Some((ob, safe)) = obstacle {
            let (cx, cy) = (ob.center[a], ob.center[b]);
            extent.push((cx - safe, cy - safe));
            extent.push((cx + safe, cy + safe));
        }
        let (xr, yr) = square_range(extent.into_iter());
        let panel = Panel {
            left: view as f64 * (PANEL + 2.0 * PAD),
            x: xr,
            y: yr,
        };
        panel.frame(&mut svg, title, xl, yl);
        if let Some((ob, safe)) = obstacle {
            let (cx, cy) = (panel.px(ob.center[a]), panel.py(ob.center[b]));
            let _ = writeln!(
                svg,
                "<circle cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"{:.2}\" fill=\"#f4b6b6\" stroke=\"#c33\"/>",
                panel.scale(ob.radius)
            );
            let _ = writeln!(
                svg,
                "<circle cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"{:.2}\" fill=\"none\" stroke=\"#c33\" stroke-dasharray=\"4 3\"/>",
                panel.scale(safe)
            );
        }
        panel.path(
            &mut svg,
            &desired,
            "stroke=\"#888\" stroke-dasharray=\"6 4\"",
        );
        panel.path(&mut svg, &actual, "stroke=\"#1f5fbf\" stroke-width=\"2\"");
    }

    let h: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.h.is_finite() && r.h < f64::MAX)
        .map(|r| (r.t, r.h))
        .collect();
    let t_end = log.last().map_or(1.0, |r| r.t.max(1e-9));
    let (lo, hi) = h
        .iter()
        .fold((0.0f64, 0.0f64), |(lo, hi), &(_, v)| (lo.min(v), hi.max(v)));
    let span = (hi - lo).max(1e-6);
    let panel = Panel {
        left: 2.0 * (PANEL + 2.0 * PAD),
        x: (0.0, t_end),
        y: (lo - 0.05 * span, hi + 0.05 * span),
    };
    panel.frame(&mut svg, "h(t)", "t", "h");
    panel.path(&mut svg, &[(0.0, 0.0), (t_end, 0.0)], "stroke=\"#c33\"");
    if !h.is_empty() {
        panel.path(&mut svg, &h, "stroke=\"#1f5fbf\" stroke-width=\"2\"");
    }
    svg.push_str("</svg>\n");
    svg
}
