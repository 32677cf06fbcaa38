//! Minimal deterministic SVG emission: planar projections of trajectories
//! with solid start markers and hollow end markers.

use std::path::Path;

use crate::CliError;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 36.0;

/// One plot in data coordinates. Lines are polylines; `solid` and `hollow`
/// are circle markers (filled for sources, outlined for targets).
#[derive(Debug, Default)]
pub struct PlotData {
    pub lines: Vec<Vec<(f64, f64)>>,
    pub solid: Vec<(f64, f64)>,
    pub hollow: Vec<(f64, f64)>,
    pub x_label: &'static str,
    pub y_label: &'static str,
}

impl PlotData {
    fn bounds(&self) -> (f64, f64, f64, f64) {
        let mut lo = (f64::INFINITY, f64::INFINITY);
        let mut hi = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        let all = self
            .lines
            .iter()
            .flatten()
            .chain(&self.solid)
            .chain(&self.hollow);
        for &(x, y) in all {
            lo.0 = lo.0.min(x);
            lo.1 = lo.1.min(y);
            hi.0 = hi.0.max(x);
            hi.1 = hi.1.max(y);
        }
        if !lo.0.is_finite() {
            return (0.0, 0.0, 1.0, 1.0);
        }
        // Degenerate extents still get a visible box.
        let pad = |l: f64, h: f64| {
            let span = (h - l).max(1e-9);
            (l - 0.05 * span, h + 0.05 * span)
        };
        let (x0, x1) = pad(lo.0, hi.0);
        let (y0, y1) = pad(lo.1, hi.1);
        (x0, y0, x1, y1)
    }
}

/// Renders the plot to `path`. Output is a pure function of the input, so
/// repeated runs produce identical bytes.
pub fn render(path: &Path, data: &PlotData) -> Result<(), CliError> {
    let (x0, y0, x1, y1) = data.bounds();
    let sx = (WIDTH - 2.0 * MARGIN) / (x1 - x0);
    let sy = (HEIGHT - 2.0 * MARGIN) / (y1 - y0);
    let px = |x: f64| MARGIN + (x - x0) * sx;
    // SVG y grows downward.
    let py = |y: f64| HEIGHT - MARGIN - (y - y0) * sy;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    svg.push_str(&format!(
        "  <rect x=\"0.5\" y=\"0.5\" width=\"{:.1}\" height=\"{:.1}\" fill=\"white\" stroke=\"#999\"/>\n",
        WIDTH - 1.0,
        HEIGHT - 1.0
    ));
    svg.push_str(&format!(
        "  <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" fill=\"#444\">{}</text>\n",
        WIDTH / 2.0 - 10.0,
        HEIGHT - 10.0,
        data.x_label
    ));
    svg.push_str(&format!(
        "  <text x=\"10\" y=\"{:.1}\" font-size=\"12\" fill=\"#444\" transform=\"rotate(-90 14 {:.1})\">{}</text>\n",
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        data.y_label
    ));
    for line in &data.lines {
        if line.len() < 2 {
            continue;
        }
        let pts: Vec<String> = decimate(line, 512)
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        svg.push_str(&format!(
            "  <polyline points=\"{}\" fill=\"none\" stroke=\"#4477aa\" stroke-width=\"1\" opacity=\"0.8\"/>\n",
            pts.join(" ")
        ));
    }
    for &(x, y) in &data.solid {
        svg.push_str(&format!(
            "  <circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3.5\" fill=\"#222\"/>\n",
            px(x),
            py(y)
        ));
    }
    for &(x, y) in &data.hollow {
        svg.push_str(&format!(
            "  <circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3.5\" fill=\"white\" stroke=\"#222\" stroke-width=\"1.2\"/>\n",
            px(x),
            py(y)
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg).map_err(|e| CliError::parse(format!("{}: {e}", path.display())))
}

/// Keeps endpoint fidelity while capping polyline length.
fn decimate(line: &[(f64, f64)], cap: usize) -> Vec<(f64, f64)> {
    if line.len() <= cap {
        return line.to_vec();
    }
    let stride = line.len().div_ceil(cap);
    let mut out: Vec<(f64, f64)> = line.iter().step_by(stride).copied().collect();
    if out.last() != line.last() {
        out.push(*line.last().unwrap());
    }
    out
}

/// Bar comparison for scalar estimates (Monte Carlo vs exact value).
pub fn render_bars(path: &Path, labels: [&str; 2], values: [f64; 2]) -> Result<(), CliError> {
    let peak = values[0].max(values[1]).max(1e-12);
    let mut svg = String::new();
    svg.push_str(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"320\" height=\"240\" viewBox=\"0 0 320 240\">\n",
    );
    svg.push_str("  <rect x=\"0.5\" y=\"0.5\" width=\"319\" height=\"239\" fill=\"white\" stroke=\"#999\"/>\n");
    for (i, (&label, &value)) in labels.iter().zip(&values).enumerate() {
        let h = 170.0 * value / peak;
        let x = 60.0 + 110.0 * i as f64;
        svg.push_str(&format!(
            "  <rect x=\"{:.1}\" y=\"{:.2}\" width=\"70\" height=\"{:.2}\" fill=\"{}\"/>\n",
            x,
            200.0 - h,
            h,
            if i == 0 { "#4477aa" } else { "#bbb" }
        ));
        svg.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"218\" font-size=\"12\" fill=\"#444\">{label}</text>\n",
            x
        ));
        svg.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.2}\" font-size=\"11\" fill=\"#444\">{value:.6}</text>\n",
            x,
            194.0 - h
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg).map_err(|e| CliError::parse(format!("{}: {e}", path.display())))
}
