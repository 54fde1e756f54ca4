//! Standalone SVG grid heatmaps for square [0,1] matrices: white-to-blue
//! linear ramp, per-cell 2-decimal annotations, axis labels on the left
//! (rows) and bottom (columns).

use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

const CELL: f64 = 56.0;
const MARGIN_LEFT: f64 = 72.0;
const MARGIN_TOP: f64 = 16.0;
const MARGIN_BOTTOM: f64 = 56.0;
const MARGIN_RIGHT: f64 = 16.0;

/// Linear white -> dark blue; 0 is lightest, 1 darkest.
pub fn ramp_color(v: f64) -> String {
    let lerp = |a: f64, b: f64| (a + (b - a) * v).round() as u8;
    format!("#{:02x}{:02x}{:02x}", lerp(255.0, 8.0), lerp(255.0, 48.0), lerp(255.0, 107.0))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Render the heatmap document. `labels[i]` names row i and column i.
pub fn heatmap_svg(m: &Matrix<f64>, labels: &[String]) -> Result<String> {
    let n = m.rows();
    if m.cols() != n {
        return Err(Error::Shape(format!(
            "heatmap needs a square matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    if n == 0 {
        return Err(Error::Usage("heatmap needs a nonempty matrix".into()));
    }
    if labels.len() != n {
        return Err(Error::Usage(format!(
            "expected {n} labels, got {}",
            labels.len()
        )));
    }
    for &v in m.data() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Usage(format!(
                "heatmap values must lie in [0,1], got {v}"
            )));
        }
    }

    let width = MARGIN_LEFT + CELL * n as f64 + MARGIN_RIGHT;
    let height = MARGIN_TOP + CELL * n as f64 + MARGIN_BOTTOM;
    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\">\n"
    ));
    out.push_str(&format!(
        "  <rect x=\"0\" y=\"0\" width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n"
    ));

    for i in 0..n {
        for j in 0..n {
            let v = m.get(i, j);
            let x = MARGIN_LEFT + CELL * j as f64;
            let y = MARGIN_TOP + CELL * i as f64;
            out.push_str(&format!(
                "  <rect class=\"cell\" x=\"{x}\" y=\"{y}\" width=\"{CELL}\" height=\"{CELL}\" \
                 fill=\"{}\" stroke=\"#666\" stroke-width=\"0.5\"/>\n",
                ramp_color(v)
            ));
            let text_fill = if v > 0.5 { "white" } else { "#1a1a1a" };
            out.push_str(&format!(
                "  <text class=\"val\" x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" \
                 dominant-baseline=\"central\" font-size=\"13\" fill=\"{text_fill}\">{v:.2}</text>\n",
                x + CELL / 2.0,
                y + CELL / 2.0
            ));
        }
    }
    for (i, label) in labels.iter().enumerate() {
        let y = MARGIN_TOP + CELL * i as f64 + CELL / 2.0;
        out.push_str(&format!(
            "  <text class=\"ylab\" x=\"{:.1}\" y=\"{y:.1}\" text-anchor=\"end\" \
             dominant-baseline=\"central\" font-size=\"13\">{}</text>\n",
            MARGIN_LEFT - 8.0,
            escape(label)
        ));
        let x = MARGIN_LEFT + CELL * i as f64 + CELL / 2.0;
        out.push_str(&format!(
            "  <text class=\"xlab\" x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\" \
             font-size=\"13\">{}</text>\n",
            MARGIN_TOP + CELL * n as f64 + 20.0,
            escape(label)
        ));
    }
    out.push_str("</svg>\n");
    Ok(out)
}

pub fn export_heatmap(m: &Matrix<f64>, labels: &[String], path: &Path) -> Result<()> {
    let svg = heatmap_svg(m, labels)?;
    std::fs::write(path, svg)?;
    Ok(())
}
