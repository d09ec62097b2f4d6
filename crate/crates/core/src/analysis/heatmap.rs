use std::fmt::Write as _;
use std::path::Path;

use super::{check_attention, AnalysisError};
use crate::grad::Matrix;

const CELL: usize = 16;
const MARGIN: usize = 28;
/// Color at attention 1.0; attention 0.0 is white.
const FULL: (f64, f64, f64) = (8.0, 48.0, 107.0);

fn color(v: f64) -> String {
    let v = v.clamp(0.0, 1.0);
    let mix = |full: f64| (255.0 + (full - 255.0) * v).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(FULL.0), mix(FULL.1), mix(FULL.2))
}

/// SVG heatmap of an attention matrix. Query positions run top to bottom,
/// key positions left to right.
pub fn heatmap_svg(a: &Matrix<f64>, title: &str) -> Result<String, AnalysisError> {
    check_attention(a)?;
    let t = a.rows();
    let side = MARGIN + t * CELL + 4;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{side}" height="{}" viewBox="0 0 {side} {}">"#,
        side + 14,
        side + 14
    );
    let _ = writeln!(
        svg,
        r#"<text x="{MARGIN}" y="12" font-family="monospace" font-size="11">{}</text>"#,
        escape(title)
    );
    let top = MARGIN + 14;
    for i in (0..t).step_by(4) {
        let _ = writeln!(
            svg,
            r#"<text x="2" y="{}" font-family="monospace" font-size="9">{i}</text>"#,
            top + i * CELL + 11
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-family="monospace" font-size="9">{i}</text>"#,
            MARGIN + i * CELL + 2,
            top - 4
        );
    }
    for i in 0..t {
        for j in 0..t {
            let _ = writeln!(
                svg,
                r#"<rect x="{}" y="{}" width="{CELL}" height="{CELL}" fill="{}"/>"#,
                MARGIN + j * CELL,
                top + i * CELL,
                color(a.get(i, j))
            );
        }
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

pub fn render_heatmap(a: &Matrix<f64>, title: &str, path: &Path) -> Result<(), AnalysisError> {
    let svg = heatmap_svg(a, title)?;
    std::fs::write(path, svg).map_err(|source| AnalysisError::Io {
        path: path.to_path_buf(),
        source,
    })
}
