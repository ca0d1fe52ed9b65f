//! Static SVG scatter plot of an embedding, coloured by cluster.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::Embedding;

pub const WIDTH: f64 = 800.0;
pub const HEIGHT: f64 = 600.0;
pub const MARGIN: f64 = 0.05;

pub const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvgOptions {
    pub show_labels: bool,
    pub point_radius: f64,
}

impl Default for SvgOptions {
    fn default() -> Self {
        Self {
            show_labels: false,
            point_radius: 4.0,
        }
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Axis range padded by [`MARGIN`] on each side; a degenerate range becomes
/// a unit interval around its value.
fn padded(lo: f64, hi: f64) -> (f64, f64) {
    let span = hi - lo;
    if span > 0.0 {
        (lo - MARGIN * span, hi + MARGIN * span)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

pub fn render_svg(emb: &Embedding, clusters: &[usize], opts: &SvgOptions) -> Result<String> {
    if clusters.len() != emb.len() {
        return Err(Error::LengthMismatch(emb.len(), clusters.len()));
    }
    if emb.coords.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("embedding"));
    }
    let fold = |k: usize| {
        emb.coords.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p[k]), hi.max(p[k]))
        })
    };
    let (x0, x1) = if emb.is_empty() { (-1.0, 1.0) } else { padded(fold(0).0, fold(0).1) };
    let (y0, y1) = if emb.is_empty() { (-1.0, 1.0) } else { padded(fold(1).0, fold(1).1) };
    let sx = |x: f64| (x - x0) / (x1 - x0) * WIDTH;
    let sy = |y: f64| HEIGHT - (y - y0) / (y1 - y0) * HEIGHT;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {WIDTH} {HEIGHT}" width="{WIDTH}" height="{HEIGHT}">"#
    );
    let _ = writeln!(
        out,
        r##"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="#ffffff" stroke="#333333"/>"##
    );
    if x0 < 0.0 && x1 > 0.0 {
        let x = sx(0.0);
        let _ = writeln!(out, r##"<line x1="{x:.2}" y1="0" x2="{x:.2}" y2="{HEIGHT}" stroke="#cccccc"/>"##);
    }
    if y0 < 0.0 && y1 > 0.0 {
        let y = sy(0.0);
        let _ = writeln!(out, r##"<line x1="0" y1="{y:.2}" x2="{WIDTH}" y2="{y:.2}" stroke="#cccccc"/>"##);
    }
    for ((id, p), &c) in emb.region_ids.iter().zip(&emb.coords).zip(clusters) {
        let (cx, cy) = (sx(p[0]), sy(p[1]));
        let _ = writeln!(
            out,
            r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="{:.1}" fill="{}"><title>{}</title></circle>"#,
            opts.point_radius,
            PALETTE[c % PALETTE.len()],
            escape(id)
        );
        if opts.show_labels {
            let _ = writeln!(
                out,
                r#"<text x="{:.2}" y="{:.2}" font-size="10" font-family="sans-serif">{}</text>"#,
                cx + opts.point_radius + 1.0,
                cy - 1.0,
                escape(id)
            );
        }
    }
    out.push_str("</svg>\n");
    Ok(out)
}
