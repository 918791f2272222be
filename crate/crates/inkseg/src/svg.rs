//! SVG rendering of segmented ink: one polyline per maximal run of
//! same-assignment consecutive points within a stroke, colored per character
//! slot from a fixed 12-color palette.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::ink::{Ink, Segmentation};

/// Fixed high-contrast palette; slot `k` uses `PALETTE[k % 12]`.
pub const PALETTE: [&str; 12] = [
    "#e6194b", "#3cb44b", "#4363d8", "#f58231", "#911eb4", "#46a5b0", "#f032e6", "#9a6324",
    "#008080", "#808000", "#1b5e20", "#b71c1c",
];

/// Color used for points assigned to no character.
pub const NONE_COLOR: &str = "#808080";

pub fn slot_color(slot: Option<usize>) -> &'static str {
    match slot {
        Some(k) => PALETTE[k % PALETTE.len()],
        None => NONE_COLOR,
    }
}

/// Render an ink with a per-point segmentation as an SVG 1.1 document.
/// Output bytes are deterministic for identical input.
pub fn render_svg(ink: &Ink, seg: &Segmentation) -> Result<Vec<u8>> {
    let p = ink.point_count();
    if seg.len() != p {
        return Err(Error::Validation(format!(
            "segmentation length {} does not match point count {}",
            seg.len(),
            p
        )));
    }

    let mut min_x = f64::INFINITY;
    let mut min_y = f64::INFINITY;
    let mut max_x = f64::NEG_INFINITY;
    let mut max_y = f64::NEG_INFINITY;
    for (_, _, pt) in ink.iter_points() {
        min_x = min_x.min(pt.x);
        min_y = min_y.min(pt.y);
        max_x = max_x.max(pt.x);
        max_y = max_y.max(pt.y);
    }
    let width = (max_x - min_x).max(1e-6);
    let height = (max_y - min_y).max(1e-6);
    let margin = 0.05 * width.max(height);
    let stroke_width = width.max(height) / 150.0;

    let mut out = String::new();
    out.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" viewBox=\"{} {} {} {}\">",
        fmt(min_x - margin),
        fmt(min_y - margin),
        fmt(width + 2.0 * margin),
        fmt(height + 2.0 * margin)
    );

    let mut global = 0usize;
    for stroke in ink.strokes() {
        let points = stroke.points();
        let mut run_start = 0usize;
        while run_start < points.len() {
            let slot = seg.get(global + run_start);
            let mut run_end = run_start + 1;
            while run_end < points.len() && seg.get(global + run_end) == slot {
                run_end += 1;
            }
            let _ = write!(
                out,
                "  <polyline fill=\"none\" stroke=\"{}\" stroke-width=\"{}\" \
                 stroke-linecap=\"round\" stroke-linejoin=\"round\" points=\"",
                slot_color(slot),
                fmt(stroke_width)
            );
            for (i, pt) in points[run_start..run_end].iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                let _ = write!(out, "{},{}", fmt(pt.x), fmt(pt.y));
            }
            out.push_str("\"/>\n");
            run_start = run_end;
        }
        global += points.len();
    }
    out.push_str("</svg>\n");
    Ok(out.into_bytes())
}

fn fmt(v: f64) -> String {
    // Fixed precision keeps output bytes stable and compact.
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".to_string()
    } else {
        s.to_string()
    }
}
