//! CSV and SVG renderings of generated pairs.

use std::fmt::Write;

use sfeuot::Matrix;

const SIZE: f64 = 600.0;
const MARGIN: f64 = 20.0;
const MAX_SEGMENTS: usize = 500;

/// `x0..x{d-1},tx0..tx{d-1}` rows.
pub fn pairs_csv(x: &Matrix, tx: &Matrix) -> String {
    let d = x.cols();
    let mut s = String::new();
    let header: Vec<String> = (0..d)
        .map(|i| format!("x{i}"))
        .chain((0..d).map(|i| format!("tx{i}")))
        .collect();
    s.push_str(&header.join(","));
    s.push('\n');
    for r in 0..x.rows() {
        let vals: Vec<String> = x.row(r).iter().chain(tx.row(r)).map(|v| v.to_string()).collect();
        s.push_str(&vals.join(","));
        s.push('\n');
    }
    s
}

/// Plane coordinates of a row: the first two coordinates, or the value
/// against a fixed height in one dimension.
fn planar(row: &[f64], level: f64) -> (f64, f64) {
    match row {
        [a] => (*a, level),
        [a, b, ..] => (*a, *b),
        [] => (0.0, level),
    }
}

/// Scatter of sources (green) and outputs (red) joined by gray segments.
pub fn scatter_svg(x: &Matrix, tx: &Matrix) -> String {
    let src: Vec<(f64, f64)> = (0..x.rows()).map(|r| planar(x.row(r), 0.0)).collect();
    let gen: Vec<(f64, f64)> = (0..tx.rows()).map(|r| planar(tx.row(r), 1.0)).collect();
    let all = src.iter().chain(&gen);
    let (mut lo_x, mut hi_x, mut lo_y, mut hi_y) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(a, b) in all.filter(|(a, b)| a.is_finite() && b.is_finite()) {
        lo_x = lo_x.min(a);
        hi_x = hi_x.max(a);
        lo_y = lo_y.min(b);
        hi_y = hi_y.max(b);
    }
    if !lo_x.is_finite() {
        (lo_x, hi_x, lo_y, hi_y) = (-1.0, 1.0, -1.0, 1.0);
    }
    let span = (hi_x - lo_x).max(hi_y - lo_y).max(1e-9);
    let scale = (SIZE - 2.0 * MARGIN) / span;
    let map = |(a, b): (f64, f64)| (MARGIN + (a - lo_x) * scale, SIZE - MARGIN - (b - lo_y) * scale);

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(s, r#"<g stroke="gray" stroke-width="0.5" stroke-opacity="0.5">"#).unwrap();
    for (&p, &q) in src.iter().zip(&gen).take(MAX_SEGMENTS) {
        let ((x1, y1), (x2, y2)) = (map(p), map(q));
        writeln!(s, r#"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}"/>"#).unwrap();
    }
    s.push_str("</g>\n");
    for (points, color) in [(&src, "green"), (&gen, "red")] {
        writeln!(s, r#"<g fill="{color}" fill-opacity="0.6">"#).unwrap();
        for &p in points.iter() {
            let (cx, cy) = map(p);
            if cx.is_finite() && cy.is_finite() {
                writeln!(s, r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="1.5"/>"#).unwrap();
            }
        }
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    s
}
