//! Minimal static SVG renderings.

use std::fmt::Write;

use crate::landscape::Projection;
use crate::probe::{Role, Stage};

use super::summarize::SummaryRow;

const PALETTE: [&str; 6] = ["#4477aa", "#ee6677", "#228833", "#ccbb44", "#66ccee", "#aa3377"];

/// Grouped bars of mean transfer accuracy per sparsity, one bar per method.
pub fn transfer_bars(rows: &[SummaryRow], stage: Stage) -> String {
    let picked: Vec<&SummaryRow> = rows.iter().filter(|r| r.role == Role::Transfer && r.stage == stage).collect();
    let mut methods: Vec<&str> = Vec::new();
    let mut levels: Vec<f64> = Vec::new();
    for r in &picked {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
        if !levels.contains(&r.sparsity) {
            levels.push(r.sparsity);
        }
    }
    let (w, h, pad) = (720.0, 360.0, 48.0);
    let group_w = (w - 2.0 * pad) / levels.len().max(1) as f64;
    let bar_w = group_w * 0.8 / methods.len().max(1) as f64;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<text x="{pad}" y="20">transfer accuracy, {stage}</text>"#);
    let _ = writeln!(s, r#"<line x1="{pad}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, h - pad, w - pad, h - pad);
    for r in &picked {
        let gi = levels.iter().position(|l| *l == r.sparsity).unwrap_or(0);
        let mi = methods.iter().position(|m| *m == r.method).unwrap_or(0);
        let x = pad + gi as f64 * group_w + group_w * 0.1 + mi as f64 * bar_w;
        let bh = r.mean.clamp(0.0, 1.0) * (h - 2.0 * pad);
        let _ = writeln!(
            s,
            r#"<rect x="{x:.2}" y="{:.2}" width="{:.2}" height="{bh:.2}" fill="{}"><title>{} {:.2}%: {:.4}</title></rect>"#,
            h - pad - bh,
            bar_w,
            PALETTE[mi % PALETTE.len()],
            r.method,
            r.sparsity * 100.0,
            r.mean
        );
    }
    for (gi, l) in levels.iter().enumerate() {
        let x = pad + (gi as f64 + 0.5) * group_w;
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{}" text-anchor="middle">{:.2}%</text>"#, h - pad + 16.0, l * 100.0);
    }
    for (mi, m) in methods.iter().enumerate() {
        let y = 36.0 + 14.0 * mi as f64;
        let _ = writeln!(s, r#"<rect x="{}" y="{}" width="10" height="10" fill="{}"/>"#, w - 140.0, y - 9.0, PALETTE[mi % PALETTE.len()]);
        let _ = writeln!(s, r#"<text x="{}" y="{y}">{m}</text>"#, w - 125.0);
    }
    s.push_str("</svg>\n");
    s
}

/// Shaded grid of the source (or transfer) loss with snapshot markers.
pub fn loss_heatmap(proj: &Projection, transfer: bool) -> String {
    let n = proj.resolution;
    let value = |i: usize| {
        let g = &proj.grid[i];
        let v = if transfer { g.loss_transfer } else { g.loss_source };
        v.max(0.0).ln_1p()
    };
    let (lo, hi) = (0..proj.grid.len()).map(value).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let cell = 400.0 / n as f64;
    let (u0, w0) = (proj.grid[0].u, proj.grid[0].w);
    let (u1, w1) = (proj.grid[proj.grid.len() - 1].u, proj.grid[proj.grid.len() - 1].w);
    let to_px = |u: f64, w: f64| ((u - u0) / (u1 - u0) * 400.0, 400.0 - (w - w0) / (w1 - w0) * 400.0);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="400" height="400">"#);
    for i in 0..proj.grid.len() {
        let (iu, iw) = (i / n, i % n);
        let shade = (255.0 * (1.0 - (value(i) - lo) / span)).round() as u8;
        let _ = writeln!(
            s,
            r#"<rect x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="rgb({shade},{shade},255)"/>"#,
            iu as f64 * cell,
            400.0 - (iw + 1) as f64 * cell,
            cell + 0.05,
            cell + 0.05
        );
    }
    for (k, p) in proj.points.iter().enumerate() {
        let (x, y) = to_px(p.u, p.w);
        let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="5" fill="{}" stroke="black"/>"#, PALETTE[(k + 1) % PALETTE.len()]);
    }
    s.push_str("</svg>\n");
    s
}
