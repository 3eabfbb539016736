//! CSV tables and standalone SVG figures.
//!
//! Every CSV starts with a header row. Numbers are written with 9 significant
//! digits, undefined values as `NA`.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::intervention::EffectMatrix;
use crate::lens::LensProfile;
use crate::scoring::ScoreTable;

/// 9 significant digits, plain notation for moderate magnitudes.
pub fn fmt_num(x: f64) -> String {
    if !x.is_finite() {
        return "NA".into();
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-5..=8).contains(&exp) {
        let m = trim_zeros(mantissa);
        return format!("{m}e{exp}");
    }
    let decimals = (8 - exp).max(0) as usize;
    trim_zeros(&format!("{x:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "NA".into(), fmt_num)
}

/// `source_layer,downstream_layer,max_l2,max_rel_l2`, defined cells only.
pub fn skiplayer_propagated_csv(m: &EffectMatrix) -> String {
    let mut out = String::from("source_layer,downstream_layer,max_l2,max_rel_l2\n");
    for s in 0..m.num_layers {
        for l in 0..m.num_layers {
            if let Some(v) = m.get(s, l) {
                let _ = writeln!(out, "{s},{l},{},{}", fmt_num(v), fmt_opt(m.get_rel(s, l)));
            }
        }
    }
    out
}

/// `source_layer,max_prob_l2,max_logit_l2`.
pub fn skiplayer_output_csv(m: &EffectMatrix) -> String {
    let mut out = String::from("source_layer,max_prob_l2,max_logit_l2\n");
    for s in 0..m.num_layers {
        let _ = writeln!(out, "{s},{},{}", fmt_num(m.output_prob[s]), fmt_num(m.output_logit[s]));
    }
    out
}

/// `layer,relative_depth,mean_kl,top1_overlap,n_positions`.
pub fn lens_profile_csv(p: &LensProfile) -> String {
    let mut out = String::from("layer,relative_depth,mean_kl,top1_overlap,n_positions\n");
    for l in 1..=p.num_layers {
        let _ = writeln!(
            out,
            "{l},{},{},{},{}",
            fmt_num(p.relative_depth(l)),
            fmt_num(p.mean_kl(l)),
            fmt_num(p.top1_overlap(l)),
            p.positions
        );
    }
    out
}

/// `layer,relative_depth,assay_id,spearman`.
pub fn scores_csv(tables: &[ScoreTable]) -> String {
    let mut out = String::from("layer,relative_depth,assay_id,spearman\n");
    for t in tables {
        for l in &t.layers {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                l.layer,
                fmt_num(l.relative_depth),
                t.assay_id,
                fmt_opt(l.spearman)
            );
        }
    }
    out
}

/// `layer,assay_id,mutant,score`.
pub fn variant_scores_csv(tables: &[ScoreTable]) -> String {
    let mut out = String::from("layer,assay_id,mutant,score\n");
    for t in tables {
        for l in &t.layers {
            for (code, s) in t.codes.iter().zip(&l.scores) {
                let _ = writeln!(out, "{},{},{},{}", l.layer, t.assay_id, code, fmt_num(*s));
            }
        }
    }
    out
}

/// `step,loss`.
pub fn train_curve_csv(curve: &[(usize, f64)]) -> String {
    let mut out = String::from("step,loss\n");
    for (s, l) in curve {
        let _ = writeln!(out, "{s},{}", fmt_num(*l));
    }
    out
}

const LOW: (f64, f64, f64) = (44.0, 123.0, 182.0);
const MID: (f64, f64, f64) = (255.0, 255.0, 191.0);
const HIGH: (f64, f64, f64) = (215.0, 25.0, 28.0);
const UNDEFINED_FILL: &str = "#bfbfbf";
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf",
];

fn lerp(a: (f64, f64, f64), b: (f64, f64, f64), t: f64) -> String {
    let c = |x: f64, y: f64| (x + (y - x) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", c(a.0, b.0), c(a.1, b.1), c(a.2, b.2))
}

/// Three-stop color for `t` in `[0, 1]`.
fn gradient(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    if t <= 0.5 {
        lerp(LOW, MID, t * 2.0)
    } else {
        lerp(MID, HIGH, (t - 0.5) * 2.0)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Square heatmap of `cells` (row-major `n × n`; rows = source layer,
/// columns = downstream layer). Undefined cells are gray; the color scale is
/// linear from the minimum to the maximum defined value.
pub fn heatmap_svg(n: usize, cells: &[Option<f64>], title: &str) -> Result<String> {
    if cells.len() != n * n {
        return Err(Error::Report(format!("heatmap needs {} cells, got {}", n * n, cells.len())));
    }
    let defined: Vec<f64> = cells.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::Report("heatmap has no defined cells".into()));
    }
    let lo = defined.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = defined.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let cell = 40.0;
    let (left, top) = (70.0, 50.0);
    let side = cell * n as f64;
    let (width, height) = (left + side + 110.0, top + side + 60.0);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
        left + side / 2.0,
        escape(title)
    );
    for s in 0..n {
        for l in 0..n {
            let (x, y) = (left + l as f64 * cell, top + s as f64 * cell);
            match cells[s * n + l] {
                Some(v) => {
                    let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
                    let _ = writeln!(
                        svg,
                        r#"<rect class="cell" x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{}" data-value="{}"/>"#,
                        gradient(t),
                        fmt_num(v)
                    );
                }
                None => {
                    let _ = writeln!(
                        svg,
                        r#"<rect class="undefined" x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{UNDEFINED_FILL}"/>"#
                    );
                }
            }
        }
    }
    for i in 0..n {
        let c = i as f64 * cell + cell / 2.0;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle">{i}</text>"#,
            left + c,
            top + side + 16.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="end">{i}</text>"#,
            left - 6.0,
            top + c + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">downstream layer</text>"#,
        left + side / 2.0,
        top + side + 40.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="20" y="{}" text-anchor="middle" transform="rotate(-90 20 {})">source layer</text>"#,
        top + side / 2.0,
        top + side / 2.0
    );
    // color bar
    let bar_x = left + side + 30.0;
    for k in 0..20 {
        let t = 1.0 - k as f64 / 19.0;
        let _ = writeln!(
            svg,
            r#"<rect class="scale" x="{bar_x}" y="{}" width="16" height="{}" fill="{}"/>"#,
            top + k as f64 * side / 20.0,
            side / 20.0,
            gradient(t)
        );
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}">{}</text>"#, bar_x + 22.0, top + 10.0, fmt_num(hi));
    let _ = writeln!(svg, r#"<text x="{}" y="{}">{}</text>"#, bar_x + 22.0, top + side, fmt_num(lo));
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Heatmap of the max-aggregated propagated effects.
pub fn emit_heatmap(m: &EffectMatrix, relative: bool) -> Result<String> {
    let (cells, title) = if relative {
        (&m.propagated_rel, "max relative propagated effect")
    } else {
        (&m.propagated, "max propagated effect (L2)")
    };
    heatmap_svg(m.num_layers, cells, title)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    /// `(relative_depth, value)` pairs.
    pub points: Vec<(f64, f64)>,
}

/// Line chart over relative depth `[0, 1]`, one polyline per series.
pub fn emit_lines(series: &[Series], title: &str, y_label: &str) -> Result<String> {
    if series.is_empty() {
        return Err(Error::Report("line chart needs at least one series".into()));
    }
    if let Some(s) = series.iter().find(|s| s.points.is_empty()) {
        return Err(Error::Report(format!("series {:?} is empty", s.name)));
    }
    if series.iter().flat_map(|s| &s.points).any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::Report("line chart values must be finite".into()));
    }
    let ys = series.iter().flat_map(|s| s.points.iter().map(|p| p.1));
    let (mut lo, mut hi) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), y| (a.min(y), b.max(y)));
    if hi - lo < 1e-12 {
        lo -= 1.0;
        hi += 1.0;
    }
    let (left, top, w, h) = (70.0, 40.0, 420.0, 260.0);
    let (width, height) = (left + w + 170.0, top + h + 60.0);
    let px = |x: f64| left + x.clamp(0.0, 1.0) * w;
    let py = |y: f64| top + h - (y - lo) / (hi - lo) * h;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        left + w / 2.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        r#"<rect x="{left}" y="{top}" width="{w}" height="{h}" fill="none" stroke="black"/>"#
    );
    for k in 0..=4 {
        let x = k as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            px(x),
            top + h + 16.0,
            fmt_num(x)
        );
        let y = lo + (hi - lo) * k as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            left - 6.0,
            py(y) + 4.0,
            fmt_num((y * 1e4).round() / 1e4)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">relative depth</text>"#,
        left + w / 2.0,
        top + h + 40.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">{}</text>"#,
        top + h / 2.0,
        top + h / 2.0,
        escape(y_label)
    );
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.3},{:.3}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline class="series" fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = top + 10.0 + 18.0 * i as f64;
        let lx = left + w + 16.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
            lx + 20.0
        );
        let _ = writeln!(
            svg,
            r#"<text class="legend" x="{}" y="{}">{}</text>"#,
            lx + 26.0,
            ly + 4.0,
            escape(&s.name)
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
