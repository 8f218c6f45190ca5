//! Standalone SVG charts. Output is plain text with fixed float formatting,
//! so identical inputs give byte-identical files.

use std::fmt::Write as _;

use crate::anova::AnovaTable;
use crate::logit::MarginalEffect;

const PALETTE: [&str; 8] = [
    "#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#edc948", "#b07aa1", "#9c755f",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn header(out: &mut String, width: f64, height: f64, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="18" text-anchor="middle" font-size="13">{}</text>"#,
        width / 2.0,
        escape(title)
    );
}

/// Rounds an axis span up to a 1-2-5 step.
fn nice_step(span: f64) -> f64 {
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag)
}

/// Grouped bars of marginal effects in points, one bar per method within each
/// term. Non-significant bars are drawn translucent.
pub fn marginal_effects_chart(series: &[(String, Vec<MarginalEffect>)], title: &str) -> String {
    let mut terms: Vec<String> = Vec::new();
    for (_, effects) in series {
        for e in effects.iter().filter(|e| e.level.is_some()) {
            let t = e.term();
            if !terms.contains(&t) {
                terms.push(t);
            }
        }
    }
    let values: Vec<f64> = series
        .iter()
        .flat_map(|(_, es)| es.iter().filter(|e| e.level.is_some()).map(|e| e.estimate * 100.0))
        .collect();
    let vmax = values.iter().copied().fold(1.0, f64::max);
    let vmin = values.iter().copied().fold(0.0, f64::min);
    let step = nice_step(vmax - vmin);
    let (lo, hi) = ((vmin / step).floor() * step, (vmax / step).ceil() * step);

    let (left, right, top, bottom) = (60.0, 20.0, 40.0, 90.0);
    let group_w = 24.0 * series.len().max(1) as f64 + 20.0;
    let plot_w = group_w * terms.len().max(1) as f64;
    let plot_h = 260.0;
    let width = left + plot_w + right + 140.0;
    let height = top + plot_h + bottom;
    let y = |v: f64| top + plot_h * (hi - v) / (hi - lo);

    let mut out = String::new();
    header(&mut out, width, height, title);
    let mut v = lo;
    while v <= hi + step * 1e-9 {
        let _ = writeln!(
            out,
            r##"<line x1="{left:.1}" x2="{:.1}" y1="{yy:.1}" y2="{yy:.1}" stroke="#dddddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{v:.0}</text>"##,
            left + plot_w,
            left - 6.0,
            y(v) + 4.0,
            yy = y(v),
        );
        v += step;
    }
    let _ = writeln!(
        out,
        r#"<line x1="{left:.1}" x2="{:.1}" y1="{y0:.1}" y2="{y0:.1}" stroke="black"/>"#,
        left + plot_w,
        y0 = y(0.0)
    );
    let _ = writeln!(
        out,
        r#"<text transform="translate(16 {:.1}) rotate(-90)" text-anchor="middle">marginal effect (points)</text>"#,
        top + plot_h / 2.0
    );
    for (ti, term) in terms.iter().enumerate() {
        let gx = left + ti as f64 * group_w + 10.0;
        for (si, (_, effects)) in series.iter().enumerate() {
            let Some(e) = effects.iter().find(|e| &e.term() == term) else {
                continue;
            };
            let val = e.estimate * 100.0;
            let (y0, y1) = (y(0.0), y(val));
            let opacity = if e.significant { 1.0 } else { 0.35 };
            let _ = writeln!(
                out,
                r#"<rect x="{:.1}" y="{:.1}" width="20.0" height="{:.1}" fill="{}" fill-opacity="{opacity:.2}"><title>{}: {val:.2} (p={:.3})</title></rect>"#,
                gx + si as f64 * 24.0,
                y0.min(y1),
                (y0 - y1).abs(),
                PALETTE[si % PALETTE.len()],
                escape(term),
                e.p_value
            );
        }
        let _ = writeln!(
            out,
            r#"<text transform="translate({:.1} {:.1}) rotate(-35)" text-anchor="end">{}</text>"#,
            gx + group_w / 2.0 - 10.0,
            top + plot_h + 14.0,
            escape(term)
        );
    }
    legend(&mut out, left + plot_w + 20.0, top, series.iter().map(|(m, _)| m.as_str()));
    out.push_str("</svg>\n");
    out
}

fn legend<'a>(out: &mut String, x: f64, y: f64, names: impl Iterator<Item = &'a str>) {
    for (i, name) in names.enumerate() {
        let yy = y + i as f64 * 18.0;
        let _ = writeln!(
            out,
            r#"<rect x="{x:.1}" y="{yy:.1}" width="12" height="12" fill="{}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            PALETTE[i % PALETTE.len()],
            x + 16.0,
            yy + 10.0,
            escape(name)
        );
    }
}

/// One stacked bar of eta squared per (label, table); total height is R².
pub fn anova_chart(bars: &[(String, &AnovaTable)], title: &str) -> String {
    let mut factors: Vec<String> = Vec::new();
    for (_, t) in bars {
        for f in &t.factors {
            if !factors.contains(&f.name) {
                factors.push(f.name.clone());
            }
        }
    }
    let hi = bars.iter().map(|(_, t)| t.r_squared).fold(0.0, f64::max).max(1e-6);
    let step = nice_step(hi);
    let hi = (hi / step).ceil() * step;
    let (left, right, top, bottom) = (60.0, 20.0, 40.0, 70.0);
    let plot_w = 60.0 * bars.len().max(1) as f64;
    let plot_h = 260.0;
    let width = left + plot_w + right + 140.0;
    let height = top + plot_h + bottom;
    let y = |v: f64| top + plot_h * (hi - v) / hi;

    let mut out = String::new();
    header(&mut out, width, height, title);
    let mut v = 0.0;
    while v <= hi + step * 1e-9 {
        let _ = writeln!(
            out,
            r##"<line x1="{left:.1}" x2="{:.1}" y1="{yy:.1}" y2="{yy:.1}" stroke="#dddddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{v:.3}</text>"##,
            left + plot_w,
            left - 6.0,
            y(v) + 4.0,
            yy = y(v),
        );
        v += step;
    }
    let _ = writeln!(
        out,
        r#"<text transform="translate(16 {:.1}) rotate(-90)" text-anchor="middle">eta squared</text>"#,
        top + plot_h / 2.0
    );
    for (bi, (label, table)) in bars.iter().enumerate() {
        let x = left + bi as f64 * 60.0 + 15.0;
        let mut base = 0.0;
        for f in &table.factors {
            let fi = factors.iter().position(|n| n == &f.name).unwrap_or(0);
            let _ = writeln!(
                out,
                r#"<rect x="{x:.1}" y="{:.1}" width="30.0" height="{:.1}" fill="{}"><title>{}: {:.5}</title></rect>"#,
                y(base + f.eta_squared),
                y(base) - y(base + f.eta_squared),
                PALETTE[fi % PALETTE.len()],
                escape(&f.name),
                f.eta_squared
            );
            base += f.eta_squared;
        }
        let _ = writeln!(
            out,
            r#"<text transform="translate({:.1} {:.1}) rotate(-35)" text-anchor="end">{}</text>"#,
            x + 15.0,
            top + plot_h + 14.0,
            escape(label)
        );
    }
    legend(&mut out, left + plot_w + 20.0, top, factors.iter().map(String::as_str));
    out.push_str("</svg>\n");
    out
}

/// QQ plot of scaled residuals against uniform quantiles.
pub fn qq_chart(series: &[(String, &[f64])], title: &str) -> String {
    const MAX_POINTS: usize = 400;
    let size = 300.0;
    let (left, top) = (50.0, 40.0);
    let width = left + size + 160.0;
    let height = top + size + 50.0;
    let mut out = String::new();
    header(&mut out, width, height, title);
    let _ = writeln!(
        out,
        r##"<rect x="{left:.1}" y="{top:.1}" width="{size:.1}" height="{size:.1}" fill="none" stroke="#999999"/><line x1="{left:.1}" y1="{:.1}" x2="{:.1}" y2="{top:.1}" stroke="#999999" stroke-dasharray="4 3"/>"##,
        top + size,
        left + size
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">expected uniform quantile</text><text transform="translate(16 {:.1}) rotate(-90)" text-anchor="middle">observed</text>"#,
        left + size / 2.0,
        top + size + 30.0,
        top + size / 2.0
    );
    for (si, (_, values)) in series.iter().enumerate() {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let stride = n.div_ceil(MAX_POINTS).max(1);
        for i in (0..n).step_by(stride) {
            let expected = (i as f64 + 0.5) / n as f64;
            let _ = writeln!(
                out,
                r#"<circle cx="{:.1}" cy="{:.1}" r="1.6" fill="{}"/>"#,
                left + expected * size,
                top + size * (1.0 - v[i]),
                PALETTE[si % PALETTE.len()]
            );
        }
    }
    legend(&mut out, left + size + 20.0, top, series.iter().map(|(m, _)| m.as_str()));
    out.push_str("</svg>\n");
    out
}
