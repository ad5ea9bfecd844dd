use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// A named polyline.
pub struct Series<'a> {
    pub name: &'a str,
    pub points: Vec<(f64, f64)>,
}

fn extent(it: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = it.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Line chart with shared axes and a legend.
pub fn line_chart(title: &str, x_label: &str, series: &[Series<'_>]) -> String {
    let pts = || series.iter().flat_map(|s| s.points.iter());
    let (x0, x1) = extent(pts().map(|p| p.0));
    let (y0, y1) = extent(pts().map(|p| p.1));
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);

    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="24" text-anchor="middle" font-size="16">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        out,
        r#"<path d="M{PAD} {PAD} V{} H{}" fill="none" stroke="black"/>"#,
        H - PAD,
        W - PAD
    );
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>"#, W / 2.0, H - 12.0, escape(x_label));
    for (v, y) in [(y0, H - PAD), (y1, PAD)] {
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="end" font-size="10">{v:.4}</text>"#, PAD - 4.0, y + 4.0);
    }
    for (v, x) in [(x0, PAD), (x1, W - PAD)] {
        let _ = writeln!(out, r#"<text x="{x}" y="{}" text-anchor="middle" font-size="10">{v}</text>"#, H - PAD + 14.0);
    }
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let d: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(out, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, d.join(" "));
        let ly = PAD + 14.0 * k as f64;
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{ly}" font-size="11" fill="{color}">{}</text>"#,
            W - PAD - 120.0,
            escape(s.name)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Grid heatmap of per-patch weights, row-major.
pub fn heatmap(title: &str, weights: &[f64], cols: usize) -> String {
    let cols = cols.max(1);
    let rows = weights.len().div_ceil(cols);
    let cell = 32.0;
    let (lo, hi) = extent(weights.iter().copied());
    let w = cols as f64 * cell;
    let h = rows as f64 * cell + 28.0;
    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">"#);
    let _ = writeln!(out, r#"<text x="2" y="18" font-size="12">{}</text>"#, escape(title));
    for (i, &v) in weights.iter().enumerate() {
        let level = ((v - lo) / (hi - lo) * 255.0).round() as u8;
        let (x, y) = ((i % cols) as f64 * cell, (i / cols) as f64 * cell + 28.0);
        let _ = writeln!(
            out,
            r#"<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="rgb({level},{},{})"><title>{i}: {v}</title></rect>"#,
            level / 2,
            255 - level
        );
    }
    out.push_str("</svg>\n");
    out
}
