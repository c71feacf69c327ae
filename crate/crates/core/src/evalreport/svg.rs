//! Minimal static SVG line charts.

use std::fmt::Write as _;

pub struct Series<'a> {
    pub name: &'a str,
    pub points: Vec<(f64, f64)>,
    pub color: &'a str,
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 56.0;

fn bounds(series: &[Series<'_>]) -> (f64, f64, f64, f64) {
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    (x0, x1, y0.min(0.0), y1)
}

pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series<'_>]) -> String {
    let (x0, x1, y0, y1) = bounds(series);
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#).unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="16">{title}</text>"#, W / 2.0).unwrap();
    writeln!(
        s,
        r#"<path d="M{PAD},{PAD} L{PAD},{b} L{r},{b}" stroke="black" fill="none"/>"#,
        b = H - PAD,
        r = W - PAD
    )
    .unwrap();
    for (v, x) in [(x0, PAD), (x1, W - PAD)] {
        writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11">{v:.3}</text>"#, H - PAD + 16.0).unwrap();
    }
    for (v, y) in [(y0, H - PAD), (y1, PAD)] {
        writeln!(s, r#"<text x="{}" y="{y}" text-anchor="end" font-family="sans-serif" font-size="11">{v:.3}</text>"#, PAD - 4.0).unwrap();
    }
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">{x_label}</text>"#, W / 2.0, H - 12.0).unwrap();
    writeln!(
        s,
        r#"<text x="14" y="{y}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 14 {y})">{y_label}</text>"#,
        y = H / 2.0
    )
    .unwrap();
    for (i, se) in series.iter().enumerate() {
        let pts: Vec<String> = se.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        writeln!(s, r#"<polyline points="{}" stroke="{}" stroke-width="1.5" fill="none"/>"#, pts.join(" "), se.color).unwrap();
        let ly = PAD + 16.0 * i as f64;
        writeln!(
            s,
            r#"<text x="{}" y="{ly}" font-family="sans-serif" font-size="12" fill="{}">{}</text>"#,
            W - PAD - 100.0,
            se.color,
            se.name
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}
