//! Minimal SVG emitters for pies, line charts and heatmaps.

use std::fmt::Write;

const PALETTE: [&str; 8] = ["#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#9c755f"];

fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn open(width: f64, height: f64, title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{:.1}" y="18" text-anchor="middle" font-size="14">{}</text>"#, width / 2.0, escape(title));
    s
}

pub struct Pie {
    pub label: String,
    pub radius: f64,
    pub slices: Vec<f64>,
}

/// One pie per item, radius proportional to `radius`, slice colors per legend entry.
pub fn pie_grid(items: &[Pie], legend: &[String], title: &str) -> String {
    let cols = 8usize;
    let cell = 80.0;
    let rows = items.len().div_ceil(cols).max(1);
    let width = cols as f64 * cell + 140.0;
    let height = rows as f64 * cell + 40.0;
    let mut s = open(width, height, title);
    let max_r = items.iter().map(|p| p.radius).fold(0.0, f64::max);
    for (k, p) in items.iter().enumerate() {
        let cx = (k % cols) as f64 * cell + cell / 2.0;
        let cy = (k / cols) as f64 * cell + cell / 2.0 + 24.0;
        let r = if max_r > 0.0 { 4.0 + 28.0 * (p.radius / max_r).sqrt() } else { 4.0 };
        let total: f64 = p.slices.iter().sum();
        if total <= 0.0 {
            let _ = writeln!(s, r##"<circle cx="{cx:.2}" cy="{cy:.2}" r="{r:.2}" fill="none" stroke="#999"/>"##);
        }
        let mut angle = -std::f64::consts::FRAC_PI_2;
        for (i, frac) in p.slices.iter().enumerate() {
            if *frac <= 0.0 {
                continue;
            }
            if *frac >= 1.0 - 1e-12 {
                let _ = writeln!(s, r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="{r:.2}" fill="{}"/>"#, color(i));
                continue;
            }
            let end = angle + frac * std::f64::consts::TAU;
            let (x0, y0) = (cx + r * angle.cos(), cy + r * angle.sin());
            let (x1, y1) = (cx + r * end.cos(), cy + r * end.sin());
            let large = if *frac > 0.5 { 1 } else { 0 };
            let _ = writeln!(
                s,
                r#"<path d="M{cx:.2},{cy:.2} L{x0:.2},{y0:.2} A{r:.2},{r:.2} 0 {large} 1 {x1:.2},{y1:.2} Z" fill="{}"/>"#,
                color(i)
            );
            angle = end;
        }
        let _ = writeln!(s, r#"<text x="{cx:.2}" y="{:.2}" text-anchor="middle" font-size="9">{}</text>"#, cy + 38.0, escape(&p.label));
    }
    legend_block(&mut s, legend, cols as f64 * cell + 10.0, 40.0);
    s.push_str("</svg>\n");
    s
}

fn legend_block(s: &mut String, legend: &[String], x: f64, y: f64) {
    for (i, name) in legend.iter().enumerate() {
        let yy = y + i as f64 * 16.0;
        let _ = writeln!(s, r#"<rect x="{x:.1}" y="{:.1}" width="10" height="10" fill="{}"/>"#, yy - 9.0, color(i));
        let _ = writeln!(s, r#"<text x="{:.1}" y="{yy:.1}">{}</text>"#, x + 14.0, escape(name));
    }
}

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    /// Half-width of a shaded band around each point.
    pub spread: Option<Vec<f64>>,
}

pub fn line_chart(series: &[Series], title: &str, x_label: &str, y_label: &str) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 150.0, 30.0, 50.0);
    let mut s = open(w, h, title);
    let all = series.iter().flat_map(|se| {
        let spread = se.spread.clone().unwrap_or_else(|| vec![0.0; se.points.len()]);
        se.points.iter().zip(spread).flat_map(|((x, y), d)| [(*x, y - d), (*x, y + d)]).collect::<Vec<_>>()
    });
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for (x, y) in all.filter(|(x, y)| x.is_finite() && y.is_finite()) {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y1 = y0 + 1.0;
    }
    let px = |x: f64| left + (x - x0) / (x1 - x0) * (w - left - right);
    let py = |y: f64| h - bottom - (y - y0) / (y1 - y0) * (h - top - bottom);
    let _ = writeln!(
        s,
        r##"<path d="M{left},{top} L{left},{:.1} L{:.1},{:.1}" fill="none" stroke="#333"/>"##,
        h - bottom,
        w - right,
        h - bottom
    );
    for k in 0..=4 {
        let yv = y0 + (y1 - y0) * k as f64 / 4.0;
        let xv = x0 + (x1 - x0) * k as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{yv:.3}</text>"#, left - 4.0, py(yv) + 4.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{xv:.3}</text>"#, px(xv), h - bottom + 16.0);
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, (left + w - right) / 2.0, h - 10.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">{}</text>"#,
        (top + h - bottom) / 2.0,
        (top + h - bottom) / 2.0,
        escape(y_label)
    );
    for (i, se) in series.iter().enumerate() {
        if let Some(spread) = &se.spread {
            let upper: Vec<String> =
                se.points.iter().zip(spread).map(|((x, y), d)| format!("{:.2},{:.2}", px(*x), py(y + d))).collect();
            let lower: Vec<String> =
                se.points.iter().zip(spread).rev().map(|((x, y), d)| format!("{:.2},{:.2}", px(*x), py(y - d))).collect();
            if !upper.is_empty() {
                let _ = writeln!(
                    s,
                    r#"<polygon points="{} {}" fill="{}" fill-opacity="0.15" stroke="none"/>"#,
                    upper.join(" "),
                    lower.join(" "),
                    color(i)
                );
            }
        }
        let pts: Vec<String> = se.points.iter().map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="2"/>"#, pts.join(" "), color(i));
    }
    let names: Vec<String> = series.iter().map(|se| se.name.clone()).collect();
    legend_block(&mut s, &names, w - right + 10.0, top + 20.0);
    s.push_str("</svg>\n");
    s
}

/// Rows by columns grid of values in [0, 1], white to dark blue.
pub fn heatmap(values: &[Vec<f64>], row_labels: &[String], col_labels: &[String], title: &str) -> String {
    let cols = values.first().map_or(0, Vec::len);
    let cell_w = (600.0 / cols.max(1) as f64).clamp(2.0, 24.0);
    let cell_h = 22.0;
    let left = 90.0;
    let top = 40.0;
    let w = left + cell_w * cols as f64 + 20.0;
    let h = top + cell_h * values.len() as f64 + 30.0;
    let mut s = open(w.max(300.0), h, title);
    for (r, row) in values.iter().enumerate() {
        let y = top + r as f64 * cell_h;
        if let Some(l) = row_labels.get(r) {
            let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, left - 4.0, y + 15.0, escape(l));
        }
        for (c, v) in row.iter().enumerate() {
            let t = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
            let shade = |lo: f64, hi: f64| (lo + (hi - lo) * t).round() as u8;
            let fill = format!("#{:02x}{:02x}{:02x}", shade(255.0, 8.0), shade(255.0, 48.0), shade(255.0, 107.0));
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{y:.1}" width="{cell_w:.2}" height="{cell_h}" fill="{fill}"/>"#,
                left + c as f64 * cell_w
            );
        }
    }
    if cols <= 40 {
        for (c, l) in col_labels.iter().enumerate().take(cols) {
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="8">{}</text>"#,
                left + (c as f64 + 0.5) * cell_w,
                top - 4.0,
                escape(l)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn outputs_are_well_formed_svg() {
        let pies = [Pie { label: "0:head:0".into(), radius: 1.0, slices: vec![0.5, 0.5] }, Pie {
            label: "0:ffn:0".into(),
            radius: 0.0,
            slices: vec![0.0, 0.0],
        }];
        let a = pie_grid(&pies, &["a".into(), "b".into()], "t");
        let b = line_chart(
            &[Series { name: "x<y".into(), points: vec![(0.0, 1.0), (1.0, 2.0)], spread: Some(vec![0.1, 0.2]) }],
            "t",
            "x",
            "y",
        );
        let c = heatmap(&[vec![0.0, 1.0]], &["r".into()], &["c0".into(), "c1".into()], "t");
        for svg in [a, b, c] {
            assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
            assert!(!svg.contains("NaN"));
        }
    }
}
