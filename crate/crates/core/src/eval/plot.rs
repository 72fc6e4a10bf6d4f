use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 240.0;
const PAD: f64 = 32.0;
const COLORS: [&str; 5] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd"];

/// Minimal SVG line chart. Each series is `(label, values)` against its index.
pub fn line_plot_svg(title: &str, series: &[(&str, &[f64])]) -> String {
    let n = series.iter().map(|(_, v)| v.len()).max().unwrap_or(0).max(2);
    let top = series
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let x = |i: usize| PAD + (W - 2.0 * PAD) * i as f64 / (n - 1) as f64;
    let y = |v: f64| H - PAD - (H - 2.0 * PAD) * (v / top).clamp(0.0, 1.0);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{PAD}" y="18">{}</text>"#, escape(title));
    let _ = writeln!(
        s,
        r#"<path d="M{PAD},{PAD} L{PAD},{b} L{r},{b}" stroke="black" fill="none"/>"#,
        b = H - PAD,
        r = W - PAD
    );
    let _ = writeln!(s, r#"<text x="2" y="{}">{top:.3}</text>"#, PAD + 4.0);
    for (k, (label, values)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<String> = values
            .iter()
            .enumerate()
            .map(|(i, v)| format!("{:.1},{:.1}", x(i), y(*v)))
            .collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" points="{}"/>"#, pts.join(" "));
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            W - PAD - 90.0,
            PAD + 14.0 * k as f64,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
