use std::fmt::Write as _;

use depthart::metrics::ScaleCurve;

const W: f64 = 480.0;
const H: f64 = 320.0;
const PAD: f64 = 48.0;

/// Line chart of AbsRel per scale with the autoencoder floor as a dashed line.
pub fn scale_curve_svg(curve: &ScaleCurve) -> String {
    let n = curve.absrel.len();
    let top = curve.absrel.iter().cloned().fold(curve.floor, f64::max).max(1e-9) * 1.1;
    let x = |k: usize| PAD + (W - 2.0 * PAD) * if n > 1 { k as f64 / (n - 1) as f64 } else { 0.5 };
    let y = |v: f64| H - PAD - (H - 2.0 * PAD) * (v / top);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{PAD} {PAD} V{} H{}" fill="none" stroke="black"/>"#,
        H - PAD,
        W - PAD
    );
    let points: Vec<String> = curve
        .absrel
        .iter()
        .enumerate()
        .map(|(k, &v)| format!("{:.2},{:.2}", x(k), y(v)))
        .collect();
    let _ = writeln!(
        s,
        r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#,
        points.join(" ")
    );
    for (k, &v) in curve.absrel.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="steelblue"/>"#,
            x(k),
            y(v)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
            x(k),
            H - PAD + 18.0,
            k + 1
        );
    }
    let fy = y(curve.floor);
    let _ = writeln!(
        s,
        r#"<line x1="{PAD}" y1="{fy:.2}" x2="{}" y2="{fy:.2}" stroke="gray" stroke-dasharray="4 4"/>"#,
        W - PAD
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{:.2}" text-anchor="end" fill="gray">floor</text>"#,
        W - PAD,
        fy - 4.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">scale k</text>"#,
        W / 2.0,
        H - 8.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">AbsRel</text>"#,
        H / 2.0,
        H / 2.0
    );
    let _ = writeln!(s, r#"<text x="{PAD}" y="{}">{top:.4}</text>"#, PAD - 6.0);
    s.push_str("</svg>\n");
    s
}
