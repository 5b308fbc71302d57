//! CSV tables and minimal SVG figures for scan, regression and steering
//! results.

use std::fmt::Write as _;

use crate::extract::LayerScanReport;
use crate::factor::Factor;
use crate::intervene::InterventionScan;
use crate::weighting::RegressionReport;

/// One row per (factor, layer, fold).
pub fn fold_accuracy_csv(reports: &[LayerScanReport]) -> String {
    let mut out = String::from("factor,layer,fold,accuracy\n");
    for r in reports {
        for (f, row) in r.fold_accuracy.iter().enumerate() {
            for (l, a) in row.iter().enumerate() {
                let _ = writeln!(out, "{},{l},{f},{a:.6}", r.factor);
            }
        }
    }
    out
}

pub fn layer_scan_csv(reports: &[LayerScanReport]) -> String {
    let mut out = String::from("factor,layer,mean_accuracy,std_accuracy,in_stable_range\n");
    for r in reports {
        for (l, (m, s)) in r.mean_accuracy.iter().zip(&r.std_accuracy).enumerate() {
            let stable = r.stable_range.is_some_and(|(a, b)| (a..=b).contains(&l));
            let _ = writeln!(out, "{},{l},{m:.6},{s:.6},{stable}", r.factor);
        }
    }
    out
}

pub fn matrix_csv(m: &[Vec<f64>]) -> String {
    let mut out = String::from("fit_layer");
    for j in 0..m.first().map_or(0, Vec::len) {
        let _ = write!(out, ",eval_{j}");
    }
    out.push('\n');
    for (i, row) in m.iter().enumerate() {
        let _ = write!(out, "{i}");
        for x in row {
            let _ = write!(out, ",{x:.6}");
        }
        out.push('\n');
    }
    out
}

pub fn regression_csv(reports: &[RegressionReport]) -> String {
    let mut out = String::from("layer");
    for f in Factor::PREDICTORS {
        let n = f.name();
        let _ = write!(out, ",beta_{n},se_{n},t_{n},p_{n}");
    }
    out.push_str(",r2,pearson_r,n,valid\n");
    for r in reports {
        let _ = write!(out, "{}", r.layer);
        for i in 0..r.fit.factors.len() {
            let _ = write!(out, ",{:.6},{:.6},{:.4},{:.3e}", r.fit.beta[i], r.fit.se[i], r.fit.t[i], r.fit.p[i]);
        }
        let _ = writeln!(out, ",{:.6},{:.6},{},{}", r.fit.r2, r.pearson_r, r.fit.n, r.validity.valid());
    }
    out
}

pub fn intervention_csv(scan: &InterventionScan) -> String {
    let mut out = String::from("layer,factor,mode,alpha,mean_delta,mean_delta_pct,n\n");
    for c in &scan.cells {
        let mode = serde_json::to_value(c.mode).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{mode},{},{:.6},{:.4},{}",
            c.layer, c.factor, c.alpha, c.mean_delta, c.mean_delta_pct, c.n
        );
    }
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Grey-scale heatmap of values in `[0, 1]`.
pub fn heatmap_svg(m: &[Vec<f64>], title: &str) -> String {
    let cell = 24;
    let rows = m.len();
    let cols = m.first().map_or(0, Vec::len);
    let (w, h) = (40 + cols * cell, 40 + rows * cell);
    let mut out = format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">"#);
    let _ = write!(out, r#"<text x="4" y="16" font-size="12">{}</text>"#, escape(title));
    for (i, row) in m.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let g = (255.0 * (1.0 - v.clamp(0.0, 1.0))).round() as u8;
            let _ = write!(
                out,
                r#"<rect x="{}" y="{}" width="{cell}" height="{cell}" fill="rgb({g},{g},{g})"><title>{i},{j}: {v:.3}</title></rect>"#,
                36 + j * cell,
                28 + i * cell
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Polyline chart; each series is indexed by layer.
pub fn line_svg(series: &[(String, Vec<f64>)], title: &str) -> String {
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    let (w, h, pad) = (480.0, 280.0, 36.0);
    let n = series.iter().map(|s| s.1.len()).max().unwrap_or(0).max(2);
    let finite = series.iter().flat_map(|s| s.1.iter().copied()).filter(|x| x.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (lo.min(0.0), lo.max(0.0) + 1.0) };
    let x = |i: usize| pad + (w - 2.0 * pad) * i as f64 / (n - 1) as f64;
    let y = |v: f64| h - pad - (h - 2.0 * pad) * (v - lo) / (hi - lo);
    let mut out = format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">"#);
    let _ = write!(out, r#"<text x="4" y="16" font-size="12">{}</text>"#, escape(title));
    let _ = write!(
        out,
        r#"<line x1="{pad}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/><text x="2" y="{2}" font-size="10">{lo:.2}</text><text x="2" y="{3}" font-size="10">{hi:.2}</text>"#,
        h - pad,
        w - pad,
        h - pad,
        pad
    );
    for (k, (name, vals)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<String> = vals
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, &v)| format!("{:.1},{:.1}", x(i), y(v)))
            .collect();
        let _ = write!(
            out,
            r#"<polyline fill="none" stroke="{color}" points="{}"/><text x="{}" y="{}" font-size="10" fill="{color}">{}</text>"#,
            pts.join(" "),
            w - pad - 80.0,
            pad + 12.0 * k as f64,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_csv_shape() {
        let csv = matrix_csv(&[vec![1.0, 0.5], vec![0.25, 0.0]]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "fit_layer,eval_0,eval_1");
        assert_eq!(lines[2], "1,0.250000,0.000000");
    }

    #[test]
    fn svgs_are_well_formed() {
        let s = heatmap_svg(&[vec![0.0, 1.0]], "a<b");
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert!(s.contains("a&lt;b"));
        let l = line_svg(&[("x".into(), vec![1.0, 2.0, f64::NAN])], "t");
        assert_eq!(l.matches("<polyline").count(), 1);
    }
}
