//! Deterministic artifact emission: CSV tables, JSON summaries, gnuplot data
//! files, and SVG quick-look plots for convergence reports.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::expansion::ConvergenceReport;

/// Format a float with 17 significant digits (round-trip safe).
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.17e}")
}

/// Deterministically sanitize a quantity name into a file stem: ASCII
/// alphanumerics and `-` pass through, every other character (including all
/// non-ASCII) becomes `_`.
pub fn sanitize_name(name: &str) -> String {
    let mut out: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect();
    if out.is_empty() {
        out.push('_');
    }
    out
}

/// Write the `epsilon,value` CSV of a report.
pub fn write_report_csv(report: &ConvergenceReport, path: &Path) -> Result<()> {
    let mut text = String::from("epsilon,value\n");
    for row in &report.rows {
        let _ = writeln!(text, "{},{}", fmt_f64(row.eps), fmt_f64(row.value));
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// JSON summary of a report: `{quantity, slope, interval, claimed, pass}`
/// plus the floor and fit goodness.
pub fn report_json(report: &ConvergenceReport) -> serde_json::Value {
    serde_json::json!({
        "quantity": report.quantity,
        "slope": report.slope,
        "interval": [report.interval.0, report.interval.1],
        "claimed": report.claimed,
        "floor": report.floor,
        "pass": report.pass,
        "goodness": report.goodness,
        "rows": report.rows.iter().map(|r| serde_json::json!([r.eps, r.value])).collect::<Vec<_>>(),
    })
}

/// Emit gnuplot-ready plot data and an SVG quick-look for a report:
/// `<stem>.dat` (two columns, space separated) and `<stem>.svg` (log-log
/// scatter with the fitted line when the report has at least two rows).
/// Returns the paths written.
pub fn emit_plotdata(report: &ConvergenceReport, dir: &Path) -> Result<Vec<PathBuf>> {
    if report.rows.is_empty() {
        return Err(Error::EmptyReport {
            quantity: report.quantity.clone(),
        });
    }
    std::fs::create_dir_all(dir)?;
    let stem = sanitize_name(&report.quantity);
    let dat_path = dir.join(format!("{stem}.dat"));
    let mut dat = String::new();
    for row in &report.rows {
        let _ = writeln!(dat, "{} {}", fmt_f64(row.eps), fmt_f64(row.value));
    }
    std::fs::write(&dat_path, dat)?;

    let svg_path = dir.join(format!("{stem}.svg"));
    std::fs::write(&svg_path, render_svg(report))?;
    Ok(vec![dat_path, svg_path])
}

/// Minimal hand-rolled log-log SVG: axes box, sample points, and (for two or
/// more rows) the least-squares fit line with the slope in the title.
fn render_svg(report: &ConvergenceReport) -> String {
    const W: f64 = 640.0;
    const H: f64 = 480.0;
    const MARGIN: f64 = 60.0;
    let pts: Vec<(f64, f64)> = report
        .rows
        .iter()
        .map(|r| (r.eps.ln(), r.value.max(1e-300).ln()))
        .collect();
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let pad = |a: &mut f64, b: &mut f64| {
        let d = (*b - *a).max(1e-9) * 0.08;
        *a -= d;
        *b += d;
    };
    pad(&mut x0, &mut x1);
    pad(&mut y0, &mut y1);
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
    let sy = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="black"/>"#,
        MARGIN,
        MARGIN,
        W - 2.0 * MARGIN,
        H - 2.0 * MARGIN
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" font-family="monospace" font-size="14">{} (log-log): slope {:.4}, claimed {:.2}</text>"#,
        MARGIN,
        MARGIN - 14.0,
        sanitize_name(&report.quantity),
        report.slope,
        report.claimed
    );
    if pts.len() >= 2 {
        // Fit line through the centroid with the report slope.
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let line = |x: f64| my + report.slope * (x - mx);
        let _ = writeln!(
            svg,
            r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="steelblue" stroke-width="1.5"/>"#,
            sx(x0),
            sy(line(x0)),
            sx(x1),
            sy(line(x1))
        );
    }
    for &(x, y) in &pts {
        let _ = writeln!(
            svg,
            r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="crimson"/>"#,
            sx(x),
            sy(y)
        );
    }
    let _ = writeln!(svg, "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"monospace\" font-size=\"12\">ln(eps) -&gt;</text>", W / 2.0 - 30.0, H - MARGIN / 3.0);
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expansion::{fit_report, ConvergenceRow};

    fn sample_report() -> ConvergenceReport {
        let rows: Vec<ConvergenceRow> = [8.0, 16.0, 32.0]
            .iter()
            .map(|m| ConvergenceRow {
                eps: 1.0 / m,
                value: 2.0 / (m * m),
            })
            .collect();
        fit_report("probe quantity", &rows, 2.0, 1.8).unwrap()
    }

    #[test]
    fn sanitization_is_deterministic_and_ascii() {
        assert_eq!(sanitize_name("eigen gap λ⁰ (k=1)"), "eigen_gap_____k_1_");
        assert_eq!(sanitize_name(""), "_");
        assert_eq!(sanitize_name("plain-name_09"), "plain-name_09");
    }

    #[test]
    fn plotdata_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rep = sample_report();
        let paths = emit_plotdata(&rep, dir.path()).unwrap();
        assert_eq!(paths.len(), 2);
        let dat = std::fs::read_to_string(&paths[0]).unwrap();
        assert_eq!(dat.lines().count(), 3);
        // The JSON summary slope and the plotted fit line use the same number.
        let json = report_json(&rep);
        assert!((json["slope"].as_f64().unwrap() - rep.slope).abs() < 1e-12);
        let svg = std::fs::read_to_string(&paths[1]).unwrap();
        assert!(svg.contains("<line"), "3-row report draws a fit line");
        // Byte determinism across repeated emission.
        let again = emit_plotdata(&rep, dir.path()).unwrap();
        assert_eq!(std::fs::read(&paths[1]).unwrap(), std::fs::read(&again[1]).unwrap());
    }

    #[test]
    fn single_row_report_has_no_fit_line() {
        let rep = ConvergenceReport {
            quantity: "single".into(),
            rows: vec![ConvergenceRow { eps: 0.1, value: 1.0 }],
            slope: 0.0,
            interval: (0.0, 0.0),
            goodness: 1.0,
            claimed: 1.0,
            floor: 0.9,
            pass: false,
        };
        let dir = tempfile::tempdir().unwrap();
        let paths = emit_plotdata(&rep, dir.path()).unwrap();
        let dat = std::fs::read_to_string(&paths[0]).unwrap();
        assert_eq!(dat.lines().count(), 1);
        let svg = std::fs::read_to_string(&paths[1]).unwrap();
        assert!(!svg.contains("<line"));
    }

    #[test]
    fn empty_report_is_rejected() {
        let rep = ConvergenceReport {
            quantity: "empty".into(),
            rows: vec![],
            slope: 0.0,
            interval: (0.0, 0.0),
            goodness: 0.0,
            claimed: 0.0,
            floor: 0.0,
            pass: false,
        };
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            emit_plotdata(&rep, dir.path()),
            Err(Error::EmptyReport { .. })
        ));
    }
}
