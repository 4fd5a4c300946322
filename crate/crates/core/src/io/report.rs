//! CSV reports and small deterministic SVG charts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::analysis::{DegradationCurve, DependencyReport, Summary};
use crate::error::{Error, Result};

fn write_file(dir: &Path, name: &str, content: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, content)?;
    Ok(path)
}

pub fn loss_csv(losses: &[f64]) -> String {
    let mut out = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        writeln!(out, "{},{l}", i + 1).unwrap();
    }
    out
}

pub fn curve_csv(curve: &DegradationCurve) -> String {
    let mut out = String::from("layers,spearman\n");
    for (k, rho) in &curve.points {
        writeln!(out, "{k},{rho}").unwrap();
    }
    out
}

/// One row per analysed sentence, tagged with the plan it was scored under.
pub fn dependency_csv(reports: &[(&str, &DependencyReport)]) -> String {
    let mut out = String::from("plan,sentence,score\n");
    for (label, report) in reports {
        let analysed = (0..).filter(|i| !report.skipped.contains(i));
        for (i, s) in analysed.zip(&report.scores) {
            writeln!(out, "{label},{i},{s}").unwrap();
        }
    }
    out
}

/// Parses a two-column numeric CSV with a header line.
pub fn parse_numeric_csv(text: &str) -> Result<(String, Vec<(f64, f64)>)> {
    let mut lines = text.lines();
    let header = lines.next().ok_or(Error::EmptyInput)?.to_string();
    let rows = lines
        .enumerate()
        .map(|(i, l)| {
            let bad = || Error::Parse {
                path: PathBuf::from("<csv>"),
                line: i + 2,
                message: format!("cannot parse {l:?}"),
            };
            let (a, b) = l.split_once(',').ok_or_else(bad)?;
            Ok((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((header, rows))
}

const WIDTH: f64 = 480.0;
const HEIGHT: f64 = 320.0;
const MARGIN: f64 = 48.0;

fn svg_open(title: &str) -> String {
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#, WIDTH / 2.0, escape(title)).unwrap();
    writeln!(
        s,
        r#"<path d="M{MARGIN} {MARGIN} V{y} H{x}" stroke="black" fill="none"/>"#,
        y = HEIGHT - MARGIN,
        x = WIDTH - MARGIN / 2.0
    )
    .unwrap();
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Maps `[lo, hi]` onto the plot's vertical extent; a flat range is padded.
struct YScale {
    lo: f64,
    hi: f64,
}

impl YScale {
    fn new(values: impl Iterator<Item = f64>) -> YScale {
        let (mut lo, mut hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        if !lo.is_finite() || !hi.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if hi - lo < 1e-12 {
            lo -= 0.5;
            hi += 0.5;
        }
        YScale { lo, hi }
    }

    fn at(&self, v: f64) -> f64 {
        let span = HEIGHT - 2.0 * MARGIN;
        HEIGHT - MARGIN - (v - self.lo) / (self.hi - self.lo) * span
    }

    fn ticks(&self, s: &mut String) {
        for i in 0..=4 {
            let v = self.lo + (self.hi - self.lo) * f64::from(i) / 4.0;
            let y = self.at(v);
            writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end">{v:.3}</text>"#, MARGIN - 4.0, y + 4.0).unwrap();
        }
    }
}

/// Mean ρ against the number of layers kept.
pub fn curve_svg(curve: &DegradationCurve) -> String {
    let mut s = svg_open("Spearman correlation by layers kept");
    let mut points = curve.points.clone();
    points.sort_by_key(|p| p.0);
    let scale = YScale::new(points.iter().map(|p| p.1));
    scale.ticks(&mut s);
    let span = WIDTH - 1.5 * MARGIN;
    let step = span / points.len().max(1) as f64;
    let coords: Vec<(f64, f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, (k, rho))| (MARGIN + step * (i as f64 + 0.5), scale.at(*rho), *k))
        .collect();
    let path: Vec<String> = coords.iter().map(|(x, y, _)| format!("{x:.2},{y:.2}")).collect();
    writeln!(s, r#"<polyline points="{}" stroke="steelblue" stroke-width="2" fill="none"/>"#, path.join(" ")).unwrap();
    for (x, y, k) in &coords {
        writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="3" fill="steelblue"/>"#).unwrap();
        writeln!(s, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{k}</text>"#, HEIGHT - MARGIN + 16.0).unwrap();
    }
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">layers</text>"#, WIDTH / 2.0, HEIGHT - 8.0).unwrap();
    s.push_str("</svg>\n");
    s
}

/// One box per labelled summary: whiskers at min/max, box at the quartiles.
pub fn box_plot_svg(title: &str, groups: &[(&str, Summary)]) -> String {
    let mut s = svg_open(title);
    let scale = YScale::new(groups.iter().flat_map(|(_, g)| [g.min, g.max]));
    scale.ticks(&mut s);
    let slot = (WIDTH - 1.5 * MARGIN) / groups.len().max(1) as f64;
    let half = (slot * 0.25).min(40.0);
    for (i, (label, g)) in groups.iter().enumerate() {
        let cx = MARGIN + slot * (i as f64 + 0.5);
        let (top, bottom) = (scale.at(g.q3), scale.at(g.q1));
        writeln!(
            s,
            r#"<line x1="{cx:.2}" y1="{:.2}" x2="{cx:.2}" y2="{:.2}" stroke="black"/>"#,
            scale.at(g.max),
            scale.at(g.min)
        )
        .unwrap();
        writeln!(
            s,
            r#"<rect x="{:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="lightsteelblue" stroke="black"/>"#,
            cx - half,
            2.0 * half,
            bottom - top
        )
        .unwrap();
        let med = scale.at(g.median);
        writeln!(
            s,
            r#"<line x1="{:.2}" y1="{med:.2}" x2="{:.2}" y2="{med:.2}" stroke="black" stroke-width="2"/>"#,
            cx - half,
            cx + half
        )
        .unwrap();
        writeln!(s, r#"<text x="{cx:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, HEIGHT - MARGIN + 16.0, escape(label)).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// Writes the curve as `degradation.csv` and `degradation.svg`.
pub fn emit_curve(curve: &DegradationCurve, dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(vec![
        write_file(dir, "degradation.csv", &curve_csv(curve))?,
        write_file(dir, "degradation.svg", &curve_svg(curve))?,
    ])
}

/// Writes `dependency.csv` and a box plot with one box per plan.
pub fn emit_dependency(reports: &[(&str, &DependencyReport)], dir: &Path) -> Result<Vec<PathBuf>> {
    let groups: Vec<(&str, Summary)> = reports.iter().map(|(l, r)| (*l, r.summary)).collect();
    Ok(vec![
        write_file(dir, "dependency.csv", &dependency_csv(reports))?,
        write_file(dir, "dependency.svg", &box_plot_svg("Pivot-token dependency", &groups))?,
    ])
}

pub fn emit_losses(losses: &[f64], dir: &Path) -> Result<PathBuf> {
    write_file(dir, "loss.csv", &loss_csv(losses))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve() -> DegradationCurve {
        DegradationCurve {
            points: vec![(3, 0.41), (2, 0.55), (1, 0.125)],
        }
    }

    #[test]
    fn csv_headers_and_reparse() {
        let text = curve_csv(&curve());
        assert!(text.starts_with("layers,spearman\n"));
        let (header, rows) = parse_numeric_csv(&text).unwrap();
        assert_eq!(header, "layers,spearman");
        let back: Vec<(usize, f64)> = rows.iter().map(|(k, r)| (*k as usize, *r)).collect();
        assert_eq!(back, curve().points);

        let losses = vec![2.5, 1.0 / 3.0, 0.1];
        let (header, rows) = parse_numeric_csv(&loss_csv(&losses)).unwrap();
        assert_eq!(header, "step,loss");
        assert_eq!(rows.iter().map(|r| r.1).collect::<Vec<_>>(), losses);
        assert_eq!(rows[0].0, 1.0);
    }

    #[test]
    fn dependency_rows_keep_sentence_indices() {
        let scores = vec![0.5, 0.25];
        let report = DependencyReport {
            summary: Summary::of(&scores).unwrap(),
            scores,
            skipped: vec![1],
        };
        assert_eq!(dependency_csv(&[("bi", &report)]), "plan,sentence,score\nbi,0,0.5\nbi,2,0.25\n");
    }

    #[test]
    fn svg_output_is_deterministic_and_well_formed() {
        let a = curve_svg(&curve());
        assert_eq!(a, curve_svg(&curve()));
        assert!(a.starts_with("<svg") && a.trim_end().ends_with("</svg>"));
        assert_eq!(a.matches("<circle").count(), 3);
        let s = Summary::of(&[0.1, 0.2, 0.4]).unwrap();
        let b = box_plot_svg("t", &[("uni", s), ("bi", s)]);
        assert_eq!(b, box_plot_svg("t", &[("uni", s), ("bi", s)]));
        assert_eq!(b.matches("<rect").count(), 3);
        // a single flat point must not divide by zero
        let flat = curve_svg(&DegradationCurve { points: vec![(1, 0.3)] });
        assert!(!flat.contains("NaN") && !flat.contains("inf"));
    }

    #[test]
    fn emitting_into_an_unwritable_location_fails() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, "x").unwrap();
        assert_eq!(emit_curve(&curve(), &blocker.join("sub")).unwrap_err().kind(), "io");
        let written = emit_curve(&curve(), &dir.path().join("out")).unwrap();
        assert!(written.iter().all(|p| p.exists()));
    }
}
