//! Report files: results table, JSON summary and SVG line charts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{AnalysisReport, Condition, RunReport};
use crate::error::{Error, Result};

pub const RESULTS_HEADER: &str =
    "condition,tau1,tau2,seed,teacher_train_acc,teacher_test_acc,student_test_acc,da_mean,dv_mean,iv_mean";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn format_results_csv(report: &RunReport) -> String {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for r in &report.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.condition.name(),
            r.tau1,
            r.tau2,
            r.seed,
            opt(r.teacher_train_acc),
            opt(r.teacher_test_acc),
            r.student_test_acc,
            opt(r.da_mean),
            opt(r.dv_mean),
            opt(r.iv_mean),
        );
    }
    out
}

fn write(path: PathBuf, contents: &str) -> Result<PathBuf> {
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// One polyline in a chart.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// A fixed-size SVG line chart. With `log_x` the x axis is base-2
/// logarithmic; non-positive x values are then skipped.
pub fn line_chart_svg(title: &str, x_label: &str, y_label: &str, series: &[Series], log_x: bool) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (70.0, 160.0, 40.0, 50.0);
    let tx = |x: f64| if log_x { x.log2() } else { x };
    let pts: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.points.iter().copied())
        .filter(|(x, y)| x.is_finite() && y.is_finite() && (!log_x || *x > 0.0))
        .map(|(x, y)| (tx(x), y))
        .collect();
    let range = |vals: &mut dyn Iterator<Item = f64>| {
        let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi - lo < 1e-300 {
            (lo - 0.5, hi + 0.5)
        } else {
            (lo, hi)
        }
    };
    let (x0, x1) = range(&mut pts.iter().map(|p| p.0));
    let (y0, y1) = range(&mut pts.iter().map(|p| p.1));
    let pw = w - left - right;
    let ph = h - top - bottom;
    let sx = |x: f64| left + (tx(x) - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, left + pw / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let xv = x0 + f * (x1 - x0);
        let yv = y0 + f * (y1 - y0);
        let px = left + f * pw;
        let py = top + ph - f * ph;
        let xt = if log_x { 2f64.powf(xv) } else { xv };
        let _ = writeln!(s, r#"<text x="{px:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, top + ph + 16.0, tick(xt));
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, left - 6.0, py + 4.0, tick(yv));
    }
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, left + pw / 2.0, h - 12.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        escape(y_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = ser
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite() && (!log_x || *x > 0.0))
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        if !path.is_empty() {
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
                path.join(" ")
            );
        }
        let ly = top + 14.0 + 18.0 * i as f64;
        let lx = w - right + 12.0;
        let _ = writeln!(s, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, lx + 20.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, lx + 26.0, ly + 4.0, escape(&ser.name));
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-3 || v.abs() >= 1e4) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn accuracy_series(report: &RunReport) -> Vec<Series> {
    let mut conditions: Vec<Condition> = Vec::new();
    for r in &report.rows {
        if !conditions.contains(&r.condition) {
            conditions.push(r.condition);
        }
    }
    conditions
        .into_iter()
        .map(|c| {
            let mut points: Vec<(f64, f64, Vec<f64>)> = Vec::new();
            for r in report.rows_for(c) {
                match points.iter_mut().find(|p| p.0 == r.tau1 && p.1 == r.tau2) {
                    Some(p) => p.2.push(r.student_test_acc),
                    None => points.push((r.tau1, r.tau2, vec![r.student_test_acc])),
                }
            }
            Series {
                name: c.name().to_string(),
                points: points
                    .into_iter()
                    .map(|(t1, _, accs)| (t1, accs.iter().sum::<f64>() / accs.len() as f64))
                    .collect(),
            }
        })
        .collect()
}

fn curve_series(report: &RunReport, pick: fn(&super::CurvePoint) -> f64) -> Vec<Series> {
    let mut roles: Vec<&str> = Vec::new();
    for t in &report.teachers {
        if !roles.contains(&t.role.as_str()) && t.role != "shuffled-control" {
            roles.push(&t.role);
        }
    }
    let mut out = Vec::new();
    for role in roles {
        let of_role: Vec<_> = report.teachers.iter().filter(|t| t.role == role).collect();
        let mean_curve = |ats: bool| -> Vec<(f64, f64)> {
            let first = if ats { &of_role[0].ats_curve } else { &of_role[0].ts_curve };
            (0..first.len())
                .map(|i| {
                    let sum: f64 = of_role
                        .iter()
                        .map(|t| pick(if ats { &t.ats_curve[i] } else { &t.ts_curve[i] }))
                        .sum();
                    (first[i].tau, sum / of_role.len() as f64)
                })
                .collect()
        };
        out.push(Series {
            name: format!("{role} ts"),
            points: mean_curve(false),
        });
        out.push(Series {
            name: format!("{role} ats"),
            points: mean_curve(true),
        });
    }
    out
}

/// Writes `results.csv`, `summary.json` and the charts into `dir`,
/// returning the written paths in a fixed order.
pub fn emit_report(report: &RunReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = vec![
        write(dir.join("results.csv"), &format_results_csv(report))?,
        write(
            dir.join("summary.json"),
            &(serde_json::to_string_pretty(report)
                .map_err(|e| Error::contract(format!("summary serialization: {e}")))?
                + "\n"),
        )?,
    ];
    written.push(write(
        dir.join("accuracy_vs_tau.svg"),
        &line_chart_svg(
            "Student test accuracy (mean over seeds)",
            "teacher tau (tau1 for ats)",
            "accuracy",
            &accuracy_series(report),
            true,
        ),
    )?);
    let curves: [(&str, &str, fn(&super::CurvePoint) -> f64); 3] = [
        ("da_vs_tau.svg", "derived average", |p| p.da),
        ("dv_vs_tau.svg", "derived variance", |p| p.dv),
        ("iv_vs_tau.svg", "inherent variance", |p| p.iv),
    ];
    for (file, label, pick) in curves {
        written.push(write(
            dir.join(file),
            &line_chart_svg(
                &format!("Teacher label {label}"),
                "tau (ats: 1.25 tau / 0.75 tau)",
                label,
                &curve_series(report, pick),
                true,
            ),
        )?);
    }
    Ok(written)
}

pub const ANALYSIS_HEADER: &str = "source,tau1,tau2,count,assumption_violations,target_prob_mean,da_mean,da_std,dv_mean,dv_std,iv_mean,iv_std";
pub const AGREEMENT_HEADER: &str = "tau1,tau2,spearman,kendall,topk_overlap,l1_distance";

/// Writes `analysis.csv` and, for two corpora, `agreement.csv`.
pub fn emit_analysis(report: &AnalysisReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut a = String::from(ANALYSIS_HEADER);
    a.push('\n');
    for r in &report.rows {
        let s = &r.summary;
        let _ = writeln!(
            a,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.source.replace(',', "_"),
            r.temperature.target_tau(),
            r.temperature.wrong_tau(),
            s.count,
            r.assumption_violations,
            s.target_prob.mean,
            s.derived_avg.mean,
            s.derived_avg.std,
            s.derived_var.mean,
            s.derived_var.std,
            s.inherent_var.mean,
            s.inherent_var.std,
        );
    }
    let mut written = vec![write(dir.join("analysis.csv"), &a)?];
    if !report.agreement.is_empty() {
        let mut g = String::from(AGREEMENT_HEADER);
        g.push('\n');
        for r in &report.agreement {
            let _ = writeln!(
                g,
                "{},{},{},{},{},{}",
                r.temperature.target_tau(),
                r.temperature.wrong_tau(),
                r.stats.spearman,
                r.stats.kendall,
                r.stats.topk_overlap,
                r.stats.l1_distance,
            );
        }
        written.push(write(dir.join("agreement.csv"), &g)?);
    }
    Ok(written)
}
