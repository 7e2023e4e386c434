use super::{BenchError, BenchReport, Summary};
use crate::metrics::Metric;

/// Scales a raw value for display and keeps three significant figures,
/// dropping trailing zeros.
pub fn format_value(raw: f64, metric: Metric) -> String {
    let v = raw * metric.display_scale();
    if !v.is_finite() {
        return v.to_string();
    }
    if v == 0.0 {
        return "0".into();
    }
    let magnitude = v.abs().log10().floor() as i32;
    let decimals = (2 - magnitude).max(0) as usize;
    let s = format!("{v:.decimals$}");
    let s = if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    };
    if s == "-0" {
        "0".into()
    } else {
        s
    }
}

fn cell(s: Option<Summary>, metric: Metric) -> String {
    s.map_or_else(|| "n/a".into(), |s| format_value(s.mean, metric))
}

/// Markdown table of per-shape means, one row per (pattern, method) and a
/// pooled block at the end. CD, EMD, UHD, MMD and TMD are shown ×10², UCD ×10⁴.
pub fn render_markdown(report: &BenchReport) -> Result<String, BenchError> {
    if report.rows.is_empty() {
        return Err(BenchError::EmptyReport);
    }
    let mut out = String::from(
        "| Pattern | Method | CD / EMD (×10²) | UCD (×10⁴) | UHD (×10²) | MMD (×10²) | TMD (×10²) | Failed |\n\
         |---|---|---|---|---|---|---|---|\n",
    );
    for a in report.aggregates() {
        out.push_str(&format!(
            "| {} | {} | {} / {} | {} | {} | {} | {} | {}/{} |\n",
            a.pattern.map_or("all", |p| p.name()),
            a.method,
            cell(a.cd, Metric::Cd),
            cell(a.emd, Metric::Emd),
            cell(a.ucd, Metric::Ucd),
            cell(a.uhd, Metric::Uhd),
            cell(a.mmd, Metric::Mmd),
            cell(a.tmd, Metric::Tmd),
            a.failures,
            a.rows,
        ));
    }
    Ok(out)
}
