//! Plain-text reports with stable keys.
//!
//! Reports are sections of `key = value` lines. Real values are printed with
//! six significant digits.

use std::fmt::Write as _;

use crate::metrics::{MetricReport, SurfaceMetrics};
use crate::objective::ObjectiveValue;
use crate::refine::ObjectiveReport;

/// Six significant digits, `%g` style.
pub fn sig6(v: f64) -> String {
    if !v.is_finite() {
        return format!("{v}");
    }
    if v == 0.0 {
        return "0".into();
    }
    let exp = v.abs().log10().floor() as i32;
    if (-5..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let s = format!("{v:.decimals$}");
        // Rounding may carry into a new leading digit; that only adds a zero.
        trim_fraction(&s).to_string()
    } else {
        let s = format!("{v:.5e}");
        let (mantissa, e) = s.split_once('e').expect("exponent form");
        format!("{}e{}", trim_fraction(mantissa), e)
    }
}

fn trim_fraction(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn value_lines(out: &mut String, prefix: &str, v: &ObjectiveValue) {
    let _ = writeln!(out, "{prefix}.total = {}", sig6(v.total));
    let _ = writeln!(out, "{prefix}.img = {}", sig6(v.img_term));
    let _ = writeln!(out, "{prefix}.seg = {}", sig6(v.seg_term));
    let _ = writeln!(out, "{prefix}.reg = {}", sig6(v.reg_term));
}

/// One section per pyramid level, coarsest first.
pub fn objective_report_text(atlas: usize, levels: &[ObjectiveReport]) -> String {
    let mut out = String::new();
    for (l, r) in levels.iter().enumerate() {
        let _ = writeln!(out, "[objective.atlas_{atlas}.level_{l}]");
        let _ = writeln!(out, "iterations_run = {}", r.iterations_run);
        let _ = writeln!(out, "stop_reason = {}", r.stop_reason.as_str());
        let _ = writeln!(out, "best_iteration = {}", r.best_iteration);
        value_lines(&mut out, "initial", r.initial());
        value_lines(&mut out, "best", r.best());
        value_lines(&mut out, "last", r.values.last().expect("at least one value"));
        out.push('\n');
    }
    out
}

fn surface_lines(out: &mut String, s: Option<SurfaceMetrics>) {
    match s {
        Some(s) => {
            let _ = writeln!(out, "asd = {}", sig6(s.asd));
            let _ = writeln!(out, "sd = {}", sig6(s.sd));
            let _ = writeln!(out, "md95 = {}", sig6(s.md95));
        }
        None => {
            for key in ["asd", "sd", "md95"] {
                let _ = writeln!(out, "{key} = absent");
            }
        }
    }
}

pub fn metric_report_text(r: &MetricReport) -> String {
    let mut out = String::new();
    for m in &r.labels {
        let _ = writeln!(out, "[label.{}]", m.label);
        let _ = writeln!(out, "vd = {}", sig6(m.vd));
        surface_lines(&mut out, m.surface);
        out.push('\n');
    }
    for g in &r.groups {
        let _ = writeln!(out, "[group.{}]", g.name);
        let labels: Vec<String> = g.labels.iter().map(u8::to_string).collect();
        let _ = writeln!(out, "labels = {}", labels.join(","));
        let _ = writeln!(out, "vd = {}", sig6(g.vd));
        surface_lines(&mut out, g.surface);
        out.push('\n');
    }
    out
}
