//! Report files.
//!
//! CSV: one row per cell with the columns in [`CSV_COLUMNS`]. Failed cells leave the
//! metric columns empty and carry the message in `error`.
//!
//! JSON: an object with `rows`, `mechanism_only` (same row objects) and `aggregates`.
//! Row objects hold the CSV fields plus `per_step_losses` as `[t, loss]` pairs.
//! Non-finite numbers are written as the strings `"inf"`, `"-inf"` and `"nan"`.

use std::io::Write;

use serde_json::{json, Value};

use super::sweep::{Aggregate, SweepReport, SweepRow};
use crate::error::{FecError, Result};

pub const CSV_COLUMNS: [&str; 12] = [
    "method",
    "inversion_guidance",
    "sampling_guidance",
    "prompt_type",
    "seed",
    "latent_loss",
    "psnr",
    "ssim",
    "inversion_ms",
    "sampling_ms",
    "mechanism_only",
    "error",
];

/// Shortest round-trip decimal, or `inf` / `-inf` / `nan`.
pub fn format_metric(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v}")
    }
}

fn json_number(v: f64) -> Value {
    if v.is_finite() { json!(v) } else { Value::String(format_metric(v)) }
}

fn csv_record(row: &SweepRow) -> Vec<String> {
    let metric = |f: fn(&crate::metrics::MetricsReport) -> f64| {
        row.metrics.as_ref().map(|m| format_metric(f(m))).unwrap_or_default()
    };
    vec![
        row.method.clone(),
        format_metric(row.inversion_guidance),
        format_metric(row.sampling_guidance),
        row.prompt_type.name().to_string(),
        row.seed.to_string(),
        metric(|m| m.latent_loss),
        metric(|m| m.psnr),
        metric(|m| m.ssim),
        format!("{:.3}", row.inversion_ms),
        format!("{:.3}", row.sampling_ms),
        row.mechanism_only.to_string(),
        row.error.clone().unwrap_or_default(),
    ]
}

/// Writes `rows` followed by `mechanism_only` rows.
pub fn write_csv<W: Write>(w: W, report: &SweepReport) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let csv_err = |e: csv::Error| FecError::Format(format!("csv: {e}"));
    out.write_record(CSV_COLUMNS).map_err(csv_err)?;
    for row in report.rows.iter().chain(&report.mechanism_only) {
        out.write_record(csv_record(row)).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

fn row_json(row: &SweepRow) -> Value {
    let metric = |f: fn(&crate::metrics::MetricsReport) -> f64| {
        row.metrics.as_ref().map(|m| json_number(f(m))).unwrap_or(Value::Null)
    };
    let steps: Vec<Value> = row
        .metrics
        .as_ref()
        .map(|m| m.per_step_losses.iter().map(|&(t, l)| json!([t, json_number(l)])).collect())
        .unwrap_or_default();
    json!({
        "method": row.method,
        "inversion_guidance": json_number(row.inversion_guidance),
        "sampling_guidance": json_number(row.sampling_guidance),
        "prompt_type": row.prompt_type.name(),
        "seed": row.seed,
        "latent_loss": metric(|m| m.latent_loss),
        "psnr": metric(|m| m.psnr),
        "ssim": metric(|m| m.ssim),
        "inversion_ms": row.inversion_ms,
        "sampling_ms": row.sampling_ms,
        "mechanism_only": row.mechanism_only,
        "error": row.error,
        "per_step_losses": steps,
    })
}

fn aggregate_json(a: &Aggregate) -> Value {
    json!({
        "method": a.method,
        "inversion_guidance": json_number(a.inversion_guidance),
        "sampling_guidance": json_number(a.sampling_guidance),
        "prompt_type": a.prompt_type.name(),
        "cells": a.cells,
        "failures": a.failures,
        "mean_latent_loss": json_number(a.mean_latent_loss),
        "mean_psnr": json_number(a.mean_psnr),
        "mean_ssim": json_number(a.mean_ssim),
    })
}

pub fn report_json(report: &SweepReport) -> Value {
    json!({
        "rows": report.rows.iter().map(row_json).collect::<Vec<_>>(),
        "mechanism_only": report.mechanism_only.iter().map(row_json).collect::<Vec<_>>(),
        "aggregates": report.aggregate().iter().map(aggregate_json).collect::<Vec<_>>(),
    })
}

pub fn write_json<W: Write>(mut w: W, report: &SweepReport) -> Result<()> {
    serde_json::to_writer_pretty(&mut w, &report_json(report))
        .map_err(|e| FecError::Format(format!("json: {e}")))?;
    writeln!(w)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::PromptType;
    use crate::metrics::MetricsReport;

    fn row(method: &str, seed: u64, loss: f64, psnr: f64) -> SweepRow {
        SweepRow {
            method: method.into(),
            inversion_guidance: 7.5,
            sampling_guidance: 7.5,
            prompt_type: PromptType::NonEmpty,
            seed,
            metrics: Some(MetricsReport { latent_loss: loss, psnr, ssim: 1.0, per_step_losses: vec![(20, loss)] }),
            inversion_ms: 1.0,
            sampling_ms: 2.0,
            mechanism_only: false,
            error: None,
        }
    }

    #[test]
    fn formats() {
        assert_eq!(format_metric(f64::INFINITY), "inf");
        assert_eq!(format_metric(0.1), "0.1");
        assert_eq!(format_metric(7.5), "7.5");
    }

    #[test]
    fn csv_and_json_write_inf() {
        let mut failed = row("direct", 1, 0.0, 0.0);
        failed.metrics = None;
        failed.error = Some("boom".into());
        let report = SweepReport { rows: vec![row("fec-ref", 0, 0.0, f64::INFINITY), failed], mechanism_only: vec![] };
        let mut buf = Vec::new();
        write_csv(&mut buf, &report).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], CSV_COLUMNS.join(","));
        assert!(lines[1].starts_with("fec-ref,7.5,7.5,non-empty,0,0,inf,1,"));
        assert!(lines[2].ends_with(",,,,1.000,2.000,false,boom"));
        let mut buf = Vec::new();
        write_json(&mut buf, &report).unwrap();
        let v: Value = serde_json::from_slice(&buf).unwrap();
        assert_eq!(v["rows"][0]["psnr"], "inf");
        assert_eq!(v["rows"][1]["latent_loss"], Value::Null);
        assert_eq!(v["aggregates"].as_array().unwrap().len(), 2);
    }
}
