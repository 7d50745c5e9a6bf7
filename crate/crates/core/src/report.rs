//! CSV and JSON emission for ticket reports and overlap matrices.

use std::path::{Path, PathBuf};

use serde_json::json;

use crate::analysis::{OverlapMatrix, TicketRecord, TicketReport};
use crate::artifact::write_atomic;
use crate::error::{Error, Result};

pub const TICKET_SCHEMA: &str = "ticket_report/v1";
pub const OVERLAP_SCHEMA: &str = "overlap_matrix/v1";

const COLUMNS: [&str; 12] = [
    "source_task",
    "target_task",
    "method",
    "training",
    "sparsity",
    "trunk_sparsity",
    "seed",
    "accuracy",
    "dense_reference_accuracy",
    "relaxed_verdict",
    "config_hash",
    "mask_hash",
];

fn acc(v: f64) -> String {
    format!("{v:.4}")
}

/// CSV text: a `#schema=...` line, a header row, then rows sorted by key.
pub fn ticket_csv(report: &TicketReport) -> Result<String> {
    let mut sorted = report.clone();
    sorted.sort();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(COLUMNS)?;
    for r in &sorted.records {
        w.write_record([
            r.source_task.clone(),
            r.target_task.clone(),
            r.method.to_string(),
            r.training.clone(),
            r.sparsity.to_string(),
            r.trunk_sparsity.to_string(),
            r.seed.to_string(),
            acc(r.accuracy),
            acc(r.dense_reference_accuracy),
            r.relaxed_verdict.to_string(),
            r.config_hash.clone(),
            r.mask_hash.clone(),
        ])?;
    }
    let body = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    let body = String::from_utf8(body).map_err(|e| Error::Format(e.to_string()))?;
    Ok(format!(
        "#schema={TICKET_SCHEMA};config={};p={}\n{body}",
        report.config_hash, report.p
    ))
}

fn header_fields(line: &str, schema: &str) -> Result<Vec<(String, String)>> {
    let rest = line
        .strip_prefix('#')
        .ok_or_else(|| Error::Format("missing schema header line".into()))?;
    let fields: Vec<(String, String)> = rest
        .split(';')
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::Format(format!("malformed header field `{kv}`")))
        })
        .collect::<Result<_>>()?;
    match fields.first() {
        Some((k, v)) if k == "schema" && v == schema => Ok(fields),
        _ => Err(Error::Format(format!("expected schema {schema}"))),
    }
}

fn field<'a>(fields: &'a [(String, String)], key: &str) -> Result<&'a str> {
    fields
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::Format(format!("header lacks `{key}`")))
}

fn parse<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Format(format!("bad {what} `{s}`")))
}

/// Inverse of [`ticket_csv`]; accuracies come back rounded to 4 places.
pub fn parse_ticket_csv(text: &str) -> Result<TicketReport> {
    let (first, _) = text.split_once('\n').unwrap_or((text, ""));
    let fields = header_fields(first, TICKET_SCHEMA)?;
    let mut report = TicketReport::new(parse(field(&fields, "p")?, "p")?, field(&fields, "config")?);
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    if rdr.headers()?.iter().ne(COLUMNS) {
        return Err(Error::Format("unexpected column order".into()));
    }
    for row in rdr.records() {
        let row = row?;
        let c = |i: usize| row.get(i).unwrap_or_default();
        report.records.push(TicketRecord {
            source_task: c(0).into(),
            target_task: c(1).into(),
            method: c(2).parse()?,
            training: c(3).into(),
            sparsity: parse(c(4), "sparsity")?,
            trunk_sparsity: parse(c(5), "trunk_sparsity")?,
            seed: parse(c(6), "seed")?,
            accuracy: parse(c(7), "accuracy")?,
            dense_reference_accuracy: parse(c(8), "dense_reference_accuracy")?,
            relaxed_verdict: parse(c(9), "relaxed_verdict")?,
            config_hash: c(10).into(),
            mask_hash: c(11).into(),
        });
    }
    Ok(report)
}

/// Machine-readable companion with per-cell means and standard deviations.
pub fn ticket_summary_json(report: &TicketReport) -> Result<String> {
    let mut sorted = report.clone();
    sorted.sort();
    let doc = json!({
        "schema": TICKET_SCHEMA,
        "config_hash": report.config_hash,
        "p": report.p,
        "cells": report.summarize(),
        "records": sorted.records,
    });
    Ok(serde_json::to_string_pretty(&doc)? + "\n")
}

/// Write `<stem>.csv` and `<stem>.json` under `dir`.
pub fn emit_ticket_report(report: &TicketReport, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
    let csv_path = dir.join(format!("{stem}.csv"));
    let json_path = dir.join(format!("{stem}.json"));
    write_atomic(&csv_path, ticket_csv(report)?.as_bytes())?;
    write_atomic(&json_path, ticket_summary_json(report)?.as_bytes())?;
    Ok((csv_path, json_path))
}

pub fn overlap_csv(m: &OverlapMatrix, config_hash: &str) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(std::iter::once("mask".to_string()).chain(m.labels.iter().cloned()))?;
    for (label, row) in m.labels.iter().zip(&m.values) {
        w.write_record(std::iter::once(label.clone()).chain(row.iter().map(|v| format!("{v:.4}"))))?;
    }
    let body = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    let body = String::from_utf8(body).map_err(|e| Error::Format(e.to_string()))?;
    Ok(format!(
        "#schema={OVERLAP_SCHEMA};config={config_hash};sparsity={}\n{body}",
        m.sparsity
    ))
}

/// Inverse of [`overlap_csv`]; values come back rounded to 4 places.
pub fn parse_overlap_csv(text: &str) -> Result<OverlapMatrix> {
    let (first, _) = text.split_once('\n').unwrap_or((text, ""));
    let fields = header_fields(first, OVERLAP_SCHEMA)?;
    let sparsity = parse(field(&fields, "sparsity")?, "sparsity")?;
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let labels: Vec<String> = rdr.headers()?.iter().skip(1).map(String::from).collect();
    let mut values = Vec::new();
    for row in rdr.records() {
        let row = row?;
        values.push(row.iter().skip(1).map(|v| parse(v, "overlap")).collect::<Result<Vec<f64>>>()?);
    }
    Ok(OverlapMatrix { labels, sparsity, values })
}

pub fn emit_overlap(m: &OverlapMatrix, config_hash: &str, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
    let csv_path = dir.join(format!("{stem}.csv"));
    let json_path = dir.join(format!("{stem}.json"));
    write_atomic(&csv_path, overlap_csv(m, config_hash)?.as_bytes())?;
    let doc = json!({ "schema": OVERLAP_SCHEMA, "config_hash": config_hash, "matrix": m });
    write_atomic(&json_path, (serde_json::to_string_pretty(&doc)? + "\n").as_bytes())?;
    Ok((csv_path, json_path))
}
