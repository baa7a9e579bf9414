//! Aggregation of metrics CSVs into one row per (method, domain).

use std::fmt::Write as _;
use std::io::Write;

use crate::data::DomainId;
use crate::error::{Error, Result};
use crate::harness::metrics::MetricRecord;
use crate::runtime::Method;

pub const REPORT_COLUMNS: [&str; 8] = ["method", "domain", "batches", "samples", "accuracy", "forward_macs", "backward_samples", "mem_proxy_peak_bytes"];

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub method: Method,
    pub domain: DomainId,
    pub batches: usize,
    pub samples: usize,
    pub accuracy: f64,
    pub forward_macs: u64,
    pub backward_samples: u64,
    pub mem_proxy_peak_bytes: u64,
}

/// Batch sizes of a stream over `segments` domains of `len` samples each.
pub fn stream_batch_sizes(len: usize, segments: usize, batch_size: usize) -> Vec<usize> {
    let per: Vec<usize> = (0..len.div_ceil(batch_size)).map(|i| batch_size.min(len - i * batch_size)).collect();
    per.repeat(segments)
}

/// Domains appear in order of first occurrence in the stream.
pub fn summarize(method: Method, records: &[MetricRecord], sizes: &[usize]) -> Result<Vec<SummaryRow>> {
    if records.len() != sizes.len() {
        return Err(Error::CorruptData(format!("{} metric rows for a stream of {} batches", records.len(), sizes.len())));
    }
    let mut rows: Vec<(SummaryRow, f64)> = Vec::new();
    for (r, &n) in records.iter().zip(sizes) {
        let i = match rows.iter().position(|(s, _)| s.domain == r.true_domain) {
            Some(i) => i,
            None => {
                rows.push((
                    SummaryRow { method, domain: r.true_domain, batches: 0, samples: 0, accuracy: 0.0, forward_macs: 0, backward_samples: 0, mem_proxy_peak_bytes: 0 },
                    0.0,
                ));
                rows.len() - 1
            }
        };
        let (row, hits) = &mut rows[i];
        row.batches += 1;
        row.samples += n;
        *hits += r.batch_accuracy * n as f64;
        row.forward_macs += r.forward_macs;
        row.backward_samples += r.backward_samples;
        row.mem_proxy_peak_bytes = row.mem_proxy_peak_bytes.max(r.mem_proxy_bytes);
    }
    Ok(rows
        .into_iter()
        .map(|(mut row, hits)| {
            row.accuracy = hits / row.samples as f64;
            row
        })
        .collect())
}

pub fn write_report_csv(out: &mut impl Write, rows: &[SummaryRow]) -> std::io::Result<()> {
    writeln!(out, "{}", REPORT_COLUMNS.join(","))?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{:.6},{},{},{}",
            r.method.name(),
            r.domain,
            r.batches,
            r.samples,
            r.accuracy,
            r.forward_macs,
            r.backward_samples,
            r.mem_proxy_peak_bytes
        )?;
    }
    Ok(())
}

/// Fixed-width table of the summary rows.
pub fn render_table(rows: &[SummaryRow]) -> String {
    let cells: Vec<[String; 8]> = rows
        .iter()
        .map(|r| {
            [
                r.method.name().to_string(),
                r.domain.to_string(),
                r.batches.to_string(),
                r.samples.to_string(),
                format!("{:.2}%", 100.0 * r.accuracy),
                format!("{:.3e}", r.forward_macs as f64),
                r.backward_samples.to_string(),
                format!("{:.2} MiB", r.mem_proxy_peak_bytes as f64 / (1024.0 * 1024.0)),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = REPORT_COLUMNS.iter().map(|c| c.len()).collect();
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let mut s = String::new();
    let line = |s: &mut String, cols: &mut dyn Iterator<Item = &str>| {
        let parts: Vec<String> = cols.zip(&widths).enumerate().map(|(i, (c, w))| if i < 2 { format!("{c:<w$}") } else { format!("{c:>w$}") }).collect();
        let _ = writeln!(s, "{}", parts.join("  ").trim_end());
    };
    line(&mut s, &mut REPORT_COLUMNS.iter().copied());
    let _ = writeln!(s, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    for row in &cells {
        line(&mut s, &mut row.iter().map(String::as_str));
    }
    s
}
