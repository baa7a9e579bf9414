//! Per-batch metric records, their CSV form, and the stream driver.

use std::io::Write;

use crate::data::{build_stream, CorruptionKind, DomainId, StreamBatch};
use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::runtime::{Adapter, BnBaseline, DardaRuntime, EntropyBaseline, Method, Models, NoAdaptation};
use crate::scalar::Scalar;

pub const METRIC_COLUMNS: [&str; 10] = [
    "batch_idx",
    "true_domain",
    "assigned_domain",
    "shift_event",
    "bn_update",
    "adapt_step",
    "batch_accuracy",
    "forward_macs",
    "backward_samples",
    "mem_proxy_bytes",
];

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub batch_idx: usize,
    pub true_domain: DomainId,
    pub assigned_domain: Option<DomainId>,
    pub shift_event: bool,
    pub bn_update: bool,
    pub adapt_step: bool,
    pub batch_accuracy: f64,
    pub forward_macs: u64,
    pub backward_samples: u64,
    pub mem_proxy_bytes: u64,
}

fn domain_name(d: DomainId) -> String {
    d.to_string()
}

fn parse_domain(s: &str) -> Result<DomainId> {
    CorruptionKind::from_name(s).map(CorruptionKind::domain).ok_or_else(|| Error::CorruptData(format!("unknown domain {s:?}")))
}

pub fn write_metrics_csv(out: &mut impl Write, records: &[MetricRecord]) -> std::io::Result<()> {
    writeln!(out, "{}", METRIC_COLUMNS.join(","))?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{:.6},{},{},{}",
            r.batch_idx,
            domain_name(r.true_domain),
            r.assigned_domain.map_or_else(|| "none".to_string(), domain_name),
            u8::from(r.shift_event),
            u8::from(r.bn_update),
            u8::from(r.adapt_step),
            r.batch_accuracy,
            r.forward_macs,
            r.backward_samples,
            r.mem_proxy_bytes,
        )?;
    }
    Ok(())
}

fn field<T: std::str::FromStr>(line: usize, name: &str, s: &str) -> Result<T> {
    s.parse().map_err(|_| Error::CorruptData(format!("line {line}: bad {name} {s:?}")))
}

fn flag(line: usize, name: &str, s: &str) -> Result<bool> {
    match s {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(Error::CorruptData(format!("line {line}: {name} must be 0 or 1, got {s:?}"))),
    }
}

pub fn read_metrics_csv(text: &str) -> Result<Vec<MetricRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == METRIC_COLUMNS.join(",") => {}
        _ => return Err(Error::CorruptData("metrics header does not match".into())),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let n = i + 1;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != METRIC_COLUMNS.len() {
            return Err(Error::CorruptData(format!("line {n}: {} columns, expected {}", f.len(), METRIC_COLUMNS.len())));
        }
        out.push(MetricRecord {
            batch_idx: field(n, "batch_idx", f[0])?,
            true_domain: parse_domain(f[1])?,
            assigned_domain: if f[2] == "none" { None } else { Some(parse_domain(f[2])?) },
            shift_event: flag(n, "shift_event", f[3])?,
            bn_update: flag(n, "bn_update", f[4])?,
            adapt_step: flag(n, "adapt_step", f[5])?,
            batch_accuracy: field(n, "batch_accuracy", f[6])?,
            forward_macs: field(n, "forward_macs", f[7])?,
            backward_samples: field(n, "backward_samples", f[8])?,
            mem_proxy_bytes: field(n, "mem_proxy_bytes", f[9])?,
        });
    }
    Ok(out)
}

/// Feeds the stream to `adapter` batch by batch. Labels are used only to
/// score the returned predictions.
pub fn drive<T: Scalar>(adapter: &mut dyn Adapter<T>, stream: &[StreamBatch<T>]) -> Result<Vec<MetricRecord>> {
    let mut out = Vec::with_capacity(stream.len());
    for (batch_idx, batch) in stream.iter().enumerate() {
        let o = adapter.process_batch(&batch.pixels)?;
        let correct = o.predictions.iter().zip(&batch.truth.labels).filter(|(p, y)| p == y).count();
        out.push(MetricRecord {
            batch_idx,
            true_domain: batch.truth.domain,
            assigned_domain: o.assigned,
            shift_event: o.shift_event,
            bn_update: o.bn_update,
            adapt_step: o.adapt_step,
            batch_accuracy: correct as f64 / batch.truth.labels.len() as f64,
            forward_macs: o.forward_macs,
            backward_samples: o.backward_samples,
            mem_proxy_bytes: o.mem_proxy_bytes,
        });
    }
    Ok(out)
}

/// Runs one method over a prepared stream. Baselines start from the clean
/// sub-network.
pub fn run_method<T: Scalar>(cfg: &ExperimentConfig, method: Method, models: &Models<T>, stream: &[StreamBatch<T>]) -> Result<Vec<MetricRecord>> {
    let clean = || models.bank.instantiate(DomainId::CLEAN);
    match method {
        Method::Darda => drive(&mut DardaRuntime::new(models, cfg.adaptation.clone())?, stream),
        Method::Bn => drive(&mut BnBaseline { net: clean()? }, stream),
        Method::Entropy => drive(&mut EntropyBaseline::new(clean()?, cfg.adaptation.lr), stream),
        Method::None => drive(&mut NoAdaptation { net: clean()? }, stream),
    }
}

/// Builds the configured stream from the clean test split and runs `method`.
pub fn run_stream<T: Scalar>(cfg: &ExperimentConfig, method: Method, models: &Models<T>, test: &crate::data::Dataset<T>) -> Result<Vec<MetricRecord>> {
    let stream = build_stream(&cfg.stream_config(), test)?;
    run_method(cfg, method, models, &stream)
}

/// Sample-weighted mean accuracy given the size of each batch.
pub fn weighted_accuracy(records: &[MetricRecord], sizes: &[usize]) -> f64 {
    let (hit, n) = records.iter().zip(sizes).fold((0.0, 0usize), |(h, n), (r, &s)| (h + r.batch_accuracy * s as f64, n + s));
    if n == 0 {
        0.0
    } else {
        hit / n as f64
    }
}
