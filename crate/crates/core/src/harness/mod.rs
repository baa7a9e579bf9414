//! Experiment orchestration: configuration, checkpoints, stages, metrics
//! and reports.

pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod pipeline;
pub mod report;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TensorData};
pub use config::{parse_config, ExperimentConfig};
pub use metrics::{read_metrics_csv, run_method, run_stream, write_metrics_csv, MetricRecord, METRIC_COLUMNS};
pub use pipeline::{DataSplits, Stage, Trained, Workspace};
pub use report::{render_table, summarize, SummaryRow};

use crate::error::{Error, Result};
use crate::runtime::Method;
use crate::scalar::Scalar;

/// What a stage left behind, for the caller to print.
#[derive(Clone, Debug, PartialEq)]
pub enum StageOutput {
    Data { train: usize, test: usize },
    Losses(Vec<f64>),
    Subnets(usize),
    Metrics { method: Method, batches: usize, accuracy: f64 },
    Report { rows: Vec<SummaryRow>, table: String },
}

/// Runs `stage` against the artifacts in `ws`. `method` overrides the
/// configured one for `run-stream`.
pub fn run_stage<T: Scalar>(stage: Stage, cfg: &ExperimentConfig, ws: &Workspace, method: Option<Method>) -> Result<StageOutput> {
    match stage {
        Stage::GenData => {
            let d = pipeline::run_gen_data::<T>(cfg, ws)?;
            Ok(StageOutput::Data { train: d.train.len(), test: d.test.len() })
        }
        Stage::TrainBackbone => pipeline::run_train_backbone::<T>(cfg, ws).map(StageOutput::Losses),
        Stage::TrainSubnets => pipeline::run_train_subnets::<T>(cfg, ws).map(StageOutput::Subnets),
        Stage::TrainEncoders => Ok(StageOutput::Losses(pipeline::run_train_encoders::<T>(cfg, ws)?.iter().map(|e| e.loss).collect())),
        Stage::TrainSignet => pipeline::run_train_signet::<T>(cfg, ws).map(StageOutput::Losses),
        Stage::RunStream => {
            let method = method.unwrap_or(cfg.method);
            let trained = Trained::<T>::load(ws)?;
            let records = run_stream(cfg, method, &trained.models, &trained.data.test)?;
            ws.write_text(&pipeline::metrics_file(method.name()), |w| write_metrics_csv(w, &records))?;
            let sizes = report::stream_batch_sizes(trained.data.test.len(), cfg.stream_sequence().len(), cfg.stream.batch_size);
            Ok(StageOutput::Metrics { method, batches: records.len(), accuracy: metrics::weighted_accuracy(&records, &sizes) })
        }
        Stage::Report => {
            ws.require(Stage::Report)?;
            let data = DataSplits::<T>::from_checkpoint(&ws.load(pipeline::DATA_FILE)?)?;
            let sizes = report::stream_batch_sizes(data.test.len(), cfg.stream_sequence().len(), cfg.stream.batch_size);
            let mut rows = Vec::new();
            for m in Method::ALL {
                let path = ws.path(&pipeline::metrics_file(m.name()));
                if !path.is_file() {
                    continue;
                }
                let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                rows.extend(summarize(m, &read_metrics_csv(&text)?, &sizes)?);
            }
            if rows.is_empty() {
                return Err(Error::MissingArtifact { artifact: ws.path(&pipeline::metrics_file(cfg.method.name())), stage: Stage::RunStream.name() });
            }
            ws.write_text(pipeline::REPORT_CSV, |w| report::write_report_csv(w, &rows))?;
            let table = render_table(&rows);
            Ok(StageOutput::Report { rows, table })
        }
    }
}
