//! Experiment plumbing: configuration, multi-seed orchestration and output.
//!
//! Every command writes into an output directory:
//!
//! * `train`: `traces/<algorithm>_seed<seed>.jsonl`, `summary.csv`, `aggregate.csv`
//! * `bound-check`: the `train` files plus `bound.csv`
//! * `sweep`: `summary.csv`, `sweep.csv`, `sweep.txt`
//! * `mse-verify`: `mse.csv`
//! * `oracle`: `oracle.jsonl`

pub mod config;
pub mod run;
pub mod verify;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::aggregate::Formulation;
use crate::{Error, Result};
use config::{ExperimentConfig, MseGridConfig, OracleConfig};
use run::{AggregateRecord, BoundCheck, RunRecord, SummaryRecord};
use verify::{MseRow, OracleRow};

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| Error::invalid(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_error)?;
    r.deserialize().map(|row| row.map_err(csv_error)).collect()
}

fn csv_error(e: csv::Error) -> Error {
    Error::invalid(format!("csv: {e}"))
}

fn write_traces(dir: &Path, records: &[RunRecord], tag: impl Fn(&RunRecord) -> String) -> Result<()> {
    let traces = dir.join("traces");
    fs::create_dir_all(&traces)?;
    for r in records {
        write_jsonl(&traces.join(format!("{}.jsonl", tag(r))), &r.run.traces)?;
    }
    Ok(())
}

pub struct TrainOutput {
    pub records: Vec<RunRecord>,
    pub summary: Vec<SummaryRecord>,
    pub aggregate: Vec<AggregateRecord>,
}

fn summarize(cfg: &ExperimentConfig, records: Vec<RunRecord>, by_gamma: bool) -> TrainOutput {
    let summary: Vec<SummaryRecord> = records.iter().map(|r| SummaryRecord::from_run(r, cfg.threshold)).collect();
    let aggregate = run::aggregate(&summary, by_gamma);
    TrainOutput { records, summary, aggregate }
}

fn write_train(cfg: &ExperimentConfig, out: &TrainOutput) -> Result<()> {
    let dir = &cfg.output.dir;
    fs::create_dir_all(dir)?;
    if cfg.output.traces {
        write_traces(dir, &out.records, |r| format!("{}_seed{}", r.algorithm.name(), r.seed))?;
    }
    write_csv(&dir.join("summary.csv"), &out.summary)?;
    write_csv(&dir.join("aggregate.csv"), &out.aggregate)
}

pub fn cmd_train(cfg: &ExperimentConfig, jobs: Option<usize>) -> Result<TrainOutput> {
    let out = summarize(cfg, run::train(cfg, jobs)?, false);
    write_train(cfg, &out)?;
    Ok(out)
}

pub fn cmd_bound_check(cfg: &ExperimentConfig, jobs: Option<usize>) -> Result<(TrainOutput, BoundCheck)> {
    let mut check = run::bound_check(cfg, jobs)?;
    let out = summarize(cfg, std::mem::take(&mut check.records), false);
    write_train(cfg, &out)?;
    write_csv(&cfg.output.dir.join("bound.csv"), &check.rows)?;
    Ok((out, check))
}

pub fn cmd_sweep(cfg: &ExperimentConfig, jobs: Option<usize>) -> Result<TrainOutput> {
    let out = summarize(cfg, run::sweep(cfg, jobs)?, true);
    let dir = &cfg.output.dir;
    fs::create_dir_all(dir)?;
    if cfg.output.traces {
        write_traces(dir, &out.records, |r| {
            format!("{}_g{:e}_d{}_seed{}", r.algorithm.name(), r.gamma, r.delta, r.seed)
        })?;
    }
    write_csv(&dir.join("summary.csv"), &out.summary)?;
    write_csv(&dir.join("sweep.csv"), &out.aggregate)?;
    fs::write(dir.join("sweep.txt"), run::render_sweep(&out.aggregate))?;
    Ok(out)
}

pub fn cmd_mse_verify(cfg: &MseGridConfig, formulation: Formulation) -> Result<Vec<MseRow>> {
    let rows = verify::mse_verify(cfg, formulation)?;
    fs::create_dir_all(&cfg.output.dir)?;
    write_csv(&cfg.output.dir.join("mse.csv"), &rows)?;
    Ok(rows)
}

pub fn cmd_oracle(cfg: &OracleConfig) -> Result<Vec<OracleRow>> {
    let rows = verify::oracle(cfg)?;
    fs::create_dir_all(&cfg.output.dir)?;
    write_jsonl(&cfg.output.dir.join("oracle.jsonl"), &rows)?;
    Ok(rows)
}
