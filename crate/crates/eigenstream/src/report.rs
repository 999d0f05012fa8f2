//! CSV artifacts and the run manifest.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use eigenstream_core::diagnostics::{ConvergenceRecord, LrSearchResult, SpectrumReport, SweepSummary, TracePoint, TrainRecord};
use serde::Serialize;

use crate::error::{CliError, Result};

pub const TRAIN_CSV: &str = "train.csv";
pub const CONVERGE_CSV: &str = "converge.csv";
pub const TRACE_CSV: &str = "converge_trace.csv";
pub const SPECTRUM_CSV: &str = "spectrum.csv";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const LR_CSV: &str = "lr_search.csv";
pub const MANIFEST: &str = "manifest.json";
pub const CONFIG_ECHO: &str = "config.txt";
pub const CHECKPOINT: &str = "model.ckpt";

fn write_rows<T: Serialize>(path: &Path, header: &[&str], rows: impl IntoIterator<Item = T>) -> Result<()> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(BufWriter::new(file));
    w.write_record(header)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))?;
    Ok(())
}

#[derive(Serialize)]
struct TrainRow {
    epoch: usize,
    updates: u64,
    cycles: u64,
    train_loss: f64,
    train_acc: f64,
    test_acc: Option<f64>,
}

pub fn write_train(path: &Path, records: &[TrainRecord]) -> Result<()> {
    write_rows(
        path,
        &["epoch", "updates", "cycles", "train_loss", "train_acc", "test_acc"],
        records.iter().map(|r| TrainRow {
            epoch: r.epoch,
            updates: r.updates,
            cycles: r.cycles,
            train_loss: r.train_loss,
            train_acc: r.train_acc,
            test_acc: r.test_acc,
        }),
    )
}

pub fn write_converge(path: &Path, records: &[ConvergenceRecord]) -> Result<()> {
    write_rows(
        path,
        &["batch", "layer", "eps_x", "eps_d", "eps_sigma", "sigma_sq"],
        records
            .iter()
            .map(|r| (r.batch, r.layer, r.eps_x, r.eps_d, r.eps_sigma, r.sigma_sq)),
    )
}

pub fn write_trace(path: &Path, points: &[TracePoint]) -> Result<()> {
    write_rows(
        path,
        &["batch", "layer", "sample", "eps_x", "eps_d", "eps_sigma"],
        points
            .iter()
            .map(|p| (p.batch, p.layer, p.sample, p.eps_x, p.eps_d, p.eps_sigma)),
    )
}

pub fn write_spectrum(path: &Path, reports: &[SpectrumReport]) -> Result<()> {
    let rows = reports.iter().flat_map(|r| {
        r.energies
            .iter()
            .zip(&r.cumulative)
            .enumerate()
            .map(move |(p, (e, c))| (r.layer, p + 1, *e, *c))
    });
    write_rows(path, &["layer", "p", "energy", "cumulative"], rows)
}

/// One sweep cell: a summary, or the reason the cell produced none.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub replicate: usize,
    pub summary: SweepSummary,
    pub error: Option<String>,
}

pub fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<()> {
    write_rows(
        path,
        &[
            "strategy",
            "batch_size",
            "eta",
            "epochs_01",
            "epochs_001",
            "updates_01",
            "updates_001",
            "reached_01",
            "reached_001",
            "replicate",
        ],
        rows.iter().map(|r| {
            let s = &r.summary;
            (
                s.strategy.name(),
                s.batch_size,
                s.eta,
                s.epochs_to(0),
                s.epochs_to(1),
                s.updates_to(0),
                s.updates_to(1),
                s.crossings[0].is_some(),
                s.crossings[1].is_some(),
                r.replicate,
            )
        }),
    )
}

pub fn write_lr_search(path: &Path, res: &LrSearchResult) -> Result<()> {
    write_rows(
        path,
        &["eta", "loss", "chosen"],
        res.etas
            .iter()
            .zip(&res.losses)
            .map(|(&eta, &loss)| (eta, loss, eta == res.chosen)),
    )
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: String,
    pub seed: u64,
    /// Canonical config text; passing it back via `--config` repeats the run.
    pub config: String,
    pub started_unix: u64,
    pub wall_time_secs: f64,
    pub artifacts: Vec<String>,
    pub notes: Vec<String>,
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let path = dir.join(MANIFEST);
    let file = File::create(&path).map_err(|e| CliError::io(&path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, manifest)?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| CliError::io(&path, e))?;
    let echo = dir.join(CONFIG_ECHO);
    std::fs::write(&echo, &manifest.config).map_err(|e| CliError::io(&echo, e))
}

pub fn ensure_dir(dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    Ok(dir.to_path_buf())
}
