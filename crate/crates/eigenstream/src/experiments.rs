//! The subcommands, each writing its artifacts into an output directory.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use eigenstream_core::diagnostics::{
    lr_search, spectrum_experiment, train_run, LrSearchResult, RunSpec, Shadow, SpectrumOutcome, SpectrumSpec,
    SweepSummary, TrainOutcome,
};
use eigenstream_core::mnist::Dataset;
use eigenstream_core::optimizers::StrategyKind;
use log::{info, warn};

use crate::checkpoint;
use crate::config::{Eta, Mode, RunConfig};
use crate::data::Splits;
use crate::error::{CliError, Result};
use crate::report::{self, SweepRow};

/// Files written and remarks worth keeping in the manifest.
#[derive(Debug, Default)]
pub struct Artifacts {
    pub files: Vec<String>,
    pub notes: Vec<String>,
}

impl Artifacts {
    fn file(&mut self, name: &str) {
        self.files.push(name.to_string());
    }
}

/// Runs `f` over `items` on up to `jobs` threads; results keep the input order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

fn base_spec(cfg: &RunConfig, kind: StrategyKind, batch_size: usize, eta: f64, seed: u64) -> Result<RunSpec> {
    let strategy = cfg.strategy_config_for(kind, batch_size, eta)?;
    let mut spec = RunSpec::new(&cfg.dims, cfg.activation, strategy, seed);
    spec.max_epochs = cfg.max_epochs;
    spec.loss_target = Some(cfg.stop_loss);
    Ok(spec)
}

/// Learning-rate search for one strategy and batch size on the config's seed.
pub fn search_eta(cfg: &RunConfig, kind: StrategyKind, batch_size: usize, train: &Dataset) -> Result<LrSearchResult> {
    let spec = base_spec(cfg, kind, batch_size, 1.0, cfg.seed)?;
    let res = lr_search(&spec, train, &cfg.lr_grid, cfg.lr_epochs)?;
    info!(
        "lr search {} n={}: chose {} from {} candidates",
        kind.name(),
        batch_size,
        res.chosen,
        res.etas.len()
    );
    Ok(res)
}

fn resolve_eta(cfg: &RunConfig, train: &Dataset) -> Result<(f64, Option<LrSearchResult>)> {
    match cfg.eta {
        Eta::Fixed(x) => Ok((x, None)),
        Eta::Search => {
            let res = search_eta(cfg, cfg.strategy, cfg.batch_size, train)?;
            Ok((res.chosen, Some(res)))
        }
    }
}

#[derive(Debug)]
pub struct TrainResult {
    pub eta: f64,
    pub search: Option<LrSearchResult>,
    pub outcome: TrainOutcome,
}

fn run_training(cfg: &RunConfig, splits: &Splits, shadow: Shadow, out: &Path, art: &mut Artifacts) -> Result<TrainResult> {
    let (eta, search) = resolve_eta(cfg, &splits.train)?;
    if let Some(s) = &search {
        report::write_lr_search(&out.join(report::LR_CSV), s)?;
        art.file(report::LR_CSV);
    }
    let mut spec = base_spec(cfg, cfg.strategy, cfg.batch_size, eta, cfg.seed)?;
    spec.shadow = shadow;
    let outcome = train_run(&spec, &splits.train, Some(&splits.test), &mut |r| {
        info!(
            "epoch {} loss {:.6} train_acc {:.4} test_acc {:.4} updates {}",
            r.epoch,
            r.train_loss,
            r.train_acc,
            r.test_acc.unwrap_or(f64::NAN),
            r.updates
        );
    })?;
    report::write_train(&out.join(report::TRAIN_CSV), &outcome.records)?;
    art.file(report::TRAIN_CSV);
    checkpoint::save(&out.join(report::CHECKPOINT), &outcome.net)?;
    art.file(report::CHECKPOINT);
    if shadow != Shadow::Off && cfg.strategy == StrategyKind::Sbe {
        report::write_converge(&out.join(report::CONVERGE_CSV), &outcome.convergence)?;
        art.file(report::CONVERGE_CSV);
        if let Shadow::Trace { .. } = shadow {
            report::write_trace(&out.join(report::TRACE_CSV), &outcome.trace)?;
            art.file(report::TRACE_CSV);
        }
        art.notes.push(format!(
            "sign checks {}, sign violations {}",
            outcome.sign_checks, outcome.sign_violations
        ));
    }
    art.notes.push(format!("eta {eta}; stopped by {:?}", outcome.stop));
    Ok(TrainResult { eta, search, outcome })
}

pub fn train(cfg: &RunConfig, splits: &Splits, out: &Path, art: &mut Artifacts) -> Result<TrainResult> {
    run_training(cfg, splits, cfg.shadow, out, art)
}

pub fn converge(cfg: &RunConfig, splits: &Splits, out: &Path, art: &mut Artifacts) -> Result<TrainResult> {
    let shadow = match cfg.shadow {
        Shadow::Off => Shadow::Trace { stride: 16 },
        s => s,
    };
    run_training(cfg, splits, shadow, out, art)
}

pub fn spectrum(cfg: &RunConfig, splits: &Splits, out: &Path, art: &mut Artifacts) -> Result<SpectrumOutcome> {
    let (eta, search) = resolve_eta(cfg, &splits.train)?;
    if let Some(s) = &search {
        report::write_lr_search(&out.join(report::LR_CSV), s)?;
        art.file(report::LR_CSV);
    }
    let spec = SpectrumSpec {
        run: base_spec(cfg, cfg.strategy, cfg.batch_size, eta, cfg.seed)?,
        accuracy_gate: cfg.accuracy_gate,
        batch: cfg.spectrum_batch,
    };
    let res = spectrum_experiment(&spec, &splits.train, &splits.test)?;
    report::write_spectrum(&out.join(report::SPECTRUM_CSV), &res.reports)?;
    art.file(report::SPECTRUM_CSV);
    art.notes.push(format!(
        "trained {} epochs to test accuracy {:.4} with eta {eta}",
        res.epochs, res.test_accuracy
    ));
    Ok(res)
}

pub fn learning_rate(cfg: &RunConfig, splits: &Splits, out: &Path, art: &mut Artifacts) -> Result<LrSearchResult> {
    let res = search_eta(cfg, cfg.strategy, cfg.batch_size, &splits.train)?;
    report::write_lr_search(&out.join(report::LR_CSV), &res)?;
    art.file(report::LR_CSV);
    art.notes.push(format!("chosen eta {}", res.chosen));
    Ok(res)
}

/// `(strategy, batch size)` pairs of a sweep. SGD only exists at batch size 1.
pub fn sweep_cells(cfg: &RunConfig) -> Vec<(StrategyKind, usize)> {
    let mut cells = Vec::new();
    for &kind in &cfg.sweep_strategies {
        if kind == StrategyKind::Sgd {
            cells.push((kind, 1));
        } else {
            for &n in &cfg.sweep_batch_sizes {
                cells.push((kind, n));
            }
        }
    }
    cells
}

#[derive(Debug)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub searches: Vec<(StrategyKind, usize, Result<LrSearchResult>)>,
}

pub fn sweep(cfg: &RunConfig, splits: &Splits, jobs: usize, out: &Path, art: &mut Artifacts) -> Result<SweepResult> {
    let cells = sweep_cells(cfg);
    let etas: Vec<Result<(f64, Option<LrSearchResult>)>> = parallel_map(&cells, jobs, |&(kind, n)| match cfg.eta {
        Eta::Fixed(x) => Ok((x, None)),
        Eta::Search => search_eta(cfg, kind, n, &splits.train)
            .inspect_err(|e| warn!("sweep cell {} n={n}: learning-rate search failed: {e}", kind.name()))
            .map(|r| (r.chosen, Some(r))),
    });

    let mut runs = Vec::new();
    for (cell, eta) in cells.iter().zip(&etas) {
        if let Ok((eta, _)) = eta {
            for rep in 0..cfg.sweep_replicates {
                runs.push((*cell, *eta, rep));
            }
        }
    }
    let results = parallel_map(&runs, jobs, |&((kind, n), eta, rep)| {
        let seed = cfg.seed.wrapping_add(rep as u64);
        let mut spec = base_spec(cfg, kind, n, eta, seed)?;
        spec.evaluate_test = false;
        let outcome = train_run(&spec, &splits.train, None, &mut |_| {});
        info!("sweep cell {} n={n} replicate {rep} finished", kind.name());
        Ok::<_, CliError>(outcome)
    });

    let mut rows = Vec::new();
    let mut it = runs.iter().zip(results);
    for ((kind, n), eta) in cells.iter().zip(&etas) {
        match eta {
            Err(e) => {
                for rep in 0..cfg.sweep_replicates {
                    rows.push(SweepRow {
                        replicate: rep,
                        summary: SweepSummary::from_records(*kind, *n, f64::NAN, cfg.loss_targets, &[]),
                        error: Some(e.to_string()),
                    });
                }
            }
            Ok(_) => {
                for _ in 0..cfg.sweep_replicates {
                    let (&(_, eta, rep), res) = it.next().expect("one result per run");
                    let (summary, error) = match res {
                        Ok(Ok(o)) => (SweepSummary::from_records(*kind, *n, eta, cfg.loss_targets, &o.records), None),
                        Ok(Err(e)) => (SweepSummary::from_records(*kind, *n, eta, cfg.loss_targets, &[]), Some(e.to_string())),
                        Err(e) => (SweepSummary::from_records(*kind, *n, eta, cfg.loss_targets, &[]), Some(e.to_string())),
                    };
                    if let Some(e) = &error {
                        warn!("sweep cell {} n={n} replicate {rep}: {e}", kind.name());
                        art.notes.push(format!("{} n={n} replicate {rep}: {e}", kind.name()));
                    }
                    rows.push(SweepRow {
                        replicate: rep,
                        summary,
                        error,
                    });
                }
            }
        }
    }
    report::write_sweep(&out.join(report::SWEEP_CSV), &rows)?;
    art.file(report::SWEEP_CSV);
    let searches = cells
        .iter()
        .zip(etas)
        .map(|(&(k, n), r)| {
            let r = r.and_then(|(_, s)| s.ok_or_else(|| CliError::Invalid("fixed eta; no search".into())));
            (k, n, r)
        })
        .collect();
    Ok(SweepResult { rows, searches })
}

/// Dispatches `mode`, leaving artifacts in `out`.
pub fn run(mode: Mode, cfg: &RunConfig, splits: &Splits, jobs: usize, out: &Path) -> Result<Artifacts> {
    report::ensure_dir(out)?;
    let mut art = Artifacts::default();
    match mode {
        Mode::Train => {
            train(cfg, splits, out, &mut art)?;
        }
        Mode::Converge => {
            converge(cfg, splits, out, &mut art)?;
        }
        Mode::Spectrum => {
            spectrum(cfg, splits, out, &mut art)?;
        }
        Mode::LrSearch => {
            learning_rate(cfg, splits, out, &mut art)?;
        }
        Mode::Sweep => {
            sweep(cfg, splits, jobs, out, &mut art)?;
        }
    }
    Ok(art)
}
