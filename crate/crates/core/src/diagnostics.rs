//! Training runs and the measurements taken on them.
//!
//! [`train_run`] drives one seeded run epoch by epoch. With a shadow mode
//! enabled it also forms the exact mean gradient of every batch, decomposes
//! it, and scores the streaming estimate against it without changing the
//! trajectory of the run.

use alloc::vec::Vec;

use crate::eigenupdate::{convergence_error, sign_consistent, EigenState, EigenTriplet};
use crate::error::{check_dim, Error, Result};
use crate::linalg::{self, Matrix, SvdResult};
use crate::mnist::{batches, BatchPlan, Dataset};
use crate::network::{Activation, BlockGrad, Evaluation, Mlp};
use crate::optimizers::{EstimatorObserver, Strategy, StrategyConfig, StrategyKind, UpdateLedger};
use crate::seed::{derive, STREAM_INIT, STREAM_SHUFFLE, STREAM_SPECTRUM};

/// Epoch cap used when none is configured.
pub const DEFAULT_MAX_EPOCHS: usize = 900;
/// Epochs per candidate in the learning-rate search.
pub const LR_SEARCH_EPOCHS: usize = 5;

/// Normalized squared singular values of one layer's mean gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumReport {
    pub layer: usize,
    pub energies: Vec<f64>,
    pub cumulative: Vec<f64>,
}

impl SpectrumReport {
    /// Energy captured by the first `k` pairs.
    pub fn captured(&self, k: usize) -> f64 {
        match k {
            0 => 0.0,
            k => self.cumulative[k.min(self.cumulative.len()) - 1],
        }
    }
}

pub fn spectrum(layer: usize, mean_grad: &Matrix) -> Result<SpectrumReport> {
    let dec = linalg::svd(mean_grad)?;
    spectrum_from_svd(layer, &dec)
}

pub fn spectrum_from_svd(layer: usize, dec: &SvdResult) -> Result<SpectrumReport> {
    let total: f64 = dec.s.iter().map(|s| s * s).sum();
    if dec.rank() == 0 || total == 0.0 {
        return Err(Error::UndefinedSpectrum);
    }
    let energies: Vec<f64> = dec.s.iter().map(|s| s * s / total).collect();
    let mut acc = 0.0;
    let cumulative = energies
        .iter()
        .map(|e| {
            acc += e;
            acc
        })
        .collect();
    Ok(SpectrumReport {
        layer,
        energies,
        cumulative,
    })
}

/// Exact mean gradient `(1/n) Σ δ xᵀ` of `layer` over `indices`.
pub fn mean_gradient(net: &Mlp, data: &Dataset, indices: &[usize], layer: usize) -> Result<Matrix> {
    let w = net.weights(layer);
    let mut g = Matrix::zeros(w.rows(), w.cols());
    if indices.is_empty() {
        return Ok(g);
    }
    for chunk in indices.chunks(256) {
        let block = net.backprop_block(data, chunk)?;
        linalg::gemm_tn(1.0, &block.deltas[layer], &block.inputs[layer], 1.0, &mut g)?;
    }
    g.scale(1.0 / indices.len() as f64);
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainRecord {
    pub epoch: usize,
    pub updates: u64,
    pub cycles: u64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
}

/// Estimate quality at the end of one batch for one layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceRecord {
    pub batch: u64,
    pub layer: usize,
    pub eps_x: f64,
    pub eps_d: f64,
    pub eps_sigma: f64,
    pub sigma_sq: f64,
}

/// Estimate quality inside a batch. `sample` 0 is the carried state before
/// the batch's first ingest.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint {
    pub batch: u64,
    pub layer: usize,
    pub sample: usize,
    pub eps_x: f64,
    pub eps_d: f64,
    pub eps_sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Shadow {
    #[default]
    Off,
    /// Score every finalized estimate.
    PerBatch,
    /// Also score the running estimate every `stride` samples.
    Trace { stride: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub dims: Vec<usize>,
    pub activation: Activation,
    pub strategy: StrategyConfig,
    pub seed: u64,
    pub max_epochs: usize,
    /// Stop once the end-of-epoch training loss is at or below this.
    pub loss_target: Option<f64>,
    pub shadow: Shadow,
    /// Score the test set each epoch when one is supplied.
    pub evaluate_test: bool,
}

impl RunSpec {
    pub fn new(dims: &[usize], activation: Activation, strategy: StrategyConfig, seed: u64) -> Self {
        Self {
            dims: dims.to_vec(),
            activation,
            strategy,
            seed,
            max_epochs: DEFAULT_MAX_EPOCHS,
            loss_target: None,
            shadow: Shadow::Off,
            evaluate_test: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    LossTarget,
    EpochCap,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<TrainRecord>,
    pub convergence: Vec<ConvergenceRecord>,
    pub trace: Vec<TracePoint>,
    pub ledger: UpdateLedger,
    pub stop: StopReason,
    /// Finalized estimates whose update direction was checkable against the truth.
    pub sign_checks: u64,
    /// Of those, how many had the wrong overall sign.
    pub sign_violations: u64,
    pub net: Mlp,
}

impl TrainOutcome {
    pub fn final_record(&self) -> Option<&TrainRecord> {
        self.records.last()
    }
}

struct ShadowObserver {
    stride: Option<usize>,
    batch: u64,
    truths: Vec<Option<SvdResult>>,
    convergence: Vec<ConvergenceRecord>,
    trace: Vec<TracePoint>,
    sign_checks: u64,
    sign_violations: u64,
    batch_len: usize,
}

impl ShadowObserver {
    fn new(stride: Option<usize>) -> Self {
        Self {
            stride,
            batch: 0,
            truths: Vec::new(),
            convergence: Vec::new(),
            trace: Vec::new(),
            sign_checks: 0,
            sign_violations: 0,
            batch_len: 0,
        }
    }

    fn push_trace(&mut self, layer: usize, sample: usize, est: &EigenTriplet) -> Result<()> {
        if let Some(truth) = &self.truths[layer] {
            let e = convergence_error(est, truth)?;
            self.trace.push(TracePoint {
                batch: self.batch,
                layer,
                sample,
                eps_x: e.eps_x,
                eps_d: e.eps_d,
                eps_sigma: e.eps_sigma,
            });
        }
        Ok(())
    }
}

/// Exact SVD of the batch mean gradient of `layer` from its factor rows.
pub fn batch_truth(blocks: &[BlockGrad], layer: usize) -> Result<SvdResult> {
    let n: usize = blocks.iter().map(BlockGrad::len).sum();
    let first = blocks.first().ok_or(Error::State("empty batch"))?;
    let a = first.deltas[layer].cols();
    let b = first.inputs[layer].cols();
    if n < a.min(b) {
        let mut lefts = Vec::with_capacity(n);
        let mut rights = Vec::with_capacity(n);
        for blk in blocks {
            for r in 0..blk.len() {
                lefts.push(blk.deltas[layer].row(r));
                rights.push(blk.inputs[layer].row(r));
            }
        }
        linalg::svd_of_outer_sum(1.0 / n as f64, &lefts, &rights)
    } else {
        let mut g = Matrix::zeros(a, b);
        for blk in blocks {
            linalg::gemm_tn(1.0, &blk.deltas[layer], &blk.inputs[layer], 1.0, &mut g)?;
        }
        g.scale(1.0 / n as f64);
        linalg::svd(&g)
    }
}

impl EstimatorObserver for ShadowObserver {
    fn begin_batch(&mut self, blocks: &[BlockGrad], states: &[EigenState]) -> Result<()> {
        self.batch_len = blocks.iter().map(BlockGrad::len).sum();
        let layers = blocks.first().map_or(0, |b| b.inputs.len());
        self.truths.clear();
        for layer in 0..layers {
            let t = batch_truth(blocks, layer)?;
            self.truths.push(if t.rank() > 0 { Some(t) } else { None });
        }
        if self.stride.is_some() {
            for (layer, st) in states.iter().enumerate() {
                if let Some(snap) = st.snapshot() {
                    self.push_trace(layer, 0, &snap)?;
                }
            }
        }
        Ok(())
    }

    fn after_ingest(&mut self, layer: usize, index: usize, state: &EigenState) -> Result<()> {
        let Some(stride) = self.stride else {
            return Ok(());
        };
        let count = index + 1;
        if count.is_multiple_of(stride) || count == self.batch_len {
            if let Some(snap) = state.snapshot() {
                self.push_trace(layer, count, &snap)?;
            }
        }
        Ok(())
    }

    fn finalized(&mut self, layer: usize, triplet: &EigenTriplet) -> Result<()> {
        if let Some(truth) = &self.truths[layer] {
            let e = convergence_error(triplet, truth)?;
            self.convergence.push(ConvergenceRecord {
                batch: self.batch,
                layer,
                eps_x: e.eps_x,
                eps_d: e.eps_d,
                eps_sigma: e.eps_sigma,
                sigma_sq: triplet.sigma_sq,
            });
            if let Some(ok) = sign_consistent(triplet, truth) {
                self.sign_checks += 1;
                if !ok {
                    self.sign_violations += 1;
                }
            }
        }
        if layer + 1 == self.truths.len() {
            self.batch += 1;
        }
        Ok(())
    }
}

/// Trains a freshly initialized network according to `spec`.
///
/// `on_epoch` sees every record as soon as it is produced.
pub fn train_run(
    spec: &RunSpec,
    train: &Dataset,
    test: Option<&Dataset>,
    on_epoch: &mut dyn FnMut(&TrainRecord),
) -> Result<TrainOutcome> {
    if spec.max_epochs == 0 {
        return Err(Error::Config("max_epochs must be at least 1".into()));
    }
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    check_dim("train_run input dim", spec.dims[0], train.dim())?;
    let mut net = Mlp::init(&spec.dims, spec.activation, derive(spec.seed, STREAM_INIT))?;
    let mut strategy = Strategy::new(spec.strategy, &net)?;
    let plan = BatchPlan::new(spec.strategy.batch_size, derive(spec.seed, STREAM_SHUFFLE))?;
    let estimator = spec.strategy.kind == StrategyKind::Sbe;
    let mut observer = match (spec.shadow, estimator) {
        (Shadow::Off, _) | (_, false) => None,
        (Shadow::PerBatch, true) => Some(ShadowObserver::new(None)),
        (Shadow::Trace { stride }, true) => Some(ShadowObserver::new(Some(stride.max(1)))),
    };

    let mut records = Vec::new();
    let mut stop = StopReason::EpochCap;
    for epoch in 1..=spec.max_epochs {
        let order = plan.order(train.len(), (epoch - 1) as u64);
        for batch in batches(train, &plan, &order) {
            let res = match observer.as_mut() {
                Some(obs) => strategy.step_observed(&mut net, &batch, Some(obs as &mut dyn EstimatorObserver)),
                None => strategy.step(&mut net, &batch),
            };
            match res {
                Ok(_) => {}
                Err(Error::NonFinite(_)) => {
                    return Err(Error::Diverged {
                        epoch,
                        loss: f64::NAN,
                    })
                }
                Err(e) => return Err(e),
            }
        }
        let Evaluation { loss, accuracy } = net.evaluate(train)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch, loss });
        }
        let test_acc = match (test, spec.evaluate_test) {
            (Some(t), true) => Some(net.evaluate(t)?.accuracy),
            _ => None,
        };
        let ledger = strategy.ledger();
        let rec = TrainRecord {
            epoch,
            updates: ledger.matrix_updates,
            cycles: ledger.rank1_cycles,
            train_loss: loss,
            train_acc: accuracy,
            test_acc,
        };
        on_epoch(&rec);
        records.push(rec);
        if spec.loss_target.is_some_and(|t| loss <= t) {
            stop = StopReason::LossTarget;
            break;
        }
    }
    let (convergence, trace, sign_checks, sign_violations) = match observer {
        Some(o) => (o.convergence, o.trace, o.sign_checks, o.sign_violations),
        None => (Vec::new(), Vec::new(), 0, 0),
    };
    Ok(TrainOutcome {
        records,
        convergence,
        trace,
        ledger: strategy.ledger(),
        stop,
        sign_checks,
        sign_violations,
        net,
    })
}

/// First-crossing summary of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSummary {
    pub strategy: StrategyKind,
    pub batch_size: usize,
    pub eta: f64,
    pub targets: [f64; 2],
    /// `(epochs, updates)` at the first epoch whose loss is at or below each target.
    pub crossings: [Option<(usize, u64)>; 2],
}

/// Default loss targets of the sweep summaries.
pub const SWEEP_TARGETS: [f64; 2] = [0.1, 0.01];

impl SweepSummary {
    pub fn from_records(
        strategy: StrategyKind,
        batch_size: usize,
        eta: f64,
        targets: [f64; 2],
        records: &[TrainRecord],
    ) -> Self {
        let crossing = |target: f64| {
            records
                .iter()
                .find(|r| r.train_loss <= target)
                .map(|r| (r.epoch, r.updates))
        };
        Self {
            strategy,
            batch_size,
            eta,
            targets,
            crossings: [crossing(targets[0]), crossing(targets[1])],
        }
    }

    pub fn epochs_to(&self, target: usize) -> Option<usize> {
        self.crossings[target].map(|c| c.0)
    }

    pub fn updates_to(&self, target: usize) -> Option<u64> {
        self.crossings[target].map(|c| c.1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LrSearchResult {
    pub etas: Vec<f64>,
    /// Training loss after the search epochs; `None` if the run diverged.
    pub losses: Vec<Option<f64>>,
    pub chosen: f64,
}

/// 13 points log-spaced over `[1e-3, 1e1]`.
pub fn default_lr_grid() -> Vec<f64> {
    (0..13).map(|i| libm::pow(10.0, -3.0 + 4.0 * i as f64 / 12.0)).collect()
}

/// Trains a fresh copy of `base` for `epochs` epochs per candidate and
/// keeps the rate with the lowest final training loss (ties go to the
/// smaller rate).
pub fn lr_search(base: &RunSpec, train: &Dataset, grid: &[f64], epochs: usize) -> Result<LrSearchResult> {
    if grid.is_empty() {
        return Err(Error::Config("learning-rate grid is empty".into()));
    }
    let mut losses = Vec::with_capacity(grid.len());
    for &eta in grid {
        let mut spec = base.clone();
        spec.strategy.eta = eta;
        spec.max_epochs = epochs;
        spec.loss_target = None;
        spec.shadow = Shadow::Off;
        spec.evaluate_test = false;
        let loss = match train_run(&spec, train, None, &mut |_| {}) {
            Ok(out) => out.final_record().map(|r| r.train_loss),
            Err(Error::Diverged { .. }) => None,
            Err(e) => return Err(e),
        };
        losses.push(loss);
    }
    let mut best: Option<(f64, f64)> = None;
    for (&eta, loss) in grid.iter().zip(&losses) {
        if let Some(l) = *loss {
            let better = match best {
                None => true,
                Some((bl, be)) => l < bl || (l == bl && eta < be),
            };
            if better {
                best = Some((l, eta));
            }
        }
    }
    let (_, chosen) = best.ok_or(Error::SearchFailed)?;
    Ok(LrSearchResult {
        etas: grid.to_vec(),
        losses,
        chosen,
    })
}

/// Protocol of the gradient-spectrum measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumSpec {
    pub run: RunSpec,
    /// Training stops once the test accuracy reaches this.
    pub accuracy_gate: f64,
    /// Samples in the measured batch.
    pub batch: usize,
}

#[derive(Debug, Clone)]
pub struct SpectrumOutcome {
    pub reports: Vec<SpectrumReport>,
    pub epochs: usize,
    pub test_accuracy: f64,
}

/// Trains until the accuracy gate, then measures every layer's spectrum on one batch.
pub fn spectrum_experiment(spec: &SpectrumSpec, train: &Dataset, test: &Dataset) -> Result<SpectrumOutcome> {
    let mut net = Mlp::init(&spec.run.dims, spec.run.activation, derive(spec.run.seed, STREAM_INIT))?;
    let mut strategy = Strategy::new(spec.run.strategy, &net)?;
    let plan = BatchPlan::new(spec.run.strategy.batch_size, derive(spec.run.seed, STREAM_SHUFFLE))?;
    let mut epochs = 0;
    let mut acc = net.evaluate(test)?.accuracy;
    while acc < spec.accuracy_gate {
        if epochs >= spec.run.max_epochs {
            return Err(Error::Config(alloc::format!(
                "accuracy gate {} not reached in {} epochs (test accuracy {acc:.4})",
                spec.accuracy_gate,
                epochs
            )));
        }
        let order = plan.order(train.len(), epochs as u64);
        for batch in batches(train, &plan, &order) {
            strategy.step(&mut net, &batch).map_err(|e| match e {
                Error::NonFinite(_) => Error::Diverged {
                    epoch: epochs + 1,
                    loss: f64::NAN,
                },
                e => e,
            })?;
        }
        epochs += 1;
        acc = net.evaluate(test)?.accuracy;
    }
    let pick = BatchPlan::new(1, derive(spec.run.seed, STREAM_SPECTRUM))?.order(train.len(), 0);
    let indices = &pick[..spec.batch.min(train.len())];
    let mut reports = Vec::with_capacity(net.layers());
    for layer in 0..net.layers() {
        let g = mean_gradient(&net, train, indices, layer)?;
        reports.push(spectrum(layer, &g)?);
    }
    Ok(SpectrumOutcome {
        reports,
        epochs,
        test_accuracy: acc,
    })
}
