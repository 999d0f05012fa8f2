//! Weight-update strategies and their cost accounting.
//!
//! Every strategy consumes one [`Batch`] per call to [`Strategy::step`] and
//! writes the resulting change into the network. The [`UpdateLedger`] counts
//! weight-array writes and the hardware cycles those writes would take.

use alloc::format;
use alloc::vec::Vec;

use crate::eigenupdate::{EigenState, EigenTriplet, TaylorState};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::mnist::Batch;
use crate::network::{BlockGrad, Mlp};

/// Samples forwarded together by the streaming strategies.
pub const STREAM_BLOCK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StrategyKind {
    Sgd,
    Mbgd,
    SvdK,
    Sbe,
    SbeTaylor,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 5] = [
        StrategyKind::Sgd,
        StrategyKind::Mbgd,
        StrategyKind::SvdK,
        StrategyKind::Sbe,
        StrategyKind::SbeTaylor,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Sgd => "sgd",
            StrategyKind::Mbgd => "mbgd",
            StrategyKind::SvdK => "svd_k",
            StrategyKind::Sbe => "sbe",
            StrategyKind::SbeTaylor => "sbe_taylor",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// Cost of one dense weight write, in rank-1 cycles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CycleModel {
    /// One transfer per column: `min(a, b)`.
    #[default]
    ColumnWise,
    /// One transfer per element: `a·b`.
    PointWise,
}

impl CycleModel {
    pub fn dense_cost(self, rows: usize, cols: usize) -> u64 {
        match self {
            CycleModel::ColumnWise => rows.min(cols) as u64,
            CycleModel::PointWise => (rows * cols) as u64,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CycleModel::ColumnWise => "column",
            CycleModel::PointWise => "point",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "column" => Some(CycleModel::ColumnWise),
            "point" => Some(CycleModel::PointWise),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    pub eta: f64,
    pub batch_size: usize,
    /// Number of singular triples applied by `SvdK`.
    pub rank_k: usize,
    /// Step of the first-order estimator used by `SbeTaylor`.
    pub xi: f64,
    pub cycle_model: CycleModel,
}

impl StrategyConfig {
    pub fn new(kind: StrategyKind, eta: f64, batch_size: usize) -> Self {
        Self {
            kind,
            eta,
            batch_size,
            rank_k: 1,
            xi: 1e-3,
            cycle_model: CycleModel::ColumnWise,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be positive and finite, got {}", self.eta)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.kind == StrategyKind::Sgd && self.batch_size != 1 {
            return Err(Error::Config(format!(
                "sgd updates on every sample; batch_size must be 1, got {}",
                self.batch_size
            )));
        }
        if self.rank_k == 0 {
            return Err(Error::Config("rank_k must be at least 1".into()));
        }
        if !(self.xi >= 0.0 && self.xi.is_finite()) {
            return Err(Error::Config(format!("xi must be finite and nonnegative, got {}", self.xi)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct UpdateLedger {
    /// Weight-array writes, dense or rank-1.
    pub matrix_updates: u64,
    /// Rank-1 write = 1, dense write = the cycle model's cost.
    pub rank1_cycles: u64,
    pub samples_seen: u64,
    /// Layer-batches whose every sample had zero gradient, so nothing was written.
    pub skipped_batches: u64,
}

/// Hooks into the estimator for diagnostics. Called only by [`Strategy::step_observed`].
pub trait EstimatorObserver {
    /// All gradient factors of the batch, before any of them is ingested.
    fn begin_batch(&mut self, blocks: &[BlockGrad], states: &[EigenState]) -> Result<()>;
    /// After sample `index` of the batch was offered to `layer`'s estimator.
    fn after_ingest(&mut self, layer: usize, index: usize, state: &EigenState) -> Result<()>;
    /// The triplet about to be applied to `layer`.
    fn finalized(&mut self, layer: usize, triplet: &EigenTriplet) -> Result<()>;
}

#[derive(Debug, Clone)]
enum LayerState {
    Stateless,
    Dense(Matrix),
    Eigen(EigenState),
    Taylor(TaylorState),
}

/// One strategy instance bound to one training run.
#[derive(Debug, Clone)]
pub struct Strategy {
    config: StrategyConfig,
    ledger: UpdateLedger,
    layers: Vec<LayerState>,
    shapes: Vec<(usize, usize)>,
}

impl Strategy {
    pub fn new(config: StrategyConfig, net: &Mlp) -> Result<Self> {
        config.validate()?;
        let shapes: Vec<(usize, usize)> =
            net.all_weights().iter().map(|w| (w.rows(), w.cols())).collect();
        let mut layers = Vec::with_capacity(shapes.len());
        for &(a, b) in &shapes {
            layers.push(match config.kind {
                StrategyKind::Sgd | StrategyKind::SvdK => LayerState::Stateless,
                StrategyKind::Mbgd => LayerState::Dense(Matrix::zeros(a, b)),
                StrategyKind::Sbe => LayerState::Eigen(EigenState::new(a, b)),
                StrategyKind::SbeTaylor => LayerState::Taylor(TaylorState::new(a, b, config.xi)?),
            });
        }
        Ok(Self {
            config,
            ledger: UpdateLedger::default(),
            layers,
            shapes,
        })
    }

    pub fn config(&self) -> &StrategyConfig {
        &self.config
    }

    pub fn ledger(&self) -> UpdateLedger {
        self.ledger
    }

    /// Scalars the strategy keeps between batches for `layer`.
    pub fn aux_scalars(&self, layer: usize) -> usize {
        match &self.layers[layer] {
            LayerState::Stateless => 0,
            LayerState::Dense(m) => m.rows() * m.cols(),
            LayerState::Eigen(s) => s.aux_scalars(),
            LayerState::Taylor(s) => s.aux_scalars(),
        }
    }

    pub fn eigen_state(&self, layer: usize) -> Option<&EigenState> {
        match &self.layers[layer] {
            LayerState::Eigen(s) => Some(s),
            _ => None,
        }
    }

    /// Consumes one batch and writes the update into `net`. Returns the summed sample loss.
    pub fn step(&mut self, net: &mut Mlp, batch: &Batch<'_>) -> Result<f64> {
        self.step_observed(net, batch, None)
    }

    /// As [`Strategy::step`]; the observer only sees estimator-based strategies.
    pub fn step_observed(
        &mut self,
        net: &mut Mlp,
        batch: &Batch<'_>,
        observer: Option<&mut dyn EstimatorObserver>,
    ) -> Result<f64> {
        if batch.is_empty() {
            return Ok(0.0);
        }
        let loss = match self.config.kind {
            StrategyKind::Sgd => self.step_sgd(net, batch)?,
            StrategyKind::Mbgd => self.step_mbgd(net, batch)?,
            StrategyKind::SvdK => self.step_svd_k(net, batch)?,
            StrategyKind::Sbe | StrategyKind::SbeTaylor => self.step_estimator(net, batch, observer)?,
        };
        self.ledger.samples_seen += batch.len() as u64;
        Ok(loss)
    }

    fn step_sgd(&mut self, net: &mut Mlp, batch: &Batch<'_>) -> Result<f64> {
        let mut loss = 0.0;
        for (x, label) in batch.samples() {
            let (trace, _) = net.forward(x)?;
            let (l, grads) = net.backward_label(trace, label)?;
            loss += l;
            for (layer, g) in grads.iter().enumerate() {
                net.apply_rank1(layer, -self.config.eta, &g.delta, &g.x)?;
                self.ledger.matrix_updates += 1;
                self.ledger.rank1_cycles += 1;
            }
        }
        Ok(loss)
    }

    fn step_mbgd(&mut self, net: &mut Mlp, batch: &Batch<'_>) -> Result<f64> {
        let n = batch.len() as f64;
        let mut loss = 0.0;
        for acc in &mut self.layers {
            if let LayerState::Dense(m) = acc {
                m.fill_zero();
            }
        }
        for chunk in batch.indices.chunks(STREAM_BLOCK) {
            let block = net.backprop_block(batch.dataset, chunk)?;
            loss += block.loss_sum;
            for (layer, acc) in self.layers.iter_mut().enumerate() {
                if let LayerState::Dense(m) = acc {
                    linalg::gemm_tn(1.0, &block.deltas[layer], &block.inputs[layer], 1.0, m)?;
                }
            }
        }
        for (layer, acc) in self.layers.iter_mut().enumerate() {
            if let LayerState::Dense(m) = acc {
                m.scale(-self.config.eta / n);
                net.apply_dense(layer, m)?;
                let (a, b) = self.shapes[layer];
                self.ledger.matrix_updates += 1;
                self.ledger.rank1_cycles += self.config.cycle_model.dense_cost(a, b);
            }
        }
        Ok(loss)
    }

    fn step_svd_k(&mut self, net: &mut Mlp, batch: &Batch<'_>) -> Result<f64> {
        let n = batch.len();
        let block = net.backprop_block(batch.dataset, batch.indices)?;
        for layer in 0..self.shapes.len() {
            let (a, b) = self.shapes[layer];
            let deltas = &block.deltas[layer];
            let inputs = &block.inputs[layer];
            let dec = if n < a.min(b) {
                let lefts: Vec<&[f64]> = (0..n).map(|r| deltas.row(r)).collect();
                let rights: Vec<&[f64]> = (0..n).map(|r| inputs.row(r)).collect();
                linalg::svd_of_outer_sum(1.0 / n as f64, &lefts, &rights)?
            } else {
                let mut g = Matrix::zeros(a, b);
                linalg::gemm_tn(1.0 / n as f64, deltas, inputs, 0.0, &mut g)?;
                linalg::svd(&g)?
            };
            let k = self.config.rank_k.min(dec.rank());
            if k == 0 {
                self.ledger.skipped_batches += 1;
            }
            for p in 0..k {
                net.apply_rank1(layer, -self.config.eta * dec.s[p], &dec.u[p], &dec.v[p])?;
                self.ledger.matrix_updates += 1;
                self.ledger.rank1_cycles += 1;
            }
        }
        Ok(block.loss_sum)
    }

    fn step_estimator(
        &mut self,
        net: &mut Mlp,
        batch: &Batch<'_>,
        observer: Option<&mut dyn EstimatorObserver>,
    ) -> Result<f64> {
        let mut loss = 0.0;
        let mut triplets: Vec<Option<EigenTriplet>> = Vec::with_capacity(self.layers.len());
        match observer {
            None => {
                for chunk in batch.indices.chunks(STREAM_BLOCK) {
                    let block = net.backprop_block(batch.dataset, chunk)?;
                    loss += block.loss_sum;
                    self.ingest_block(&block, 0, None)?;
                }
            }
            Some(obs) => {
                let mut blocks = Vec::new();
                for chunk in batch.indices.chunks(STREAM_BLOCK) {
                    let block = net.backprop_block(batch.dataset, chunk)?;
                    loss += block.loss_sum;
                    blocks.push(block);
                }
                let states: Vec<EigenState> =
                    (0..self.layers.len()).filter_map(|l| self.eigen_state(l).cloned()).collect();
                obs.begin_batch(&blocks, &states)?;
                let mut offset = 0;
                for block in &blocks {
                    self.ingest_block(block, offset, Some(&mut *obs))?;
                    offset += block.len();
                }
                for layer in 0..self.layers.len() {
                    let t = self.finalize_layer(layer)?;
                    if let Some(t) = &t {
                        obs.finalized(layer, t)?;
                    }
                    triplets.push(t);
                }
            }
        }
        if triplets.is_empty() {
            for layer in 0..self.layers.len() {
                let t = self.finalize_layer(layer)?;
                triplets.push(t);
            }
        }
        for (layer, t) in triplets.into_iter().enumerate() {
            match t {
                Some(t) => {
                    net.apply_rank1(layer, -self.config.eta * t.sigma_sq, &t.d_hat, &t.x_hat)?;
                    self.ledger.matrix_updates += 1;
                    self.ledger.rank1_cycles += 1;
                }
                None => self.ledger.skipped_batches += 1,
            }
        }
        Ok(loss)
    }

    fn ingest_block(
        &mut self,
        block: &BlockGrad,
        offset: usize,
        mut observer: Option<&mut dyn EstimatorObserver>,
    ) -> Result<()> {
        for (layer, state) in self.layers.iter_mut().enumerate() {
            let inputs = &block.inputs[layer];
            let deltas = &block.deltas[layer];
            for r in 0..inputs.rows() {
                match state {
                    LayerState::Eigen(s) => {
                        s.ingest(inputs.row(r), deltas.row(r))?;
                        if let Some(obs) = observer.as_deref_mut() {
                            obs.after_ingest(layer, offset + r, s)?;
                        }
                    }
                    LayerState::Taylor(s) => {
                        s.ingest(inputs.row(r), deltas.row(r))?;
                    }
                    _ => unreachable!("estimator strategy holds estimator state"),
                }
            }
        }
        Ok(())
    }

    /// `None` when every sample of the batch was skipped for this layer.
    fn finalize_layer(&mut self, layer: usize) -> Result<Option<EigenTriplet>> {
        let (pending, state) = match &mut self.layers[layer] {
            LayerState::Eigen(s) => (s.pending(), LayerStateMut::Eigen(s)),
            LayerState::Taylor(s) => (s.pending(), LayerStateMut::Taylor(s)),
            _ => unreachable!("estimator strategy holds estimator state"),
        };
        if pending == 0 {
            return Ok(None);
        }
        match state {
            LayerStateMut::Eigen(s) => s.finalize().map(Some),
            LayerStateMut::Taylor(s) => s.finalize().map(Some),
        }
    }
}

enum LayerStateMut<'a> {
    Eigen(&'a mut EigenState),
    Taylor(&'a mut TaylorState),
}
