//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key may appear
//! at most once and unknown keys are rejected with their line number.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use eigenstream_core::diagnostics::{default_lr_grid, Shadow, DEFAULT_MAX_EPOCHS, LR_SEARCH_EPOCHS, SWEEP_TARGETS};
use eigenstream_core::network::Activation;
use eigenstream_core::optimizers::{CycleModel, StrategyConfig, StrategyKind};

use crate::error::{CliError, Result};

/// Environment variable naming the dataset directory when the config does not.
pub const DATA_ENV: &str = "EIGENSTREAM_DATA";

/// Largest batch size accepted by a sweep.
pub const MAX_SWEEP_BATCH: usize = 8192;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Sweep,
    Spectrum,
    Converge,
    LrSearch,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Train => "train",
            Mode::Sweep => "sweep",
            Mode::Spectrum => "spectrum",
            Mode::Converge => "converge",
            Mode::LrSearch => "lr-search",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Eta {
    Fixed(f64),
    Search,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data_dir: Option<PathBuf>,
    pub train_images: String,
    pub train_labels: String,
    pub test_images: String,
    pub test_labels: String,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub dims: Vec<usize>,
    pub activation: Activation,
    pub strategy: StrategyKind,
    pub batch_size: usize,
    pub eta: Eta,
    pub rank_k: usize,
    pub xi: f64,
    pub seed: u64,
    pub max_epochs: usize,
    pub loss_targets: [f64; 2],
    pub stop_loss: f64,
    pub shadow: Shadow,
    pub cycle_model: CycleModel,
    pub sweep_batch_sizes: Vec<usize>,
    pub sweep_strategies: Vec<StrategyKind>,
    pub sweep_replicates: usize,
    pub lr_grid: Vec<f64>,
    pub lr_epochs: usize,
    pub spectrum_batch: usize,
    pub accuracy_gate: f64,
    pub out_dir: Option<PathBuf>,
}

const KEYS: &[&str] = &[
    "data_dir",
    "train_images",
    "train_labels",
    "test_images",
    "test_labels",
    "train_limit",
    "test_limit",
    "dims",
    "activation",
    "strategy",
    "batch_size",
    "eta",
    "rank_k",
    "xi",
    "seed",
    "max_epochs",
    "loss_targets",
    "stop_loss",
    "shadow",
    "trace_stride",
    "cycle_model",
    "sweep_batch_sizes",
    "sweep_strategies",
    "sweep_replicates",
    "lr_grid",
    "lr_epochs",
    "spectrum_batch",
    "accuracy_gate",
    "out_dir",
];

const REQUIRED: &[&str] = &["dims", "activation"];

struct Entry {
    line: usize,
    value: String,
}

struct Fields(BTreeMap<String, Entry>);

impl Fields {
    fn err(&self, key: &str, msg: impl Into<String>) -> CliError {
        CliError::Config {
            line: self.0.get(key).map_or(0, |e| e.line),
            key: key.to_string(),
            msg: msg.into(),
        }
    }

    fn raw(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(|e| e.value.as_str())
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| self.err(key, format!("cannot parse `{v}` as {}", std::any::type_name::<T>()))),
        }
    }

    fn parse_opt<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| self.err(key, format!("cannot parse `{v}` as {}", std::any::type_name::<T>()))),
        }
    }

    fn list<T: std::str::FromStr>(&self, key: &str, default: Vec<T>) -> Result<Vec<T>> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .split(',')
                .map(|item| {
                    let item = item.trim();
                    item.parse()
                        .map_err(|_| self.err(key, format!("cannot parse list item `{item}`")))
                })
                .collect(),
        }
    }

    fn named<T>(&self, key: &str, default: T, lookup: impl Fn(&str) -> Option<T>, choices: &str) -> Result<T> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => lookup(v).ok_or_else(|| self.err(key, format!("`{v}` is not one of {choices}"))),
        }
    }
}

fn tokenize(text: &str) -> Result<Fields> {
    let mut map = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let Some((key, value)) = trimmed.split_once('=') else {
            return Err(CliError::Config {
                line,
                key: trimmed.to_string(),
                msg: "expected `key = value`".into(),
            });
        };
        let key = key.trim();
        if !KEYS.contains(&key) {
            return Err(CliError::Config {
                line,
                key: key.to_string(),
                msg: "unknown key".into(),
            });
        }
        let entry = Entry {
            line,
            value: value.trim().to_string(),
        };
        if let Some(prev) = map.insert(key.to_string(), entry) {
            return Err(CliError::Config {
                line,
                key: key.to_string(),
                msg: format!("duplicate key (first set on line {})", prev.line),
            });
        }
    }
    Ok(Fields(map))
}

fn default_batch_sizes() -> Vec<usize> {
    (0..=13).map(|p| 1usize << p).collect()
}

impl RunConfig {
    pub fn parse(text: &str, mode: Mode) -> Result<Self> {
        let f = tokenize(text)?;
        for key in REQUIRED {
            if f.raw(key).is_none() {
                return Err(CliError::Invalid(format!("missing required key `{key}`")));
            }
        }
        let dims: Vec<usize> = f.list("dims", Vec::new())?;
        if dims.len() < 2 || dims.contains(&0) {
            return Err(f.err("dims", "need at least two positive layer sizes"));
        }
        let activation = f.named("activation", Activation::Relu, Activation::from_name, "relu, sigmoid")?;
        let strategy_choices = "sgd, mbgd, svd_k, sbe, sbe_taylor";
        let strategy = f.named("strategy", StrategyKind::Sgd, StrategyKind::from_name, strategy_choices)?;
        let batch_size = f.parse("batch_size", 1usize)?;
        if batch_size == 0 {
            return Err(f.err("batch_size", "must be positive"));
        }
        let eta = match f.raw("eta") {
            None | Some("search") => Eta::Search,
            Some(v) => match v.parse::<f64>() {
                Ok(x) if x > 0.0 && x.is_finite() => Eta::Fixed(x),
                _ => return Err(f.err("eta", format!("`{v}` is neither `search` nor a positive number"))),
            },
        };
        let rank_k = f.parse("rank_k", 1usize)?;
        if rank_k == 0 {
            return Err(f.err("rank_k", "must be at least 1"));
        }
        let xi = f.parse("xi", 1e-3f64)?;
        if !(xi >= 0.0 && xi.is_finite()) {
            return Err(f.err("xi", "must be finite and nonnegative"));
        }
        let max_epochs = f.parse("max_epochs", DEFAULT_MAX_EPOCHS)?;
        if max_epochs == 0 {
            return Err(f.err("max_epochs", "must be at least 1"));
        }
        let targets: Vec<f64> = f.list("loss_targets", SWEEP_TARGETS.to_vec())?;
        let loss_targets: [f64; 2] = targets
            .try_into()
            .map_err(|_| f.err("loss_targets", "expected exactly two values"))?;
        if loss_targets.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return Err(f.err("loss_targets", "targets must be positive"));
        }
        let stop_loss = f.parse("stop_loss", loss_targets[0].min(loss_targets[1]))?;
        let trace_stride = f.parse("trace_stride", 16usize)?;
        if trace_stride == 0 {
            return Err(f.err("trace_stride", "must be positive"));
        }
        let shadow = f.named(
            "shadow",
            Shadow::Off,
            |v| match v {
                "off" => Some(Shadow::Off),
                "batch" => Some(Shadow::PerBatch),
                "trace" => Some(Shadow::Trace { stride: trace_stride }),
                _ => None,
            },
            "off, batch, trace",
        )?;
        let cycle_model = f.named("cycle_model", CycleModel::ColumnWise, CycleModel::from_name, "column, point")?;
        let sweep_batch_sizes = f.list("sweep_batch_sizes", default_batch_sizes())?;
        let sweep_strategies = match f.raw("sweep_strategies") {
            None => vec![StrategyKind::Sgd, StrategyKind::Mbgd, StrategyKind::SvdK, StrategyKind::Sbe],
            Some(v) => v
                .split(',')
                .map(|s| {
                    let s = s.trim();
                    StrategyKind::from_name(s)
                        .ok_or_else(|| f.err("sweep_strategies", format!("`{s}` is not one of {strategy_choices}")))
                })
                .collect::<Result<_>>()?,
        };
        let sweep_replicates = f.parse("sweep_replicates", 1usize)?;
        if sweep_replicates == 0 {
            return Err(f.err("sweep_replicates", "must be at least 1"));
        }
        let lr_grid = f.list("lr_grid", default_lr_grid())?;
        if lr_grid.is_empty() || lr_grid.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
            return Err(f.err("lr_grid", "needs positive finite values"));
        }
        let lr_epochs = f.parse("lr_epochs", LR_SEARCH_EPOCHS)?;
        if lr_epochs == 0 {
            return Err(f.err("lr_epochs", "must be at least 1"));
        }
        let spectrum_batch = f.parse("spectrum_batch", 10_000usize)?;
        if spectrum_batch == 0 {
            return Err(f.err("spectrum_batch", "must be positive"));
        }
        let accuracy_gate = f.parse("accuracy_gate", 0.9f64)?;
        if !(0.0..=1.0).contains(&accuracy_gate) {
            return Err(f.err("accuracy_gate", "must lie in [0, 1]"));
        }
        let train_limit = f.parse_opt("train_limit")?;
        let test_limit = f.parse_opt("test_limit")?;
        if train_limit == Some(0) {
            return Err(f.err("train_limit", "must be positive"));
        }
        if test_limit == Some(0) {
            return Err(f.err("test_limit", "must be positive"));
        }

        let cfg = RunConfig {
            data_dir: f.raw("data_dir").map(PathBuf::from),
            train_images: f.parse("train_images", "train-images-idx3-ubyte".to_string())?,
            train_labels: f.parse("train_labels", "train-labels-idx1-ubyte".to_string())?,
            test_images: f.parse("test_images", "t10k-images-idx3-ubyte".to_string())?,
            test_labels: f.parse("test_labels", "t10k-labels-idx1-ubyte".to_string())?,
            train_limit,
            test_limit,
            dims,
            activation,
            strategy,
            batch_size,
            eta,
            rank_k,
            xi,
            seed: f.parse("seed", 0u64)?,
            max_epochs,
            loss_targets,
            stop_loss,
            shadow,
            cycle_model,
            sweep_batch_sizes,
            sweep_strategies,
            sweep_replicates,
            lr_grid,
            lr_epochs,
            spectrum_batch,
            accuracy_gate,
            out_dir: f.raw("out_dir").map(PathBuf::from),
        };
        cfg.validate_mode(mode, &f)?;
        Ok(cfg)
    }

    pub fn load(path: &Path, mode: Mode) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, mode)
    }

    fn validate_mode(&self, mode: Mode, f: &Fields) -> Result<()> {
        let pow2 = |n: usize| n.is_power_of_two() && n <= MAX_SWEEP_BATCH;
        match mode {
            Mode::Sweep => {
                if !pow2(self.batch_size) {
                    return Err(f.err("batch_size", "sweep batch sizes must be powers of two in [1, 8192]"));
                }
                if let Some(bad) = self.sweep_batch_sizes.iter().find(|&&n| !pow2(n)) {
                    return Err(f.err(
                        "sweep_batch_sizes",
                        format!("{bad} is not a power of two in [1, 8192]"),
                    ));
                }
                if self.sweep_batch_sizes.is_empty() || self.sweep_strategies.is_empty() {
                    return Err(CliError::Invalid("sweep needs batch sizes and strategies".into()));
                }
            }
            Mode::Converge => {
                if self.strategy != StrategyKind::Sbe {
                    return Err(f.err("strategy", "converge traces the streaming estimator; use `sbe`"));
                }
            }
            Mode::Train | Mode::LrSearch | Mode::Spectrum => {}
        }
        if mode != Mode::Sweep {
            self.strategy_config(1.0)?;
        }
        Ok(())
    }

    /// Core strategy settings with the given learning rate.
    pub fn strategy_config(&self, eta: f64) -> Result<StrategyConfig> {
        self.strategy_config_for(self.strategy, self.batch_size, eta)
    }

    pub fn strategy_config_for(&self, kind: StrategyKind, batch_size: usize, eta: f64) -> Result<StrategyConfig> {
        let cfg = StrategyConfig {
            kind,
            eta,
            batch_size,
            rank_k: self.rank_k,
            xi: self.xi,
            cycle_model: self.cycle_model,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Dataset directory from the config, else from the environment.
    pub fn resolve_data_dir(&self) -> Result<PathBuf> {
        if let Some(d) = &self.data_dir {
            return Ok(d.clone());
        }
        match std::env::var_os(DATA_ENV) {
            Some(v) if !v.is_empty() => Ok(PathBuf::from(v)),
            _ => Err(CliError::MissingData(format!(
                "set `data_dir` in the config or the {DATA_ENV} environment variable"
            ))),
        }
    }

    /// Canonical `key = value` text that parses back to this config.
    pub fn to_text(&self) -> String {
        let list = |v: &[String]| v.join(",");
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        if let Some(d) = &self.data_dir {
            put("data_dir", d.display().to_string());
        }
        put("train_images", self.train_images.clone());
        put("train_labels", self.train_labels.clone());
        put("test_images", self.test_images.clone());
        put("test_labels", self.test_labels.clone());
        if let Some(n) = self.train_limit {
            put("train_limit", n.to_string());
        }
        if let Some(n) = self.test_limit {
            put("test_limit", n.to_string());
        }
        put("dims", list(&self.dims.iter().map(|d| d.to_string()).collect::<Vec<_>>()));
        put("activation", self.activation.name().into());
        put("strategy", self.strategy.name().into());
        put("batch_size", self.batch_size.to_string());
        put(
            "eta",
            match self.eta {
                Eta::Fixed(x) => format!("{x:?}"),
                Eta::Search => "search".into(),
            },
        );
        put("rank_k", self.rank_k.to_string());
        put("xi", format!("{:?}", self.xi));
        put("seed", self.seed.to_string());
        put("max_epochs", self.max_epochs.to_string());
        put("loss_targets", format!("{:?},{:?}", self.loss_targets[0], self.loss_targets[1]));
        put("stop_loss", format!("{:?}", self.stop_loss));
        match self.shadow {
            Shadow::Off => put("shadow", "off".into()),
            Shadow::PerBatch => put("shadow", "batch".into()),
            Shadow::Trace { stride } => {
                put("shadow", "trace".into());
                put("trace_stride", stride.to_string());
            }
        }
        put("cycle_model", self.cycle_model.name().into());
        put(
            "sweep_batch_sizes",
            list(&self.sweep_batch_sizes.iter().map(|d| d.to_string()).collect::<Vec<_>>()),
        );
        put(
            "sweep_strategies",
            list(&self.sweep_strategies.iter().map(|s| s.name().to_string()).collect::<Vec<_>>()),
        );
        put("sweep_replicates", self.sweep_replicates.to_string());
        put("lr_grid", list(&self.lr_grid.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>()));
        put("lr_epochs", self.lr_epochs.to_string());
        put("spectrum_batch", self.spectrum_batch.to_string());
        put("accuracy_gate", format!("{:?}", self.accuracy_gate));
        if let Some(d) = &self.out_dir {
            put("out_dir", d.display().to_string());
        }
        out
    }
}
