//! Loading the four MNIST IDX files.

use std::path::Path;

use eigenstream_core::mnist::Dataset;

use crate::config::RunConfig;
use crate::error::{CliError, Result};

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::MissingData(path.display().to_string())
        } else {
            CliError::io(path, e)
        }
    })
}

/// Reads one image/label file pair.
pub fn load_pair(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = read(images)?;
    let lab = read(labels)?;
    Ok(Dataset::from_idx_bytes(&img, &lab)?)
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

/// Loads the train and test splits named by `cfg`, truncated to its limits.
pub fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    let dir = cfg.resolve_data_dir()?;
    let mut train = load_pair(&dir.join(&cfg.train_images), &dir.join(&cfg.train_labels))?;
    let mut test = load_pair(&dir.join(&cfg.test_images), &dir.join(&cfg.test_labels))?;
    if let Some(n) = cfg.train_limit {
        train = train.head(n);
    }
    if let Some(n) = cfg.test_limit {
        test = test.head(n);
    }
    if train.dim() != cfg.dims[0] {
        return Err(CliError::Invalid(format!(
            "dims[0] = {} but the images have {} pixels",
            cfg.dims[0],
            train.dim()
        )));
    }
    Ok(Splits { train, test })
}
