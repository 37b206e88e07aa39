//! Traditional classifiers over aggregate feature vectors.

pub mod forest;
pub mod svm;

use std::io::{self, Write};

use thiserror::Error;

pub use forest::{feature_importances, importance_ranking, train_forest, ForestConfig, ForestModel};
pub use svm::{train_svm, SvmConfig, SvmModel};

#[derive(Debug, Error, PartialEq)]
pub enum BaselineError {
    #[error("training data contains a single class")]
    SingleClassInput,
    #[error("non-finite feature at row {row}, column {col}")]
    NonFiniteFeature { row: usize, col: usize },
    #[error("need at least two rows with matching labels (rows: {rows}, labels: {labels})")]
    ShapeMismatch { rows: usize, labels: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// Validates a feature matrix and returns its width.
pub(crate) fn check_inputs(x: &[Vec<f64>], y: &[bool]) -> Result<usize, BaselineError> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(BaselineError::ShapeMismatch {
            rows: x.len(),
            labels: y.len(),
        });
    }
    let d = x[0].len();
    for (row, r) in x.iter().enumerate() {
        if r.len() != d {
            return Err(BaselineError::ShapeMismatch {
                rows: x.len(),
                labels: y.len(),
            });
        }
        if let Some(col) = r.iter().position(|v| !v.is_finite()) {
            return Err(BaselineError::NonFiniteFeature { row, col });
        }
    }
    if y.iter().all(|&v| v) || y.iter().all(|&v| !v) {
        return Err(BaselineError::SingleClassInput);
    }
    Ok(d)
}

/// `feature,importance` rows sorted by decreasing importance.
pub fn write_importance_csv<W: Write>(mut w: W, names: &[&str], importances: &[f64]) -> io::Result<()> {
    writeln!(w, "feature,importance")?;
    for i in importance_ranking(importances) {
        writeln!(w, "{},{}", names[i], importances[i])?;
    }
    Ok(())
}
