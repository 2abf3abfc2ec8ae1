//! Batch statistics of feature matrices and their moving averages.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::SymmetricMatrix;

/// Momentum of the moving-average statistics.
pub const DEFAULT_STATS_MOMENTUM: f64 = 0.9;

/// An `n × d` matrix of feature rows from one domain, optionally labeled.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBatch {
    data: Array2<f64>,
    labels: Option<Vec<usize>>,
}

impl FeatureBatch {
    pub fn new(data: Array2<f64>, labels: Option<Vec<usize>>) -> Result<Self> {
        let (n, d) = data.dim();
        if n == 0 || d == 0 {
            return Err(Error::invalid(format!("feature batch must be non-empty, got {n}x{d}")));
        }
        if let Some((idx, v)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite feature {v} at row {}, column {}",
                idx / d,
                idx % d
            )));
        }
        if let Some(labels) = &labels {
            if labels.len() != n {
                return Err(Error::invalid(format!(
                    "{} labels for {n} rows",
                    labels.len()
                )));
            }
        }
        Ok(Self { data, labels })
    }

    pub fn unlabeled(data: Array2<f64>) -> Result<Self> {
        Self::new(data, None)
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn cols(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn without_labels(&self) -> Self {
        Self {
            data: self.data.clone(),
            labels: None,
        }
    }

    /// Rows at `indices`, in that order (repeats allowed).
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            data: self.data.select(Axis(0), indices),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }
}

/// Sample covariance with `1/(n-1)` normalization.
pub fn batch_covariance(b: &FeatureBatch) -> Result<SymmetricMatrix> {
    covariance(&b.data())
}

/// Covariance of the rows of `data`.
///
/// Computed from the mean-centered matrix, which equals
/// `(DᵀD − (1ᵀD)ᵀ(1ᵀD)/n)/(n−1)` without its cancellation error.
pub fn covariance(data: &ArrayView2<f64>) -> Result<SymmetricMatrix> {
    let n = data.nrows();
    if n < 2 {
        return Err(Error::invalid(format!("covariance needs at least 2 rows, got {n}")));
    }
    if data.ncols() == 0 {
        return Err(Error::invalid("covariance of zero-width features"));
    }
    let centered = data - &column_mean(data).insert_axis(Axis(0));
    let cov = centered.t().dot(&centered) / (n - 1) as f64;
    crate::linalg::sym_part(&cov.view())
}

pub fn batch_mean(b: &FeatureBatch) -> Array1<f64> {
    column_mean(&b.data())
}

pub(crate) fn column_mean(data: &ArrayView2<f64>) -> Array1<f64> {
    data.sum_axis(Axis(0)) / data.nrows() as f64
}

/// Exponential moving average of covariance and mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothedStats {
    cov: SymmetricMatrix,
    mean: Array1<f64>,
    momentum: f64,
    initialized: bool,
}

impl SmoothedStats {
    pub fn new(dim: usize, momentum: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("statistics dimension must be positive"));
        }
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(Error::invalid(format!(
                "momentum must lie strictly between 0 and 1, got {momentum}"
            )));
        }
        Ok(Self {
            cov: SymmetricMatrix::zeros(dim),
            mean: Array1::zeros(dim),
            momentum,
            initialized: false,
        })
    }

    pub fn cov(&self) -> &SymmetricMatrix {
        &self.cov
    }

    pub fn mean(&self) -> &Array1<f64> {
        &self.mean
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Weight the next batch receives in the smoothed value: `1` for the
    /// seeding update, `1 − momentum` afterwards. Gradients flowing through
    /// the smoothed statistics are scaled by this factor.
    pub fn batch_weight(&self) -> f64 {
        if self.initialized {
            1.0 - self.momentum
        } else {
            1.0
        }
    }

    /// Folds one batch into the average. The first update seeds the state
    /// with the batch values verbatim.
    pub fn update(&self, batch_cov: &SymmetricMatrix, batch_mean: &Array1<f64>) -> Result<Self> {
        if batch_cov.dim() != self.dim() || batch_mean.len() != self.dim() {
            return Err(Error::invalid(format!(
                "smoothed statistics have dimension {}, batch has covariance {} and mean {}",
                self.dim(),
                batch_cov.dim(),
                batch_mean.len()
            )));
        }
        if !self.initialized {
            return Ok(Self {
                cov: batch_cov.clone(),
                mean: batch_mean.clone(),
                momentum: self.momentum,
                initialized: true,
            });
        }
        let keep = self.momentum;
        let take = 1.0 - self.momentum;
        Ok(Self {
            cov: self.cov.lincomb(keep, batch_cov, take),
            mean: &self.mean * keep + batch_mean * take,
            momentum: self.momentum,
            initialized: true,
        })
    }
}

/// Functional form of [`SmoothedStats::update`].
pub fn update_smoothed(
    s: &SmoothedStats,
    batch_cov: &SymmetricMatrix,
    batch_mean: &Array1<f64>,
) -> Result<SmoothedStats> {
    s.update(batch_cov, batch_mean)
}
