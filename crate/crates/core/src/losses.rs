//! Alignment and classification losses with their analytic gradients.
//!
//! The second-order losses take covariance matrices and return gradients
//! with respect to those covariances; [`chain_to_features`] carries such a
//! gradient back to the feature rows the covariance was computed from.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    build_p_matrix, diag_part, log_from_eig, relative_epsilon, sym_eig, sym_part, EigenPair,
    SymmetricMatrix,
};

/// A loss value with gradients with respect to the source and target inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBundle<G> {
    pub value: f64,
    pub grad_source: G,
    pub grad_target: G,
}

/// A loss of a single input, such as the classification loss.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarLoss {
    pub value: f64,
    pub grad: Array2<f64>,
}

/// Trade-off weights of the joint objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub classification: f64,
    pub coral: f64,
    pub logcoral: f64,
    pub mean: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            classification: 1.0,
            coral: 0.0,
            logcoral: 1.0,
            mean: 1.0,
        }
    }
}

impl LossWeights {
    /// Cross-entropy alone.
    pub const CLASSIFICATION_ONLY: Self = Self {
        classification: 1.0,
        coral: 0.0,
        logcoral: 0.0,
        mean: 0.0,
    };

    pub fn new(classification: f64, coral: f64, logcoral: f64, mean: f64) -> Result<Self> {
        let w = Self {
            classification,
            coral,
            logcoral,
            mean,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.classification, self.coral, self.logcoral, self.mean];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid(format!(
                "loss weights must be finite and nonnegative: {self}"
            )));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(Error::invalid("at least one loss weight must be positive"));
        }
        Ok(())
    }

    /// Applies `key=value` pairs on top of `self`. Keys: `cls`, `coral`,
    /// `logcoral`, `mean`.
    pub fn with_overrides(mut self, spec: &str) -> Result<Self> {
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("weight '{part}' is not key=value")))?;
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("weight '{part}' has a non-numeric value")))?;
            match key.trim() {
                "cls" | "classification" => self.classification = value,
                "coral" => self.coral = value,
                "logcoral" => self.logcoral = value,
                "mean" => self.mean = value,
                other => return Err(Error::invalid(format!("unknown loss weight '{other}'"))),
            }
        }
        self.validate()?;
        Ok(self)
    }
}

impl FromStr for LossWeights {
    type Err = Error;

    /// Parses `k=v,...`; keys not mentioned are zero.
    fn from_str(s: &str) -> Result<Self> {
        Self {
            classification: 0.0,
            coral: 0.0,
            logcoral: 0.0,
            mean: 0.0,
        }
        .with_overrides(s)
    }
}

impl fmt::Display for LossWeights {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "cls={},coral={},logcoral={},mean={}",
            self.classification, self.coral, self.logcoral, self.mean
        )
    }
}

/// How the covariances are made positive definite before the logarithm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Regularization {
    None,
    /// Add a fixed `ε·I`.
    Absolute(f64),
    /// Add `r·mean(diag(C))·I`, computed per matrix and differentiated.
    Relative(f64),
}

impl Regularization {
    fn validate(self) -> Result<()> {
        match self {
            Regularization::None => Ok(()),
            Regularization::Absolute(e) | Regularization::Relative(e) => {
                if e > 0.0 && e.is_finite() {
                    Ok(())
                } else {
                    Err(Error::invalid(format!(
                        "regularization must be positive and finite, got {e}"
                    )))
                }
            }
        }
    }

    pub fn epsilon_for(self, m: &SymmetricMatrix) -> f64 {
        match self {
            Regularization::None => 0.0,
            Regularization::Absolute(e) => e,
            Regularization::Relative(r) => relative_epsilon(m, r),
        }
    }
}

fn check_same_dim(a: &SymmetricMatrix, b: &SymmetricMatrix) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::invalid(format!(
            "covariance dimensions differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// `‖C_S − C_T‖²_F / (4d²)`.
pub fn coral_loss(
    cov_s: &SymmetricMatrix,
    cov_t: &SymmetricMatrix,
) -> Result<LossBundle<SymmetricMatrix>> {
    check_same_dim(cov_s, cov_t)?;
    let d = cov_s.dim() as f64;
    let diff = cov_s.sub(cov_t);
    let norm = diff.frobenius_norm();
    let grad_source = diff.scale(1.0 / (2.0 * d * d));
    let grad_target = grad_source.scale(-1.0);
    Ok(LossBundle {
        value: norm * norm / (4.0 * d * d),
        grad_source,
        grad_target,
    })
}

/// `‖log(C_S + εI) − log(C_T + εI)‖²_F / (4d²)` with a fixed `ε ≥ 0`.
pub fn logcoral_loss(
    cov_s: &SymmetricMatrix,
    cov_t: &SymmetricMatrix,
    epsilon: f64,
) -> Result<LossBundle<SymmetricMatrix>> {
    let reg = if epsilon == 0.0 {
        Regularization::None
    } else {
        Regularization::Absolute(epsilon)
    };
    logcoral_loss_regularized(cov_s, cov_t, reg)
}

/// One side of the LogCORAL computation, kept for the backward pass.
struct LogSide {
    eig: EigenPair,
    log: SymmetricMatrix,
    epsilon: f64,
    /// `∂ε/∂C = c·I` when ε follows the trace of `C`.
    trace_coupling: Option<f64>,
}

impl LogSide {
    fn new(cov: &SymmetricMatrix, reg: Regularization) -> Result<Self> {
        let epsilon = reg.epsilon_for(cov);
        let shifted = if epsilon > 0.0 {
            cov.shift_diagonal(epsilon)
        } else {
            cov.clone()
        };
        let eig = sym_eig(&shifted)?;
        let log = log_from_eig(&eig)?;
        let trace_coupling = match reg {
            Regularization::Relative(r) if cov.trace() > 0.0 => Some(r / cov.dim() as f64),
            _ => None,
        };
        Ok(Self {
            eig,
            log,
            epsilon,
            trace_coupling,
        })
    }
}

/// LogCORAL with a configurable regularization.
///
/// With `G = ∂L/∂log(C)` the gradient with respect to `C` is assembled from
/// the eigendecomposition `C = U·Σ·Uᵀ` as
///
/// ```text
/// dU = 2·sym(G)·U·log(Σ)
/// dΣ = Σ⁻¹·Uᵀ·sym(G)·U
/// ∂L/∂C = U·( sym(Pᵀ ∘ (Uᵀ·dU)) + diag(dΣ) )·Uᵀ
/// ```
///
/// where `P[i][j] = 1/(σ_i − σ_j)`.
pub fn logcoral_loss_regularized(
    cov_s: &SymmetricMatrix,
    cov_t: &SymmetricMatrix,
    reg: Regularization,
) -> Result<LossBundle<SymmetricMatrix>> {
    check_same_dim(cov_s, cov_t)?;
    reg.validate()?;
    let source = LogSide::new(cov_s, reg)?;
    let target = LogSide::new(cov_t, reg)?;
    let d = cov_s.dim() as f64;

    let diff = source.log.sub(&target.log);
    let norm = diff.frobenius_norm();
    let value = norm * norm / (4.0 * d * d);

    let upstream = diff.scale(1.0 / (2.0 * d * d));
    let grad_source = log_backward(&source, &upstream)?;
    let grad_target = log_backward(&target, &upstream.scale(-1.0))?;
    Ok(LossBundle {
        value,
        grad_source,
        grad_target,
    })
}

fn log_backward(side: &LogSide, upstream: &SymmetricMatrix) -> Result<SymmetricMatrix> {
    let u = &side.eig.vectors;
    let sigma = &side.eig.values;
    let g = sym_part(&upstream.view())?.into_inner();

    let log_sigma = sigma.mapv(f64::ln);
    let d_u = 2.0 * g.dot(u) * log_sigma.view().insert_axis(Axis(0));

    let floor = side.epsilon;
    let inv_sigma = sigma.mapv(|s| 1.0 / s.max(floor));
    let projected = u.t().dot(&g).dot(u);
    let d_sigma = &projected * &inv_sigma.view().insert_axis(Axis(1));

    let p = build_p_matrix(sigma.view());
    let coupling = &p.t() * &u.t().dot(&d_u);
    let inner = sym_part(&coupling.view())?.into_inner() + diag_part(&d_sigma.view())?;
    let mut grad = sym_part(&u.dot(&inner).dot(&u.t()).view())?;

    // A relative epsilon depends on trace(C), which contributes a multiple
    // of the identity.
    if let Some(c) = side.trace_coupling {
        grad = grad.shift_diagonal(c * grad.trace());
    }
    Ok(grad)
}

/// `‖μ_S − μ_T‖² / (2d)` over mean vectors.
pub fn mean_loss(
    mean_s: &ArrayView1<f64>,
    mean_t: &ArrayView1<f64>,
) -> Result<LossBundle<Array1<f64>>> {
    if mean_s.len() != mean_t.len() {
        return Err(Error::invalid(format!(
            "mean vector lengths differ: {} vs {}",
            mean_s.len(),
            mean_t.len()
        )));
    }
    if mean_s.is_empty() {
        return Err(Error::invalid("mean vectors are empty"));
    }
    let d = mean_s.len() as f64;
    let diff = mean_s - mean_t;
    let grad_source = &diff / d;
    let grad_target = -&grad_source;
    Ok(LossBundle {
        value: diff.dot(&diff) / (2.0 * d),
        grad_source,
        grad_target,
    })
}

/// Carries `∂L/∂C` back to the rows of `features`, where `C` is their
/// covariance: `∂L/∂D = 2/(n−1)·(D − 1·μᵀ)·sym(∂L/∂C)`.
///
/// Callers using smoothed statistics multiply the result by the batch's
/// weight in the average.
pub fn chain_to_features(
    loss_grad_cov: &SymmetricMatrix,
    features: &ArrayView2<f64>,
) -> Result<Array2<f64>> {
    let (n, d) = features.dim();
    if d != loss_grad_cov.dim() {
        return Err(Error::invalid(format!(
            "covariance gradient is {0}x{0} but features have {d} columns",
            loss_grad_cov.dim()
        )));
    }
    if n < 2 {
        return Err(Error::invalid("covariance gradient needs at least 2 rows"));
    }
    let mean = features.sum_axis(Axis(0)) / n as f64;
    let centered = features - &mean.insert_axis(Axis(0));
    Ok(centered.dot(loss_grad_cov.as_array()) * (2.0 / (n - 1) as f64))
}

/// Carries `∂L/∂μ` back to `n` rows: every row receives `∂L/∂μ / n`.
pub fn chain_mean_to_features(loss_grad_mean: &ArrayView1<f64>, n: usize) -> Array2<f64> {
    let row = loss_grad_mean / n as f64;
    row.insert_axis(Axis(0))
        .broadcast((n, loss_grad_mean.len()))
        .expect("broadcast of a single row")
        .to_owned()
}

/// Mean softmax cross-entropy; the gradient is `(softmax − onehot)/n`.
pub fn softmax_cross_entropy(logits: &ArrayView2<f64>, labels: &[usize]) -> Result<ScalarLoss> {
    let (n, k) = logits.dim();
    if n == 0 || k == 0 {
        return Err(Error::invalid("cross-entropy of an empty logit matrix"));
    }
    if labels.len() != n {
        return Err(Error::invalid(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
    }
    let mut grad = Array2::zeros((n, k));
    let mut total = 0.0;
    for (i, row) in logits.rows().into_iter().enumerate() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        total += log_z - row[labels[i]];
        for (j, v) in row.iter().enumerate() {
            grad[[i, j]] = (v - log_z).exp() / n as f64;
        }
        grad[[i, labels[i]]] -= 1.0 / n as f64;
    }
    Ok(ScalarLoss {
        value: total / n as f64,
        grad,
    })
}
