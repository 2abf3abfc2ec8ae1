//! Dense symmetric linear algebra.
//!
//! Everything here works on small dense `f64` matrices (a few hundred rows
//! at most). The eigensolver is a cyclic Jacobi iteration: it is slower than
//! tridiagonal QR for large inputs but delivers eigenvectors that are
//! orthonormal to working precision, which the LogCORAL backward pass
//! relies on.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative asymmetry accepted by [`SymmetricMatrix::new`].
const SYMMETRY_TOLERANCE: f64 = 1e-12;

/// Jacobi sweeps before giving up.
const MAX_SWEEPS: usize = 100;

/// Relative eigenvalue gap below which an entry of the P matrix is zeroed.
pub const DEGENERACY_THRESHOLD: f64 = 1e-10;

/// Default regularization, relative to the mean diagonal entry.
pub const DEFAULT_RELATIVE_EPSILON: f64 = 1e-6;

/// A square matrix that is exactly symmetric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Array2<f64>", into = "Array2<f64>")]
pub struct SymmetricMatrix {
    entries: Array2<f64>,
}

impl SymmetricMatrix {
    /// Wraps `entries`, rejecting non-square or visibly asymmetric input.
    ///
    /// Differences up to `1e-12` relative to the largest entry are treated
    /// as rounding noise and averaged away so the stored matrix is exactly
    /// symmetric. Use [`sym_part`] to symmetrize arbitrary square input.
    pub fn new(entries: Array2<f64>) -> Result<Self> {
        check_square(&entries.view(), "symmetric matrix")?;
        let scale = entries.iter().fold(1.0_f64, |acc, v| acc.max(v.abs()));
        let n = entries.nrows();
        for i in 0..n {
            for j in (i + 1)..n {
                let (a, b) = (entries[[i, j]], entries[[j, i]]);
                if (a - b).abs() > SYMMETRY_TOLERANCE * scale {
                    return Err(Error::invalid(format!(
                        "matrix is not symmetric: entry ({i},{j}) = {a} but ({j},{i}) = {b}"
                    )));
                }
            }
        }
        Ok(Self::symmetrized(entries))
    }

    fn symmetrized(mut entries: Array2<f64>) -> Self {
        let n = entries.nrows();
        for i in 0..n {
            for j in (i + 1)..n {
                let avg = 0.5 * (entries[[i, j]] + entries[[j, i]]);
                entries[[i, j]] = avg;
                entries[[j, i]] = avg;
            }
        }
        Self { entries }
    }

    pub fn identity(dim: usize) -> Self {
        assert!(dim >= 1, "dimension must be positive");
        Self {
            entries: Array2::eye(dim),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim >= 1, "dimension must be positive");
        Self {
            entries: Array2::zeros((dim, dim)),
        }
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        assert!(!diag.is_empty(), "dimension must be positive");
        Self {
            entries: Array2::from_diag(&ArrayView1::from(diag)),
        }
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.entries.view()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.entries
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[[i, j]]
    }

    pub fn trace(&self) -> f64 {
        self.entries.diag().sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius_norm(&self.entries.view())
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|v| v.is_finite())
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self {
            entries: &self.entries * factor,
        }
    }

    /// `self + other`, panicking on a dimension mismatch.
    pub fn add(&self, other: &Self) -> Self {
        assert_eq!(self.dim(), other.dim(), "dimension mismatch");
        Self {
            entries: &self.entries + &other.entries,
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        assert_eq!(self.dim(), other.dim(), "dimension mismatch");
        Self {
            entries: &self.entries - &other.entries,
        }
    }

    /// `a·self + b·other`.
    pub fn lincomb(&self, a: f64, other: &Self, b: f64) -> Self {
        assert_eq!(self.dim(), other.dim(), "dimension mismatch");
        Self {
            entries: &self.entries * a + &other.entries * b,
        }
    }

    /// `self + shift·I`.
    pub fn shift_diagonal(&self, shift: f64) -> Self {
        let mut entries = self.entries.clone();
        entries.diag_mut().mapv_inplace(|v| v + shift);
        Self { entries }
    }

    /// `Q·self·Qᵀ` for a square `Q` of matching size.
    pub fn conjugate(&self, q: &ArrayView2<f64>) -> Self {
        Self::symmetrized(q.dot(&self.entries).dot(&q.t()))
    }
}

impl TryFrom<Array2<f64>> for SymmetricMatrix {
    type Error = Error;

    fn try_from(value: Array2<f64>) -> Result<Self> {
        Self::new(value)
    }
}

impl From<SymmetricMatrix> for Array2<f64> {
    fn from(value: SymmetricMatrix) -> Self {
        value.entries
    }
}

/// Eigenvalues in ascending order with orthonormal eigenvectors as columns.
///
/// Each eigenvector's sign is fixed so that its largest-magnitude entry is
/// positive (first such entry on ties).
#[derive(Clone, Debug, PartialEq)]
pub struct EigenPair {
    pub values: Array1<f64>,
    pub vectors: Array2<f64>,
}

impl EigenPair {
    /// `U·diag(σ)·Uᵀ`.
    pub fn reconstruct(&self) -> SymmetricMatrix {
        self.map_spectrum(|s| s)
    }

    /// `U·diag(f(σ))·Uᵀ`.
    pub fn map_spectrum(&self, f: impl Fn(f64) -> f64) -> SymmetricMatrix {
        let mapped = self.values.mapv(f);
        let scaled = &self.vectors * &mapped.view().insert_axis(Axis(0));
        SymmetricMatrix::symmetrized(scaled.dot(&self.vectors.t()))
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
pub fn sym_eig(m: &SymmetricMatrix) -> Result<EigenPair> {
    if !m.is_finite() {
        return Err(Error::invalid("matrix has non-finite entries"));
    }
    let n = m.dim();
    let mut a = m.entries.clone();
    let mut v = Array2::<f64>::eye(n);

    let mut converged = false;
    for sweep in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|p| ((p + 1)..n).map(move |q| (p, q)))
            .map(|(p, q)| a[[p, q]].abs())
            .sum();
        if off == 0.0 {
            converged = true;
            break;
        }
        // Early sweeps only rotate away entries above a threshold.
        let threshold = if sweep < 3 {
            0.2 * off / (n * n) as f64
        } else {
            0.0
        };
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[[p, q]];
                let g = 100.0 * apq.abs();
                let (app, aqq) = (a[[p, p]], a[[q, q]]);
                if sweep > 3 && app.abs() + g == app.abs() && aqq.abs() + g == aqq.abs() {
                    a[[p, q]] = 0.0;
                    a[[q, p]] = 0.0;
                    continue;
                }
                if apq.abs() <= threshold {
                    continue;
                }
                let h = aqq - app;
                let t = if h.abs() + g == h.abs() {
                    apq / h
                } else {
                    let theta = 0.5 * h / apq;
                    let t = 1.0 / (theta.abs() + (1.0 + theta * theta).sqrt());
                    if theta < 0.0 {
                        -t
                    } else {
                        t
                    }
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                rotate(&mut a, &mut v, p, q, c, s, t * apq);
            }
        }
    }
    if !converged {
        return Err(Error::NumericalFailure(format!(
            "Jacobi eigensolver did not converge after {MAX_SWEEPS} sweeps"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[[i, i]].total_cmp(&a[[j, j]]));
    let values = Array1::from_iter(order.iter().map(|&i| a[[i, i]]));
    let mut vectors = v.select(Axis(1), &order);
    for mut col in vectors.columns_mut() {
        let mut pivot = 0;
        for (k, x) in col.iter().enumerate() {
            if x.abs() > col[pivot].abs() {
                pivot = k;
            }
        }
        if col[pivot] < 0.0 {
            col.mapv_inplace(|x| -x);
        }
    }
    Ok(EigenPair { values, vectors })
}

/// Applies the rotation annihilating `a[p][q]`; `shift = t·a[p][q]`.
fn rotate(a: &mut Array2<f64>, v: &mut Array2<f64>, p: usize, q: usize, c: f64, s: f64, shift: f64) {
    let n = a.nrows();
    let tau = s / (1.0 + c);
    a[[p, p]] -= shift;
    a[[q, q]] += shift;
    a[[p, q]] = 0.0;
    a[[q, p]] = 0.0;
    for k in 0..n {
        if k == p || k == q {
            continue;
        }
        let akp = a[[k, p]];
        let akq = a[[k, q]];
        let new_kp = akp - s * (akq + tau * akp);
        let new_kq = akq + s * (akp - tau * akq);
        a[[k, p]] = new_kp;
        a[[p, k]] = new_kp;
        a[[k, q]] = new_kq;
        a[[q, k]] = new_kq;
    }
    for k in 0..n {
        let vkp = v[[k, p]];
        let vkq = v[[k, q]];
        v[[k, p]] = vkp - s * (vkq + tau * vkp);
        v[[k, q]] = vkq + s * (vkp - tau * vkq);
    }
}

/// `m + epsilon·I`, turning a PSD covariance into an SPD one.
pub fn regularize_psd(m: &SymmetricMatrix, epsilon: f64) -> Result<SymmetricMatrix> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::invalid(format!(
            "regularization epsilon must be positive and finite, got {epsilon}"
        )));
    }
    Ok(m.shift_diagonal(epsilon))
}

/// `relative · mean(diag(m))`, falling back to `relative` itself when the
/// diagonal is not positive.
pub fn relative_epsilon(m: &SymmetricMatrix, relative: f64) -> f64 {
    let mean_diag = m.trace() / m.dim() as f64;
    if mean_diag > 0.0 {
        relative * mean_diag
    } else {
        relative
    }
}

/// Principal logarithm of an SPD matrix.
pub fn matrix_log(m: &SymmetricMatrix) -> Result<SymmetricMatrix> {
    let eig = sym_eig(m)?;
    log_from_eig(&eig)
}

pub(crate) fn log_from_eig(eig: &EigenPair) -> Result<SymmetricMatrix> {
    if let Some((index, &eigenvalue)) = eig.values.iter().enumerate().find(|(_, v)| **v <= 0.0) {
        return Err(Error::NotPositiveDefinite { eigenvalue, index });
    }
    Ok(eig.map_spectrum(f64::ln))
}

pub fn matrix_exp(m: &SymmetricMatrix) -> Result<SymmetricMatrix> {
    Ok(sym_eig(m)?.map_spectrum(f64::exp))
}

/// `P[i][j] = 1/(σ_i − σ_j)` off the diagonal, zero on it.
///
/// Pairs whose gap is below `1e-10·max(1, |σ_i|, |σ_j|)` get zero, keeping
/// the result antisymmetric and bounded for repeated eigenvalues.
pub fn build_p_matrix(values: ArrayView1<f64>) -> Array2<f64> {
    let n = values.len();
    let mut p = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let gap = values[i] - values[j];
            let scale = 1.0_f64.max(values[i].abs()).max(values[j].abs());
            if gap.abs() >= DEGENERACY_THRESHOLD * scale {
                p[[i, j]] = 1.0 / gap;
                p[[j, i]] = -1.0 / gap;
            }
        }
    }
    p
}

/// `½(m + mᵀ)`.
pub fn sym_part(m: &ArrayView2<f64>) -> Result<SymmetricMatrix> {
    check_square(m, "sym_part")?;
    Ok(SymmetricMatrix {
        entries: (m + &m.t()) * 0.5,
    })
}

/// `½(m − mᵀ)`, the complement of [`sym_part`].
pub fn antisym_part(m: &ArrayView2<f64>) -> Result<Array2<f64>> {
    check_square(m, "antisym_part")?;
    Ok((m - &m.t()) * 0.5)
}

/// Keeps the diagonal of `m` and zeroes everything else.
pub fn diag_part(m: &ArrayView2<f64>) -> Result<Array2<f64>> {
    check_square(m, "diag_part")?;
    Ok(Array2::from_diag(&m.diag()))
}

pub fn frobenius_norm(m: &ArrayView2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn check_square(m: &ArrayView2<f64>, what: &str) -> Result<()> {
    let (r, c) = m.dim();
    if r != c {
        return Err(Error::invalid(format!("{what}: expected a square matrix, got {r}x{c}")));
    }
    if r == 0 {
        return Err(Error::invalid(format!("{what}: matrix is empty")));
    }
    Ok(())
}
