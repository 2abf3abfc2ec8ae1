//! Central finite-difference checks of the analytic loss gradients.
//!
//! The difference quotients here only ever call the forward value of a
//! loss, so they stay independent of the backward code they check.

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use serde_json::json;

use crate::error::{Error, Result};
use crate::linalg::{frobenius_norm, matrix_log, regularize_psd, SymmetricMatrix};
use crate::losses::{
    chain_to_features, coral_loss, logcoral_loss, mean_loss, softmax_cross_entropy,
};
use crate::statistics::covariance;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const LOGCORAL_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_TOLERANCE: f64 = 1e-6;
pub const CLOSED_FORM_TOLERANCE: f64 = 1e-10;

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute difference when both are
/// below `1e-12`.
pub fn relative_error(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> f64 {
    let diff = frobenius_norm(&(a - b).view());
    let scale = frobenius_norm(a).max(frobenius_norm(b));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Gradient of `f` at a symmetric matrix, perturbing `(i,j)` and `(j,i)`
/// together so every probe stays symmetric.
pub fn fd_symmetric<F>(f: F, at: &SymmetricMatrix, h: f64) -> Result<SymmetricMatrix>
where
    F: Fn(&SymmetricMatrix) -> Result<f64>,
{
    let n = at.dim();
    let mut grad = Array2::zeros((n, n));
    for i in 0..n {
        for j in i..n {
            let mut probe = at.as_array().clone();
            probe[[i, j]] += h;
            if i != j {
                probe[[j, i]] += h;
            }
            let plus = f(&SymmetricMatrix::new(probe.clone())?)?;
            probe[[i, j]] -= 2.0 * h;
            if i != j {
                probe[[j, i]] -= 2.0 * h;
            }
            let minus = f(&SymmetricMatrix::new(probe)?)?;
            let slope = (plus - minus) / (2.0 * h);
            // A symmetric probe moves two entries at once.
            let g = if i == j { slope } else { 0.5 * slope };
            grad[[i, j]] = g;
            grad[[j, i]] = g;
        }
    }
    SymmetricMatrix::new(grad)
}

/// Entry-wise central differences of `f` at a general matrix.
pub fn fd_matrix<F>(f: F, at: &Array2<f64>, h: f64) -> Result<Array2<f64>>
where
    F: Fn(&Array2<f64>) -> Result<f64>,
{
    let mut grad = Array2::zeros(at.dim());
    let mut probe = at.clone();
    for (idx, g) in grad.indexed_iter_mut() {
        let orig = probe[idx];
        probe[idx] = orig + h;
        let plus = f(&probe)?;
        probe[idx] = orig - h;
        let minus = f(&probe)?;
        probe[idx] = orig;
        *g = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

pub fn fd_vector<F>(f: F, at: &Array1<f64>, h: f64) -> Result<Array1<f64>>
where
    F: Fn(&Array1<f64>) -> Result<f64>,
{
    let mut grad = Array1::zeros(at.len());
    let mut probe = at.clone();
    for i in 0..at.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe)?;
        probe[i] = orig - h;
        let minus = f(&probe)?;
        probe[i] = orig;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

/// Haar-ish random orthogonal matrix from Gram-Schmidt on a Gaussian matrix.
pub fn random_orthogonal(d: usize, rng: &mut impl Rng) -> Array2<f64> {
    loop {
        let mut q = random_matrix(d, d, rng);
        let mut ok = true;
        for j in 0..d {
            // Two passes of modified Gram-Schmidt for orthogonality to
            // working precision.
            for _ in 0..2 {
                for k in 0..j {
                    let proj = q.column(j).dot(&q.column(k));
                    let qk = q.column(k).to_owned();
                    q.column_mut(j).scaled_add(-proj, &qk);
                }
            }
            let norm = q.column(j).dot(&q.column(j)).sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            q.column_mut(j).mapv_inplace(|v| v / norm);
        }
        if ok {
            return q;
        }
    }
}

/// Random SPD matrix whose sorted eigenvalues lie in `[0.5, ~2.5]` with
/// consecutive gaps of at least `min_gap`.
pub fn random_spd(d: usize, min_gap: f64, rng: &mut impl Rng) -> SymmetricMatrix {
    let mut values = Vec::with_capacity(d);
    let mut current = 0.5 + rng.random::<f64>() * 0.1;
    for _ in 0..d {
        values.push(current);
        current += min_gap + rng.random::<f64>() * 2.0 / d as f64;
    }
    let q = random_orthogonal(d, rng);
    SymmetricMatrix::from_diag(&values).conjugate(&q.view())
}

/// Which checks [`run_gradcheck`] performs.
#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub dim: usize,
    pub trials: usize,
    pub step: f64,
    pub min_gap: f64,
    /// Test hook: negate every analytic target gradient before comparing.
    pub corrupt_target_sign: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dim: 5,
            trials: 10,
            step: DEFAULT_STEP,
            min_gap: 1e-3,
            corrupt_target_sign: false,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Input that produced the largest error.
    pub worst_input: serde_json::Value,
}

struct Tracker {
    name: &'static str,
    tolerance: f64,
    worst: f64,
    worst_input: serde_json::Value,
}

impl Tracker {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Self {
            name,
            tolerance,
            worst: 0.0,
            worst_input: serde_json::Value::Null,
        }
    }

    fn record(&mut self, err: f64, input: impl FnOnce() -> serde_json::Value) {
        if err > self.worst || err.is_nan() {
            self.worst = if err.is_nan() { f64::INFINITY } else { err };
            self.worst_input = input();
        }
    }

    fn finish(self) -> CheckResult {
        CheckResult {
            name: self.name.to_string(),
            max_relative_error: self.worst,
            tolerance: self.tolerance,
            passed: self.worst <= self.tolerance,
            worst_input: self.worst_input,
        }
    }
}

fn sign(corrupt: bool) -> f64 {
    if corrupt {
        -1.0
    } else {
        1.0
    }
}

fn rows(m: &ArrayView2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Matrix log of `c + εI`, the fixed half of a LogCORAL probe.
fn regularized_log(c: &SymmetricMatrix, epsilon: f64) -> Result<SymmetricMatrix> {
    if epsilon > 0.0 {
        matrix_log(&regularize_psd(c, epsilon)?)
    } else {
        matrix_log(c)
    }
}

/// LogCORAL value from precomputed logs, without the backward pass.
fn log_distance(log_s: &SymmetricMatrix, log_t: &SymmetricMatrix) -> f64 {
    let d = log_s.dim() as f64;
    let norm = log_s.sub(log_t).frobenius_norm();
    norm * norm / (4.0 * d * d)
}

/// Compares every analytic loss gradient against central differences on
/// random inputs drawn from `config.seed`.
pub fn run_gradcheck(config: &GradcheckConfig) -> Result<Vec<CheckResult>> {
    if config.dim == 0 || config.trials == 0 {
        return Err(Error::invalid("gradcheck needs dim >= 1 and trials >= 1"));
    }
    if config.step.is_nan() || config.step <= 0.0 {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let d = config.dim;
    let h = config.step;
    let t_sign = sign(config.corrupt_target_sign);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut coral = Tracker::new("coral", DEFAULT_TOLERANCE);
    let mut logcoral = Tracker::new("logcoral", LOGCORAL_TOLERANCE);
    let mut mean = Tracker::new("mean", DEFAULT_TOLERANCE);
    let mut xent = Tracker::new("softmax_cross_entropy", DEFAULT_TOLERANCE);
    let mut chain = Tracker::new("logcoral_features", LOGCORAL_TOLERANCE);
    let mut closed = Tracker::new("logcoral_closed_form", CLOSED_FORM_TOLERANCE);

    for _ in 0..config.trials {
        let cs = random_spd(d, config.min_gap, &mut rng);
        let ct = random_spd(d, config.min_gap, &mut rng);
        let pair_json = || json!({ "cov_source": rows(&cs.view()), "cov_target": rows(&ct.view()) });

        let b = coral_loss(&cs, &ct)?;
        let fs = fd_symmetric(|c| Ok(coral_loss(c, &ct)?.value), &cs, h)?;
        let ft = fd_symmetric(|c| Ok(coral_loss(&cs, c)?.value), &ct, h)?;
        let err = relative_error(&b.grad_source.view(), &fs.view()).max(relative_error(
            &b.grad_target.scale(t_sign).view(),
            &ft.view(),
        ));
        coral.record(err, pair_json);

        let b = logcoral_loss(&cs, &ct, 0.0)?;
        let (log_s, log_t) = (regularized_log(&cs, 0.0)?, regularized_log(&ct, 0.0)?);
        let fs = fd_symmetric(|c| Ok(log_distance(&regularized_log(c, 0.0)?, &log_t)), &cs, h)?;
        let ft = fd_symmetric(|c| Ok(log_distance(&log_s, &regularized_log(c, 0.0)?)), &ct, h)?;
        let err = relative_error(&b.grad_source.view(), &fs.view()).max(relative_error(
            &b.grad_target.scale(t_sign).view(),
            &ft.view(),
        ));
        logcoral.record(err, pair_json);

        if d == 1 {
            // L = (ln a − ln b)²/4, dL/da = (ln a − ln b)/(2a)
            let (a, c) = (cs.get(0, 0), ct.get(0, 0));
            let r = a.ln() - c.ln();
            let err = (b.grad_source.get(0, 0) - r / (2.0 * a))
                .abs()
                .max((t_sign * b.grad_target.get(0, 0) + r / (2.0 * c)).abs());
            closed.record(err, pair_json);
        }

        let ms: Array1<f64> = Array1::from_shape_fn(d, |_| rng.sample(StandardNormal));
        let mt: Array1<f64> = Array1::from_shape_fn(d, |_| rng.sample(StandardNormal));
        let b = mean_loss(&ms.view(), &mt.view())?;
        let fs = fd_vector(|m| Ok(mean_loss(&m.view(), &mt.view())?.value), &ms, h)?;
        let ft = fd_vector(|m| Ok(mean_loss(&ms.view(), &m.view())?.value), &mt, h)?;
        let as_col = |v: &Array1<f64>| v.clone().insert_axis(ndarray::Axis(1));
        let err = relative_error(&as_col(&b.grad_source).view(), &as_col(&fs).view()).max(
            relative_error(&as_col(&(&b.grad_target * t_sign)).view(), &as_col(&ft).view()),
        );
        mean.record(err, || json!({ "mean_source": ms.to_vec(), "mean_target": mt.to_vec() }));

        let k = d.max(2);
        let n = 4;
        let logits = random_matrix(n, k, &mut rng) * 2.0;
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let l = softmax_cross_entropy(&logits.view(), &labels)?;
        let fl = fd_matrix(|z| Ok(softmax_cross_entropy(&z.view(), &labels)?.value), &logits, h)?;
        xent.record(relative_error(&l.grad.view(), &fl.view()), || {
            json!({ "logits": rows(&logits.view()), "labels": labels })
        });

        // Features -> covariance -> LogCORAL, perturbed at the feature level.
        let n = d + 6;
        let xs = random_matrix(n, d, &mut rng);
        let xt = random_matrix(n, d, &mut rng) * 1.5;
        let eps = 1e-2;
        let (cov_s, cov_t) = (covariance(&xs.view())?, covariance(&xt.view())?);
        let (log_s, log_t) = (regularized_log(&cov_s, eps)?, regularized_log(&cov_t, eps)?);
        let log_of = |x: &Array2<f64>| regularized_log(&covariance(&x.view())?, eps);
        let b = logcoral_loss(&cov_s, &cov_t, eps)?;
        let gs = chain_to_features(&b.grad_source, &xs.view())?;
        let gt = chain_to_features(&b.grad_target, &xt.view())? * t_sign;
        let fs = fd_matrix(|a| Ok(log_distance(&log_of(a)?, &log_t)), &xs, h)?;
        let ft = fd_matrix(|a| Ok(log_distance(&log_s, &log_of(a)?)), &xt, h)?;
        let err = relative_error(&gs.view(), &fs.view()).max(relative_error(&gt.view(), &ft.view()));
        chain.record(err, || {
            json!({ "features_source": rows(&xs.view()), "features_target": rows(&xt.view()), "epsilon": eps })
        });
    }

    let mut out = vec![coral.finish(), logcoral.finish(), mean.finish(), xent.finish(), chain.finish()];
    if d == 1 {
        out.push(closed.finish());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_of_sign_flip_is_two() {
        let a = ndarray::array![[1.0, 2.0], [3.0, 4.0]];
        assert!((relative_error(&a.view(), &(-&a).view()) - 2.0).abs() < 1e-15);
        let z = Array2::<f64>::zeros((2, 2));
        assert_eq!(relative_error(&z.view(), &z.view()), 0.0);
    }

    #[test]
    fn random_spd_has_requested_gaps() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_spd(6, 1e-3, &mut rng);
        let eig = crate::linalg::sym_eig(&m).unwrap();
        for w in eig.values.windows(2) {
            assert!(w[1] - w[0] >= 1e-3 - 1e-12);
        }
        assert!(eig.values[0] >= 0.5 - 1e-12);
    }

    #[test]
    fn fd_symmetric_of_trace_square() {
        // f(C) = tr(C²) has gradient 2C under the symmetric convention.
        let c = SymmetricMatrix::new(ndarray::array![[1.0, 0.5], [0.5, 2.0]]).unwrap();
        let g = fd_symmetric(
            |m| Ok(m.as_array().iter().map(|v| v * v).sum()),
            &c,
            1e-5,
        )
        .unwrap();
        assert!(relative_error(&g.view(), &c.scale(2.0).view()) < 1e-9);
    }

    #[test]
    fn default_config_passes() {
        let results = run_gradcheck(&GradcheckConfig::default()).unwrap();
        for r in &results {
            assert!(r.passed, "{} failed with {}", r.name, r.max_relative_error);
        }
    }
}
