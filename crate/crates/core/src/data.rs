//! Synthetic two-domain data and CSV feature files.
//!
//! The synthetic source domain is a balanced mixture of Gaussian classes
//! sharing one covariance. The target domain draws fresh samples from the
//! same mixture and pushes them through `x ↦ R·(s ∘ x) + t`, so mean and
//! covariance shifts can be switched on independently.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{arr1, s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{sym_eig, SymmetricMatrix};
use crate::statistics::FeatureBatch;

const ORTHOGONALITY_TOLERANCE: f64 = 1e-8;

/// Seed of the fixed class layout used by the preset shifts.
const LAYOUT_SEED: u64 = 0x010c_07a1;

/// Parameters of a synthetic domain pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub num_classes: usize,
    pub dim: usize,
    /// `num_classes × dim` class means of the source domain.
    pub class_means: Array2<f64>,
    pub class_cov: SymmetricMatrix,
    pub rotation: Array2<f64>,
    pub scale: Array1<f64>,
    pub translation: Array1<f64>,
    pub samples_per_class: usize,
    pub seed: u64,
}

/// Named presets of [`ShiftSpec`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShiftKind {
    /// Rotation, scaling and translation together.
    Benchmark,
    None,
    Translation,
    Scale,
    Rotation,
}

impl ShiftKind {
    pub const ALL: [ShiftKind; 5] = [
        ShiftKind::Benchmark,
        ShiftKind::None,
        ShiftKind::Translation,
        ShiftKind::Scale,
        ShiftKind::Rotation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShiftKind::Benchmark => "benchmark",
            ShiftKind::None => "none",
            ShiftKind::Translation => "translation",
            ShiftKind::Scale => "scale",
            ShiftKind::Rotation => "rotation",
        }
    }
}

impl std::str::FromStr for ShiftKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShiftKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown shift '{s}'")))
    }
}

impl std::fmt::Display for ShiftKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Rotation by `angle` in the coordinate planes `(0,1), (2,3), …` after
/// permuting coordinates with `perm`.
pub fn plane_rotation(dim: usize, angle: f64, perm: &[usize]) -> Array2<f64> {
    let mut r = Array2::eye(dim);
    let (c, s) = (angle.cos(), angle.sin());
    for pair in perm.chunks_exact(2) {
        let (p, q) = (pair[0], pair[1]);
        r[[p, p]] = c;
        r[[q, q]] = c;
        r[[p, q]] = -s;
        r[[q, p]] = s;
    }
    r
}

impl ShiftSpec {
    /// The default benchmark: 5 classes in 16 dimensions, shifted by a
    /// rotation, a per-coordinate scale and a translation.
    pub fn benchmark(seed: u64) -> Self {
        Self::preset(ShiftKind::Benchmark, seed)
    }

    /// The benchmark's class layout with the given kind of shift.
    ///
    /// Class means differ only in the first four coordinates. The target
    /// stretches those by a small factor and moves them slightly. Of the
    /// twelve class-independent coordinates, the first six are translated
    /// and the last six have their spread scaled, so the two kinds of shift
    /// act on different coordinates. The rotation turns nuisance
    /// coordinates within each of the two groups.
    pub fn preset(kind: ShiftKind, seed: u64) -> Self {
        const K: usize = 5;
        const D: usize = 16;
        const DISCRIMINATIVE: usize = 4;
        const TRANSLATED: std::ops::Range<usize> = 4..10;
        let mut layout = ChaCha8Rng::seed_from_u64(LAYOUT_SEED);

        let mut class_means = Array2::zeros((K, D));
        for mut row in class_means.rows_mut() {
            for j in 0..DISCRIMINATIVE {
                row[j] = 1.6 * layout.sample::<f64, _>(StandardNormal);
            }
        }
        let variances: Vec<f64> = (0..D)
            .map(|j| if j < DISCRIMINATIVE { 0.5 } else { 1.0 })
            .collect();
        let class_cov = SymmetricMatrix::from_diag(&variances);

        let perm: Vec<usize> = (DISCRIMINATIVE..D).collect();
        let rotation = plane_rotation(D, 0.35, &perm);
        let scale = Array1::from_shape_fn(D, |j| {
            if j < DISCRIMINATIVE {
                1.15
            } else if TRANSLATED.contains(&j) {
                1.0
            } else {
                2.5
            }
        });
        let mut translation = Array1::zeros(D);
        translation
            .slice_mut(s![..TRANSLATED.end])
            .assign(&arr1(&[0.5, -0.5, 0.5, -0.5, 0.7, -0.55, 1.25, 0.5, 1.0, -1.25]));

        let identity_rotation = Array2::eye(D);
        let (rotation, scale, translation) = match kind {
            ShiftKind::Benchmark => (rotation, scale, translation),
            ShiftKind::None => (identity_rotation, Array1::ones(D), Array1::zeros(D)),
            ShiftKind::Translation => (identity_rotation, Array1::ones(D), translation),
            ShiftKind::Scale => (identity_rotation, scale, Array1::zeros(D)),
            ShiftKind::Rotation => (rotation, Array1::ones(D), Array1::zeros(D)),
        };
        Self {
            num_classes: K,
            dim: D,
            class_means,
            class_cov,
            rotation,
            scale,
            translation,
            samples_per_class: 200,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (k, d) = (self.num_classes, self.dim);
        if k < 2 || d < 2 {
            return Err(Error::invalid(format!(
                "need at least 2 classes and 2 dimensions, got k={k}, d={d}"
            )));
        }
        if self.class_means.dim() != (k, d) {
            return Err(Error::invalid(format!(
                "class means are {:?}, expected ({k}, {d})",
                self.class_means.dim()
            )));
        }
        if self.class_cov.dim() != d || self.rotation.dim() != (d, d) {
            return Err(Error::invalid("covariance or rotation has the wrong size"));
        }
        if self.scale.len() != d || self.translation.len() != d {
            return Err(Error::invalid("scale or translation has the wrong length"));
        }
        let gram = self.rotation.t().dot(&self.rotation) - Array2::<f64>::eye(d);
        if gram.iter().any(|v| v.abs() > ORTHOGONALITY_TOLERANCE) {
            return Err(Error::invalid("rotation is not orthogonal"));
        }
        if self.scale.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::invalid("scales must be positive"));
        }
        if self.samples_per_class == 0 {
            return Err(Error::invalid("samples_per_class must be positive"));
        }
        let all_finite = self.class_means.iter().all(|v| v.is_finite())
            && self.translation.iter().all(|v| v.is_finite())
            && self.class_cov.is_finite();
        if !all_finite {
            return Err(Error::invalid("spec contains non-finite values"));
        }
        Ok(())
    }

    /// Applies the target transform to every row of `x`.
    pub fn transform(&self, x: &Array2<f64>) -> Array2<f64> {
        let scaled = x * &self.scale.view().insert_axis(Axis(0));
        scaled.dot(&self.rotation.t()) + self.translation.view().insert_axis(Axis(0))
    }

    /// Mean and covariance of the balanced source mixture.
    pub fn source_moments(&self) -> (Array1<f64>, SymmetricMatrix) {
        let k = self.num_classes as f64;
        let mean = self.class_means.sum_axis(Axis(0)) / k;
        let centered = &self.class_means - &mean.view().insert_axis(Axis(0));
        let between = centered.t().dot(&centered) / k;
        let cov = SymmetricMatrix::new(self.class_cov.as_array() + &between)
            .expect("sum of symmetric matrices");
        (mean, cov)
    }

    /// Mean and covariance of the target distribution.
    pub fn target_moments(&self) -> (Array1<f64>, SymmetricMatrix) {
        let (mean, cov) = self.source_moments();
        let mean = self.rotation.dot(&(&mean * &self.scale)) + &self.translation;
        let m = &self.rotation * &self.scale.view().insert_axis(Axis(0));
        (mean, cov.conjugate(&m.view()))
    }
}

/// Where a training run gets its two domains from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSource {
    Synthetic {
        shift: ShiftKind,
        seed: u64,
    },
    Csv {
        source: std::path::PathBuf,
        target: std::path::PathBuf,
        /// Whether the target file carries labels for evaluation.
        target_labels: bool,
    },
}

impl DataSource {
    pub fn load(&self) -> Result<DatasetPair> {
        match self {
            DataSource::Synthetic { shift, seed } => generate(&ShiftSpec::preset(*shift, *seed)),
            DataSource::Csv {
                source,
                target,
                target_labels,
            } => {
                let source = load_csv(source, true)?;
                let target = load_csv(target, *target_labels)?;
                let classes = source
                    .labels()
                    .into_iter()
                    .chain(target.labels())
                    .flatten()
                    .max()
                    .map_or(0, |m| m + 1);
                DatasetPair::new(source, target, classes.max(2))
            }
        }
    }
}

/// Labeled source and target batches of one synthetic problem.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetPair {
    pub source: FeatureBatch,
    /// Labels are only for evaluation.
    pub target: FeatureBatch,
    pub num_classes: usize,
}

impl DatasetPair {
    pub fn new(source: FeatureBatch, target: FeatureBatch, num_classes: usize) -> Result<Self> {
        if source.cols() != target.cols() {
            return Err(Error::invalid(format!(
                "source has {} features, target has {}",
                source.cols(),
                target.cols()
            )));
        }
        let labels = source
            .labels()
            .ok_or_else(|| Error::invalid("source domain must be labeled"))?;
        if let Some(bad) = labels
            .iter()
            .chain(target.labels().unwrap_or(&[]))
            .find(|&&l| l >= num_classes)
        {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            source,
            target,
            num_classes,
        })
    }
}

fn sample_mixture(
    spec: &ShiftSpec,
    root: &Array2<f64>,
    rng: &mut ChaCha8Rng,
) -> (Array2<f64>, Vec<usize>) {
    let (k, d, m) = (spec.num_classes, spec.dim, spec.samples_per_class);
    let z = Array2::from_shape_fn((k * m, d), |_| rng.sample::<f64, _>(StandardNormal));
    let mut x = z.dot(root);
    let mut labels = Vec::with_capacity(k * m);
    for (i, mut row) in x.rows_mut().into_iter().enumerate() {
        let class = i / m;
        row += &spec.class_means.row(class);
        labels.push(class);
    }
    (x, labels)
}

/// Draws a source/target pair; deterministic in `spec.seed`.
pub fn generate(spec: &ShiftSpec) -> Result<DatasetPair> {
    spec.validate()?;
    let eig = sym_eig(&spec.class_cov)?;
    if let Some(neg) = eig.values.iter().find(|v| **v < 0.0) {
        return Err(Error::invalid(format!("class covariance has eigenvalue {neg}")));
    }
    let root = eig.map_spectrum(f64::sqrt).into_inner();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (xs, ys) = sample_mixture(spec, &root, &mut rng);
    let (xt, yt) = sample_mixture(spec, &root, &mut rng);
    let xt = spec.transform(&xt);
    DatasetPair::new(
        FeatureBatch::new(xs, Some(ys))?,
        FeatureBatch::new(xt, Some(yt))?,
        spec.num_classes,
    )
}

/// Reads a comma-separated feature file. Lines starting with `#` are
/// comments; with `has_labels` the last column is an integer class label.
pub fn load_csv(path: impl AsRef<Path>, has_labels: bool) -> Result<FeatureBatch> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(file);

    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let fields: Vec<&str> = record.iter().collect();
        let n_features = if has_labels {
            fields.len().saturating_sub(1)
        } else {
            fields.len()
        };
        if n_features == 0 {
            return Err(parse_err(line, "row has no feature columns".into()));
        }
        match width {
            None => width = Some(fields.len()),
            Some(w) if w != fields.len() => {
                return Err(parse_err(
                    line,
                    format!("expected {w} columns, found {}", fields.len()),
                ))
            }
            _ => {}
        }
        for (col, cell) in fields[..n_features].iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| {
                parse_err(line, format!("column {}: '{cell}' is not a number", col + 1))
            })?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("column {}: non-finite value", col + 1)));
            }
            values.push(v);
        }
        if has_labels {
            let cell = fields[n_features];
            let label: usize = cell
                .parse()
                .map_err(|_| parse_err(line, format!("label '{cell}' is not a class index")))?;
            labels.push(label);
        }
        rows += 1;
    }
    let Some(width) = width else {
        return Err(parse_err(0, "file contains no data rows".into()));
    };
    let d = if has_labels { width - 1 } else { width };
    let data = Array2::from_shape_vec((rows, d), values).expect("row widths checked");
    FeatureBatch::new(data, has_labels.then_some(labels))
}

/// Writes `batch` in the format read by [`load_csv`], labels last.
pub fn save_csv(path: impl AsRef<Path>, batch: &FeatureBatch) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_csv(&mut out, batch).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

fn write_csv(out: &mut impl Write, batch: &FeatureBatch) -> std::io::Result<()> {
    let mut header: Vec<String> = (0..batch.cols()).map(|j| format!("f{j}")).collect();
    if batch.labels().is_some() {
        header.push("label".into());
    }
    writeln!(out, "# {}", header.join(","))?;
    for (i, row) in batch.data().rows().into_iter().enumerate() {
        let mut cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        if let Some(labels) = batch.labels() {
            cells.push(labels[i].to_string());
        }
        writeln!(out, "{}", cells.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::statistics::{batch_covariance, batch_mean};

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_plain_and_labeled_files() {
        let f = write_tmp("1,2,3\n4,5,6\n");
        let b = load_csv(f.path(), false).unwrap();
        assert_eq!((b.rows(), b.cols()), (2, 3));
        assert!(b.labels().is_none());

        let f = write_tmp("# x,y,label\r\n0.5,1e-3,0\r\n-2,3.25,1\r\n");
        let b = load_csv(f.path(), true).unwrap();
        assert_eq!(b.labels(), Some(&[0, 1][..]));
        assert_eq!(b.data(), ndarray::array![[0.5, 1e-3], [-2.0, 3.25]]);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let f = write_tmp("1,2\n3,4\n5\n");
        match load_csv(f.path(), false) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let f = write_tmp("# header\n1,2\nfoo,4\n");
        match load_csv(f.path(), false) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("foo"));
            }
            other => panic!("unexpected {other:?}"),
        }
        let f = write_tmp("1,2,0.5\n");
        assert!(matches!(load_csv(f.path(), true), Err(Error::Parse { line: 1, .. })));
        let f = write_tmp("# only a comment\n");
        assert!(matches!(load_csv(f.path(), false), Err(Error::Parse { .. })));
        assert!(matches!(
            load_csv("/nonexistent/features.csv", false),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn presets_are_valid() {
        for kind in ShiftKind::ALL {
            ShiftSpec::preset(kind, 1).validate().unwrap();
            assert_eq!(kind.name().parse::<ShiftKind>().unwrap(), kind);
        }
        let mut bad = ShiftSpec::benchmark(0);
        bad.rotation[[0, 0]] = 2.0;
        assert!(generate(&bad).is_err());
        let mut bad = ShiftSpec::benchmark(0);
        bad.scale[3] = 0.0;
        assert!(generate(&bad).is_err());
        let mut bad = ShiftSpec::benchmark(0);
        bad.num_classes = 1;
        assert!(generate(&bad).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&ShiftSpec::benchmark(7)).unwrap();
        let b = generate(&ShiftSpec::benchmark(7)).unwrap();
        assert_eq!(a, b);
        let c = generate(&ShiftSpec::benchmark(8)).unwrap();
        assert_ne!(a.source, c.source);
    }

    #[test]
    fn translation_shifts_the_mean() {
        let spec = ShiftSpec::preset(ShiftKind::Translation, 3);
        let pair = generate(&spec).unwrap();
        let gap = batch_mean(&pair.target) - batch_mean(&pair.source);
        // Per-coordinate standard error of a difference of two sample means
        // is at most sqrt(2·var/n) with var bounded by the mixture variance.
        let (_, cov) = spec.source_moments();
        let n = pair.source.rows() as f64;
        for j in 0..spec.dim {
            let se = (2.0 * cov.get(j, j) / n).sqrt();
            // 4σ per coordinate keeps the family-wise rate over 16
            // coordinates near that of a single 3σ check.
            assert!((gap[j] - spec.translation[j]).abs() < 4.0 * se, "coordinate {j}");
        }
    }

    #[test]
    fn scale_acts_on_covariance() {
        let mut spec = ShiftSpec::preset(ShiftKind::Scale, 5);
        spec.samples_per_class = 2000;
        let pair = generate(&spec).unwrap();
        let (_, expected) = spec.target_moments();
        let got = batch_covariance(&pair.target).unwrap();
        let rel = got.sub(&expected).frobenius_norm() / expected.frobenius_norm();
        assert!(rel < 0.05, "relative gap {rel}");
    }

    #[test]
    fn plane_rotation_is_orthogonal() {
        let perm: Vec<usize> = (0..6).rev().collect();
        let r = plane_rotation(6, 0.7, &perm);
        let gram = r.t().dot(&r);
        for (idx, v) in gram.indexed_iter() {
            let expected = if idx.0 == idx.1 { 1.0 } else { 0.0 };
            assert!((v - expected).abs() < 1e-15);
        }
    }
}
