//! The joint training step and everything a run needs to resume.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{evaluate, Activation, MlpModel, Sgd};
use crate::data::{DataSource, DatasetPair, ShiftKind};
use crate::error::{Error, Result};
use crate::linalg::DEFAULT_RELATIVE_EPSILON;
use crate::losses::{
    chain_mean_to_features, chain_to_features, coral_loss, logcoral_loss_regularized, mean_loss,
    softmax_cross_entropy, LossWeights, Regularization,
};
use crate::statistics::{column_mean, covariance, FeatureBatch, SmoothedStats, DEFAULT_STATS_MOMENTUM};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Hyperparameters of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub data: DataSource,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub learning_rate: f64,
    pub sgd_momentum: f64,
    /// Momentum of the moving-average statistics.
    pub stats_momentum: f64,
    /// Regularization relative to the mean covariance diagonal.
    pub epsilon: f64,
    pub batch_size: usize,
    /// Classification-only steps on the source before the alignment losses
    /// switch on, standing in for a pretrained starting point.
    pub warmup_steps: u64,
    /// Steps trained with `weights` after the warm-up.
    pub steps: u64,
    pub weights: LossWeights,
    /// Tap carrying the CORAL and LogCORAL losses.
    pub cov_tap: String,
    /// Tap carrying the mean loss.
    pub mean_tap: String,
    /// Target accuracy is logged every `eval_every` steps.
    pub eval_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            data: DataSource::Synthetic {
                shift: ShiftKind::Benchmark,
                seed: 0,
            },
            hidden: vec![128, 64],
            activation: Activation::Relu,
            learning_rate: 1e-3,
            sgd_momentum: 0.9,
            stats_momentum: DEFAULT_STATS_MOMENTUM,
            epsilon: DEFAULT_RELATIVE_EPSILON,
            batch_size: 64,
            warmup_steps: 1000,
            steps: 2000,
            weights: LossWeights::default(),
            cov_tap: "logits".into(),
            mean_tap: "last_hidden".into(),
            eval_every: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} must be positive, got {v}")))
            }
        };
        positive("learning rate", self.learning_rate)?;
        positive("epsilon", self.epsilon)?;
        if !(0.0..1.0).contains(&self.sgd_momentum) {
            return Err(Error::invalid(format!(
                "SGD momentum must be in [0, 1), got {}",
                self.sgd_momentum
            )));
        }
        if !(self.stats_momentum > 0.0 && self.stats_momentum < 1.0) {
            return Err(Error::invalid(format!(
                "statistics momentum must be in (0, 1), got {}",
                self.stats_momentum
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("batch size must be at least 2"));
        }
        if self.eval_every == 0 {
            return Err(Error::invalid("eval_every must be positive"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::invalid("hidden layer widths must be positive"));
        }
        self.weights.validate()
    }
}

/// Scalar losses of one step. Every loss is computed even when its weight
/// is zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub loss_cls: f64,
    pub loss_coral: f64,
    pub loss_logcoral: f64,
    pub loss_mean: f64,
    pub total: f64,
}

/// One line of the JSON-lines metric log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub loss_cls: f64,
    pub loss_coral: f64,
    pub loss_logcoral: f64,
    pub loss_mean: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub target_acc: Option<f64>,
}

impl MetricRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metric record serializes")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct DomainStats {
    second_order: SmoothedStats,
    first_order: SmoothedStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: [u8; 32],
    stream: u64,
    word_pos: String,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let word_pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::invalid("checkpoint has a corrupt rng position"))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(word_pos);
        Ok(rng)
    }
}

/// Model, optimizer, smoothed statistics and sampler of one run.
#[derive(Clone, Debug)]
pub struct TrainState {
    config: TrainConfig,
    model: MlpModel,
    optimizer: Sgd,
    source_stats: DomainStats,
    target_stats: DomainStats,
    cov_tap: usize,
    mean_tap: usize,
    step: u64,
    rng: ChaCha8Rng,
}

/// Serialized [`TrainState`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub step: u64,
    model: MlpModel,
    optimizer: Sgd,
    source_stats: DomainStats,
    target_stats: DomainStats,
    rng: RngState,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string(self).expect("checkpoint serializes");
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line() as u64,
            message: e.to_string(),
        })?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                ckpt.version
            )));
        }
        Ok(ckpt)
    }
}

fn domain_stats(cov_dim: usize, mean_dim: usize, momentum: f64) -> Result<DomainStats> {
    Ok(DomainStats {
        second_order: SmoothedStats::new(cov_dim, momentum)?,
        first_order: SmoothedStats::new(mean_dim, momentum)?,
    })
}

fn check_finite(name: &str, value: f64, step: u64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NumericalFailure(format!("{name} is {value} at step {step}")))
    }
}

fn add_tap_grad(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(existing) => *existing += &g,
        None => *slot = Some(g),
    }
}

impl TrainState {
    pub fn new(config: TrainConfig, input_dim: usize, num_classes: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut dims = vec![input_dim];
        dims.extend(&config.hidden);
        dims.push(num_classes);
        let model = MlpModel::new(&dims, config.activation, &mut rng)?;
        let optimizer = Sgd::new(&model, config.learning_rate, config.sgd_momentum)?;
        let cov_tap = model.tap_index(&config.cov_tap)?;
        let mean_tap = model.tap_index(&config.mean_tap)?;
        let (cov_dim, mean_dim) = (dims[cov_tap + 1], dims[mean_tap + 1]);
        let m = config.stats_momentum;
        Ok(Self {
            source_stats: domain_stats(cov_dim, mean_dim, m)?,
            target_stats: domain_stats(cov_dim, mean_dim, m)?,
            config,
            model,
            optimizer,
            cov_tap,
            mean_tap,
            step: 0,
            rng,
        })
    }

    pub fn for_dataset(config: TrainConfig, data: &DatasetPair) -> Result<Self> {
        Self::new(config, data.source.cols(), data.num_classes)
    }

    pub fn model(&self) -> &MlpModel {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Changes the number of post-warm-up steps [`run`](Self::run) trains for.
    pub fn set_total_steps(&mut self, steps: u64) {
        self.config.steps = steps;
    }

    /// Last step of the run, warm-up included.
    pub fn final_step(&self) -> u64 {
        self.config.warmup_steps + self.config.steps
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            step: self.step,
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            source_stats: self.source_stats.clone(),
            target_stats: self.target_stats.clone(),
            rng: RngState::capture(&self.rng),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.config.validate()?;
        let cov_tap = ckpt.model.tap_index(&ckpt.config.cov_tap)?;
        let mean_tap = ckpt.model.tap_index(&ckpt.config.mean_tap)?;
        let dims = ckpt.model.dims();
        let stats_fit = |s: &DomainStats| {
            s.second_order.dim() == dims[cov_tap + 1] && s.first_order.dim() == dims[mean_tap + 1]
        };
        if !stats_fit(&ckpt.source_stats) || !stats_fit(&ckpt.target_stats) {
            return Err(Error::invalid("checkpoint statistics do not match the model taps"));
        }
        if !ckpt.optimizer.velocity().matches(&ckpt.model) {
            return Err(Error::invalid("checkpoint optimizer buffers do not match the model"));
        }
        Ok(Self {
            rng: ckpt.rng.restore()?,
            config: ckpt.config,
            model: ckpt.model,
            optimizer: ckpt.optimizer,
            source_stats: ckpt.source_stats,
            target_stats: ckpt.target_stats,
            cov_tap,
            mean_tap,
            step: ckpt.step,
        })
    }

    /// One SGD step on the weighted sum of the classification, CORAL,
    /// LogCORAL and mean losses.
    ///
    /// Alignment losses are evaluated on the moving-average statistics;
    /// gradients flow only through the current batch's share of them. On
    /// error the state is left untouched.
    pub fn train_step(
        &mut self,
        source: &FeatureBatch,
        target: &FeatureBatch,
        weights: &LossWeights,
    ) -> Result<LossReport> {
        weights.validate()?;
        let labels = source
            .labels()
            .ok_or_else(|| Error::invalid("source batch must be labeled"))?;
        if source.cols() != target.cols() {
            return Err(Error::invalid("source and target feature widths differ"));
        }
        if source.rows() < 2 || target.rows() < 2 {
            return Err(Error::invalid("batches need at least 2 rows"));
        }
        let step = self.step + 1;
        let layers = self.model.num_layers();
        let fs = self.model.forward_batch(source)?;
        let ft = self.model.forward_batch(target)?;

        let cls = softmax_cross_entropy(&fs.logits(), labels)?;

        let (xs, xt) = (fs.tap(self.cov_tap), ft.tap(self.cov_tap));
        let s_second = self
            .source_stats
            .second_order
            .update(&covariance(&xs)?, &column_mean(&xs))?;
        let t_second = self
            .target_stats
            .second_order
            .update(&covariance(&xt)?, &column_mean(&xt))?;
        let coral = coral_loss(s_second.cov(), t_second.cov())?;
        let reg = Regularization::Relative(self.config.epsilon);
        let logcoral = logcoral_loss_regularized(s_second.cov(), t_second.cov(), reg)
            .map_err(|e| Error::NumericalFailure(format!("loss_logcoral at step {step}: {e}")))?;

        let (ms, mt) = (fs.tap(self.mean_tap), ft.tap(self.mean_tap));
        let s_first = self
            .source_stats
            .first_order
            .update(&covariance(&ms)?, &column_mean(&ms))?;
        let t_first = self
            .target_stats
            .first_order
            .update(&covariance(&mt)?, &column_mean(&mt))?;
        let mean = mean_loss(&s_first.mean().view(), &t_first.mean().view())?;

        check_finite("loss_cls", cls.value, step)?;
        check_finite("loss_coral", coral.value, step)?;
        check_finite("loss_logcoral", logcoral.value, step)?;
        check_finite("loss_mean", mean.value, step)?;

        let mut tap_s: Vec<Option<Array2<f64>>> = vec![None; layers];
        let mut tap_t: Vec<Option<Array2<f64>>> = vec![None; layers];
        if weights.classification > 0.0 {
            add_tap_grad(&mut tap_s[layers - 1], cls.grad * weights.classification);
        }
        if weights.coral > 0.0 || weights.logcoral > 0.0 {
            let ws = self.source_stats.second_order.batch_weight();
            let wt = self.target_stats.second_order.batch_weight();
            let gs = coral
                .grad_source
                .lincomb(weights.coral, &logcoral.grad_source, weights.logcoral);
            let gt = coral
                .grad_target
                .lincomb(weights.coral, &logcoral.grad_target, weights.logcoral);
            add_tap_grad(&mut tap_s[self.cov_tap], chain_to_features(&gs, &xs)? * ws);
            add_tap_grad(&mut tap_t[self.cov_tap], chain_to_features(&gt, &xt)? * wt);
        }
        if weights.mean > 0.0 {
            let ws = self.source_stats.first_order.batch_weight() * weights.mean;
            let wt = self.target_stats.first_order.batch_weight() * weights.mean;
            add_tap_grad(
                &mut tap_s[self.mean_tap],
                chain_mean_to_features(&(&mean.grad_source * ws).view(), ms.nrows()),
            );
            add_tap_grad(
                &mut tap_t[self.mean_tap],
                chain_mean_to_features(&(&mean.grad_target * wt).view(), mt.nrows()),
            );
        }

        let mut grads = self.model.backward(&fs, &tap_s)?;
        if tap_t.iter().any(Option::is_some) {
            grads.add_assign(&self.model.backward(&ft, &tap_t)?);
        }

        let mut model = self.model.clone();
        let mut optimizer = self.optimizer.clone();
        optimizer.step(&mut model, &grads)?;
        if !model.is_finite() {
            return Err(Error::NumericalFailure(format!(
                "non-finite parameters after step {step} (loss_cls {}, loss_coral {}, loss_logcoral {}, loss_mean {})",
                cls.value, coral.value, logcoral.value, mean.value
            )));
        }

        self.model = model;
        self.optimizer = optimizer;
        self.source_stats = DomainStats {
            second_order: s_second,
            first_order: s_first,
        };
        self.target_stats = DomainStats {
            second_order: t_second,
            first_order: t_first,
        };
        self.step = step;
        Ok(LossReport {
            step,
            loss_cls: cls.value,
            loss_coral: coral.value,
            loss_logcoral: logcoral.value,
            loss_mean: mean.value,
            total: weights.classification * cls.value
                + weights.coral * coral.value
                + weights.logcoral * logcoral.value
                + weights.mean * mean.value,
        })
    }

    /// Draws one batch per domain with replacement. The target batch loses
    /// its labels.
    pub fn sample_batches(&mut self, data: &DatasetPair) -> (FeatureBatch, FeatureBatch) {
        let b = self.config.batch_size;
        let (ns, nt) = (data.source.rows(), data.target.rows());
        let si: Vec<usize> = (0..b).map(|_| self.rng.random_range(0..ns)).collect();
        let ti: Vec<usize> = (0..b).map(|_| self.rng.random_range(0..nt)).collect();
        (data.source.select(&si), data.target.select(&ti).without_labels())
    }

    /// Trains through the warm-up and `config.steps` further steps, handing
    /// every step's metrics to `sink`.
    ///
    /// Target accuracy is attached every `eval_every` steps when the target
    /// domain has labels. On error the state holds the last successful step.
    pub fn run(&mut self, data: &DatasetPair, mut sink: impl FnMut(&MetricRecord)) -> Result<()> {
        while self.step < self.final_step() {
            let weights = if self.step < self.config.warmup_steps {
                LossWeights::CLASSIFICATION_ONLY
            } else {
                self.config.weights
            };
            let rng_before = self.rng.clone();
            let (source, target) = self.sample_batches(data);
            let report = match self.train_step(&source, &target, &weights) {
                Ok(r) => r,
                Err(e) => {
                    self.rng = rng_before;
                    return Err(e);
                }
            };
            let evaluate_now = report.step % self.config.eval_every == 0;
            let target_acc = match (evaluate_now, data.target.labels()) {
                (true, Some(_)) => Some(evaluate(&self.model, &data.target)?),
                _ => None,
            };
            sink(&MetricRecord {
                step: report.step,
                loss_cls: report.loss_cls,
                loss_coral: report.loss_coral,
                loss_logcoral: report.loss_logcoral,
                loss_mean: report.loss_mean,
                target_acc,
            });
        }
        Ok(())
    }
}
