use logcoral::data::{DataSource, ShiftKind};
use logcoral::losses::LossWeights;
use logcoral::network::{MetricRecord, TrainConfig, TrainState};

fn total(w: &LossWeights, r: &MetricRecord) -> f64 {
    w.classification * r.loss_cls + w.coral * r.loss_coral + w.logcoral * r.loss_logcoral + w.mean * r.loss_mean
}

#[test]
fn objective_decreases_over_training() {
    for seed in 0..5 {
        let config = TrainConfig {
            data: DataSource::Synthetic {
                shift: ShiftKind::Benchmark,
                seed,
            },
            warmup_steps: 0,
            steps: 2000,
            seed,
            ..TrainConfig::default()
        };
        let weights = config.weights;
        let data = config.data.load().unwrap();
        let mut state = TrainState::for_dataset(config, &data).unwrap();
        let mut log = Vec::new();
        state.run(&data, |r| log.push(*r)).unwrap();
        let avg = |rs: &[MetricRecord]| rs.iter().map(|r| total(&weights, r)).sum::<f64>() / rs.len() as f64;
        let early = avg(&log[40..60]);
        let late = avg(&log[1980..2000]);
        assert!(late < early, "seed {seed}: {early} -> {late}");
    }
}
