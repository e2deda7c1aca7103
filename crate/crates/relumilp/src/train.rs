//! Mini-batch training loop wiring data, network, interval bounds, and
//! regularizers together, plus evaluation metrics over a fitted model.
//!
//! Randomness is split into independent streams (init, shuffle,
//! projection draws) of one seeded generator, so a run is reproducible
//! bit for bit and turning a regularizer off cannot shift the data order.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, TapeError};
use crate::data::Dataset;
use crate::ibp::{propagate_ibp, unstable_count, InputBox};
use crate::mat::Mat;
use crate::net::{
    adam_step, pinball_value, AdamState, NetError, NetGrads, Network,
};
use crate::reg::{DataLoss, RegError, RegTermValue, RegularizerConfig, total_loss};

#[derive(Clone, Debug, PartialEq)]
pub enum LossKind {
    Mse,
    Pinball { taus: Vec<f64> },
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub dims: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub loss: LossKind,
    pub reg: RegularizerConfig,
}

impl TrainConfig {
    pub fn new(dims: Vec<usize>, epochs: usize, batch_size: usize, seed: u64) -> Self {
        TrainConfig {
            dims,
            epochs,
            batch_size,
            seed,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            loss: LossKind::Mse,
            reg: RegularizerConfig::default(),
        }
    }

    fn validate(&self, data: &Dataset) -> Result<(), TrainError> {
        if self.dims.len() < 2 {
            return Err(TrainError::BadConfig("architecture needs input and output dims".into()));
        }
        if self.dims[0] != data.n_inputs() {
            return Err(TrainError::BadConfig(format!(
                "architecture expects {} inputs, data has {}",
                self.dims[0],
                data.n_inputs()
            )));
        }
        let k = *self.dims.last().unwrap();
        match &self.loss {
            LossKind::Mse => {
                if k != data.n_targets() {
                    return Err(TrainError::BadConfig(format!(
                        "architecture emits {k} outputs, data has {} target rows",
                        data.n_targets()
                    )));
                }
            }
            LossKind::Pinball { taus } => {
                if data.n_targets() != 1 {
                    return Err(TrainError::BadConfig(
                        "pinball training needs scalar targets".into(),
                    ));
                }
                if taus.len() != k {
                    return Err(TrainError::BadConfig(format!(
                        "{} quantile levels for {k} outputs",
                        taus.len()
                    )));
                }
            }
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::BadConfig("epochs and batch size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(TrainError::BadConfig(format!("bad learning rate {}", self.lr)));
        }
        self.reg.validate()?;
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("{0}")]
    BadConfig(String),
    #[error("non-finite loss at epoch {epoch} batch {batch}: {term} = {value}")]
    NonFinite { epoch: usize, batch: usize, term: String, value: f64 },
    #[error(transparent)]
    Reg(#[from] RegError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tape(#[from] TapeError),
}

/// Everything measured over one training run. Wall time is the only field
/// that varies between identical runs.
#[derive(Clone, Debug)]
pub struct TrainReport {
    pub seed: u64,
    /// Mean total loss per epoch.
    pub epoch_loss: Vec<f64>,
    /// Mean hidden bound width per epoch, measured after the epoch.
    pub epoch_bound_width: Vec<f64>,
    pub final_train: f64,
    pub final_test: f64,
    pub final_unstable: usize,
    pub final_bound_width: f64,
    pub wall_time_s: f64,
}

fn batch_columns(data: &Dataset, idx: &[usize]) -> (Mat, Mat) {
    let mut xs = Mat::zeros(data.n_inputs(), idx.len());
    let mut ys = Mat::zeros(data.n_targets(), idx.len());
    for (to, &from) in idx.iter().enumerate() {
        for r in 0..data.n_inputs() {
            xs[(r, to)] = data.inputs[(r, from)];
        }
        for r in 0..data.n_targets() {
            ys[(r, to)] = data.targets[(r, from)];
        }
    }
    (xs, ys)
}

/// Picks the name of the first non-finite component for the abort message.
fn non_finite_term(data_value: f64, terms: &[RegTermValue], total: f64) -> (String, f64) {
    if !data_value.is_finite() {
        return ("data".into(), data_value);
    }
    for t in terms {
        if !t.value.is_finite() {
            return (t.term.name().into(), t.value);
        }
    }
    ("total".into(), total)
}

/// Trains a fresh network on `train`, reporting final metrics on both
/// splits. `input` is the (normalized) box the bound-based regularizers
/// and final stability metrics are measured over.
pub fn train(
    cfg: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
    input: &InputBox,
) -> Result<(Network, TrainReport), TrainError> {
    cfg.validate(train)?;
    if input.dim() != train.n_inputs() {
        return Err(TrainError::BadConfig(format!(
            "input box has {} dims, data has {}",
            input.dim(),
            train.n_inputs()
        )));
    }
    let started = Instant::now();

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_rng.set_stream(0);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut omega_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    omega_rng.set_stream(2);

    let mut net = Network::init(&cfg.dims, &mut init_rng);
    let mut adam = AdamState::new(&net, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);

    let n = train.n_samples();
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut epoch_bound_width = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (xs, ys) = batch_columns(train, idx);
            let mut tape = Tape::new();
            let tnet = net.on_tape(&mut tape);
            let data_loss = match &cfg.loss {
                LossKind::Mse => DataLoss::Mse,
                LossKind::Pinball { taus } => DataLoss::Pinball { taus },
            };
            // The LP term draws from the batch head; cap the subsample at
            // the final short batch so every batch contributes.
            let mut reg = cfg.reg.clone();
            if reg.lambda_lp > 0.0 && reg.lp_subsample > idx.len() {
                reg.lp_subsample = idx.len();
            }
            let parts = total_loss(
                &mut tape, &net, &tnet, &xs, &ys, data_loss, input, &reg, &mut omega_rng,
            )?;
            let value = tape.scalar_value(parts.total);
            if !value.is_finite() {
                let (term, v) =
                    non_finite_term(tape.scalar_value(parts.data), &parts.terms, value);
                return Err(TrainError::NonFinite { epoch, batch, term, value: v });
            }
            let grads = NetGrads::of(&tape, &tnet, parts.total)?;
            if !grads.max_abs().is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch,
                    term: "gradient".into(),
                    value: grads.max_abs(),
                });
            }
            adam_step(&mut net, &grads, &mut adam)?;
            sum += value;
            batches += 1;
        }
        epoch_loss.push(sum / batches as f64);
        epoch_bound_width.push(propagate_ibp(&net, input).mean_hidden_width());
    }

    let mode = match &cfg.loss {
        LossKind::Mse => EvalMode::Mse,
        LossKind::Pinball { taus } => EvalMode::Pinball { taus: taus.clone() },
    };
    let final_train = evaluate(&net, train, &mode)?;
    let final_test = evaluate(&net, test, &mode)?;
    let profile = propagate_ibp(&net, input);
    let report = TrainReport {
        seed: cfg.seed,
        epoch_loss,
        epoch_bound_width,
        final_train,
        final_test,
        final_unstable: unstable_count(&profile),
        final_bound_width: profile.mean_hidden_width(),
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    Ok((net, report))
}

#[derive(Clone, Debug, PartialEq)]
pub enum EvalMode {
    Mse,
    Pinball { taus: Vec<f64> },
}

/// Mean loss of the fitted network over a dataset.
pub fn evaluate(net: &Network, data: &Dataset, mode: &EvalMode) -> Result<f64, TrainError> {
    if data.n_inputs() != net.n_inputs() {
        return Err(TrainError::BadConfig(format!(
            "network takes {} inputs, data has {}",
            net.n_inputs(),
            data.n_inputs()
        )));
    }
    let n = data.n_samples();
    let k = net.n_outputs();
    let mut preds = Mat::zeros(k, n);
    for i in 0..n {
        let out = net.eval(&data.input_column(i))?;
        for (r, v) in out.iter().enumerate() {
            preds[(r, i)] = *v;
        }
    }
    match mode {
        EvalMode::Mse => {
            if data.n_targets() != k {
                return Err(TrainError::BadConfig(format!(
                    "network emits {k} outputs, data has {} target rows",
                    data.n_targets()
                )));
            }
            let mut acc = 0.0;
            for r in 0..k {
                for c in 0..n {
                    acc += (preds[(r, c)] - data.targets[(r, c)]).powi(2);
                }
            }
            Ok(acc / (k * n) as f64)
        }
        EvalMode::Pinball { taus } => {
            if data.n_targets() != 1 {
                return Err(TrainError::BadConfig("pinball needs scalar targets".into()));
            }
            if taus.len() != k {
                return Err(TrainError::BadConfig(format!(
                    "{} quantile levels for {k} outputs",
                    taus.len()
                )));
            }
            Ok(pinball_value(&preds, data.targets.as_slice(), taus))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_quantile_data, synth_true_quantile, tau_grid, Dataset};
    use crate::net::mse_loss as net_mse_loss;

    fn linear_dataset(n: usize, seed: u64) -> (Dataset, InputBox) {
        let bx = InputBox::symmetric(2, 1.0);
        let inputs = crate::data::lhs_sample(n, &bx, seed);
        let mut targets = Mat::zeros(1, n);
        for i in 0..n {
            targets[(0, i)] = 0.7 * inputs[(0, i)] - 0.3 * inputs[(1, i)] + 0.1;
        }
        (Dataset::new(inputs, targets), bx)
    }

    #[test]
    fn memorizes_linear_function() {
        let (data, _) = linear_dataset(128, 5);
        let (train_ds, test_ds, _) = crate::data::split_normalize(&data, 0.25, 9);
        let mut cfg = TrainConfig::new(vec![2, 8, 1], 50, 8, 1);
        cfg.lr = 1e-2;
        let nbx = InputBox::symmetric(2, 2.0);
        let (net, report) = train(&cfg, &train_ds, &test_ds, &nbx).unwrap();
        assert!(report.final_test < 1e-3, "test mse {}", report.final_test);
        assert!(
            *report.epoch_loss.last().unwrap() < report.epoch_loss[0],
            "loss trend: {} -> {}",
            report.epoch_loss[0],
            report.epoch_loss.last().unwrap()
        );
        // The reported train metric is the evaluation on the train split.
        let again = evaluate(&net, &train_ds, &EvalMode::Mse).unwrap();
        assert_eq!(report.final_train, again);
    }

    #[test]
    fn deterministic_per_seed() {
        let (data, _) = linear_dataset(48, 2);
        let (train_ds, test_ds, _) = crate::data::split_normalize(&data, 0.25, 3);
        let bx = InputBox::symmetric(2, 2.0);
        let mut cfg = TrainConfig::new(vec![2, 6, 1], 5, 8, 42);
        cfg.reg.lambda_bw = 1e-3;
        cfg.reg.lambda_lp = 1e-3;
        let (net_a, rep_a) = train(&cfg, &train_ds, &test_ds, &bx).unwrap();
        let (net_b, rep_b) = train(&cfg, &train_ds, &test_ds, &bx).unwrap();
        assert_eq!(rep_a.epoch_loss, rep_b.epoch_loss);
        assert_eq!(rep_a.final_train, rep_b.final_train);
        assert_eq!(rep_a.final_test, rep_b.final_test);
        assert_eq!(rep_a.final_unstable, rep_b.final_unstable);
        for l in 0..net_a.n_layers() {
            assert_eq!(net_a.weight(l).as_slice(), net_b.weight(l).as_slice());
            assert_eq!(net_a.bias(l).as_slice(), net_b.bias(l).as_slice());
        }

        let mut cfg2 = cfg.clone();
        cfg2.seed = 43;
        let (_, rep_c) = train(&cfg2, &train_ds, &test_ds, &bx).unwrap();
        assert_ne!(rep_a.epoch_loss, rep_c.epoch_loss);
    }

    #[test]
    fn zero_weights_match_handwritten_mse_loop() {
        let (data, _) = linear_dataset(40, 11);
        let (train_ds, test_ds, _) = crate::data::split_normalize(&data, 0.25, 7);
        let bx = InputBox::symmetric(2, 2.0);
        let cfg = TrainConfig::new(vec![2, 5, 1], 4, 8, 77);
        let (net, _) = train(&cfg, &train_ds, &test_ds, &bx).unwrap();

        // Mirror the loop with the bare data loss and the same streams.
        let mut init_rng = ChaCha8Rng::seed_from_u64(77);
        init_rng.set_stream(0);
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(77);
        shuffle_rng.set_stream(1);
        let mut manual = Network::init(&cfg.dims, &mut init_rng);
        let mut adam = AdamState::new(&manual, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
        let n = train_ds.n_samples();
        let mut order: Vec<usize> = (0..n).collect();
        for _ in 0..cfg.epochs {
            order.shuffle(&mut shuffle_rng);
            for idx in order.chunks(cfg.batch_size) {
                let (xs, ys) = batch_columns(&train_ds, idx);
                let mut tape = Tape::new();
                let tnet = manual.on_tape(&mut tape);
                let loss = net_mse_loss(&mut tape, &tnet, &xs, &ys).unwrap();
                let grads = NetGrads::of(&tape, &tnet, loss).unwrap();
                adam_step(&mut manual, &grads, &mut adam).unwrap();
            }
        }
        for l in 0..net.n_layers() {
            assert_eq!(net.weight(l).as_slice(), manual.weight(l).as_slice());
            assert_eq!(net.bias(l).as_slice(), manual.bias(l).as_slice());
        }
    }

    #[test]
    fn bound_width_penalty_shrinks_widths() {
        let (data, _) = linear_dataset(64, 21);
        let (train_ds, test_ds, _) = crate::data::split_normalize(&data, 0.25, 5);
        let bx = InputBox::symmetric(2, 2.0);
        let mut cfg = TrainConfig::new(vec![2, 8, 1], 40, 8, 3);
        cfg.lr = 3e-3;
        cfg.reg.lambda_bw = 10.0;
        let (_, report) = train(&cfg, &train_ds, &test_ds, &bx).unwrap();
        let w = &report.epoch_bound_width;
        assert!(
            *w.last().unwrap() < 0.5 * w[0],
            "width should collapse under a heavy penalty: {} -> {}",
            w[0],
            w.last().unwrap()
        );
        let increases = w.windows(2).filter(|p| p[1] > p[0] + 1e-9).count();
        assert!(increases <= w.len() / 4, "width trend too noisy: {increases} increases");
        assert_eq!(report.final_bound_width, *w.last().unwrap());

        // Same run without the penalty keeps far wider bounds.
        let mut plain = cfg.clone();
        plain.reg.lambda_bw = 0.0;
        let (_, base) = train(&plain, &train_ds, &test_ds, &bx).unwrap();
        assert!(report.final_bound_width < 0.5 * base.final_bound_width);
    }

    #[test]
    fn reported_unstable_matches_recount() {
        let (data, _) = linear_dataset(32, 4);
        let (train_ds, test_ds, _) = crate::data::split_normalize(&data, 0.25, 2);
        let bx = InputBox::symmetric(2, 2.0);
        let mut cfg = TrainConfig::new(vec![2, 6, 1], 3, 8, 12);
        cfg.reg.lambda_sn = 1e-2;
        let (net, report) = train(&cfg, &train_ds, &test_ds, &bx).unwrap();
        let profile = propagate_ibp(&net, &bx);
        assert_eq!(report.final_unstable, unstable_count(&profile));
        assert_eq!(report.final_bound_width, profile.mean_hidden_width());
    }

    #[test]
    fn lp_term_trains_through() {
        let (data, _) = linear_dataset(24, 8);
        let (train_ds, test_ds, _) = crate::data::split_normalize(&data, 0.25, 6);
        let bx = InputBox::symmetric(2, 2.0);
        let mut cfg = TrainConfig::new(vec![2, 4, 1], 2, 6, 15);
        cfg.reg.lambda_lp = 1e-2;
        cfg.reg.lp_subsample = 2;
        cfg.reg.alpha = 0.5;
        let (_, report) = train(&cfg, &train_ds, &test_ds, &bx).unwrap();
        assert!(report.epoch_loss.iter().all(|v| v.is_finite()));
        assert!(report.final_test.is_finite());
    }

    #[test]
    fn divergence_aborts_with_diagnostic() {
        let (data, _) = linear_dataset(16, 3);
        let (train_ds, test_ds, _) = crate::data::split_normalize(&data, 0.25, 1);
        let bx = InputBox::symmetric(2, 2.0);
        let mut cfg = TrainConfig::new(vec![2, 4, 1], 50, 4, 2);
        // One Adam step of this size pushes the weights to ~1e308, so the
        // following forward pass overflows.
        cfg.lr = 1e308;
        let err = train(&cfg, &train_ds, &test_ds, &bx).unwrap_err();
        match err {
            TrainError::NonFinite { term, value, .. } => {
                assert!(!value.is_finite());
                assert!(!term.is_empty());
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn config_rejections() {
        let (data, _) = linear_dataset(16, 3);
        let (train_ds, test_ds, _) = crate::data::split_normalize(&data, 0.25, 1);
        let bx = InputBox::symmetric(2, 2.0);

        let cfg = TrainConfig::new(vec![3, 4, 1], 1, 4, 0);
        assert!(matches!(
            train(&cfg, &train_ds, &test_ds, &bx),
            Err(TrainError::BadConfig(_))
        ));

        let cfg = TrainConfig::new(vec![2, 4, 2], 1, 4, 0);
        assert!(matches!(
            train(&cfg, &train_ds, &test_ds, &bx),
            Err(TrainError::BadConfig(_))
        ));

        let mut cfg = TrainConfig::new(vec![2, 4, 3], 1, 4, 0);
        cfg.loss = LossKind::Pinball { taus: vec![0.25, 0.75] };
        assert!(matches!(
            train(&cfg, &train_ds, &test_ds, &bx),
            Err(TrainError::BadConfig(_))
        ));

        let cfg = TrainConfig::new(vec![2, 4, 1], 1, 4, 0);
        let wrong_box = InputBox::symmetric(3, 1.0);
        assert!(matches!(
            train(&cfg, &train_ds, &test_ds, &wrong_box),
            Err(TrainError::BadConfig(_))
        ));
    }

    #[test]
    fn constant_predictor_mse_is_target_variance() {
        let targets = vec![1.0, 3.0, -2.0, 4.0, 0.5, 2.5];
        let n = targets.len();
        let mean = targets.iter().sum::<f64>() / n as f64;
        let var = targets.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n as f64;
        let mut tmat = Mat::zeros(1, n);
        let mut xmat = Mat::zeros(1, n);
        for (i, t) in targets.iter().enumerate() {
            tmat[(0, i)] = *t;
            xmat[(0, i)] = i as f64;
        }
        let data = Dataset::new(xmat, tmat);
        // Hidden layer never fires, so the output is the bias everywhere.
        let net = Network::from_layers(
            vec![Mat::from_rows(&[vec![0.0]]), Mat::from_rows(&[vec![1.0]])],
            vec![Mat::column(&[-1.0]), Mat::column(&[mean])],
        );
        let got = evaluate(&net, &data, &EvalMode::Mse).unwrap();
        assert!((got - var).abs() < 1e-12, "{got} vs {var}");
    }

    #[test]
    fn true_quantiles_beat_mean_predictor_at_pinball() {
        let k = 9;
        let noise = 0.7;
        let synth = synth_quantile_data(4000, 1, k, noise, 31);
        let taus = tau_grid(k);

        // With one binary input every conditional quantile is affine in x,
        // so both predictors are exactly representable.
        let q0: Vec<f64> = taus.iter().map(|&t| synth_true_quantile(&[0.0], t, noise)).collect();
        let q1: Vec<f64> = taus.iter().map(|&t| synth_true_quantile(&[1.0], t, noise)).collect();
        let slope: Vec<f64> = q0.iter().zip(&q1).map(|(a, b)| b - a).collect();
        let quant_net = Network::from_layers(
            vec![
                Mat::from_rows(&[vec![1.0]]),
                Mat::from_rows(&slope.iter().map(|s| vec![*s]).collect::<Vec<_>>()),
            ],
            vec![Mat::column(&[0.0]), Mat::column(&q0)],
        );

        let m0 = synth_true_quantile(&[0.0], 0.5, 0.0);
        let m1 = synth_true_quantile(&[1.0], 0.5, 0.0);
        let mean_net = Network::from_layers(
            vec![
                Mat::from_rows(&[vec![1.0]]),
                Mat::from_rows(&vec![vec![m1 - m0]; k]),
            ],
            vec![Mat::column(&[0.0]), Mat::column(&vec![m0; k])],
        );

        let mode = EvalMode::Pinball { taus };
        let pq = evaluate(&quant_net, &synth.data, &mode).unwrap();
        let pm = evaluate(&mean_net, &synth.data, &mode).unwrap();
        assert!(pq < pm, "true quantiles {pq} should beat the mean predictor {pm}");
    }

    #[test]
    fn pinball_training_improves() {
        let k = 5;
        let synth = synth_quantile_data(256, 3, k, 0.5, 77);
        let (train_ds, test_ds, _) = crate::data::split_normalize(&synth.data, 0.3, 8);
        let bx = InputBox::symmetric(3, 3.0);
        let mut cfg = TrainConfig::new(vec![3, 12, k], 20, 32, 4);
        cfg.loss = LossKind::Pinball { taus: synth.taus.clone() };
        cfg.lr = 5e-3;
        let (_, report) = train(&cfg, &train_ds, &test_ds, &bx).unwrap();
        assert!(*report.epoch_loss.last().unwrap() < 0.6 * report.epoch_loss[0]);
        assert!(report.final_test.is_finite() && report.final_test > 0.0);
    }
}
