//! Benchmark target functions, Latin hypercube sampling, dataset splitting
//! with z-score normalization, and synthetic quantile-regression data.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ibp::InputBox;
use crate::mat::Mat;

/// (x₁² + x₂ − 11)² + (x₁ + x₂² − 7)². Nonnegative; four global minima at 0.
pub fn himmelblau(x: &[f64]) -> f64 {
    assert_eq!(x.len(), 2, "himmelblau takes two inputs");
    let (a, b) = (x[0], x[1]);
    (a * a + b - 11.0).powi(2) + (a + b * b - 7.0).powi(2)
}

/// Three-Gaussian multimodal surface on [−2,2]²; unique global minimum
/// −6.55113 at (0.228, 1.626).
pub fn peaks(x: &[f64]) -> f64 {
    assert_eq!(x.len(), 2, "peaks takes two inputs");
    let (a, b) = (x[0], x[1]);
    3.0 * (1.0 - a).powi(2) * (-a * a - (b - 1.0).powi(2)).exp()
        - 10.0 * (a / 5.0 - a.powi(3) + b.powi(5)) * (-a * a - b * b).exp()
        - (1.0 / 3.0) * (-(a + 1.0).powi(2) - b * b).exp()
}

/// Standard Ackley function; unique global minimum 0 at the origin.
pub fn ackley(x: &[f64]) -> f64 {
    assert!(!x.is_empty(), "ackley needs at least one input");
    let d = x.len() as f64;
    let mean_sq = x.iter().map(|v| v * v).sum::<f64>() / d;
    let mean_cos = x.iter().map(|v| (std::f64::consts::TAU * v).cos()).sum::<f64>() / d;
    -20.0 * (-0.2 * mean_sq.sqrt()).exp() - mean_cos.exp() + std::f64::consts::E + 20.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetFn {
    Himmelblau,
    Peaks,
    Ackley { dim: usize },
}

impl TargetFn {
    pub fn dim(self) -> usize {
        match self {
            TargetFn::Himmelblau | TargetFn::Peaks => 2,
            TargetFn::Ackley { dim } => dim,
        }
    }

    pub fn eval(self, x: &[f64]) -> f64 {
        match self {
            TargetFn::Himmelblau => himmelblau(x),
            TargetFn::Peaks => peaks(x),
            TargetFn::Ackley { .. } => {
                assert_eq!(x.len(), self.dim());
                ackley(x)
            }
        }
    }

    /// Sampling box the benchmark is defined over.
    pub fn domain(self) -> InputBox {
        match self {
            TargetFn::Himmelblau => InputBox::symmetric(2, 5.0),
            TargetFn::Peaks => InputBox::symmetric(2, 2.0),
            TargetFn::Ackley { dim } => InputBox::symmetric(dim, 3.5),
        }
    }

    pub fn name(self) -> String {
        match self {
            TargetFn::Himmelblau => "himmelblau".into(),
            TargetFn::Peaks => "peaks".into(),
            TargetFn::Ackley { dim } => format!("ackley-{dim}"),
        }
    }

    /// Inverse of [`name`](Self::name); accepts "himmelblau", "peaks",
    /// "ackley-<d>".
    pub fn parse(s: &str) -> Option<TargetFn> {
        match s {
            "himmelblau" => Some(TargetFn::Himmelblau),
            "peaks" => Some(TargetFn::Peaks),
            _ => {
                let dim = s.strip_prefix("ackley-")?.parse().ok()?;
                (dim >= 1).then_some(TargetFn::Ackley { dim })
            }
        }
    }
}

/// Latin hypercube sample of `n` points, one column per point. Every
/// dimension gets exactly one point per stratum of width (ub−lb)/n,
/// shuffled independently and jittered uniformly within the stratum.
pub fn lhs_sample(n: usize, bx: &InputBox, seed: u64) -> Mat {
    assert!(n >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = bx.dim();
    let mut out = Mat::zeros(d, n);
    let mut strata: Vec<usize> = (0..n).collect();
    for dim in 0..d {
        strata.shuffle(&mut rng);
        let (lo, hi) = (bx.lb()[dim], bx.ub()[dim]);
        let w = (hi - lo) / n as f64;
        for (i, &k) in strata.iter().enumerate() {
            let u: f64 = rng.gen();
            out[(dim, i)] = lo + (k as f64 + u) * w;
        }
    }
    out
}

/// Sample set with one column per point; targets may be multi-row.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Mat,
    pub targets: Mat,
}

impl Dataset {
    pub fn new(inputs: Mat, targets: Mat) -> Self {
        assert_eq!(inputs.cols(), targets.cols(), "sample counts differ");
        Dataset { inputs, targets }
    }

    pub fn n_samples(&self) -> usize {
        self.inputs.cols()
    }

    pub fn n_inputs(&self) -> usize {
        self.inputs.rows()
    }

    pub fn n_targets(&self) -> usize {
        self.targets.rows()
    }

    /// Evaluates `f` columnwise over LHS inputs drawn from its domain.
    pub fn from_benchmark(f: TargetFn, n: usize, seed: u64) -> Dataset {
        let inputs = lhs_sample(n, &f.domain(), seed);
        let mut targets = Mat::zeros(1, n);
        let mut x = vec![0.0; f.dim()];
        for i in 0..n {
            for (dim, v) in x.iter_mut().enumerate() {
                *v = inputs[(dim, i)];
            }
            targets[(0, i)] = f.eval(&x);
        }
        Dataset { inputs, targets }
    }

    pub fn input_column(&self, i: usize) -> Vec<f64> {
        (0..self.n_inputs()).map(|r| self.inputs[(r, i)]).collect()
    }

    /// Rows at the given sample indices, in order.
    pub fn take(&self, idx: &[usize]) -> Dataset {
        let mut inputs = Mat::zeros(self.n_inputs(), idx.len());
        let mut targets = Mat::zeros(self.n_targets(), idx.len());
        for (to, &from) in idx.iter().enumerate() {
            for r in 0..self.n_inputs() {
                inputs[(r, to)] = self.inputs[(r, from)];
            }
            for r in 0..self.n_targets() {
                targets[(r, to)] = self.targets[(r, from)];
            }
        }
        Dataset { inputs, targets }
    }

    /// Header `x_0..x_{n−1}, y_0..y_{K−1}`, one row per sample.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> csv::Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let header: Vec<String> = (0..self.n_inputs())
            .map(|i| format!("x_{i}"))
            .chain((0..self.n_targets()).map(|k| format!("y_{k}")))
            .collect();
        wtr.write_record(&header)?;
        for i in 0..self.n_samples() {
            let row: Vec<String> = (0..self.n_inputs())
                .map(|r| self.inputs[(r, i)].to_string())
                .chain((0..self.n_targets()).map(|r| self.targets[(r, i)].to_string()))
                .collect();
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Z-score statistics fitted on a training split. Dimensions with zero
/// spread are flagged and passed through untouched (mean 0, scale 1), so
/// every transform stays invertible.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: Vec<f64>,
    pub y_std: Vec<f64>,
    pub x_const: Vec<bool>,
    pub y_const: Vec<bool>,
}

fn fit_rows(m: &Mat) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
    let n = m.cols() as f64;
    let mut means = Vec::with_capacity(m.rows());
    let mut stds = Vec::with_capacity(m.rows());
    let mut consts = Vec::with_capacity(m.rows());
    for r in 0..m.rows() {
        let mean = (0..m.cols()).map(|c| m[(r, c)]).sum::<f64>() / n;
        let var = (0..m.cols()).map(|c| (m[(r, c)] - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        if std > 1e-12 {
            means.push(mean);
            stds.push(std);
            consts.push(false);
        } else {
            means.push(0.0);
            stds.push(1.0);
            consts.push(true);
        }
    }
    (means, stds, consts)
}

fn apply_rows(m: &Mat, mean: &[f64], std: &[f64]) -> Mat {
    let mut out = m.clone();
    for r in 0..m.rows() {
        for c in 0..m.cols() {
            out[(r, c)] = (m[(r, c)] - mean[r]) / std[r];
        }
    }
    out
}

impl NormStats {
    pub fn fit(train: &Dataset) -> NormStats {
        let (x_mean, x_std, x_const) = fit_rows(&train.inputs);
        let (y_mean, y_std, y_const) = fit_rows(&train.targets);
        NormStats { x_mean, x_std, y_mean, y_std, x_const, y_const }
    }

    pub fn normalize(&self, ds: &Dataset) -> Dataset {
        Dataset {
            inputs: apply_rows(&ds.inputs, &self.x_mean, &self.x_std),
            targets: apply_rows(&ds.targets, &self.y_mean, &self.y_std),
        }
    }

    pub fn normalize_x(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(self.x_mean.iter().zip(&self.x_std)).map(|(v, (m, s))| (v - m) / s).collect()
    }

    pub fn denormalize_x(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(self.x_mean.iter().zip(&self.x_std)).map(|(v, (m, s))| v * s + m).collect()
    }

    pub fn normalize_y(&self, y: &[f64]) -> Vec<f64> {
        y.iter().zip(self.y_mean.iter().zip(&self.y_std)).map(|(v, (m, s))| (v - m) / s).collect()
    }

    pub fn denormalize_y(&self, y: &[f64]) -> Vec<f64> {
        y.iter().zip(self.y_mean.iter().zip(&self.y_std)).map(|(v, (m, s))| v * s + m).collect()
    }

    /// Scalar targets: denormalize a single value.
    pub fn denormalize_y0(&self, y: f64) -> f64 {
        y * self.y_std[0] + self.y_mean[0]
    }

    /// Maps an input box into normalized coordinates. The affine map is
    /// monotone per dimension, so the image of a box is a box and
    /// denormalizing the endpoints recovers the original exactly.
    pub fn transform_box(&self, bx: &InputBox) -> InputBox {
        InputBox::new(self.normalize_x(bx.lb()), self.normalize_x(bx.ub()))
    }
}

/// Shuffled train/test split with z-score stats fitted on the training
/// split only; both splits come back normalized.
pub fn split_normalize(ds: &Dataset, test_fraction: f64, seed: u64) -> (Dataset, Dataset, NormStats) {
    assert!(test_fraction > 0.0 && test_fraction < 1.0, "test fraction must be in (0, 1)");
    let n = ds.n_samples();
    assert!(n >= 2, "need at least 2 samples to split");
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
    let (test_idx, train_idx) = idx.split_at(n_test);
    let train_raw = ds.take(train_idx);
    let test_raw = ds.take(test_idx);
    let stats = NormStats::fit(&train_raw);
    (stats.normalize(&train_raw), stats.normalize(&test_raw), stats)
}

const SQRT_PI: f64 = 1.7724538509055159;

/// Error function: nonalternating Maclaurin series for |x| ≤ 3.
fn erf_series(x: f64) -> f64 {
    let x2 = x * x;
    let mut term = x;
    let mut sum = x;
    for k in 1..200 {
        term *= 2.0 * x2 / (2.0 * k as f64 + 1.0);
        sum += term;
        if term.abs() <= 1e-17 * sum.abs() {
            break;
        }
    }
    2.0 / SQRT_PI * (-x2).exp() * sum
}

/// Complementary error function; continued fraction beyond the series
/// range so small tail values keep relative accuracy.
pub fn erfc(x: f64) -> f64 {
    if x < 0.0 {
        return 2.0 - erfc(-x);
    }
    if x <= 3.0 {
        return 1.0 - erf_series(x);
    }
    let mut t = 0.0;
    for k in (1..=60).rev() {
        t = (k as f64 / 2.0) / (x + t);
    }
    (-x * x).exp() / SQRT_PI / (x + t)
}

pub fn erf(x: f64) -> f64 {
    if x.abs() <= 3.0 {
        erf_series(x)
    } else {
        1.0 - erfc(x)
    }
}

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal quantile function for p in (0, 1): a rational
/// approximation refined by one Halley step against [`norm_cdf`].
pub fn phi_inv(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile level must be strictly inside (0, 1)");
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    let tail = |q: f64| -> f64 {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let x = if p < P_LOW {
        tail((-2.0 * p.ln()).sqrt())
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -tail((-2.0 * (1.0 - p).ln()).sqrt())
    };

    let e = norm_cdf(x) - p;
    let u = e * (std::f64::consts::TAU).sqrt() * (x * x / 2.0).exp();
    x - u / (1.0 + x * u / 2.0)
}

/// Equally spaced interior quantile levels (k − ½)/K.
pub fn tau_grid(k: usize) -> Vec<f64> {
    assert!(k >= 1);
    (0..k).map(|i| (i as f64 + 0.5) / k as f64).collect()
}

/// Mean surface of the synthetic quantile task: a signed linear ramp over
/// the binary inputs plus a smooth interaction in the popcount.
pub fn synth_mean(x: &[f64]) -> f64 {
    let d = x.len() as f64;
    let s: f64 = x.iter().sum();
    let linear: f64 = x
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            sign * (1.0 + i as f64) / d * v
        })
        .sum();
    linear + 0.4 * (std::f64::consts::PI * s / d).sin()
}

/// Heteroscedastic base scale in [0.5, 1], growing with the popcount.
pub fn synth_sigma(x: &[f64]) -> f64 {
    let d = x.len() as f64;
    let s: f64 = x.iter().sum();
    0.5 + s / (2.0 * d)
}

/// Closed-form conditional quantile of the synthetic targets.
pub fn synth_true_quantile(x: &[f64], tau: f64, noise: f64) -> f64 {
    if noise == 0.0 {
        synth_mean(x)
    } else {
        synth_mean(x) + noise * synth_sigma(x) * phi_inv(tau)
    }
}

pub struct QuantileSynth {
    pub data: Dataset,
    pub taus: Vec<f64>,
    pub noise: f64,
}

/// Binary-input samples with scalar targets y = μ(x) + noise·σ(x)·ε,
/// ε standard normal, plus the τ grid for a K-quantile head. The true
/// conditional quantiles are available via [`synth_true_quantile`].
pub fn synth_quantile_data(n: usize, n_inputs: usize, k: usize, noise: f64, seed: u64) -> QuantileSynth {
    assert!(n >= 1 && n_inputs >= 1 && k >= 1);
    assert!(noise >= 0.0 && noise.is_finite());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Mat::zeros(n_inputs, n);
    let mut targets = Mat::zeros(1, n);
    let mut x = vec![0.0; n_inputs];
    for i in 0..n {
        for (dim, v) in x.iter_mut().enumerate() {
            *v = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
            inputs[(dim, i)] = *v;
        }
        let eps = if noise == 0.0 {
            rng.gen::<f64>(); // keep the stream identical across noise settings
            0.0
        } else {
            let mut u: f64 = rng.gen();
            while u == 0.0 {
                u = rng.gen();
            }
            phi_inv(u)
        };
        targets[(0, i)] = synth_mean(&x) + noise * synth_sigma(&x) * eps;
    }
    QuantileSynth { data: Dataset { inputs, targets }, taus: tau_grid(k), noise }
}
