//! Grid expansion and the training worker pool behind `train` and `bench`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use rayon::prelude::*;

use relumilp::data::{split_normalize, synth_quantile_data, Dataset};
use relumilp::ibp::InputBox;
use relumilp::net::{self, InputKind, ModelFile};
use relumilp::train::{train, LossKind, TrainConfig};

use crate::config::{
    arch_label, cell_reg_config, lambda_label, Benchmark, ExperimentConfig,
};

pub const TRAIN_SCHEMA: &str = "1";

pub const TRAIN_HEADER: [&str; 12] = [
    "schema_version",
    "benchmark",
    "arch",
    "regularizer",
    "lambda",
    "seed",
    "train_mse",
    "test_mse",
    "unstable",
    "bound_width",
    "time_s",
    "model",
];

/// One trained grid cell, ready for the results CSV.
#[derive(Clone, Debug)]
pub struct TrainRow {
    pub benchmark: String,
    pub arch: String,
    pub regularizer: String,
    pub lambda: f64,
    pub seed: u64,
    pub train_mse: f64,
    pub test_mse: f64,
    pub unstable: usize,
    pub bound_width: f64,
    pub time_s: f64,
    /// Model file path relative to the output directory.
    pub model: String,
}

impl TrainRow {
    pub fn record(&self) -> Vec<String> {
        vec![
            TRAIN_SCHEMA.into(),
            self.benchmark.clone(),
            self.arch.clone(),
            self.regularizer.clone(),
            self.lambda.to_string(),
            self.seed.to_string(),
            self.train_mse.to_string(),
            self.test_mse.to_string(),
            self.unstable.to_string(),
            self.bound_width.to_string(),
            self.time_s.to_string(),
            self.model.clone(),
        ]
    }
}

struct Prepared {
    train: Dataset,
    test: Dataset,
    /// Box the trained network is valid over (normalized coordinates for
    /// regression benchmarks, the unit cube for binary inputs).
    input: InputBox,
    taus: Option<Vec<f64>>,
    kind: InputKind,
}

fn prepare(cfg: &ExperimentConfig, seed: u64) -> Prepared {
    match cfg.benchmark() {
        Benchmark::Target(f) => {
            let ds = Dataset::from_benchmark(f, cfg.training.samples, seed);
            let (train, test, stats) = split_normalize(&ds, cfg.training.test_fraction, seed);
            let input = stats.transform_box(&f.domain());
            Prepared { train, test, input, taus: None, kind: InputKind::Continuous }
        }
        Benchmark::SynthQuantile => {
            let q = cfg.quantile.as_ref().expect("validated");
            let synth =
                synth_quantile_data(cfg.training.samples, q.inputs, q.quantiles, q.noise, seed);
            let (train, test) = split_raw(&synth.data, cfg.training.test_fraction, seed);
            Prepared {
                train,
                test,
                input: InputBox::unit(q.inputs),
                taus: Some(synth.taus),
                kind: InputKind::Binary,
            }
        }
    }
}

/// Shuffled split without normalization, for inputs that must stay binary.
/// Same index convention as the normalizing split.
pub fn split_raw(ds: &Dataset, test_fraction: f64, seed: u64) -> (Dataset, Dataset) {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let n = ds.n_samples();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
    let (test_idx, train_idx) = idx.split_at(n_test);
    (ds.take(train_idx), ds.take(test_idx))
}

struct Cell<'a> {
    arch: &'a [usize],
    regularizer: &'a str,
    lambda: f64,
    seed: u64,
}

/// Trains every (architecture, regularizer, lambda, seed) cell and writes
/// one model file each under `out_dir/models/`. Rows come back in grid
/// order regardless of scheduling.
pub fn run_grid(cfg: &ExperimentConfig, out_dir: &Path) -> anyhow::Result<Vec<TrainRow>> {
    let models_dir = out_dir.join("models");
    std::fs::create_dir_all(&models_dir)
        .with_context(|| format!("creating {}", models_dir.display()))?;

    let mut prepared: BTreeMap<u64, Prepared> = BTreeMap::new();
    for &seed in &cfg.seeds {
        prepared.insert(seed, prepare(cfg, seed));
    }

    let mut cells = Vec::new();
    for arch in &cfg.architectures {
        for entry in &cfg.grid {
            for &lambda in &entry.lambdas {
                for &seed in &cfg.seeds {
                    cells.push(Cell {
                        arch,
                        regularizer: &entry.regularizer,
                        lambda,
                        seed,
                    });
                }
            }
        }
    }

    let run_all = || -> Vec<anyhow::Result<TrainRow>> {
        cells
            .par_iter()
            .map(|cell| run_cell(cfg, cell, &prepared[&cell.seed], &models_dir))
            .collect()
    };
    let results = if cfg.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .context("building worker pool")?
            .install(run_all)
    } else {
        run_all()
    };
    results.into_iter().collect()
}

fn run_cell(
    cfg: &ExperimentConfig,
    cell: &Cell<'_>,
    prep: &Prepared,
    models_dir: &Path,
) -> anyhow::Result<TrainRow> {
    let n_out = match &prep.taus {
        None => prep.train.n_targets(),
        Some(taus) => taus.len(),
    };
    let mut dims = Vec::with_capacity(cell.arch.len() + 2);
    dims.push(prep.train.n_inputs());
    dims.extend_from_slice(cell.arch);
    dims.push(n_out);

    let mut tc = TrainConfig::new(dims.clone(), cfg.training.epochs, cfg.training.batch_size, cell.seed);
    tc.lr = cfg.training.learning_rate;
    tc.loss = match &prep.taus {
        None => LossKind::Mse,
        Some(taus) => LossKind::Pinball { taus: taus.clone() },
    };
    tc.reg = cell_reg_config(cell.regularizer, cell.lambda, &cfg.training);

    let label = cell_label(&cfg.benchmark, &dims, cell.regularizer, cell.lambda, cell.seed);
    let (net, report) = train(&tc, &prep.train, &prep.test, &prep.input)
        .with_context(|| format!("training {label}"))?;

    let model = ModelFile {
        net,
        input_kind: prep.kind,
        box_lb: prep.input.lb().to_vec(),
        box_ub: prep.input.ub().to_vec(),
    };
    let file_name = format!("{label}.model");
    let path = models_dir.join(&file_name);
    std::fs::write(&path, net::serialize(&model))
        .with_context(|| format!("writing {}", path.display()))?;

    Ok(TrainRow {
        benchmark: cfg.benchmark.clone(),
        arch: arch_label(&dims),
        regularizer: cell.regularizer.to_string(),
        lambda: cell.lambda,
        seed: cell.seed,
        train_mse: report.final_train,
        test_mse: report.final_test,
        unstable: report.final_unstable,
        bound_width: report.final_bound_width,
        time_s: report.wall_time_s,
        model: format!("models/{file_name}"),
    })
}

fn cell_label(benchmark: &str, dims: &[usize], reg: &str, lambda: f64, seed: u64) -> String {
    format!(
        "{benchmark}_{}_{reg}_{}_s{seed}",
        arch_label(dims),
        lambda_label(lambda)
    )
}

/// Single serialized writer for the results of a whole grid.
pub fn write_train_csv(path: &Path, rows: &[TrainRow]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("creating {}", path.display()))?;
    w.write_record(TRAIN_HEADER)?;
    for row in rows {
        w.write_record(row.record())?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_train(config_path: &Path) -> anyhow::Result<PathBuf> {
    let cfg = ExperimentConfig::load(config_path)?;
    let out_dir = cfg.out_dir();
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;

    let rows = run_grid(&cfg, &out_dir)?;
    let csv_path = out_dir.join("train_results.csv");
    write_train_csv(&csv_path, &rows)?;
    println!(
        "trained {} cells ({} benchmark, {} architectures, {} seeds)",
        rows.len(),
        cfg.benchmark,
        cfg.architectures.len(),
        cfg.seeds.len()
    );
    println!("results: {}", csv_path.display());
    Ok(csv_path)
}
