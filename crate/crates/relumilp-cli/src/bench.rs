//! Built-in end-to-end experiment: unregularized training versus the
//! bound-width penalty on the peaks surface, measured by neuron stability
//! and the root relaxation gap of the resulting embeddings.

use std::path::PathBuf;

use anyhow::Context;

use relumilp::lp::Sense;

use crate::config::{
    resolve_out_dir, ExperimentConfig, GridEntry, MilpSection, TrainingSection,
};
use crate::optimize::{run_optimize, write_optimize_csv, OptimizeArgs, OptimizeRow};
use crate::report::cmd_report;
use crate::run::{run_grid, write_train_csv, TrainRow};

const BW_LAMBDA: f64 = 1e-3;

fn bench_config(quick: bool) -> ExperimentConfig {
    // Small batches at a raised learning rate give the width penalty enough
    // optimizer steps to bite within 50 epochs; at the library defaults the
    // unstable count barely moves at this sample count.
    let (hidden, seeds, samples, epochs, batch) = if quick {
        (vec![8usize, 8], vec![1u64], 3000, 10, 16)
    } else {
        (vec![25, 25], vec![1, 2, 3], 20_000, 50, 16)
    };
    ExperimentConfig {
        benchmark: "peaks".into(),
        architectures: vec![hidden],
        seeds,
        output_dir: PathBuf::from("relumilp-bench"),
        workers: 0,
        grid: vec![
            GridEntry { regularizer: "none".into(), lambdas: vec![0.0] },
            GridEntry { regularizer: "bw".into(), lambdas: vec![BW_LAMBDA] },
        ],
        training: TrainingSection {
            samples,
            epochs,
            batch_size: batch,
            learning_rate: 5e-3,
            ..Default::default()
        },
        milp: MilpSection { max_nodes: 200_000, time_limit_s: 30.0 },
        quantile: None,
    }
}

struct TrendLine {
    unstable: f64,
    gap: f64,
    mse: f64,
}

fn trend_line(reg: &str, train_rows: &[TrainRow], opt_rows: &[OptimizeRow]) -> TrendLine {
    let mses: Vec<f64> =
        train_rows.iter().filter(|r| r.regularizer == reg).map(|r| r.test_mse).collect();
    let solved: Vec<_> = opt_rows
        .iter()
        .filter(|r| r.tags.regularizer == reg)
        .filter_map(|r| r.outcome.as_ref())
        .collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    TrendLine {
        unstable: mean(&solved.iter().map(|o| o.unstable as f64).collect::<Vec<_>>()),
        gap: mean(&solved.iter().map(|o| o.root_lp_gap).collect::<Vec<_>>()),
        mse: mean(&mses),
    }
}

/// Runs train, optimize, and report on the built-in grid; returns whether
/// the regularized models came out measurably easier to embed.
pub fn cmd_bench(quick: bool) -> anyhow::Result<bool> {
    let cfg = bench_config(quick);
    let out_dir = resolve_out_dir(&cfg.output_dir);
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    println!(
        "bench: peaks, architecture 2-{}-1, {} seeds{}",
        cfg.architectures[0].iter().map(|d| d.to_string()).collect::<Vec<_>>().join("-"),
        cfg.seeds.len(),
        if quick { " (quick sizes)" } else { "" }
    );

    let train_rows = run_grid(&cfg, &out_dir)?;
    let train_csv = out_dir.join("train_results.csv");
    write_train_csv(&train_csv, &train_rows)?;
    println!("trained {} cells -> {}", train_rows.len(), train_csv.display());

    let args = OptimizeArgs {
        models: out_dir.join("models").join("*.model").to_string_lossy().into_owned(),
        sense: Sense::Min,
        time_limit_s: Some(cfg.milp.time_limit_s),
        objective: "output".into(),
        out: None,
    };
    let opt_rows = run_optimize(&args)?;
    let opt_csv = out_dir.join("optimize_results.csv");
    write_optimize_csv(&opt_csv, &opt_rows)?;
    println!("solved {} embeddings -> {}", opt_rows.len(), opt_csv.display());

    cmd_report(
        &train_csv.to_string_lossy(),
        &out_dir.join("summary.csv"),
    )?;

    let base = trend_line("none", &train_rows, &opt_rows);
    let reg = trend_line("bw", &train_rows, &opt_rows);
    let unstable_drop = 1.0 - reg.unstable / base.unstable;
    let gap_drop = 1.0 - reg.gap / base.gap;
    let mse_ratio = reg.mse / base.mse;
    println!(
        "baseline      unstable {:6.1}   root gap {:8.4}   test mse {:.3e}",
        base.unstable, base.gap, base.mse
    );
    println!(
        "bw {:7}    unstable {:6.1}   root gap {:8.4}   test mse {:.3e}",
        BW_LAMBDA, reg.unstable, reg.gap, reg.mse
    );
    println!("unstable reduction {:5.1}% (want >= 30%)", unstable_drop * 100.0);
    println!("root gap reduction {:5.1}% (want >= 50%)", gap_drop * 100.0);
    println!("test mse ratio     {mse_ratio:5.2}x (want <= 3x)");

    let pass = unstable_drop >= 0.30 && gap_drop >= 0.50 && mse_ratio <= 3.0;
    if quick {
        println!("trend (informational at quick sizes): {}", if pass { "holds" } else { "not yet" });
        Ok(true)
    } else {
        println!("trend: {}", if pass { "PASS" } else { "FAIL" });
        Ok(pass)
    }
}
