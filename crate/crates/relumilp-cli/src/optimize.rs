//! Embeds trained model files in the big-M program and solves each one.

use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context};
use rayon::prelude::*;

use relumilp::ibp::{propagate_ibp, unstable_count, InputBox};
use relumilp::lp::{LpObjective, Sense};
use relumilp::milp::{solve_milp, InputDomain, MilpSpec, MilpStatus};
use relumilp::net::{self, InputKind};

pub const OPTIMIZE_SCHEMA: &str = "1";

pub const OPTIMIZE_HEADER: [&str; 16] = [
    "schema_version",
    "model",
    "benchmark",
    "arch",
    "regularizer",
    "lambda",
    "seed",
    "sense",
    "unstable",
    "root_lp_value",
    "root_lp_gap",
    "nodes",
    "time_s",
    "objective",
    "best_bound",
    "status",
];

#[derive(Clone, Debug)]
pub struct OptimizeArgs {
    pub models: String,
    pub sense: Sense,
    pub time_limit_s: Option<f64>,
    pub objective: String,
    pub out: Option<PathBuf>,
}

/// Results of one model file; error rows keep the run going.
#[derive(Clone, Debug)]
pub struct OptimizeRow {
    pub model: String,
    /// benchmark/arch/regularizer/lambda/seed recovered from the file name
    /// when it follows the `train` naming scheme, empty otherwise.
    pub tags: FileTags,
    pub sense: Sense,
    pub outcome: Option<Outcome>,
}

#[derive(Clone, Debug, Default)]
pub struct FileTags {
    pub benchmark: String,
    pub arch: String,
    pub regularizer: String,
    pub lambda: String,
    pub seed: String,
}

#[derive(Clone, Debug)]
pub struct Outcome {
    pub unstable: usize,
    pub root_lp_value: f64,
    pub root_lp_gap: f64,
    pub nodes: usize,
    pub time_s: f64,
    pub objective: f64,
    pub best_bound: f64,
    pub status: MilpStatus,
}

impl OptimizeRow {
    pub fn record(&self) -> Vec<String> {
        let mut rec = vec![
            OPTIMIZE_SCHEMA.to_string(),
            self.model.clone(),
            self.tags.benchmark.clone(),
            self.tags.arch.clone(),
            self.tags.regularizer.clone(),
            self.tags.lambda.clone(),
            self.tags.seed.clone(),
            match self.sense {
                Sense::Min => "min".into(),
                Sense::Max => "max".into(),
            },
        ];
        match &self.outcome {
            Some(o) => {
                rec.push(o.unstable.to_string());
                rec.push(o.root_lp_value.to_string());
                rec.push(o.root_lp_gap.to_string());
                rec.push(o.nodes.to_string());
                rec.push(o.time_s.to_string());
                rec.push(o.objective.to_string());
                rec.push(o.best_bound.to_string());
                rec.push(
                    match o.status {
                        MilpStatus::Optimal => "optimal",
                        MilpStatus::TimeLimit => "time_limit",
                        MilpStatus::NodeLimit => "node_limit",
                    }
                    .into(),
                );
            }
            None => {
                rec.extend(std::iter::repeat(String::new()).take(7));
                rec.push("error".into());
            }
        }
        rec
    }
}

/// "output" picks the first output; "weights:a,b,..." optimizes a linear
/// combination of the outputs.
pub fn parse_objective(s: &str) -> anyhow::Result<LpObjective> {
    if s == "output" {
        return Ok(LpObjective::Output(0));
    }
    if let Some(list) = s.strip_prefix("weights:") {
        let w: Result<Vec<f64>, _> = list.split(',').map(|v| v.trim().parse::<f64>()).collect();
        let w = w.with_context(|| format!("parsing objective weights {list:?}"))?;
        if w.is_empty() || !w.iter().all(|v| v.is_finite()) {
            bail!("objective weights must be a nonempty finite list");
        }
        return Ok(LpObjective::Weights(w));
    }
    bail!("objective must be \"output\" or \"weights:<comma-separated values>\", got {s:?}")
}

/// Recovers grid-cell tags from the `train` file naming scheme
/// `{benchmark}_{arch}_{reg}_{lambda}_s{seed}.model`.
pub fn parse_file_tags(path: &Path) -> FileTags {
    let stem = match path.file_stem().and_then(|s| s.to_str()) {
        Some(s) => s,
        None => return FileTags::default(),
    };
    let parts: Vec<&str> = stem.split('_').collect();
    if parts.len() != 5 {
        return FileTags::default();
    }
    let seed = match parts[4].strip_prefix('s') {
        Some(s) if s.parse::<u64>().is_ok() => s,
        _ => return FileTags::default(),
    };
    if parts[3].parse::<f64>().is_err() {
        return FileTags::default();
    }
    FileTags {
        benchmark: parts[0].into(),
        arch: parts[1].into(),
        regularizer: parts[2].into(),
        lambda: parts[3].into(),
        seed: seed.into(),
    }
}

fn solve_one(
    path: &Path,
    sense: Sense,
    objective: &LpObjective,
    time_limit_s: Option<f64>,
) -> anyhow::Result<Outcome> {
    let text = std::fs::read_to_string(path)?;
    let model = net::deserialize(&text)?;
    let domain = match model.input_kind {
        InputKind::Binary => InputDomain::binary(model.net.n_inputs()),
        InputKind::Continuous => {
            InputDomain::continuous(InputBox::new(model.box_lb.clone(), model.box_ub.clone()))
        }
    };
    let profile = propagate_ibp(&model.net, domain.bounds());
    let unstable = unstable_count(&profile);

    let mut spec = MilpSpec::new(model.net, domain, objective.clone(), sense);
    if let Some(s) = time_limit_s {
        spec.limits.max_time = Duration::from_secs_f64(s);
    }
    let res = solve_milp(&spec, &profile)?;
    Ok(Outcome {
        unstable,
        root_lp_value: res.root_lp_value,
        root_lp_gap: res.root_lp_gap,
        nodes: res.nodes,
        time_s: res.wall_time.as_secs_f64(),
        objective: res.incumbent,
        best_bound: res.best_bound,
        status: res.status,
    })
}

pub fn run_optimize(args: &OptimizeArgs) -> anyhow::Result<Vec<OptimizeRow>> {
    if let Some(s) = args.time_limit_s {
        if !(s.is_finite() && s > 0.0) {
            bail!("time limit must be positive, got {s}");
        }
    }
    let objective = parse_objective(&args.objective)?;
    let mut paths: Vec<PathBuf> = glob::glob(&args.models)
        .with_context(|| format!("bad glob {:?}", args.models))?
        .filter_map(Result::ok)
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no model files match {:?}", args.models);
    }

    let rows: Vec<OptimizeRow> = paths
        .par_iter()
        .map(|path| {
            let outcome = match solve_one(path, args.sense, &objective, args.time_limit_s) {
                Ok(o) => Some(o),
                Err(e) => {
                    eprintln!("warning: {}: {e:#}", path.display());
                    None
                }
            };
            OptimizeRow {
                model: path.file_name().unwrap_or_default().to_string_lossy().into_owned(),
                tags: parse_file_tags(path),
                sense: args.sense,
                outcome,
            }
        })
        .collect();
    Ok(rows)
}

pub fn write_optimize_csv(path: &Path, rows: &[OptimizeRow]) -> anyhow::Result<()> {
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(OPTIMIZE_HEADER)?;
    for row in rows {
        w.write_record(row.record())?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_optimize(args: &OptimizeArgs) -> anyhow::Result<PathBuf> {
    let rows = run_optimize(args)?;
    let out = match &args.out {
        Some(p) => p.clone(),
        None => crate::config::resolve_out_dir(Path::new(".")).join("optimize_results.csv"),
    };
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    write_optimize_csv(&out, &rows)?;
    let errors = rows.iter().filter(|r| r.outcome.is_none()).count();
    println!("solved {} models ({errors} errors)", rows.len());
    println!("results: {}", out.display());
    Ok(out)
}
