//! Declarative experiment description: what to train, over which grid of
//! regularizers and seeds, and where results land.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Deserialize;

use relumilp::data::TargetFn;
use relumilp::reg::RegularizerConfig;

/// Environment variable that overrides the configured output directory.
pub const OUT_DIR_ENV: &str = "RELUMILP_OUT";

pub const REGULARIZER_NAMES: [&str; 7] = ["none", "l1", "l2", "bw", "sn", "sn2", "lp"];

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// himmelblau | peaks | ackley-<d> | synth-quantile
    pub benchmark: String,
    /// Hidden layer widths per architecture; input and output sizes come
    /// from the benchmark.
    pub architectures: Vec<Vec<usize>>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_out_dir")]
    pub output_dir: PathBuf,
    /// Worker threads for grid cells; 0 uses the machine default.
    #[serde(default)]
    pub workers: usize,
    pub grid: Vec<GridEntry>,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub milp: MilpSection,
    pub quantile: Option<QuantileSection>,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridEntry {
    pub regularizer: String,
    #[serde(default = "default_lambdas")]
    pub lambdas: Vec<f64>,
}

fn default_lambdas() -> Vec<f64> {
    vec![0.0]
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub samples: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub test_fraction: f64,
    /// Width weight folded into the relaxation-gap term.
    pub alpha: f64,
    /// Samples per batch that solve the pointwise relaxation.
    pub lp_subsample: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            samples: 4000,
            epochs: 20,
            batch_size: 64,
            learning_rate: 1e-3,
            test_fraction: 0.2,
            alpha: 0.0,
            lp_subsample: 1,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MilpSection {
    pub max_nodes: usize,
    pub time_limit_s: f64,
}

impl Default for MilpSection {
    fn default() -> Self {
        MilpSection { max_nodes: 200_000, time_limit_s: 60.0 }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantileSection {
    pub inputs: usize,
    pub quantiles: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
}

fn default_noise() -> f64 {
    0.1
}

/// What the benchmark name resolved to.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Benchmark {
    Target(TargetFn),
    SynthQuantile,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()
            .map_err(|msg| anyhow::anyhow!("invalid config {}: {msg}", path.display()))?;
        Ok(cfg)
    }

    pub fn benchmark(&self) -> Benchmark {
        if self.benchmark == "synth-quantile" {
            Benchmark::SynthQuantile
        } else {
            Benchmark::Target(TargetFn::parse(&self.benchmark).expect("validated"))
        }
    }

    /// Output directory with the environment override applied.
    pub fn out_dir(&self) -> PathBuf {
        resolve_out_dir(&self.output_dir)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.benchmark != "synth-quantile" && TargetFn::parse(&self.benchmark).is_none() {
            return Err(format!(
                "benchmark: unknown name {:?} (expected himmelblau, peaks, ackley-<d>, or synth-quantile)",
                self.benchmark
            ));
        }
        if self.architectures.is_empty() {
            return Err("architectures: at least one entry required".into());
        }
        for (i, arch) in self.architectures.iter().enumerate() {
            if arch.is_empty() {
                return Err(format!("architectures[{i}]: needs at least one hidden layer"));
            }
            if arch.iter().any(|&w| w == 0) {
                return Err(format!("architectures[{i}]: zero-width layer"));
            }
        }
        if self.seeds.is_empty() {
            return Err("seeds: at least one entry required".into());
        }
        let mut seen_seeds = self.seeds.clone();
        seen_seeds.sort_unstable();
        seen_seeds.dedup();
        if seen_seeds.len() != self.seeds.len() {
            return Err("seeds: duplicate entries".into());
        }
        if self.grid.is_empty() {
            return Err("grid: at least one entry required".into());
        }
        let mut cells: Vec<(String, u64)> = Vec::new();
        for (i, entry) in self.grid.iter().enumerate() {
            if !REGULARIZER_NAMES.contains(&entry.regularizer.as_str()) {
                return Err(format!(
                    "grid[{i}].regularizer: unknown name {:?} (expected one of {})",
                    entry.regularizer,
                    REGULARIZER_NAMES.join(", ")
                ));
            }
            if entry.lambdas.is_empty() {
                return Err(format!("grid[{i}].lambdas: must not be empty"));
            }
            for &l in &entry.lambdas {
                if !l.is_finite() || l < 0.0 {
                    return Err(format!("grid[{i}].lambdas: {l} is not a valid weight"));
                }
                cells.push((entry.regularizer.clone(), l.to_bits()));
            }
            if entry.regularizer == "none" && entry.lambdas != [0.0] {
                return Err(format!("grid[{i}].lambdas: regularizer \"none\" takes no weights"));
            }
        }
        let n_cells = cells.len();
        cells.sort();
        cells.dedup();
        if cells.len() != n_cells {
            return Err("grid: duplicate (regularizer, lambda) cells".into());
        }

        let t = &self.training;
        if t.samples < 8 {
            return Err("training.samples: need at least 8".into());
        }
        if t.epochs == 0 {
            return Err("training.epochs: must be positive".into());
        }
        if t.batch_size == 0 {
            return Err("training.batch_size: must be positive".into());
        }
        if !(t.learning_rate.is_finite() && t.learning_rate > 0.0) {
            return Err(format!("training.learning_rate: {} is not usable", t.learning_rate));
        }
        if !(t.test_fraction > 0.0 && t.test_fraction < 1.0) {
            return Err(format!("training.test_fraction: {} must be in (0, 1)", t.test_fraction));
        }
        if !(t.alpha.is_finite() && t.alpha >= 0.0) {
            return Err(format!("training.alpha: {} must be finite and nonnegative", t.alpha));
        }
        if t.lp_subsample == 0 {
            return Err("training.lp_subsample: must be positive".into());
        }

        if self.milp.max_nodes == 0 {
            return Err("milp.max_nodes: must be positive".into());
        }
        if !(self.milp.time_limit_s.is_finite() && self.milp.time_limit_s > 0.0) {
            return Err(format!("milp.time_limit_s: {} must be positive", self.milp.time_limit_s));
        }

        match (&self.quantile, self.benchmark == "synth-quantile") {
            (None, true) => {
                return Err("quantile: section required for benchmark synth-quantile".into())
            }
            (Some(_), false) => {
                return Err(format!(
                    "quantile: section only applies to benchmark synth-quantile, not {:?}",
                    self.benchmark
                ))
            }
            (Some(q), true) => {
                if q.inputs == 0 {
                    return Err("quantile.inputs: must be positive".into());
                }
                if q.quantiles == 0 {
                    return Err("quantile.quantiles: must be positive".into());
                }
                if !(q.noise.is_finite() && q.noise >= 0.0) {
                    return Err(format!(
                        "quantile.noise: {} must be finite and nonnegative",
                        q.noise
                    ));
                }
            }
            (None, false) => {}
        }
        Ok(())
    }
}

pub fn resolve_out_dir(configured: &Path) -> PathBuf {
    match std::env::var_os(OUT_DIR_ENV) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => configured.to_path_buf(),
    }
}

/// Full layer sizes joined with dashes, e.g. "2-25-25-1".
pub fn arch_label(dims: &[usize]) -> String {
    dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("-")
}

/// Weight rendered for file names: "0", "1e-3", "2.5e-2".
pub fn lambda_label(l: f64) -> String {
    if l == 0.0 {
        "0".into()
    } else {
        format!("{l:e}")
    }
}

/// Regularizer settings for one grid cell.
pub fn cell_reg_config(name: &str, lambda: f64, t: &TrainingSection) -> RegularizerConfig {
    let mut reg = RegularizerConfig::default();
    match name {
        "none" => {}
        "l1" => reg.lambda_l1 = lambda,
        "l2" => reg.lambda_l2 = lambda,
        "bw" => reg.lambda_bw = lambda,
        "sn" => reg.lambda_sn = lambda,
        "sn2" => reg.lambda_sn2 = lambda,
        "lp" => reg.lambda_lp = lambda,
        other => unreachable!("validated regularizer name {other}"),
    }
    reg.alpha = t.alpha;
    reg.lp_subsample = t.lp_subsample;
    reg
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> String {
        r#"
benchmark = "himmelblau"
architectures = [[4]]
seeds = [1]

[[grid]]
regularizer = "none"
"#
        .to_string()
    }

    #[test]
    fn minimal_config_parses() {
        let cfg: ExperimentConfig = toml::from_str(&minimal()).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.benchmark(), Benchmark::Target(TargetFn::Himmelblau));
        assert_eq!(cfg.grid[0].lambdas, vec![0.0]);
        assert_eq!(cfg.training.samples, 4000);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let text = minimal() + "\nspeed = 9\n";
        let err = toml::from_str::<ExperimentConfig>(&text).unwrap_err();
        assert!(err.to_string().contains("speed"), "{err}");

        let text = minimal().replace("[[grid]]", "[training]\nwarmup = 3\n\n[[grid]]");
        let err = toml::from_str::<ExperimentConfig>(&text).unwrap_err();
        assert!(err.to_string().contains("warmup"), "{err}");
    }

    #[test]
    fn field_level_validation_messages() {
        let bad = |patch: &str, needle: &str| {
            let cfg: ExperimentConfig = toml::from_str(&(minimal() + patch)).unwrap();
            let msg = cfg.validate().unwrap_err();
            assert!(msg.contains(needle), "{msg:?} should mention {needle:?}");
        };
        bad("\n[training]\nsamples = 2\n", "training.samples");
        bad("\n[training]\ntest_fraction = 1.5\n", "training.test_fraction");
        bad("\n[milp]\ntime_limit_s = 0.0\n", "milp.time_limit_s");
        bad("\n[quantile]\ninputs = 4\nquantiles = 3\n", "quantile");

        let cfg: ExperimentConfig =
            toml::from_str(&minimal().replace("\"none\"", "\"dropout\"")).unwrap();
        let msg = cfg.validate().unwrap_err();
        assert!(msg.contains("dropout"), "{msg}");

        let cfg: ExperimentConfig =
            toml::from_str(&minimal().replace("himmelblau", "rosenbrock")).unwrap();
        let msg = cfg.validate().unwrap_err();
        assert!(msg.contains("rosenbrock"), "{msg}");
    }

    #[test]
    fn quantile_benchmark_requires_section() {
        let text = minimal().replace("himmelblau", "synth-quantile");
        let cfg: ExperimentConfig = toml::from_str(&text).unwrap();
        assert!(cfg.validate().unwrap_err().contains("quantile"));

        let text = text + "\n[quantile]\ninputs = 4\nquantiles = 3\n";
        let cfg: ExperimentConfig = toml::from_str(&text).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.benchmark(), Benchmark::SynthQuantile);
        assert_eq!(cfg.quantile.as_ref().unwrap().noise, 0.1);
    }

    #[test]
    fn labels() {
        assert_eq!(arch_label(&[2, 25, 25, 1]), "2-25-25-1");
        assert_eq!(lambda_label(0.0), "0");
        assert_eq!(lambda_label(1e-3), "1e-3");
        assert_eq!(lambda_label(0.025), "2.5e-2");
    }
}
