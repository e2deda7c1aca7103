//! Aggregates per-seed result rows into grouped means, sample deviations,
//! and ratios against the unregularized baseline.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};

pub const REPORT_SCHEMA: &str = "1";

const GROUP_COLS: [&str; 5] = ["benchmark", "arch", "regularizer", "lambda", "seed"];

/// Columns whose per-group means feed the baseline ratio columns.
const MSE_COL: &str = "test_mse";
const TIME_COL: &str = "time_s";

pub fn cmd_report(input_glob: &str, out: &Path) -> anyhow::Result<PathBuf> {
    let mut paths: Vec<PathBuf> = glob::glob(input_glob)
        .with_context(|| format!("bad glob {input_glob:?}"))?
        .filter_map(Result::ok)
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no result files match {input_glob:?}");
    }

    let mut header: Option<Vec<String>> = None;
    let mut rows: Vec<Vec<String>> = Vec::new();
    for path in &paths {
        let mut reader = csv::Reader::from_path(path)
            .with_context(|| format!("reading {}", path.display()))?;
        let this: Vec<String> =
            reader.headers()?.iter().map(|s| s.to_string()).collect();
        match &header {
            None => header = Some(this),
            Some(expect) => check_same_schema(expect, &this, path)?,
        }
        for rec in reader.records() {
            let rec = rec.with_context(|| format!("reading {}", path.display()))?;
            rows.push(rec.iter().map(|s| s.to_string()).collect());
        }
    }
    let header = header.expect("at least one file");

    let (out_header, out_rows) = aggregate(&header, &rows)?;
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut w = csv::Writer::from_path(out)
        .with_context(|| format!("creating {}", out.display()))?;
    w.write_record(&out_header)?;
    for row in &out_rows {
        w.write_record(row)?;
    }
    w.flush()?;
    println!("aggregated {} rows into {} groups", rows.len(), out_rows.len());
    println!("summary: {}", out.display());
    Ok(out.to_path_buf())
}

fn check_same_schema(expect: &[String], got: &[String], path: &Path) -> anyhow::Result<()> {
    for (i, (e, g)) in expect.iter().zip(got).enumerate() {
        if e != g {
            bail!(
                "schema mismatch in {}: column {} is {g:?}, expected {e:?}",
                path.display(),
                i + 1
            );
        }
    }
    if expect.len() != got.len() {
        let name = expect.get(got.len()).or_else(|| got.get(expect.len())).unwrap();
        bail!(
            "schema mismatch in {}: {} columns, expected {} (at column {name:?})",
            path.display(),
            got.len(),
            expect.len()
        );
    }
    Ok(())
}

#[derive(Default)]
struct Group {
    /// Parsed values per metric column index; empty cells are left out.
    values: BTreeMap<usize, Vec<f64>>,
    n: usize,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Groups rows by (benchmark, arch, regularizer, lambda), averages every
/// numeric column over the group, and appends ratio columns against the
/// matching unregularized group. With several benchmarks present, one
/// "(all)" row per (arch, regularizer, lambda) averages the per-benchmark
/// ratios.
pub fn aggregate(
    header: &[String],
    rows: &[Vec<String>],
) -> anyhow::Result<(Vec<String>, Vec<Vec<String>>)> {
    for required in GROUP_COLS.iter().chain(&["schema_version"]) {
        if !header.iter().any(|h| h == required) {
            bail!("input schema lacks column {required:?}");
        }
    }
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let key_cols = [col("benchmark"), col("arch"), col("regularizer"), col("lambda")];
    let excluded: Vec<usize> =
        GROUP_COLS.iter().map(|c| col(c)).chain([col("schema_version")]).collect();

    // A column is a metric when some row parses and none holds garbage.
    let mut metric_cols: Vec<usize> = Vec::new();
    for i in 0..header.len() {
        if excluded.contains(&i) {
            continue;
        }
        let mut any = false;
        let mut clean = true;
        for row in rows {
            let cell = row.get(i).map(String::as_str).unwrap_or("");
            if cell.is_empty() {
                continue;
            }
            match cell.parse::<f64>() {
                Ok(_) => any = true,
                Err(_) => {
                    clean = false;
                    break;
                }
            }
        }
        if any && clean {
            metric_cols.push(i);
        }
    }

    let mut groups: BTreeMap<Vec<String>, Group> = BTreeMap::new();
    for row in rows {
        if row.len() != header.len() {
            bail!("row has {} fields, header has {}", row.len(), header.len());
        }
        let key: Vec<String> = key_cols.iter().map(|&i| row[i].clone()).collect();
        let g = groups.entry(key).or_default();
        g.n += 1;
        for &i in &metric_cols {
            if let Ok(v) = row[i].parse::<f64>() {
                g.values.entry(i).or_default().push(v);
            }
        }
    }

    // Sort groups by benchmark, arch, regularizer, then numeric lambda.
    let mut keys: Vec<Vec<String>> = groups.keys().cloned().collect();
    keys.sort_by(|a, b| {
        a[..3].cmp(&b[..3]).then_with(|| {
            let la = a[3].parse::<f64>().unwrap_or(f64::MAX);
            let lb = b[3].parse::<f64>().unwrap_or(f64::MAX);
            la.partial_cmp(&lb).unwrap().then(a[3].cmp(&b[3]))
        })
    });

    // Baseline per (benchmark, arch): the "none" group with smallest lambda.
    let mut baselines: BTreeMap<(String, String), &Group> = BTreeMap::new();
    for key in &keys {
        if key[2] == "none" {
            baselines
                .entry((key[0].clone(), key[1].clone()))
                .or_insert_with(|| &groups[key]);
        }
    }
    let group_mean = |g: &Group, name: &str| -> Option<f64> {
        let i = header.iter().position(|h| h == name)?;
        g.values.get(&i).map(|v| mean(v))
    };
    let ratio = |key: &[String], name: &str| -> Option<f64> {
        let g = &groups[key];
        let base = baselines.get(&(key[0].clone(), key[1].clone()))?;
        let num = group_mean(g, name)?;
        let den = group_mean(base, name)?;
        (den != 0.0).then(|| num / den)
    };

    let mut out_header: Vec<String> = vec![
        "schema_version".into(),
        "benchmark".into(),
        "arch".into(),
        "regularizer".into(),
        "lambda".into(),
        "n".into(),
    ];
    for &i in &metric_cols {
        out_header.push(format!("{}_mean", header[i]));
        out_header.push(format!("{}_std", header[i]));
    }
    out_header.push("mse_ratio".into());
    out_header.push("time_ratio".into());

    let fmt_opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out_rows: Vec<Vec<String>> = Vec::new();
    let mut summaries: BTreeMap<(String, String, String), RatioAcc> = BTreeMap::new();
    for key in &keys {
        let g = &groups[key];
        let mut row: Vec<String> = vec![REPORT_SCHEMA.into()];
        row.extend(key.iter().cloned());
        row.push(g.n.to_string());
        for &i in &metric_cols {
            match g.values.get(&i) {
                Some(vs) => {
                    row.push(mean(vs).to_string());
                    row.push(sample_std(vs).to_string());
                }
                None => {
                    row.push(String::new());
                    row.push(String::new());
                }
            }
        }
        let mse_ratio = ratio(key, MSE_COL);
        let time_ratio = ratio(key, TIME_COL);
        row.push(fmt_opt(mse_ratio));
        row.push(fmt_opt(time_ratio));
        out_rows.push(row);

        let acc = summaries
            .entry((key[1].clone(), key[2].clone(), key[3].clone()))
            .or_default();
        acc.n += g.n;
        if let Some(r) = mse_ratio {
            acc.mse.push(r);
        }
        if let Some(r) = time_ratio {
            acc.time.push(r);
        }
    }

    let n_benchmarks = keys.iter().map(|k| &k[0]).collect::<std::collections::BTreeSet<_>>().len();
    if n_benchmarks > 1 {
        for ((arch, reg, lambda), acc) in &summaries {
            let mut row: Vec<String> = vec![
                REPORT_SCHEMA.into(),
                "(all)".into(),
                arch.clone(),
                reg.clone(),
                lambda.clone(),
                acc.n.to_string(),
            ];
            for _ in &metric_cols {
                row.push(String::new());
                row.push(String::new());
            }
            row.push(fmt_opt((!acc.mse.is_empty()).then(|| mean(&acc.mse))));
            row.push(fmt_opt((!acc.time.is_empty()).then(|| mean(&acc.time))));
            out_rows.push(row);
        }
    }

    Ok((out_header, out_rows))
}

#[derive(Default)]
struct RatioAcc {
    n: usize,
    mse: Vec<f64>,
    time: Vec<f64>,
}
