use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use hetcggm::em::fit as fit_model;
use hetcggm::metrics::{evaluate as evaluate_groups, evaluate_fit, Metrics};
use hetcggm::model::{validate_dataset, Dataset, Hyperparams};
use hetcggm::simgen::{simulate as simulate_data, SimSpec};
use hetcggm::tuning::{default_axes, geometric, grid_search, product_grid, GridPoint};
use rayon::prelude::*;
use serde_json::Value;

use crate::io::{
    numbered_header, read_json, read_labels, read_matrix_csv, write_fit_outputs,
    write_json, write_labels, write_matrix_csv, GroupFile, Manifest, MetricsFile, ResultFile,
    TruthFile, FORMAT_VERSION,
};
use crate::{
    BenchmarkArgs, DataArgs, EvaluateArgs, FitArgs, GridArgs, ModelArgs, SimSpecArgs,
    SimulateArgs, TuneArgs,
};

fn sim_spec(a: &SimSpecArgs) -> Result<SimSpec> {
    let spec = SimSpec {
        setting: a.setting.parse()?,
        p: a.p,
        q: a.q,
        group_sizes: a.sizes.clone(),
        seed: a.seed,
    };
    spec.validate()?;
    Ok(spec)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

/// Defaults, then the config file, then `k` and any lambda flags.
pub fn build_hyperparams(
    model: &ModelArgs,
    lambdas: [Option<f64>; 3],
) -> Result<Hyperparams> {
    let mut value = serde_json::to_value(Hyperparams::default())?;
    if let Some(path) = &model.config {
        let overrides: Value = read_json(path)?;
        let Value::Object(map) = overrides else {
            bail!("{}: config must be a JSON object", path.display());
        };
        let fields = value.as_object_mut().expect("hyperparams serialize to an object");
        for (key, v) in map {
            if !fields.contains_key(&key) {
                bail!("{}: unknown hyper-parameter {key:?}", path.display());
            }
            fields.insert(key, v);
        }
    }
    let mut hp: Hyperparams =
        serde_json::from_value(value).context("invalid hyper-parameter config")?;
    hp.k = model.k as usize;
    let [l1, l2, l3] = lambdas;
    hp.lambda1 = l1.unwrap_or(hp.lambda1);
    hp.lambda2 = l2.unwrap_or(hp.lambda2);
    hp.lambda3 = l3.unwrap_or(hp.lambda3);
    hp.validate()?;
    Ok(hp)
}

fn load_dataset(data: &DataArgs) -> Result<Dataset> {
    let (_, y) = read_matrix_csv(&data.y)?;
    let (_, x) = read_matrix_csv(&data.x)?;
    Ok(validate_dataset(y, x)?)
}

fn parse_axis(text: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = text.split(':').collect();
    let [lo, hi, count] = parts.as_slice() else {
        bail!("grid axis {text:?} must look like lo:hi:count");
    };
    let lo: f64 = lo.parse().map_err(|_| anyhow!("bad grid bound {lo:?}"))?;
    let hi: f64 = hi.parse().map_err(|_| anyhow!("bad grid bound {hi:?}"))?;
    let count: usize = count.parse().map_err(|_| anyhow!("bad grid count {count:?}"))?;
    if !(lo > 0.0 && hi >= lo) {
        bail!("grid axis {text:?} needs 0 < lo <= hi (geometric spacing)");
    }
    Ok(geometric(lo, hi, count))
}

/// Grid from a file, or from the axis flags with unspecified axes taken from
/// the default grid for this data size.
pub fn build_grid(g: &GridArgs, n: usize, p: usize, q: usize) -> Result<Vec<GridPoint>> {
    let grid = if let Some(path) = &g.grid_file {
        read_json::<Vec<GridPoint>>(path)?
    } else {
        let [d1, d2, d3] = default_axes(n, p, q);
        let axis = |flag: &Option<String>, default: Vec<f64>| match flag {
            Some(text) => parse_axis(text),
            None => Ok(default),
        };
        product_grid(&axis(&g.grid1, d1)?, &axis(&g.grid2, d2)?, &axis(&g.grid3, d3)?)
    };
    if grid.is_empty() {
        bail!("the tuning grid is empty");
    }
    Ok(grid)
}

pub fn simulate(a: &SimulateArgs) -> Result<Vec<String>> {
    let spec = sim_spec(&a.spec)?;
    let (truth, ds) = simulate_data(&spec)?;
    create_dir(&a.out)?;
    write_matrix_csv(&a.out.join("Y.csv"), &numbered_header("y", spec.p), ds.y())?;
    write_matrix_csv(&a.out.join("X.csv"), &numbered_header("x", spec.q), &ds.x_raw())?;
    write_labels(&a.out.join("labels.csv"), &truth.labels)?;
    let truth_file = TruthFile {
        format_version: FORMAT_VERSION.into(),
        groups: truth.params.iter().map(GroupFile::from_params).collect(),
    };
    write_json(&a.out.join("truth.json"), &truth_file)?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION.into(),
        seed: spec.seed,
        n: ds.n(),
        spec,
    };
    write_json(&a.out.join("manifest.json"), &manifest)?;
    Ok(Vec::new())
}

pub fn fit(a: &FitArgs) -> Result<Vec<String>> {
    let hp = build_hyperparams(&a.model, [a.lambda1, a.lambda2, a.lambda3])?;
    let ds = load_dataset(&a.data)?;
    let start = Instant::now();
    let fr = fit_model(&ds, &hp, a.seed)?;
    let result = ResultFile::new(&fr, &hp, a.seed, start.elapsed().as_secs_f64());
    write_fit_outputs(&a.out, &result)?;
    Ok(result.warnings)
}

fn opt_cell(v: f64) -> String {
    if v.is_finite() {
        v.to_string()
    } else {
        String::new()
    }
}

pub fn tune(a: &TuneArgs) -> Result<Vec<String>> {
    let hp = build_hyperparams(&a.model, [None; 3])?;
    let ds = load_dataset(&a.data)?;
    let grid = build_grid(&a.grid, ds.n(), ds.p(), ds.q())?;
    let start = Instant::now();
    let outcome = grid_search(&ds, &grid, &hp, a.seed)?;
    let elapsed = start.elapsed().as_secs_f64();
    create_dir(&a.out)?;

    let mut w = csv::Writer::from_path(a.out.join("hqc_table.csv"))?;
    w.write_record([
        "lambda1",
        "lambda2",
        "lambda3",
        "hqc",
        "k_hat",
        "df",
        "loglik",
        "objective_start",
        "objective_end",
        "max_objective_drop",
        "error",
    ])?;
    for row in &outcome.table {
        w.write_record([
            row.point.lambda1.to_string(),
            row.point.lambda2.to_string(),
            row.point.lambda3.to_string(),
            opt_cell(row.hqc),
            row.k_hat.to_string(),
            row.df.to_string(),
            opt_cell(row.loglik),
            opt_cell(row.objective_start),
            opt_cell(row.objective_end),
            opt_cell(row.max_objective_drop),
            row.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;

    let chosen = hp
        .clone()
        .with_lambdas(outcome.chosen.lambda1, outcome.chosen.lambda2, outcome.chosen.lambda3);
    let best_index = grid.iter().position(|g| *g == outcome.chosen).unwrap_or(0);
    let result = ResultFile::new(
        &outcome.best,
        &chosen,
        a.seed.wrapping_add(best_index as u64),
        elapsed,
    );
    write_fit_outputs(&a.out.join("best"), &result)?;
    let mut warnings = result.warnings;
    let failed = outcome.table.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        warnings.push(format!("{failed} grid points failed; see hqc_table.csv"));
    }
    Ok(warnings)
}

pub fn evaluate(a: &EvaluateArgs) -> Result<Vec<String>> {
    let result: ResultFile = read_json(&a.result)?;
    let truth: TruthFile = read_json(&a.truth)?;
    if truth.groups.is_empty() {
        bail!("{}: truth has no groups", a.truth.display());
    }
    let labels = read_labels(&a.labels)?;
    let metrics = evaluate_groups(&result.params()?, &result.assignment, &truth.params()?, &labels)?;
    create_dir(&a.out)?;
    write_json(&a.out.join("metrics.json"), &MetricsFile::from(&metrics))?;
    Ok(Vec::new())
}

/// Metric columns of the benchmark tables, in output order.
pub const METRIC_NAMES: [&str; 9] = [
    "rmse_theta",
    "tpr_theta",
    "fpr_theta",
    "rmse_gamma",
    "tpr_gamma",
    "fpr_gamma",
    "ari",
    "rand_index",
    "k_hat",
];

fn metric_values(m: &Metrics) -> [f64; 9] {
    [
        m.rmse_theta,
        m.tpr_theta,
        m.fpr_theta,
        m.rmse_gamma,
        m.tpr_gamma,
        m.fpr_gamma,
        m.ari,
        m.rand_index,
        m.k_hat as f64,
    ]
}

/// Mean and sample standard deviation of the finite values.
fn mean_sd(values: &[f64]) -> (f64, f64, usize) {
    let xs: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN, 0);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 {
        (xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        f64::NAN
    };
    (mean, sd, n)
}

struct Replicate {
    seed: u64,
    outcome: Result<(GridPoint, Metrics)>,
}

fn run_replicate(
    spec: &SimSpec,
    grid_args: &GridArgs,
    hp: &Hyperparams,
    seed: u64,
) -> Result<(GridPoint, Metrics)> {
    let spec = SimSpec { seed, ..spec.clone() };
    let (truth, ds) = simulate_data(&spec)?;
    let grid = build_grid(grid_args, ds.n(), ds.p(), ds.q())?;
    let outcome = grid_search(&ds, &grid, hp, seed)?;
    let metrics = evaluate_fit(&outcome.best, &truth.params, &truth.labels)?;
    Ok((outcome.chosen, metrics))
}

/// Replicate `r` simulates and tunes with seed `seed + r`, so results do not
/// depend on the number of threads.
pub fn benchmark(a: &BenchmarkArgs) -> Result<Vec<String>> {
    let spec = sim_spec(&a.spec)?;
    let hp = build_hyperparams(&a.model, [None; 3])?;
    if let Some(path) = &a.grid.grid_file {
        read_json::<Vec<GridPoint>>(path)?;
    }
    let reps: Vec<Replicate> = (0..a.replicates)
        .into_par_iter()
        .map(|r| {
            let seed = spec.seed.wrapping_add(r);
            Replicate {
                seed,
                outcome: run_replicate(&spec, &a.grid, &hp, seed),
            }
        })
        .collect();
    create_dir(&a.out)?;

    let mut w = csv::Writer::from_path(a.out.join("replicates.csv"))?;
    let mut header = vec!["replicate", "seed", "status", "lambda1", "lambda2", "lambda3"];
    header.extend(METRIC_NAMES);
    w.write_record(&header)?;
    let mut warnings = Vec::new();
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); METRIC_NAMES.len()];
    for (r, rep) in reps.iter().enumerate() {
        let mut row = vec![r.to_string(), rep.seed.to_string()];
        match &rep.outcome {
            Ok((pt, m)) => {
                row.push("ok".into());
                row.extend([pt.lambda1, pt.lambda2, pt.lambda3].map(|v| v.to_string()));
                for (c, v) in metric_values(m).iter().enumerate() {
                    columns[c].push(*v);
                    row.push(opt_cell(*v));
                }
            }
            Err(e) => {
                row.push(format!("failed: {e:#}"));
                row.extend(std::iter::repeat(String::new()).take(3 + METRIC_NAMES.len()));
                warnings.push(format!("replicate {r} (seed {}) failed: {e:#}", rep.seed));
            }
        }
        w.write_record(&row)?;
    }
    w.flush()?;

    let failed = reps.iter().filter(|r| r.outcome.is_err()).count();
    let mut w = csv::Writer::from_path(a.out.join("summary.csv"))?;
    w.write_record(["metric", "mean", "sd", "cell", "count"])?;
    for (name, col) in METRIC_NAMES.iter().zip(&columns) {
        let (mean, sd, count) = mean_sd(col);
        let cell = if sd.is_finite() {
            format!("{mean:.3}({sd:.3})")
        } else {
            format!("{mean:.3}")
        };
        w.write_record([
            name.to_string(),
            opt_cell(mean),
            opt_cell(sd),
            cell,
            count.to_string(),
        ])?;
    }
    w.write_record([
        "failed_replicates".to_string(),
        failed.to_string(),
        String::new(),
        failed.to_string(),
        reps.len().to_string(),
    ])?;
    w.flush()?;
    Ok(warnings)
}
