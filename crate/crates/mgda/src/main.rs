//! Batch command-line interface: calibration, training, evaluation,
//! scalarization sweeps, method comparisons, synthetic data generation,
//! and a brute-force solver self-check.
//!
//! Exit codes: 0 success, 1 validation error, 2 numerical failure.

use clap::{Parser, Subcommand};
use mgda::config::ExperimentConfig;
use mgda::data::{generate_synthetic_cf, generate_synthetic_macroscopic, write_macroscopic, write_trajectories};
use mgda::losses::LossWeights;
use mgda::moo::{brute_force_min_norm, frank_wolfe_min_norm, wolfe_certificate, GradientSet};
use mgda::physics::calibrate_idm;
use mgda::pipeline::{
    evaluate_checkpoint, load_metric_rows, load_task_data, relative_improvement, run_dir,
    run_training, write_improvement_csv, write_run_artifacts, PipelineError, TaskData,
};
use mgda::train::{sweep_scalarization, Checkpoint, Method, TrainError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "mgda", about = "Multi-objective training for physics-informed traffic models")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Calibrate IDM parameters with the genetic algorithm and write them as JSON.
    Calibrate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train one method/seed and write the run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's method (scalarized, tmgd, dcgd_center, dcgd_avg, dcgd_proj).
        #[arg(long)]
        method: Option<String>,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Override scalarization weights with (alpha, 1 - alpha).
        #[arg(long)]
        alpha: Option<f64>,
        /// Override the epoch budget.
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Evaluate a checkpoint (or every run under a directory) on the config's test split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// checkpoint.json file, a run directory, or a directory of runs.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Sweep scalarization weights over an alpha grid and write a table CSV.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9])]
        alphas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0u64, 1, 2])]
        seeds: Vec<u64>,
        /// Metric to aggregate (defaults to rmse_v for car-following, err_u otherwise).
        #[arg(long)]
        metric: Option<String>,
    },
    /// Compare methods: train all of them, or run pure arithmetic on a metrics CSV.
    Compare {
        /// Train all five methods across seeds and compare test metrics.
        #[arg(long, conflicts_with = "metrics_csv")]
        config: Option<PathBuf>,
        /// Skip training: read method,metric,value rows and compute improvements.
        #[arg(long)]
        metrics_csv: Option<PathBuf>,
        #[arg(long, default_value = "scalarized")]
        baseline: String,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0u64, 1, 2])]
        seeds: Vec<u64>,
        /// Output CSV for the improvement table.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate synthetic data from the config's synthetic block and write CSVs.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Check the min-norm solver against a brute-force simplex grid on random instances.
    Oracle {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-3)]
        grid_step: f64,
    },
}

fn parse_method(s: &str) -> Result<Method, PipelineError> {
    Method::ALL
        .into_iter()
        .find(|m| m.name() == s)
        .ok_or_else(|| PipelineError::Invalid(format!("unknown method '{s}'")))
}

fn mean_std(vals: &[f64]) -> (f64, f64) {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn cmd_calibrate(config: &Path) -> Result<(), PipelineError> {
    let cfg = ExperimentConfig::load(config)?;
    let data = load_task_data(&cfg)?;
    let TaskData::Cf { train, .. } = &data else {
        return Err(PipelineError::Invalid("calibrate needs task = \"carfollowing\"".into()));
    };
    let ga = cfg.ga.clone().unwrap_or_default();
    let (params, log) = calibrate_idm(train, &ga)?;
    let dir = cfg.output_dir.join("calibration");
    cfg.echo_into(&dir)?;
    let body = serde_json::json!({ "params": params, "ga_log": log });
    std::fs::write(
        dir.join("idm.json"),
        serde_json::to_string_pretty(&body).map_err(TrainError::from)?,
    )?;
    println!(
        "calibrated: v0={} t0={} s0={} a_max={} b={} delta={} (final fitness {:.6e})",
        params.v0, params.t0, params.s0, params.a_max, params.b, params.delta, log.final_fitness
    );
    println!("wrote {}", dir.join("idm.json").display());
    Ok(())
}

fn cmd_train(
    config: &Path,
    method: Option<&str>,
    seed: Option<u64>,
    output_dir: Option<PathBuf>,
    alpha: Option<f64>,
    max_epochs: Option<usize>,
) -> Result<(), PipelineError> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(dir) = output_dir {
        cfg.output_dir = dir;
    }
    if let Some(a) = alpha {
        cfg.train.weights = Some(LossWeights::convex(a));
    }
    if let Some(e) = max_epochs {
        cfg.train.max_epochs = e;
    }
    let method = match method {
        Some(s) => parse_method(s)?,
        None => cfg.train.method,
    };
    let seed = seed.unwrap_or(cfg.train.seed);
    let data = load_task_data(&cfg)?;
    let out = run_training(&cfg, &data, method, seed)?;
    let dir = run_dir(&cfg, method, seed);
    write_run_artifacts(&dir, &cfg, &out)?;
    print!("{} seed {}: stop={:?} epoch={}", method.name(), seed, out.log.stop, out.log.stop_epoch);
    for (k, v) in &out.metrics {
        print!(" {k}={v:.6}");
    }
    println!();
    println!("wrote {}", dir.display());
    Ok(())
}

fn find_checkpoints(path: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let direct = path.join("checkpoint.json");
    if direct.is_file() {
        return Ok(vec![direct]);
    }
    let mut found = Vec::new();
    for entry in std::fs::read_dir(path)? {
        let candidate = entry?.path().join("checkpoint.json");
        if candidate.is_file() {
            found.push(candidate);
        }
    }
    found.sort();
    if found.is_empty() {
        return Err(PipelineError::Invalid(format!("no checkpoint.json under {}", path.display())));
    }
    Ok(found)
}

fn cmd_eval(config: &Path, checkpoint: &Path) -> Result<(), PipelineError> {
    let cfg = ExperimentConfig::load(config)?;
    let data = load_task_data(&cfg)?;
    let paths = find_checkpoints(checkpoint)?;
    let mut per_metric: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for p in &paths {
        let ckpt = Checkpoint::load(p)?;
        let metrics = evaluate_checkpoint(&ckpt, &data)?;
        print!("{}:", p.display());
        for (k, v) in &metrics {
            print!(" {k}={v:.6}");
            per_metric.entry(k.clone()).or_default().push(*v);
        }
        println!();
    }
    if paths.len() > 1 {
        print!("mean±std over {} checkpoints:", paths.len());
        for (k, vals) in &per_metric {
            let (m, s) = mean_std(vals);
            print!(" {k}={m:.6}±{s:.6}");
        }
        println!();
    }
    Ok(())
}

fn cmd_sweep(
    config: &Path,
    alphas: &[f64],
    seeds: &[u64],
    metric: Option<&str>,
) -> Result<(), PipelineError> {
    let cfg = ExperimentConfig::load(config)?;
    let data = load_task_data(&cfg)?;
    let metric = metric
        .map(str::to_string)
        .unwrap_or_else(|| match &data {
            TaskData::Cf { .. } => "rmse_v".into(),
            _ => "err_u".into(),
        });
    let rows = sweep_scalarization(
        |a, seed| {
            let mut c = cfg.clone();
            c.train.weights = Some(LossWeights::convex(a));
            let out = run_training(&c, &data, Method::Scalarized, seed)
                .map_err(|e| TrainError::Io(std::io::Error::other(e.to_string())))?;
            out.metrics.get(&metric).copied().ok_or_else(|| {
                TrainError::Io(std::io::Error::other(format!("metric '{metric}' not produced")))
            })
        },
        alphas,
        seeds,
    )?;
    let dir = cfg.output_dir.join("sweep");
    cfg.echo_into(&dir)?;
    let mut csv = format!("alpha,mean_{metric},std_{metric},best\n");
    for r in &rows {
        println!("alpha={:.2} {}={:.6}±{:.6}{}", r.beta, metric, r.mean, r.std, if r.best { "  <- best" } else { "" });
        csv.push_str(&format!("{},{},{},{}\n", r.beta, r.mean, r.std, r.best));
    }
    std::fs::write(dir.join("sweep.csv"), csv)?;
    println!("wrote {}", dir.join("sweep.csv").display());
    Ok(())
}

fn cmd_compare_trained(
    config: &Path,
    baseline: &str,
    seeds: &[u64],
    out: Option<&Path>,
) -> Result<(), PipelineError> {
    let cfg = ExperimentConfig::load(config)?;
    if cfg.train.weights.is_none() {
        return Err(PipelineError::Invalid(
            "compare needs train.weights for the scalarized baseline".into(),
        ));
    }
    parse_method(baseline)?;
    let data = load_task_data(&cfg)?;
    let dir = cfg.output_dir.join("compare");
    cfg.echo_into(&dir)?;
    let mut mean_rows: Vec<(String, String, f64)> = Vec::new();
    let mut raw = String::from("method,seed,metric,value\n");
    for method in Method::ALL {
        let mut per_metric: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for &seed in seeds {
            let run = run_training(&cfg, &data, method, seed)?;
            write_run_artifacts(&run_dir(&cfg, method, seed), &cfg, &run)?;
            for (k, v) in &run.metrics {
                raw.push_str(&format!("{},{},{},{}\n", method.name(), seed, k, v));
                per_metric.entry(k.clone()).or_default().push(*v);
            }
        }
        for (k, vals) in &per_metric {
            let (m, _) = mean_std(vals);
            mean_rows.push((method.name().to_string(), k.clone(), m));
        }
    }
    std::fs::write(dir.join("comparison.csv"), raw)?;
    let improvements = relative_improvement(&mean_rows, baseline)?;
    let out_path = out.map(Path::to_path_buf).unwrap_or_else(|| dir.join("improvements.csv"));
    write_improvement_csv(&out_path, &improvements)?;
    for r in &improvements {
        println!("{} {}: {:.6} ({:+.4}% vs {})", r.method, r.metric, r.value, r.improvement_pct, baseline);
    }
    println!("wrote {} and {}", dir.join("comparison.csv").display(), out_path.display());
    Ok(())
}

fn cmd_compare_csv(metrics_csv: &Path, baseline: &str, out: Option<&Path>) -> Result<(), PipelineError> {
    let rows = load_metric_rows(metrics_csv)?;
    let improvements = relative_improvement(&rows, baseline)?;
    for r in &improvements {
        println!("{},{},{:.4}%", r.method, r.metric, r.improvement_pct);
    }
    if let Some(path) = out {
        write_improvement_csv(path, &improvements)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_simulate(config: &Path, out_dir: Option<PathBuf>) -> Result<(), PipelineError> {
    let cfg = ExperimentConfig::load(config)?;
    let dir = out_dir.unwrap_or_else(|| cfg.output_dir.join("synthetic"));
    cfg.echo_into(&dir)?;
    let mut wrote_any = false;
    if let Some(syn) = &cfg.data.synthetic_cf {
        let trajectories = generate_synthetic_cf(syn);
        let path = dir.join("trajectories.csv");
        write_trajectories(&path, &trajectories)?;
        println!("wrote {} ({} trajectories)", path.display(), trajectories.len());
        wrote_any = true;
    }
    if let Some(syn) = &cfg.data.synthetic_lwr {
        let dataset = generate_synthetic_macroscopic(syn);
        let path = dir.join("macroscopic.csv");
        write_macroscopic(&path, &dataset)?;
        println!("wrote {} ({} rows)", path.display(), dataset.rows.len());
        wrote_any = true;
    }
    if !wrote_any {
        return Err(PipelineError::Invalid(
            "simulate needs data.synthetic_cf and/or data.synthetic_lwr in the config".into(),
        ));
    }
    Ok(())
}

fn cmd_oracle(instances: usize, seed: u64, grid_step: f64) -> Result<(), PipelineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_dev = 0.0f64;
    let mut worst_cert = f64::INFINITY;
    for i in 0..instances {
        let n = if i % 2 == 0 { 2 } else { 3 };
        let dim = rng.gen_range(2..=10);
        let grads: Vec<Vec<f64>> =
            (0..n).map(|_| (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let set = GradientSet::new(grads.clone(), (0..n).map(|j| format!("g{j}")).collect());
        let (_, x) = frank_wolfe_min_norm(&set, 100, 1e-10);
        let solver_norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let grid_norm = brute_force_min_norm(&grads, grid_step);
        max_dev = max_dev.max((solver_norm - grid_norm).abs());
        if solver_norm > 1e-8 {
            worst_cert = worst_cert.min(wolfe_certificate(&x, &set));
        }
    }
    println!("{instances} instances: max |solver - grid| = {max_dev:.3e}, worst certificate = {worst_cert:.3e}");
    // grid resolution bounds how far the two can disagree
    let tol = 2.0 * grid_step + 1e-4;
    if max_dev > tol || worst_cert < -1e-8 {
        return Err(PipelineError::Numerical(format!(
            "min-norm solver check failed: max deviation {max_dev:.3e} (tol {tol:.3e}), worst certificate {worst_cert:.3e}"
        )));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.cmd {
        Cmd::Calibrate { config } => cmd_calibrate(&config),
        Cmd::Train { config, method, seed, output_dir, alpha, max_epochs } => {
            cmd_train(&config, method.as_deref(), seed, output_dir, alpha, max_epochs)
        }
        Cmd::Eval { config, checkpoint } => cmd_eval(&config, &checkpoint),
        Cmd::Sweep { config, alphas, seeds, metric } => {
            cmd_sweep(&config, &alphas, &seeds, metric.as_deref())
        }
        Cmd::Compare { config, metrics_csv, baseline, seeds, out } => match (config, metrics_csv) {
            (Some(cfg), None) => cmd_compare_trained(&cfg, &baseline, &seeds, out.as_deref()),
            (None, Some(csv)) => cmd_compare_csv(&csv, &baseline, out.as_deref()),
            _ => Err(PipelineError::Invalid("compare needs exactly one of --config or --metrics-csv".into())),
        },
        Cmd::Simulate { config, out_dir } => cmd_simulate(&config, out_dir),
        Cmd::Oracle { instances, seed, grid_step } => cmd_oracle(instances, seed, grid_step),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are successes; usage mistakes are validation errors
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
