//! Wires configs to full runs: data preparation, model construction,
//! training, evaluation, and artifact writing. Shared by the CLI
//! subcommands and the integration tests.

use crate::config::{ConfigError, ExperimentConfig, TaskKind};
use crate::data::{
    generate_synthetic_cf, generate_synthetic_macroscopic, load_macroscopic, load_trajectories,
    split_macroscopic, split_trajectories, CfTrajectory, DataError, MacroscopicDataset,
};
use crate::losses::{
    cf_norm, cf_state_bounds, l2_relative_error, macroscopic_norm, sample_cf_collocation,
    sample_macroscopic_collocation, trajectory_rmse, CfObservations, LossError, MacObservations,
    TrajectoryQuantity,
};
use crate::nets::MlpSpec;
use crate::physics::{calibrate_idm, CfPinn, GaLog, IdmParams, LwrPinn, PhysicsError};
use crate::train::{
    make_summary, simulate_cf, train, BiObjectiveTask, CfTask, Checkpoint, LwrTask, Method, RunLog,
    ToyQuadratics, TrainConfig, TrainError,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Invalid(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl PipelineError {
    /// CLI exit code: 1 for validation problems, 2 for numerical ones.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Train(TrainError::NanLoss { .. })
            | PipelineError::Physics(PhysicsError::NonFiniteResidual)
            | PipelineError::Numerical(_) => 2,
            _ => 1,
        }
    }
}

/// Prepared, split data for one task.
pub enum TaskData {
    Lwr {
        train: MacroscopicDataset,
        test: MacroscopicDataset,
    },
    Cf {
        train: Vec<CfTrajectory>,
        test: Vec<CfTrajectory>,
        idm: IdmParams,
        ga_log: Option<GaLog>,
    },
    Toy {
        a: Vec<f64>,
        b: Vec<f64>,
    },
}

/// Loads or generates the dataset, splits it, and (for car-following)
/// resolves the calibrated IDM parameters.
pub fn load_task_data(cfg: &ExperimentConfig) -> Result<TaskData, PipelineError> {
    match cfg.task {
        TaskKind::Lwr => {
            let data = if let Some(path) = &cfg.data.macroscopic_csv {
                let schema = cfg.data.macroscopic_schema.clone().unwrap_or_default();
                load_macroscopic(path, &schema)?
            } else {
                let syn = cfg.data.synthetic_lwr.clone().expect("validated");
                generate_synthetic_macroscopic(&syn)
            };
            let (train, test) = split_macroscopic(&data, cfg.split.ratio, cfg.split.seed);
            Ok(TaskData::Lwr { train, test })
        }
        TaskKind::Carfollowing => {
            let data = if let Some(path) = &cfg.data.trajectories_csv {
                let schema = cfg.data.trajectory_schema.clone().unwrap_or_default();
                load_trajectories(path, &schema)?
            } else {
                let syn = cfg.data.synthetic_cf.clone().expect("validated");
                generate_synthetic_cf(&syn)
            };
            let (train, test) = split_trajectories(&data, cfg.split.ratio, cfg.split.seed);
            let (idm, ga_log) = match cfg.idm {
                Some(p) => (p, None),
                None => {
                    let ga = cfg.ga.clone().unwrap_or_default();
                    let (p, log) = calibrate_idm(&train, &ga)?;
                    (p, Some(log))
                }
            };
            Ok(TaskData::Cf { train, test, idm, ga_log })
        }
        TaskKind::Toy => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.toy.seed);
            let dim = cfg.toy.dim;
            let a: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Ok(TaskData::Toy { a, b })
        }
    }
}

/// Everything one run produces in memory.
pub struct RunOutput {
    pub theta: Vec<f64>,
    pub log: RunLog,
    pub metrics: BTreeMap<String, f64>,
    pub checkpoint: Checkpoint,
    pub train_cfg: TrainConfig,
}

fn lwr_spec(cfg: &ExperimentConfig) -> (MlpSpec, MlpSpec) {
    (
        MlpSpec::new(2, 1, cfg.network.punn_hidden_layers, cfg.network.punn_hidden_width),
        MlpSpec::new(1, 1, cfg.network.fd_hidden_layers, cfg.network.fd_hidden_width),
    )
}

fn cf_spec(cfg: &ExperimentConfig) -> MlpSpec {
    MlpSpec::new(3, 1, cfg.network.punn_hidden_layers, cfg.network.punn_hidden_width)
}

fn subsample_macroscopic(obs: &MacObservations, n: usize) -> MacObservations {
    if n == 0 || obs.len() <= n {
        return obs.clone();
    }
    let stride = obs.len() as f64 / n as f64;
    let idx: Vec<usize> = (0..n).map(|i| (i as f64 * stride) as usize).collect();
    MacObservations {
        t: idx.iter().map(|&i| obs.t[i]).collect(),
        x: idx.iter().map(|&i| obs.x[i]).collect(),
        rho: idx.iter().map(|&i| obs.rho[i]).collect(),
        u: idx.iter().map(|&i| obs.u[i]).collect(),
    }
}

/// LWR metrics: L2 relative errors of density and speed on the test rows.
pub fn eval_lwr(model: &LwrPinn, theta: &[f64], test: &MacroscopicDataset) -> Result<BTreeMap<String, f64>, PipelineError> {
    let mut pred_rho = Vec::with_capacity(test.rows.len());
    let mut pred_u = Vec::with_capacity(test.rows.len());
    let mut truth_rho = Vec::with_capacity(test.rows.len());
    let mut truth_u = Vec::with_capacity(test.rows.len());
    for r in &test.rows {
        pred_rho.push(model.density(theta, r.t, r.x)?);
        pred_u.push(model.speed(theta, r.t, r.x)?);
        truth_rho.push(r.rho);
        truth_u.push(r.u);
    }
    let mut m = BTreeMap::new();
    m.insert("err_rho".into(), l2_relative_error(&pred_rho, &truth_rho)?);
    m.insert("err_u".into(), l2_relative_error(&pred_u, &truth_u)?);
    Ok(m)
}

/// Car-following metrics: pooled position and speed RMSE of simulated
/// followers on the test trajectories.
pub fn eval_cf(model: &CfPinn, theta: &[f64], test: &[CfTrajectory]) -> Result<BTreeMap<String, f64>, PipelineError> {
    let rollouts = simulate_cf(model, theta, test);
    let mut m = BTreeMap::new();
    m.insert("rmse_x".into(), trajectory_rmse(&rollouts, test, TrajectoryQuantity::Position)?);
    m.insert("rmse_v".into(), trajectory_rmse(&rollouts, test, TrajectoryQuantity::Speed)?);
    Ok(m)
}

/// Trains one method/seed pair on prepared data and evaluates it.
pub fn run_training(
    cfg: &ExperimentConfig,
    data: &TaskData,
    method: Method,
    seed: u64,
) -> Result<RunOutput, PipelineError> {
    let mut tcfg = cfg.train.clone();
    tcfg.method = method;
    tcfg.seed = seed;
    if method != Method::Scalarized {
        tcfg.weights = None;
    } else if tcfg.weights.is_none() {
        return Err(PipelineError::Invalid("scalarized method requires train.weights".into()));
    }

    match data {
        TaskData::Lwr { train: tr, test } => {
            let (shift, scale) = macroscopic_norm(tr);
            let (punn_spec, fd_spec) = lwr_spec(cfg);
            let (mut model, theta0) = LwrPinn::build(punn_spec, fd_spec, seed, shift, scale);
            // start the density head at the observed mean so the speed
            // head is well scaled from the first epoch
            model.density_offset =
                tr.rows.iter().map(|r| r.rho).sum::<f64>() / tr.rows.len() as f64;
            let obs = subsample_macroscopic(&MacObservations::from_dataset(tr), cfg.max_observations);
            let collocation = sample_macroscopic_collocation(
                &tr.bounds,
                cfg.collocation.n,
                cfg.collocation.seed.wrapping_add(seed),
            );
            let task = LwrTask { model: model.clone(), obs, collocation };
            let (theta, log) = train(&task, &theta0, &tcfg)?;
            let mut metrics = eval_lwr(&model, &theta, test)?;
            append_final_losses(&task, &theta, &mut metrics)?;
            let checkpoint = Checkpoint {
                task: "lwr".into(),
                seed,
                lwr: Some(model),
                cf: None,
                theta: theta.clone(),
            };
            Ok(RunOutput { theta, log, metrics, checkpoint, train_cfg: tcfg })
        }
        TaskData::Cf { train: tr, test, idm, .. } => {
            let obs = CfObservations::from_trajectories(tr).subsample(cfg.max_observations);
            let (shift, scale) = cf_norm(&obs.states);
            let (model, theta0) = CfPinn::build(cf_spec(cfg), seed, shift, scale);
            let (lo, hi) = cf_state_bounds(&obs.states);
            let collocation = sample_cf_collocation(
                &lo,
                &hi,
                cfg.collocation.n,
                cfg.collocation.seed.wrapping_add(seed),
            );
            let task = CfTask { model: model.clone(), obs, idm: *idm, collocation };
            let (theta, log) = train(&task, &theta0, &tcfg)?;
            let mut metrics = eval_cf(&model, &theta, test)?;
            append_final_losses(&task, &theta, &mut metrics)?;
            let checkpoint = Checkpoint {
                task: "carfollowing".into(),
                seed,
                lwr: None,
                cf: Some(model),
                theta: theta.clone(),
            };
            Ok(RunOutput { theta, log, metrics, checkpoint, train_cfg: tcfg })
        }
        TaskData::Toy { a, b } => {
            let task = ToyQuadratics { a: a.clone(), b: b.clone() };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let theta0: Vec<f64> = (0..a.len()).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let (theta, log) = train(&task, &theta0, &tcfg)?;
            let mut metrics = BTreeMap::new();
            append_final_losses(&task, &theta, &mut metrics)?;
            let checkpoint = Checkpoint {
                task: "toy".into(),
                seed,
                lwr: None,
                cf: None,
                theta: theta.clone(),
            };
            Ok(RunOutput { theta, log, metrics, checkpoint, train_cfg: tcfg })
        }
    }
}

fn append_final_losses(
    task: &dyn BiObjectiveTask,
    theta: &[f64],
    metrics: &mut BTreeMap<String, f64>,
) -> Result<(), PipelineError> {
    let ev = task.evaluate(theta)?;
    metrics.insert("final_l_data".into(), ev.l_data);
    metrics.insert("final_l_physics".into(), ev.l_physics);
    Ok(())
}

/// `output_dir/<task>_<method>_seed<seed>`.
pub fn run_dir(cfg: &ExperimentConfig, method: Method, seed: u64) -> PathBuf {
    cfg.output_dir
        .join(format!("{}_{}_seed{}", cfg.task.name(), method.name(), seed))
}

/// Writes the run directory: config echo, RunLog CSV, summary JSON,
/// checkpoint JSON.
pub fn write_run_artifacts(
    dir: &Path,
    cfg: &ExperimentConfig,
    out: &RunOutput,
) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir)?;
    cfg.echo_into(dir)?;
    out.log.write_csv(&dir.join("runlog.csv"))?;
    let summary = make_summary(&out.train_cfg, &out.log, out.metrics.clone())?;
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary).map_err(TrainError::from)?)?;
    out.checkpoint.save(&dir.join("checkpoint.json"))?;
    Ok(())
}

/// Evaluates a saved checkpoint against the config's test split.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    data: &TaskData,
) -> Result<BTreeMap<String, f64>, PipelineError> {
    match (data, &ckpt.lwr, &ckpt.cf) {
        (TaskData::Lwr { test, .. }, Some(model), _) => eval_lwr(model, &ckpt.theta, test),
        (TaskData::Cf { test, .. }, _, Some(model)) => eval_cf(model, &ckpt.theta, test),
        _ => Err(PipelineError::Invalid(
            "checkpoint task does not match the config's task".into(),
        )),
    }
}

// ── Comparison arithmetic ────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct ImprovementRow {
    pub method: String,
    pub metric: String,
    pub value: f64,
    pub baseline_value: f64,
    /// (baseline − method) / baseline, as a percentage.
    pub improvement_pct: f64,
}

/// Relative improvement of each method over the named baseline, per
/// metric. Input rows are (method, metric, value).
pub fn relative_improvement(
    rows: &[(String, String, f64)],
    baseline: &str,
) -> Result<Vec<ImprovementRow>, PipelineError> {
    let mut baseline_vals: BTreeMap<&str, f64> = BTreeMap::new();
    for (m, metric, v) in rows {
        if m == baseline {
            baseline_vals.insert(metric.as_str(), *v);
        }
    }
    if baseline_vals.is_empty() {
        return Err(PipelineError::Invalid(format!("no rows for baseline method '{baseline}'")));
    }
    let mut out = Vec::new();
    for (m, metric, v) in rows {
        let b = *baseline_vals.get(metric.as_str()).ok_or_else(|| {
            PipelineError::Invalid(format!("baseline has no value for metric '{metric}'"))
        })?;
        out.push(ImprovementRow {
            method: m.clone(),
            metric: metric.clone(),
            value: *v,
            baseline_value: b,
            improvement_pct: (b - *v) / b * 100.0,
        });
    }
    Ok(out)
}

/// Loads a (method, metric, value) CSV for the pure-arithmetic compare
/// path.
pub fn load_metric_rows(path: &Path) -> Result<Vec<(String, String, f64)>, PipelineError> {
    let f = std::fs::File::open(path).map_err(DataError::from)?;
    load_metric_rows_reader(f)
}

pub fn load_metric_rows_reader<R: std::io::Read>(
    r: R,
) -> Result<Vec<(String, String, f64)>, PipelineError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let headers = reader.headers().map_err(DataError::from)?.clone();
    let col = |name: &str| -> Result<usize, PipelineError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| PipelineError::Data(DataError::MissingColumn(name.into())))
    };
    let (mi, ki, vi) = (col("method")?, col("metric")?, col("value")?);
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(DataError::from)?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let v: f64 = record
            .get(vi)
            .unwrap_or("")
            .parse()
            .map_err(|_| PipelineError::Data(DataError::BadCell { line, column: "value".into() }))?;
        rows.push((
            record.get(mi).unwrap_or("").to_string(),
            record.get(ki).unwrap_or("").to_string(),
            v,
        ));
    }
    if rows.is_empty() {
        return Err(PipelineError::Data(DataError::NoData));
    }
    Ok(rows)
}

pub fn write_improvement_csv(path: &Path, rows: &[ImprovementRow]) -> Result<(), PipelineError> {
    let mut s = String::from("method,metric,value,baseline_value,improvement_pct\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{:.4}\n",
            r.method, r.metric, r.value, r.baseline_value, r.improvement_pct
        ));
    }
    std::fs::write(path, s)?;
    Ok(())
}
