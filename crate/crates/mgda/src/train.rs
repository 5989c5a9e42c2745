//! Training orchestration: the scalarized baseline (Adam) and the four
//! multi-gradient trainers, run logging, checkpoints, and the
//! scalarization sweep.

use crate::data::CfTrajectory;
use crate::losses::{
    cf_data_nodes, cf_physics_nodes, lwr_data_nodes, lwr_physics_nodes, CfObservations,
    LossError, LossWeights, MacObservations,
};
use crate::moo::{
    dcgd_average, dcgd_center, dcgd_projection, tmgd_combine, CombineOutcome, DcgdConfig,
    GradientSet, MooError, StopReason,
};
use crate::physics::{CfPinn, CfState, IdmParams, LwrPinn};
use crate::autodiff::Tape;
use crate::vecmath;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at epoch {epoch} (L_data={l_data}, L_physics={l_physics})")]
    NanLoss { epoch: usize, l_data: f64, l_physics: f64 },
    #[error("scalarized method requires loss weights")]
    MissingWeights,
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Moo(#[from] MooError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Scalarized,
    Tmgd,
    DcgdCenter,
    DcgdAvg,
    DcgdProj,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Scalarized,
        Method::Tmgd,
        Method::DcgdCenter,
        Method::DcgdAvg,
        Method::DcgdProj,
    ];

    pub const MGDA: [Method; 4] =
        [Method::Tmgd, Method::DcgdCenter, Method::DcgdAvg, Method::DcgdProj];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Scalarized => "scalarized",
            Method::Tmgd => "tmgd",
            Method::DcgdCenter => "dcgd_center",
            Method::DcgdAvg => "dcgd_avg",
            Method::DcgdProj => "dcgd_proj",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub seed: u64,
    /// Scalarization weights; required iff method == scalarized.
    pub weights: Option<LossWeights>,
    pub dcgd: DcgdConfig,
    /// Record a RunLog row every this many epochs (the final epoch is
    /// always recorded).
    pub eval_every: usize,
    /// Adam for the scalarized baseline; plain gradient descent when
    /// false. MGDA methods always use plain steps.
    pub adam: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Scalarized,
            learning_rate: 1e-3,
            max_epochs: 10_000,
            seed: 0,
            weights: Some(LossWeights::new(1.0, 1.0)),
            dcgd: DcgdConfig::default(),
            eval_every: 100,
            adam: true,
        }
    }
}

/// One epoch's gradient evaluation for both objectives.
pub struct ObjectiveEval {
    pub l_data: f64,
    pub l_physics: f64,
    pub g_data: Vec<f64>,
    pub g_physics: Vec<f64>,
}

/// A task exposes its two objectives with full-parameter gradients.
pub trait BiObjectiveTask {
    fn param_len(&self) -> usize;
    fn evaluate(&self, theta: &[f64]) -> Result<ObjectiveEval, TrainError>;
}

// ── Task implementations ─────────────────────────────────────────────

pub struct LwrTask {
    pub model: LwrPinn,
    pub obs: MacObservations,
    pub collocation: Vec<(f64, f64)>,
}

impl BiObjectiveTask for LwrTask {
    fn param_len(&self) -> usize {
        self.model.param_len
    }

    fn evaluate(&self, theta: &[f64]) -> Result<ObjectiveEval, TrainError> {
        let mut dtape = Tape::new(self.model.param_len, 0);
        let dnode = lwr_data_nodes(&self.model, &mut dtape, theta, &self.obs)?;
        let mut ptape = Tape::new(self.model.param_len, 2);
        let pnode = lwr_physics_nodes(&self.model, &mut ptape, theta, &self.collocation)?;
        Ok(ObjectiveEval {
            l_data: dtape.scalar(dnode),
            l_physics: ptape.scalar(pnode),
            g_data: dtape.backward(dnode).expect("scalar output"),
            g_physics: ptape.backward(pnode).expect("scalar output"),
        })
    }
}

pub struct CfTask {
    pub model: CfPinn,
    pub obs: CfObservations,
    pub idm: IdmParams,
    pub collocation: Vec<CfState>,
}

impl BiObjectiveTask for CfTask {
    fn param_len(&self) -> usize {
        self.model.param_len
    }

    fn evaluate(&self, theta: &[f64]) -> Result<ObjectiveEval, TrainError> {
        let mut dtape = Tape::new(self.model.param_len, 0);
        let dnode = cf_data_nodes(&self.model, &mut dtape, theta, &self.obs)?;
        let mut ptape = Tape::new(self.model.param_len, 0);
        let pnode = cf_physics_nodes(&self.model, &mut ptape, theta, &self.idm, &self.collocation)?;
        Ok(ObjectiveEval {
            l_data: dtape.scalar(dnode),
            l_physics: ptape.scalar(pnode),
            g_data: dtape.backward(dnode).expect("scalar output"),
            g_physics: ptape.backward(pnode).expect("scalar output"),
        })
    }
}

/// L₁ = ‖θ−a‖², L₂ = ‖θ−b‖²: the Pareto set is the segment [a, b].
pub struct ToyQuadratics {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl BiObjectiveTask for ToyQuadratics {
    fn param_len(&self) -> usize {
        self.a.len()
    }

    fn evaluate(&self, theta: &[f64]) -> Result<ObjectiveEval, TrainError> {
        let da = vecmath::sub(theta, &self.a);
        let db = vecmath::sub(theta, &self.b);
        Ok(ObjectiveEval {
            l_data: vecmath::dot(&da, &da),
            l_physics: vecmath::dot(&db, &db),
            g_data: vecmath::scale(&da, 2.0),
            g_physics: vecmath::scale(&db, 2.0),
        })
    }
}

// ── Run logging ──────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_data: f64,
    pub l_physics: f64,
    pub g_data_norm: f64,
    pub g_physics_norm: f64,
    /// Angle between the two objective gradients (NaN when undefined).
    pub phi: f64,
    pub direction_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<EpochRecord>,
    pub stop: StopReason,
    /// Epoch at which training stopped.
    pub stop_epoch: usize,
}

impl RunLog {
    pub const CSV_HEADER: &'static str =
        "epoch,l_data,l_physics,g_data_norm,g_physics_norm,phi,direction_norm";

    pub fn to_csv_string(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.epoch, r.l_data, r.l_physics, r.g_data_norm, r.g_physics_norm, r.phi,
                r.direction_norm
            ));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), TrainError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv_string().as_bytes())?;
        Ok(())
    }
}

/// JSON summary written next to the RunLog CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub stop: StopReason,
    pub stop_epoch: usize,
    pub final_l_data: f64,
    pub final_l_physics: f64,
    pub metrics: std::collections::BTreeMap<String, f64>,
    pub config: TrainConfig,
    /// FNV-1a hash of the resolved config JSON, for provenance checks.
    pub config_hash: String,
}

/// FNV-1a 64-bit content hash.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn make_summary(
    cfg: &TrainConfig,
    log: &RunLog,
    metrics: std::collections::BTreeMap<String, f64>,
) -> Result<RunSummary, TrainError> {
    let last = log.records.last();
    let config_json = serde_json::to_vec(cfg)?;
    Ok(RunSummary {
        method: cfg.method,
        stop: log.stop,
        stop_epoch: log.stop_epoch,
        final_l_data: last.map(|r| r.l_data).unwrap_or(f64::NAN),
        final_l_physics: last.map(|r| r.l_physics).unwrap_or(f64::NAN),
        metrics,
        config: cfg.clone(),
        config_hash: format!("{:016x}", fnv1a(&config_json)),
    })
}

// ── Checkpoints ──────────────────────────────────────────────────────

/// Trained model state; JSON round-trips bit-exactly (shortest-roundtrip
/// float formatting).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub task: String,
    pub seed: u64,
    pub lwr: Option<LwrPinn>,
    pub cf: Option<CfPinn>,
    pub theta: Vec<f64>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let mut f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let f = std::fs::File::open(path)?;
        Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, TrainError> {
        Ok(serde_json::from_slice(bytes)?)
    }
}

// ── Optimizers ───────────────────────────────────────────────────────

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    fn new(dim: usize) -> Self {
        Adam { m: vec![0.0; dim], v: vec![0.0; dim], t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..theta.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            theta[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

// ── Trainers ─────────────────────────────────────────────────────────

fn check_finite(ev: &ObjectiveEval, epoch: usize) -> Result<(), TrainError> {
    if !ev.l_data.is_finite() || !ev.l_physics.is_finite() {
        return Err(TrainError::NanLoss { epoch, l_data: ev.l_data, l_physics: ev.l_physics });
    }
    Ok(())
}

fn record(log: &mut RunLog, epoch: usize, ev: &ObjectiveEval, direction: &[f64]) {
    let gb = vecmath::norm(&ev.g_data);
    let gr = vecmath::norm(&ev.g_physics);
    let phi = vecmath::angle_between(&ev.g_data, &ev.g_physics).unwrap_or(f64::NAN);
    log.records.push(EpochRecord {
        epoch,
        l_data: ev.l_data,
        l_physics: ev.l_physics,
        g_data_norm: gb,
        g_physics_norm: gr,
        phi,
        direction_norm: vecmath::norm(direction),
    });
}

fn should_record(epoch: usize, cfg: &TrainConfig) -> bool {
    cfg.eval_every == 0 || epoch % cfg.eval_every == 0
}

/// Scalarized baseline: minimizes α·L_data + β·L_physics with Adam
/// (plain descent when `cfg.adam` is false).
pub fn train_scalarized(
    task: &dyn BiObjectiveTask,
    theta0: &[f64],
    cfg: &TrainConfig,
) -> Result<(Vec<f64>, RunLog), TrainError> {
    let w = cfg.weights.ok_or(TrainError::MissingWeights)?;
    let mut theta = theta0.to_vec();
    let mut adam = Adam::new(theta.len());
    let mut log = RunLog { records: Vec::new(), stop: StopReason::EpochLimit, stop_epoch: 0 };
    for epoch in 0..cfg.max_epochs {
        let ev = task.evaluate(&theta)?;
        check_finite(&ev, epoch)?;
        let mut grad = vecmath::scale(&ev.g_data, w.alpha);
        vecmath::axpy(&mut grad, w.beta, &ev.g_physics);
        if should_record(epoch, cfg) || epoch + 1 == cfg.max_epochs {
            record(&mut log, epoch, &ev, &grad);
        }
        if cfg.adam {
            adam.step(&mut theta, &grad, cfg.learning_rate);
        } else {
            vecmath::axpy(&mut theta, -cfg.learning_rate, &grad);
        }
        log.stop_epoch = epoch + 1;
    }
    Ok((theta, log))
}

fn combine(method: Method, grads: &GradientSet, dcgd: &DcgdConfig) -> Result<CombineOutcome, MooError> {
    match method {
        Method::Tmgd => tmgd_combine(grads, dcgd),
        Method::DcgdCenter => dcgd_center(grads, dcgd),
        Method::DcgdAvg => dcgd_average(grads, dcgd),
        Method::DcgdProj => dcgd_projection(grads, dcgd),
        Method::Scalarized => unreachable!("scalarized has its own trainer"),
    }
}

/// Multi-gradient trainers: per epoch, combine the two full-parameter
/// objective gradients and take a plain descent step along the result.
pub fn train_mgda(
    task: &dyn BiObjectiveTask,
    theta0: &[f64],
    cfg: &TrainConfig,
) -> Result<(Vec<f64>, RunLog), TrainError> {
    assert_ne!(cfg.method, Method::Scalarized);
    let mut theta = theta0.to_vec();
    let mut log = RunLog { records: Vec::new(), stop: StopReason::EpochLimit, stop_epoch: 0 };
    for epoch in 0..cfg.max_epochs {
        let ev = task.evaluate(&theta)?;
        check_finite(&ev, epoch)?;
        let grads = GradientSet::pair(ev.g_data.clone(), ev.g_physics.clone());
        let out = combine(cfg.method, &grads, &cfg.dcgd)?;
        if should_record(epoch, cfg) || epoch + 1 == cfg.max_epochs || out.stop.is_some() {
            record(&mut log, epoch, &ev, &out.direction);
        }
        if let Some(reason) = out.stop {
            log.stop = reason;
            log.stop_epoch = epoch;
            return Ok((theta, log));
        }
        // dual-cone guarantee: the step must not increase either loss to
        // first order. Skipped in the near-exact-conflict regime, where
        // the combined direction is dominated by cancellation noise.
        if !(out.angle > std::f64::consts::PI - 1e-3) {
            let scale = vecmath::norm(&out.direction)
                * vecmath::norm(&ev.g_data).max(vecmath::norm(&ev.g_physics));
            debug_assert!(
                vecmath::dot(&out.direction, &ev.g_data) >= -1e-9 * scale.max(1.0),
                "epoch {epoch} {:?}: <d,g_data> = {} (scale {scale})",
                cfg.method,
                vecmath::dot(&out.direction, &ev.g_data)
            );
            debug_assert!(
                vecmath::dot(&out.direction, &ev.g_physics) >= -1e-9 * scale.max(1.0),
                "epoch {epoch} {:?}: <d,g_physics> = {} (scale {scale})",
                cfg.method,
                vecmath::dot(&out.direction, &ev.g_physics)
            );
        }
        vecmath::axpy(&mut theta, -cfg.learning_rate, &out.direction);
        log.stop_epoch = epoch + 1;
    }
    Ok((theta, log))
}

/// Dispatches on `cfg.method`.
pub fn train(
    task: &dyn BiObjectiveTask,
    theta0: &[f64],
    cfg: &TrainConfig,
) -> Result<(Vec<f64>, RunLog), TrainError> {
    match cfg.method {
        Method::Scalarized => train_scalarized(task, theta0, cfg),
        _ => train_mgda(task, theta0, cfg),
    }
}

// ── Scalarization sweep ──────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub beta: f64,
    pub mean: f64,
    pub std: f64,
    pub best: bool,
}

/// Runs `run(beta, seed)` over the grid × seeds and reports mean ± std
/// of the returned metric per β, marking the best (lowest-mean) row.
pub fn sweep_scalarization<F>(
    mut run: F,
    beta_grid: &[f64],
    seeds: &[u64],
) -> Result<Vec<SweepRow>, TrainError>
where
    F: FnMut(f64, u64) -> Result<f64, TrainError>,
{
    let mut rows = Vec::with_capacity(beta_grid.len());
    for &beta in beta_grid {
        let vals: Vec<f64> = seeds
            .iter()
            .map(|&s| run(beta, s))
            .collect::<Result<_, _>>()?;
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
        rows.push(SweepRow { beta, mean, std: var.sqrt(), best: false });
    }
    if let Some(best) = (0..rows.len()).min_by(|&i, &j| {
        rows[i].mean.partial_cmp(&rows[j].mean).unwrap_or(std::cmp::Ordering::Equal)
    }) {
        rows[best].best = true;
    }
    Ok(rows)
}

/// Simulates trained car-following models over test trajectories.
pub fn simulate_cf(
    model: &CfPinn,
    theta: &[f64],
    trajectories: &[CfTrajectory],
) -> Vec<crate::physics::Rollout> {
    trajectories
        .iter()
        .map(|t| {
            crate::physics::rollout(
                t.follower_x[0],
                t.follower_v[0],
                &t.leader_x,
                &t.leader_v,
                t.dt,
                |s| model.accel(theta, s).unwrap_or(0.0),
            )
        })
        .collect()
}
