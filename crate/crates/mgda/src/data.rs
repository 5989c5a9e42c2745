//! Dataset ingestion, synthetic data generation, and train/test
//! splitting for the macroscopic (LWR) and microscopic (car-following)
//! tasks.
//!
//! CSV loaders take a column-mapping schema so files from external
//! repositories can be adapted without rewriting them. Canonical column
//! names carry units (`t_s`, `x_m`, ...). Rows that fail soft invariants
//! are flagged with their line numbers; hard failures abort the load.

use crate::physics::{idm_acceleration, rollout, CfState, IdmParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column '{0}'")]
    MissingColumn(String),
    #[error("line {line}: non-numeric cell in column '{column}'")]
    BadCell { line: u64, column: String },
    #[error("line {line}: time is not strictly increasing")]
    NonmonotoneTime { line: u64 },
    #[error("line {line}: time step deviates from the trajectory's Δt")]
    InconsistentDt { line: u64 },
    #[error("trajectory '{0}': nonpositive initial spacing")]
    NonpositiveInitialSpacing(String),
    #[error("no data rows")]
    NoData,
}

// ── Macroscopic ──────────────────────────────────────────────────────

/// Maps logical macroscopic fields to CSV column names.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MacroscopicSchema {
    pub sensor_id: Option<String>,
    pub t: String,
    pub x: String,
    pub q: String,
    pub rho: String,
    pub u: String,
}

impl Default for MacroscopicSchema {
    fn default() -> Self {
        MacroscopicSchema {
            sensor_id: Some("sensor_id".into()),
            t: "t_s".into(),
            x: "x_m".into(),
            q: "q_veh_per_s".into(),
            rho: "rho_veh_per_m".into(),
            u: "u_m_per_s".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroscopicRow {
    pub sensor_id: String,
    pub t: f64,
    pub x: f64,
    pub q: f64,
    pub rho: f64,
    pub u: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainBounds {
    pub t: (f64, f64),
    pub x: (f64, f64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MacroscopicDataset {
    pub rows: Vec<MacroscopicRow>,
    /// Indices of rows where u·ρ disagrees with q by more than 5%.
    pub flagged: Vec<usize>,
    pub bounds: DomainBounds,
}

/// Relative tolerance for the u·ρ ≈ q consistency flag.
pub const FLOW_CONSISTENCY_TOL: f64 = 0.05;

impl MacroscopicDataset {
    pub fn from_rows(rows: Vec<MacroscopicRow>) -> Result<Self, DataError> {
        if rows.is_empty() {
            return Err(DataError::NoData);
        }
        let mut flagged = Vec::new();
        for (i, r) in rows.iter().enumerate() {
            let prod = r.u * r.rho;
            if (prod - r.q).abs() > FLOW_CONSISTENCY_TOL * r.q.abs().max(prod.abs()).max(1e-12) {
                flagged.push(i);
            }
        }
        let bounds = DomainBounds {
            t: min_max(rows.iter().map(|r| r.t)),
            x: min_max(rows.iter().map(|r| r.x)),
        };
        Ok(MacroscopicDataset { rows, flagged, bounds })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

fn min_max(it: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in it {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (lo, hi)
}

struct ColumnIndex {
    idx: usize,
    name: String,
}

fn find_column(headers: &csv::StringRecord, name: &str) -> Result<ColumnIndex, DataError> {
    headers
        .iter()
        .position(|h| h == name)
        .map(|idx| ColumnIndex { idx, name: name.to_string() })
        .ok_or_else(|| DataError::MissingColumn(name.to_string()))
}

fn parse_cell(record: &csv::StringRecord, col: &ColumnIndex, line: u64) -> Result<f64, DataError> {
    let raw = record.get(col.idx).unwrap_or("");
    let v: f64 = raw
        .trim()
        .parse()
        .map_err(|_| DataError::BadCell { line, column: col.name.clone() })?;
    if !v.is_finite() {
        return Err(DataError::BadCell { line, column: col.name.clone() });
    }
    Ok(v)
}

pub fn load_macroscopic(path: &Path, schema: &MacroscopicSchema) -> Result<MacroscopicDataset, DataError> {
    load_macroscopic_reader(std::fs::File::open(path)?, schema)
}

pub fn load_macroscopic_reader<R: std::io::Read>(
    r: R,
    schema: &MacroscopicSchema,
) -> Result<MacroscopicDataset, DataError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let headers = reader.headers()?.clone();
    let id_col = match &schema.sensor_id {
        Some(name) => Some(find_column(&headers, name)?),
        None => None,
    };
    let t_col = find_column(&headers, &schema.t)?;
    let x_col = find_column(&headers, &schema.x)?;
    let q_col = find_column(&headers, &schema.q)?;
    let rho_col = find_column(&headers, &schema.rho)?;
    let u_col = find_column(&headers, &schema.u)?;

    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        rows.push(MacroscopicRow {
            sensor_id: id_col
                .as_ref()
                .and_then(|c| record.get(c.idx))
                .unwrap_or("")
                .to_string(),
            t: parse_cell(&record, &t_col, line)?,
            x: parse_cell(&record, &x_col, line)?,
            q: parse_cell(&record, &q_col, line)?,
            rho: parse_cell(&record, &rho_col, line)?,
            u: parse_cell(&record, &u_col, line)?,
        });
    }
    MacroscopicDataset::from_rows(rows)
}

pub fn write_macroscopic(path: &Path, data: &MacroscopicDataset) -> Result<(), DataError> {
    let schema = MacroscopicSchema::default();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        schema.sensor_id.as_deref().unwrap(),
        &schema.t,
        &schema.x,
        &schema.q,
        &schema.rho,
        &schema.u,
    ])?;
    for r in &data.rows {
        w.write_record([
            r.sensor_id.clone(),
            r.t.to_string(),
            r.x.to_string(),
            r.q.to_string(),
            r.rho.to_string(),
            r.u.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

// ── Car-following trajectories ───────────────────────────────────────

/// Maps logical trajectory fields to CSV column names. Spacing, approach
/// rate, and acceleration columns are optional; when present they are
/// cross-checked (spacing, Δv) or used directly (â).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySchema {
    pub trajectory_id: String,
    pub t: String,
    pub leader_x: String,
    pub leader_v: String,
    pub follower_x: String,
    pub follower_v: String,
    pub spacing: Option<String>,
    pub dv: Option<String>,
    pub accel: Option<String>,
}

impl Default for TrajectorySchema {
    fn default() -> Self {
        TrajectorySchema {
            trajectory_id: "trajectory_id".into(),
            t: "t_s".into(),
            leader_x: "leader_x_m".into(),
            leader_v: "leader_v_m_per_s".into(),
            follower_x: "follower_x_m".into(),
            follower_v: "follower_v_m_per_s".into(),
            spacing: None,
            dv: None,
            accel: Some("accel_m_per_s2".into()),
        }
    }
}

/// One leader/follower pair sampled at a constant time step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfTrajectory {
    pub id: String,
    pub dt: f64,
    pub t: Vec<f64>,
    pub leader_x: Vec<f64>,
    pub leader_v: Vec<f64>,
    pub follower_x: Vec<f64>,
    pub follower_v: Vec<f64>,
    /// Follower acceleration when the source provides it; otherwise
    /// derived by central differences of follower speed.
    pub accel: Option<Vec<f64>>,
}

impl CfTrajectory {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Spacing h_i = leader position − follower position.
    pub fn spacing(&self, i: usize) -> f64 {
        self.leader_x[i] - self.follower_x[i]
    }

    /// Approach rate Δv_i = v_follower − v_leader (positive when closing).
    pub fn dv(&self, i: usize) -> f64 {
        self.follower_v[i] - self.leader_v[i]
    }

    pub fn state(&self, i: usize) -> CfState {
        CfState { v: self.follower_v[i], dv: self.dv(i), h: self.spacing(i) }
    }

    /// (state, observed acceleration) pairs for calibration. Uses the
    /// stored acceleration column when available, otherwise central
    /// differences of follower speed over interior steps. Steps with
    /// nonpositive spacing are skipped.
    pub fn observed_accelerations(&self) -> Vec<(CfState, f64)> {
        let n = self.len();
        let mut out = Vec::new();
        match &self.accel {
            Some(a) => {
                for i in 0..n {
                    if self.spacing(i) > 0.0 {
                        out.push((self.state(i), a[i]));
                    }
                }
            }
            None => {
                for i in 1..n.saturating_sub(1) {
                    if self.spacing(i) > 0.0 {
                        let a = (self.follower_v[i + 1] - self.follower_v[i - 1]) / (2.0 * self.dt);
                        out.push((self.state(i), a));
                    }
                }
            }
        }
        out
    }
}

fn validate_trajectory(traj: &CfTrajectory, first_line: u64) -> Result<(), DataError> {
    let n = traj.len();
    if n < 2 {
        return Ok(());
    }
    for i in 1..n {
        let line = first_line + i as u64;
        if traj.t[i] <= traj.t[i - 1] {
            return Err(DataError::NonmonotoneTime { line });
        }
        let step = traj.t[i] - traj.t[i - 1];
        if (step - traj.dt).abs() > 1e-9 * traj.dt.max(1.0) {
            return Err(DataError::InconsistentDt { line });
        }
    }
    if traj.spacing(0) <= 0.0 {
        return Err(DataError::NonpositiveInitialSpacing(traj.id.clone()));
    }
    Ok(())
}

pub fn load_trajectories(path: &Path, schema: &TrajectorySchema) -> Result<Vec<CfTrajectory>, DataError> {
    load_trajectories_reader(std::fs::File::open(path)?, schema)
}

pub fn load_trajectories_reader<R: std::io::Read>(
    r: R,
    schema: &TrajectorySchema,
) -> Result<Vec<CfTrajectory>, DataError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let headers = reader.headers()?.clone();
    let id_col = find_column(&headers, &schema.trajectory_id)?;
    let t_col = find_column(&headers, &schema.t)?;
    let lx_col = find_column(&headers, &schema.leader_x)?;
    let lv_col = find_column(&headers, &schema.leader_v)?;
    let fx_col = find_column(&headers, &schema.follower_x)?;
    let fv_col = find_column(&headers, &schema.follower_v)?;
    let opt = |name: &Option<String>| -> Result<Option<ColumnIndex>, DataError> {
        name.as_ref().map(|n| find_column(&headers, n)).transpose()
    };
    let h_col = opt(&schema.spacing)?;
    let dv_col = opt(&schema.dv)?;
    let a_col = opt(&schema.accel)?;

    struct Raw {
        first_line: u64,
        traj: CfTrajectory,
        stored_h: Vec<f64>,
        stored_dv: Vec<f64>,
    }
    let mut order: Vec<String> = Vec::new();
    let mut by_id: HashMap<String, Raw> = HashMap::new();

    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let id = record.get(id_col.idx).unwrap_or("").to_string();
        let entry = by_id.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            Raw {
                first_line: line,
                traj: CfTrajectory {
                    id,
                    dt: 0.0,
                    t: Vec::new(),
                    leader_x: Vec::new(),
                    leader_v: Vec::new(),
                    follower_x: Vec::new(),
                    follower_v: Vec::new(),
                    accel: a_col.as_ref().map(|_| Vec::new()),
                },
                stored_h: Vec::new(),
                stored_dv: Vec::new(),
            }
        });
        entry.traj.t.push(parse_cell(&record, &t_col, line)?);
        entry.traj.leader_x.push(parse_cell(&record, &lx_col, line)?);
        entry.traj.leader_v.push(parse_cell(&record, &lv_col, line)?);
        entry.traj.follower_x.push(parse_cell(&record, &fx_col, line)?);
        entry.traj.follower_v.push(parse_cell(&record, &fv_col, line)?);
        if let (Some(col), Some(acc)) = (&a_col, entry.traj.accel.as_mut()) {
            acc.push(parse_cell(&record, col, line)?);
        }
        if let Some(col) = &h_col {
            entry.stored_h.push(parse_cell(&record, col, line)?);
        }
        if let Some(col) = &dv_col {
            entry.stored_dv.push(parse_cell(&record, col, line)?);
        }
    }

    if order.is_empty() {
        return Err(DataError::NoData);
    }
    let mut out = Vec::with_capacity(order.len());
    for id in order {
        let mut raw = by_id.remove(&id).expect("grouped above");
        if raw.traj.len() >= 2 {
            raw.traj.dt = raw.traj.t[1] - raw.traj.t[0];
        }
        validate_trajectory(&raw.traj, raw.first_line)?;
        for (i, h) in raw.stored_h.iter().enumerate() {
            if (h - raw.traj.spacing(i)).abs() > 1e-9 {
                return Err(DataError::BadCell {
                    line: raw.first_line + i as u64,
                    column: schema.spacing.clone().unwrap_or_default(),
                });
            }
        }
        for (i, dv) in raw.stored_dv.iter().enumerate() {
            if (dv - raw.traj.dv(i)).abs() > 1e-9 {
                return Err(DataError::BadCell {
                    line: raw.first_line + i as u64,
                    column: schema.dv.clone().unwrap_or_default(),
                });
            }
        }
        out.push(raw.traj);
    }
    Ok(out)
}

pub fn write_trajectories(path: &Path, trajectories: &[CfTrajectory]) -> Result<(), DataError> {
    let schema = TrajectorySchema::default();
    let with_accel = trajectories.iter().all(|t| t.accel.is_some());
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![
        schema.trajectory_id.clone(),
        schema.t.clone(),
        schema.leader_x.clone(),
        schema.leader_v.clone(),
        schema.follower_x.clone(),
        schema.follower_v.clone(),
    ];
    if with_accel {
        header.push(schema.accel.clone().unwrap());
    }
    w.write_record(&header)?;
    for traj in trajectories {
        for i in 0..traj.len() {
            let mut rec = vec![
                traj.id.clone(),
                traj.t[i].to_string(),
                traj.leader_x[i].to_string(),
                traj.leader_v[i].to_string(),
                traj.follower_x[i].to_string(),
                traj.follower_v[i].to_string(),
            ];
            if with_accel {
                rec.push(traj.accel.as_ref().unwrap()[i].to_string());
            }
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

// ── Synthetic generation ─────────────────────────────────────────────

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LeaderProfile {
    Constant { speed: f64 },
    StopAndGo { v_high: f64, v_low: f64, period: f64 },
    Sinusoidal { mean: f64, amplitude: f64, period: f64 },
}

impl LeaderProfile {
    fn speed_at(&self, t: f64) -> f64 {
        match *self {
            LeaderProfile::Constant { speed } => speed,
            LeaderProfile::StopAndGo { v_high, v_low, period } => {
                if (t / period).fract() < 0.5 {
                    v_high
                } else {
                    v_low
                }
            }
            LeaderProfile::Sinusoidal { mean, amplitude, period } => {
                mean + amplitude * (2.0 * std::f64::consts::PI * t / period).sin()
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticCfConfig {
    pub params: IdmParams,
    pub profile: LeaderProfile,
    /// Horizon in seconds per trajectory.
    pub horizon: f64,
    pub dt: f64,
    /// Std-dev of Gaussian noise added to the follower's acceleration.
    pub noise_sigma: f64,
    pub n_trajectories: usize,
    pub seed: u64,
}

impl Default for SyntheticCfConfig {
    fn default() -> Self {
        SyntheticCfConfig {
            params: IdmParams::default(),
            profile: LeaderProfile::Sinusoidal { mean: 12.0, amplitude: 4.0, period: 30.0 },
            horizon: 60.0,
            dt: 0.1,
            noise_sigma: 0.0,
            n_trajectories: 4,
            seed: 0,
        }
    }
}

/// Simulates followers with IDM against the configured leader profile.
/// The trajectory stores the exact (noisy) acceleration applied at each
/// step, so calibration on σ=0 output can reach zero fitness.
pub fn generate_synthetic_cf(cfg: &SyntheticCfConfig) -> Vec<CfTrajectory> {
    let n_steps = (cfg.horizon / cfg.dt).round() as usize + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = Vec::with_capacity(cfg.n_trajectories);
    for k in 0..cfg.n_trajectories {
        // vary initial conditions per trajectory
        let gap0 = rng.gen_range(12.0..35.0);
        let v_l0 = cfg.profile.speed_at(0.0);
        let v0 = (v_l0 + rng.gen_range(-2.0..2.0)).max(0.0);
        let phase = rng.gen_range(0.0..5.0);

        let mut leader_x = Vec::with_capacity(n_steps);
        let mut leader_v = Vec::with_capacity(n_steps);
        let mut lx = gap0;
        for i in 0..n_steps {
            let lv = cfg.profile.speed_at(i as f64 * cfg.dt + phase).max(0.0);
            leader_x.push(lx);
            leader_v.push(lv);
            lx += lv * cfg.dt;
        }

        let mut accel = Vec::with_capacity(n_steps);
        let noisy_idm = |s: &CfState, rng: &mut ChaCha8Rng| {
            let noise = if cfg.noise_sigma > 0.0 {
                cfg.noise_sigma * normal.sample(rng)
            } else {
                0.0
            };
            idm_acceleration(s, &cfg.params).unwrap_or(0.0) + noise
        };
        let r = rollout(0.0, v0, &leader_x, &leader_v, cfg.dt, |s| {
            let a = noisy_idm(s, &mut rng);
            accel.push(a);
            a
        });
        // no step is taken from the final state, but record what the
        // model would do there so the stored column is complete
        let last = n_steps - 1;
        let final_state = CfState {
            v: r.v[last],
            dv: r.v[last] - leader_v[last],
            h: (leader_x[last] - r.x[last]).max(1e-3),
        };
        accel.push(noisy_idm(&final_state, &mut rng));

        out.push(CfTrajectory {
            id: format!("synthetic_{k}"),
            dt: cfg.dt,
            t: r.t,
            leader_x,
            leader_v,
            follower_x: r.x,
            follower_v: r.v,
            accel: Some(accel),
        });
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticLwrConfig {
    /// Jam density of the Greenshields diagram.
    pub rho_max: f64,
    /// Free-flow speed of the Greenshields diagram.
    pub u_free: f64,
    pub n_t: usize,
    pub n_x: usize,
    pub t_range: (f64, f64),
    pub x_range: (f64, f64),
    /// Relative Gaussian noise applied to ρ and u.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticLwrConfig {
    fn default() -> Self {
        SyntheticLwrConfig {
            rho_max: 1.0,
            u_free: 1.0,
            n_t: 20,
            n_x: 20,
            t_range: (0.0, 1.0),
            x_range: (0.0, 1.0),
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

/// Grid samples of the Greenshields rarefaction-fan solution
/// ρ(t,x) = ρ_max/2 · (1 − (x − x_c)/(u_f·(t + t₀))), which satisfies
/// the conservation law exactly inside the fan; u follows the diagram
/// u = u_f(1 − ρ/ρ_max) and q = ρ·u.
pub fn generate_synthetic_macroscopic(cfg: &SyntheticLwrConfig) -> MacroscopicDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let x_c = 0.5 * (cfg.x_range.0 + cfg.x_range.1);
    // t₀ keeps the whole grid strictly inside the fan
    let half_span = 0.5 * (cfg.x_range.1 - cfg.x_range.0);
    let t0 = cfg.t_range.0.max(0.0) + 2.0 * half_span / cfg.u_free;
    let mut rows = Vec::with_capacity(cfg.n_t * cfg.n_x);
    for it in 0..cfg.n_t {
        let ft = if cfg.n_t > 1 { it as f64 / (cfg.n_t - 1) as f64 } else { 0.5 };
        let t = cfg.t_range.0 + ft * (cfg.t_range.1 - cfg.t_range.0);
        for ix in 0..cfg.n_x {
            let fx = if cfg.n_x > 1 { ix as f64 / (cfg.n_x - 1) as f64 } else { 0.5 };
            let x = cfg.x_range.0 + fx * (cfg.x_range.1 - cfg.x_range.0);
            let mut rho = 0.5 * cfg.rho_max * (1.0 - (x - x_c) / (cfg.u_free * (t + t0)));
            let mut u = cfg.u_free * (1.0 - rho / cfg.rho_max);
            if cfg.noise_sigma > 0.0 {
                rho *= 1.0 + cfg.noise_sigma * normal.sample(&mut rng);
                u *= 1.0 + cfg.noise_sigma * normal.sample(&mut rng);
            }
            rho = rho.clamp(0.0, cfg.rho_max);
            u = u.max(0.0);
            rows.push(MacroscopicRow {
                sensor_id: format!("g{it}_{ix}"),
                t,
                x,
                q: rho * u,
                rho,
                u,
            });
        }
    }
    MacroscopicDataset::from_rows(rows).expect("grid is nonempty")
}

// ── Splits ───────────────────────────────────────────────────────────

fn split_indices(n: usize, ratio: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    assert!((0.0..=1.0).contains(&ratio));
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher–Yates
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    let cut = (ratio * n as f64).round() as usize;
    let test = idx.split_off(cut.min(n));
    (idx, test)
}

/// Row-level split of macroscopic data.
pub fn split_macroscopic(
    data: &MacroscopicDataset,
    ratio: f64,
    seed: u64,
) -> (MacroscopicDataset, MacroscopicDataset) {
    let (tr, te) = split_indices(data.rows.len(), ratio, seed);
    let pick = |ids: &[usize]| MacroscopicDataset {
        rows: ids.iter().map(|&i| data.rows[i].clone()).collect(),
        flagged: Vec::new(),
        bounds: data.bounds,
    };
    let mut train = pick(&tr);
    let mut test = pick(&te);
    for part in [&mut train, &mut test] {
        let mut flagged = Vec::new();
        for (i, r) in part.rows.iter().enumerate() {
            let prod = r.u * r.rho;
            if (prod - r.q).abs() > FLOW_CONSISTENCY_TOL * r.q.abs().max(prod.abs()).max(1e-12) {
                flagged.push(i);
            }
        }
        part.flagged = flagged;
    }
    (train, test)
}

/// Trajectory-level split: never separates steps within one trajectory.
pub fn split_trajectories(
    trajectories: &[CfTrajectory],
    ratio: f64,
    seed: u64,
) -> (Vec<CfTrajectory>, Vec<CfTrajectory>) {
    let (tr, te) = split_indices(trajectories.len(), ratio, seed);
    let pick = |ids: &[usize]| ids.iter().map(|&i| trajectories[i].clone()).collect();
    (pick(&tr), pick(&te))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::{calibrate_idm, idm_fitness, GaConfig};
    use std::io::Write as _;

    fn write_temp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn load_macroscopic_well_formed() {
        let f = write_temp(
            "sensor_id,t_s,x_m,q_veh_per_s,rho_veh_per_m,u_m_per_s\n\
             a,0.0,0.0,0.5,0.05,10.0\n\
             a,1.0,100.0,0.6,0.06,10.0\n\
             b,2.0,200.0,0.4,0.08,5.0\n",
        );
        let d = load_macroscopic(f.path(), &MacroscopicSchema::default()).unwrap();
        assert_eq!(d.rows.len(), 3);
        assert!(d.flagged.is_empty());
        assert_eq!(d.bounds.t, (0.0, 2.0));
        assert_eq!(d.bounds.x, (0.0, 200.0));
    }

    #[test]
    fn load_macroscopic_flags_inconsistent_flow() {
        let f = write_temp(
            "sensor_id,t_s,x_m,q_veh_per_s,rho_veh_per_m,u_m_per_s\n\
             a,0.0,0.0,0.5,0.05,10.0\n\
             a,1.0,1.0,0.9,0.05,10.0\n",
        );
        let d = load_macroscopic(f.path(), &MacroscopicSchema::default()).unwrap();
        assert_eq!(d.flagged, vec![1]);
    }

    #[test]
    fn load_macroscopic_empty_errors() {
        let f = write_temp("sensor_id,t_s,x_m,q_veh_per_s,rho_veh_per_m,u_m_per_s\n");
        let e = load_macroscopic(f.path(), &MacroscopicSchema::default());
        assert!(matches!(e, Err(DataError::NoData)));
    }

    #[test]
    fn load_macroscopic_missing_column() {
        let f = write_temp("sensor_id,t_s,x_m,q_veh_per_s,rho_veh_per_m\na,0,0,0,0\n");
        let e = load_macroscopic(f.path(), &MacroscopicSchema::default());
        match e {
            Err(DataError::MissingColumn(c)) => assert_eq!(c, "u_m_per_s"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn load_macroscopic_bad_cell_reports_line() {
        let f = write_temp(
            "sensor_id,t_s,x_m,q_veh_per_s,rho_veh_per_m,u_m_per_s\n\
             a,0.0,0.0,0.5,0.05,10.0\n\
             a,oops,1.0,0.5,0.05,10.0\n",
        );
        match load_macroscopic(f.path(), &MacroscopicSchema::default()) {
            Err(DataError::BadCell { line, column }) => {
                assert_eq!(line, 3);
                assert_eq!(column, "t_s");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn load_macroscopic_custom_schema() {
        let f = write_temp("time,pos,flow,dens,speed\n0.0,0.0,0.5,0.05,10.0\n");
        let schema = MacroscopicSchema {
            sensor_id: None,
            t: "time".into(),
            x: "pos".into(),
            q: "flow".into(),
            rho: "dens".into(),
            u: "speed".into(),
        };
        let d = load_macroscopic(f.path(), &schema).unwrap();
        assert_eq!(d.rows[0].u, 10.0);
    }

    #[test]
    fn trajectories_group_and_validate() {
        let f = write_temp(
            "trajectory_id,t_s,leader_x_m,leader_v_m_per_s,follower_x_m,follower_v_m_per_s\n\
             t0,0.0,20.0,10.0,0.0,9.0\n\
             t0,0.1,21.0,10.0,0.9,9.0\n\
             t1,0.0,30.0,8.0,0.0,8.0\n\
             t1,0.1,30.8,8.0,0.8,8.0\n",
        );
        let schema = TrajectorySchema { accel: None, ..TrajectorySchema::default() };
        let ts = load_trajectories(f.path(), &schema).unwrap();
        assert_eq!(ts.len(), 2);
        assert_eq!(ts[0].id, "t0");
        assert!((ts[0].dt - 0.1).abs() < 1e-12);
        assert_eq!(ts[0].spacing(0), 20.0);
        assert_eq!(ts[0].dv(0), -1.0);
    }

    #[test]
    fn trajectories_reject_nonmonotone_time() {
        let f = write_temp(
            "trajectory_id,t_s,leader_x_m,leader_v_m_per_s,follower_x_m,follower_v_m_per_s\n\
             t0,0.0,20.0,10.0,0.0,9.0\n\
             t0,0.0,21.0,10.0,0.9,9.0\n",
        );
        let schema = TrajectorySchema { accel: None, ..TrajectorySchema::default() };
        match load_trajectories(f.path(), &schema) {
            Err(DataError::NonmonotoneTime { line }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn trajectories_reject_inconsistent_dt() {
        let f = write_temp(
            "trajectory_id,t_s,leader_x_m,leader_v_m_per_s,follower_x_m,follower_v_m_per_s\n\
             t0,0.0,20.0,10.0,0.0,9.0\n\
             t0,0.1,21.0,10.0,0.9,9.0\n\
             t0,0.3,22.0,10.0,1.8,9.0\n",
        );
        let schema = TrajectorySchema { accel: None, ..TrajectorySchema::default() };
        assert!(matches!(
            load_trajectories(f.path(), &schema),
            Err(DataError::InconsistentDt { line: 4 })
        ));
    }

    #[test]
    fn derived_columns_cross_checked() {
        let f = write_temp(
            "trajectory_id,t_s,leader_x_m,leader_v_m_per_s,follower_x_m,follower_v_m_per_s,spacing_m\n\
             t0,0.0,20.0,10.0,0.0,9.0,20.0\n\
             t0,0.1,21.0,10.0,0.9,9.0,19.0\n",
        );
        let schema = TrajectorySchema {
            accel: None,
            spacing: Some("spacing_m".into()),
            ..TrajectorySchema::default()
        };
        match load_trajectories(f.path(), &schema) {
            Err(DataError::BadCell { line, .. }) => assert_eq!(line, 3), // 21.0−0.9 = 20.1 ≠ 19.0
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn macroscopic_roundtrip_bit_exact() {
        let data = generate_synthetic_macroscopic(&SyntheticLwrConfig {
            noise_sigma: 0.02,
            seed: 5,
            ..SyntheticLwrConfig::default()
        });
        let f = tempfile::NamedTempFile::new().unwrap();
        write_macroscopic(f.path(), &data).unwrap();
        let reloaded = load_macroscopic(f.path(), &MacroscopicSchema::default()).unwrap();
        assert_eq!(data.rows, reloaded.rows);
        assert_eq!(data.flagged, reloaded.flagged);
    }

    #[test]
    fn trajectory_roundtrip_bit_exact() {
        let ts = generate_synthetic_cf(&SyntheticCfConfig {
            noise_sigma: 0.05,
            n_trajectories: 2,
            horizon: 5.0,
            seed: 9,
            ..SyntheticCfConfig::default()
        });
        let f = tempfile::NamedTempFile::new().unwrap();
        write_trajectories(f.path(), &ts).unwrap();
        let reloaded = load_trajectories(f.path(), &TrajectorySchema::default()).unwrap();
        assert_eq!(ts, reloaded);
    }

    #[test]
    fn synthetic_cf_constant_leader_reaches_v0() {
        let cfg = SyntheticCfConfig {
            profile: LeaderProfile::Constant { speed: 1e6 }, // leader effectively absent
            horizon: 300.0,
            n_trajectories: 1,
            ..SyntheticCfConfig::default()
        };
        let ts = generate_synthetic_cf(&cfg);
        let v_last = *ts[0].follower_v.last().unwrap();
        assert!((v_last - cfg.params.v0).abs() < 0.05 * cfg.params.v0);
    }

    #[test]
    fn synthetic_cf_deterministic() {
        let cfg = SyntheticCfConfig { noise_sigma: 0.1, horizon: 5.0, ..SyntheticCfConfig::default() };
        assert_eq!(generate_synthetic_cf(&cfg), generate_synthetic_cf(&cfg));
        let other = SyntheticCfConfig { seed: 1, ..cfg };
        assert_ne!(generate_synthetic_cf(&cfg), generate_synthetic_cf(&other));
    }

    #[test]
    fn calibration_recovers_generating_fitness() {
        let truth = IdmParams { v0: 18.0, t0: 1.2, s0: 2.5, a_max: 1.4, b: 2.0, delta: 4.0 };
        let ts = generate_synthetic_cf(&SyntheticCfConfig {
            params: truth,
            horizon: 30.0,
            n_trajectories: 2,
            noise_sigma: 0.0,
            ..SyntheticCfConfig::default()
        });
        let samples: Vec<_> = ts.iter().flat_map(|t| t.observed_accelerations()).collect();
        // stored accelerations: the truth scores exactly zero
        assert!(idm_fitness(&samples, &truth) < 1e-24);
        let cfg = GaConfig { population: 40, generations: 60, seed: 3, ..GaConfig::default() };
        let (_fit_params, log) = calibrate_idm(&ts, &cfg).unwrap();
        assert!(log.final_fitness < 1e-3, "GA fitness {}", log.final_fitness);
    }

    #[test]
    fn synthetic_macroscopic_satisfies_conservation_stencil() {
        // the analytic fan solution should satisfy ∂ρ/∂t + ∂q/∂x = 0
        let cfg = SyntheticLwrConfig::default();
        let x_c = 0.5;
        let t0 = 1.0;
        let rho = |t: f64, x: f64| 0.5 * (1.0 - (x - x_c) / (t + t0));
        let q = |t: f64, x: f64| rho(t, x) * (1.0 - rho(t, x));
        let h = 1e-5;
        for (t, x) in [(0.1, 0.2), (0.5, 0.5), (0.9, 0.8)] {
            let drho_dt = (rho(t + h, x) - rho(t - h, x)) / (2.0 * h);
            let dq_dx = (q(t, x + h) - q(t, x - h)) / (2.0 * h);
            assert!((drho_dt + dq_dx).abs() < 1e-6);
        }
        let d = generate_synthetic_macroscopic(&cfg);
        assert_eq!(d.rows.len(), cfg.n_t * cfg.n_x);
        assert!(d.flagged.is_empty());
        for r in &d.rows {
            assert!((r.u - (1.0 - r.rho)).abs() < 1e-12); // on the diagram
        }
    }

    #[test]
    fn split_properties() {
        let d = generate_synthetic_macroscopic(&SyntheticLwrConfig::default());
        let (train, test) = split_macroscopic(&d, 1.0, 0);
        assert_eq!(train.rows.len(), d.rows.len());
        assert!(test.rows.is_empty());

        let (train, test) = split_macroscopic(&d, 0.8, 0);
        assert!((train.rows.len() as i64 - (0.8 * d.rows.len() as f64) as i64).abs() <= 1);
        assert_eq!(train.rows.len() + test.rows.len(), d.rows.len());
        let (train2, _) = split_macroscopic(&d, 0.8, 0);
        assert_eq!(train.rows, train2.rows);

        let ts = generate_synthetic_cf(&SyntheticCfConfig {
            n_trajectories: 5,
            horizon: 2.0,
            ..SyntheticCfConfig::default()
        });
        let (tr, te) = split_trajectories(&ts, 0.6, 1);
        assert_eq!(tr.len(), 3);
        assert_eq!(te.len(), 2);
        let mut ids: Vec<_> = tr.iter().chain(te.iter()).map(|t| t.id.clone()).collect();
        ids.sort();
        let mut orig: Vec<_> = ts.iter().map(|t| t.id.clone()).collect();
        orig.sort();
        assert_eq!(ids, orig);
    }
}
