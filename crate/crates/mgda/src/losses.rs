//! The two bi-objective loss pairs, collocation sampling, input
//! normalization statistics, and evaluation metrics.
//!
//! Each loss is exposed both as a tape-recorded node (so trainers can
//! differentiate it) and as a plain scalar. The data and physics terms
//! are raw objectives; scalarization weights are applied only by the
//! baseline trainer.

use crate::autodiff::{NodeId, Tape};
use crate::data::{CfTrajectory, DomainBounds, MacroscopicDataset};
use crate::physics::{idm_acceleration, CfPinn, CfState, IdmParams, LwrPinn, PhysicsError, Rollout};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("empty observation or collocation set")]
    EmptySet,
    #[error("non-finite value in observation set")]
    NonFinite,
    #[error("series length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
}

/// Scalarization weights for the baseline: total = α·L_data + β·L_physics.
/// The macroscopic task uses equal weights on its two data terms, so a
/// single α covers them; the microscopic convex form is (α, 1−α).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64) -> Self {
        assert!(alpha >= 0.0 && beta >= 0.0);
        LossWeights { alpha, beta }
    }

    /// Microscopic convex combination α·L_data + (1−α)·L_physics.
    pub fn convex(alpha: f64) -> Self {
        assert!((0.0..=1.0).contains(&alpha));
        LossWeights { alpha, beta: 1.0 - alpha }
    }

    pub fn total(&self, data: f64, physics: f64) -> f64 {
        self.alpha * data + self.beta * physics
    }
}

// ── Observation sets ─────────────────────────────────────────────────

/// Macroscopic observations (t, x) → (ρ, u).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MacObservations {
    pub t: Vec<f64>,
    pub x: Vec<f64>,
    pub rho: Vec<f64>,
    pub u: Vec<f64>,
}

impl MacObservations {
    pub fn from_dataset(data: &MacroscopicDataset) -> Self {
        MacObservations {
            t: data.rows.iter().map(|r| r.t).collect(),
            x: data.rows.iter().map(|r| r.x).collect(),
            rho: data.rows.iter().map(|r| r.rho).collect(),
            u: data.rows.iter().map(|r| r.u).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    fn validate(&self) -> Result<(), LossError> {
        if self.is_empty() {
            return Err(LossError::EmptySet);
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if finite(&self.t) && finite(&self.x) && finite(&self.rho) && finite(&self.u) {
            Ok(())
        } else {
            Err(LossError::NonFinite)
        }
    }
}

/// Microscopic observations: state → acceleration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CfObservations {
    pub states: Vec<CfState>,
    pub accel: Vec<f64>,
}

impl CfObservations {
    pub fn from_trajectories(trajectories: &[CfTrajectory]) -> Self {
        let mut states = Vec::new();
        let mut accel = Vec::new();
        for t in trajectories {
            for (s, a) in t.observed_accelerations() {
                states.push(s);
                accel.push(a);
            }
        }
        CfObservations { states, accel }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Deterministically thins to at most `n` evenly spaced samples.
    pub fn subsample(&self, n: usize) -> Self {
        if n == 0 || self.len() <= n {
            return self.clone();
        }
        let stride = self.len() as f64 / n as f64;
        let idx: Vec<usize> = (0..n).map(|i| (i as f64 * stride) as usize).collect();
        CfObservations {
            states: idx.iter().map(|&i| self.states[i]).collect(),
            accel: idx.iter().map(|&i| self.accel[i]).collect(),
        }
    }

    fn validate(&self) -> Result<(), LossError> {
        if self.is_empty() {
            return Err(LossError::EmptySet);
        }
        let ok = self
            .states
            .iter()
            .all(|s| s.v.is_finite() && s.dv.is_finite() && s.h.is_finite())
            && self.accel.iter().all(|a| a.is_finite());
        if ok {
            Ok(())
        } else {
            Err(LossError::NonFinite)
        }
    }
}

// ── Normalization statistics ─────────────────────────────────────────

fn min_max_shift_scale(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let range = hi - lo;
    (lo, if range > 0.0 { range } else { 1.0 })
}

/// Min–max (shift, scale) for macroscopic inputs (t, x), mapping the
/// training domain to [0, 1].
pub fn macroscopic_norm(data: &MacroscopicDataset) -> ([f64; 2], [f64; 2]) {
    let (ts, tr) = min_max_shift_scale(data.rows.iter().map(|r| r.t));
    let (xs, xr) = min_max_shift_scale(data.rows.iter().map(|r| r.x));
    ([ts, xs], [tr, xr])
}

/// Min–max (shift, scale) for microscopic inputs (v, Δv, h).
pub fn cf_norm(states: &[CfState]) -> ([f64; 3], [f64; 3]) {
    let (vs, vr) = min_max_shift_scale(states.iter().map(|s| s.v));
    let (ds, dr) = min_max_shift_scale(states.iter().map(|s| s.dv));
    let (hs, hr) = min_max_shift_scale(states.iter().map(|s| s.h));
    ([vs, ds, hs], [vr, dr, hr])
}

// ── Collocation sampling ─────────────────────────────────────────────

/// Uniform i.i.d. (t, x) collocation points inside the domain box.
pub fn sample_macroscopic_collocation(bounds: &DomainBounds, n: usize, seed: u64) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            (
                rng.gen_range(bounds.t.0..=bounds.t.1),
                rng.gen_range(bounds.x.0..=bounds.x.1),
            )
        })
        .collect()
}

/// Uniform i.i.d. collocation states inside the per-component box
/// spanned by `lo` and `hi`.
pub fn sample_cf_collocation(lo: &CfState, hi: &CfState, n: usize, seed: u64) -> Vec<CfState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| CfState {
            v: rng.gen_range(lo.v..=hi.v),
            dv: rng.gen_range(lo.dv..=hi.dv),
            h: rng.gen_range(lo.h..=hi.h),
        })
        .collect()
}

/// Per-component bounding box of observed states.
pub fn cf_state_bounds(states: &[CfState]) -> (CfState, CfState) {
    let mut lo = CfState { v: f64::INFINITY, dv: f64::INFINITY, h: f64::INFINITY };
    let mut hi = CfState { v: f64::NEG_INFINITY, dv: f64::NEG_INFINITY, h: f64::NEG_INFINITY };
    for s in states {
        lo.v = lo.v.min(s.v);
        lo.dv = lo.dv.min(s.dv);
        lo.h = lo.h.min(s.h);
        hi.v = hi.v.max(s.v);
        hi.dv = hi.dv.max(s.dv);
        hi.h = hi.h.max(s.h);
    }
    (lo, hi)
}

// ── Macroscopic losses ───────────────────────────────────────────────

/// Records MSE(ρ̂, ρ) + MSE(û, u) on the tape, with û = q̂ / max(ρ̂, floor).
pub fn lwr_data_nodes(
    model: &LwrPinn,
    tape: &mut Tape,
    theta: &[f64],
    obs: &MacObservations,
) -> Result<NodeId, LossError> {
    obs.validate()?;
    let n = obs.len();
    let mut primal = Vec::with_capacity(2 * n);
    for i in 0..n {
        primal.extend_from_slice(&model.normalize(obs.t[i], obs.x[i]));
    }
    let xin = tape.input(&primal, 2, n);
    let rho = model.density_on_tape(tape, theta, xin, n);
    let q = model.fd.forward_on_tape(tape, theta, rho);
    let u = tape.div(q, rho, model.density_floor).expect("matching shapes");
    let rho_t = tape.constant(&obs.rho, 1, n);
    let u_t = tape.constant(&obs.u, 1, n);
    let mse_rho = tape.mse(rho, rho_t).expect("matching shapes");
    let mse_u = tape.mse(u, u_t).expect("matching shapes");
    Ok(tape.add(mse_rho, mse_u).expect("scalars"))
}

pub fn lwr_data_loss(model: &LwrPinn, theta: &[f64], obs: &MacObservations) -> Result<f64, LossError> {
    let mut tape = Tape::new(model.param_len, 0);
    let node = lwr_data_nodes(model, &mut tape, theta, obs)?;
    Ok(tape.scalar(node))
}

/// Records the mean squared conservation residual over collocation points.
pub fn lwr_physics_nodes(
    model: &LwrPinn,
    tape: &mut Tape,
    theta: &[f64],
    points: &[(f64, f64)],
) -> Result<NodeId, LossError> {
    if points.is_empty() {
        return Err(LossError::EmptySet);
    }
    let resid = model.residual_on_tape(tape, theta, points)?;
    let sq = tape.square(resid);
    Ok(tape.mean_all(sq))
}

pub fn lwr_physics_loss(model: &LwrPinn, theta: &[f64], points: &[(f64, f64)]) -> Result<f64, LossError> {
    let mut tape = Tape::new(model.param_len, 2);
    let node = lwr_physics_nodes(model, &mut tape, theta, points)?;
    Ok(tape.scalar(node))
}

// ── Microscopic losses ───────────────────────────────────────────────

/// Records MSE of predicted vs observed follower acceleration.
pub fn cf_data_nodes(
    model: &CfPinn,
    tape: &mut Tape,
    theta: &[f64],
    obs: &CfObservations,
) -> Result<NodeId, LossError> {
    obs.validate()?;
    let pred = model.accel_on_tape(tape, theta, &obs.states);
    let target = tape.constant(&obs.accel, 1, obs.len());
    Ok(tape.mse(pred, target).expect("matching shapes"))
}

pub fn cf_data_loss(model: &CfPinn, theta: &[f64], obs: &CfObservations) -> Result<f64, LossError> {
    let mut tape = Tape::new(model.param_len, 0);
    let node = cf_data_nodes(model, &mut tape, theta, obs)?;
    Ok(tape.scalar(node))
}

/// Records MSE of the PUNN against the calibrated IDM over collocation
/// states. The IDM side is a constant given λ̂.
pub fn cf_physics_nodes(
    model: &CfPinn,
    tape: &mut Tape,
    theta: &[f64],
    idm: &IdmParams,
    coll: &[CfState],
) -> Result<NodeId, LossError> {
    if coll.is_empty() {
        return Err(LossError::EmptySet);
    }
    let mut targets = Vec::with_capacity(coll.len());
    for s in coll {
        targets.push(idm_acceleration(s, idm)?);
    }
    let pred = model.accel_on_tape(tape, theta, coll);
    let target = tape.constant(&targets, 1, coll.len());
    Ok(tape.mse(pred, target).expect("matching shapes"))
}

pub fn cf_physics_loss(
    model: &CfPinn,
    theta: &[f64],
    idm: &IdmParams,
    coll: &[CfState],
) -> Result<f64, LossError> {
    let mut tape = Tape::new(model.param_len, 0);
    let node = cf_physics_nodes(model, &mut tape, theta, idm, coll)?;
    Ok(tape.scalar(node))
}

// ── Metrics ──────────────────────────────────────────────────────────

/// L2 relative error Σ|pred−truth|² / Σ|truth|².
pub fn l2_relative_error(pred: &[f64], truth: &[f64]) -> Result<f64, LossError> {
    if pred.len() != truth.len() {
        return Err(LossError::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(LossError::EmptySet);
    }
    let num: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    let den: f64 = truth.iter().map(|t| t * t).sum();
    Ok(num / den)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryQuantity {
    Position,
    Speed,
}

/// Root of the pooled mean squared error across trajectories and steps.
pub fn pooled_rmse(pairs: &[(&[f64], &[f64])]) -> Result<f64, LossError> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, a) in pairs {
        if p.len() != a.len() {
            return Err(LossError::LengthMismatch(p.len(), a.len()));
        }
        for (pi, ai) in p.iter().zip(a.iter()) {
            sum += (pi - ai) * (pi - ai);
            count += 1;
        }
    }
    if count == 0 {
        return Err(LossError::EmptySet);
    }
    Ok((sum / count as f64).sqrt())
}

/// RMSE of simulated vs recorded follower trajectories.
pub fn trajectory_rmse(
    predicted: &[Rollout],
    actual: &[CfTrajectory],
    quantity: TrajectoryQuantity,
) -> Result<f64, LossError> {
    if predicted.len() != actual.len() {
        return Err(LossError::LengthMismatch(predicted.len(), actual.len()));
    }
    let pairs: Vec<(&[f64], &[f64])> = predicted
        .iter()
        .zip(actual)
        .map(|(p, a)| match quantity {
            TrajectoryQuantity::Position => (p.x.as_slice(), a.follower_x.as_slice()),
            TrajectoryQuantity::Speed => (p.v.as_slice(), a.follower_v.as_slice()),
        })
        .collect();
    pooled_rmse(&pairs)
}
