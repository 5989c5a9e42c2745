//! Physics models and their residuals: IDM car-following acceleration,
//! the LWR conservation-law residual through the density network and
//! fundamental-diagram learner, genetic-algorithm calibration of IDM,
//! and trajectory rollout for evaluation.

use crate::autodiff::{NodeId, Tape};
use crate::data::CfTrajectory;
use crate::nets::{build_network, Mlp, MlpSpec, NetError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PhysicsError {
    #[error("nonpositive spacing")]
    NonpositiveSpacing,
    #[error("empty calibration data")]
    EmptyData,
    #[error("non-finite residual derivatives")]
    NonFiniteResidual,
    #[error(transparent)]
    Net(#[from] NetError),
}

/// IDM parameters λ = (v0, T0, s0, a_max, b, δ).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdmParams {
    /// Desired speed (m/s).
    pub v0: f64,
    /// Desired time headway (s).
    pub t0: f64,
    /// Minimum spacing (m).
    pub s0: f64,
    /// Maximum acceleration (m/s²).
    pub a_max: f64,
    /// Comfortable deceleration (m/s²).
    pub b: f64,
    /// Free-flow exponent, typically 4.
    pub delta: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        IdmParams { v0: 30.0, t0: 1.5, s0: 2.0, a_max: 1.0, b: 2.0, delta: 4.0 }
    }
}

/// Car-following state: follower speed, approach rate Δv = v_follower −
/// v_leader (positive when closing), and spacing h.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CfState {
    pub v: f64,
    pub dv: f64,
    pub h: f64,
}

/// IDM acceleration:
/// a = a_max·[1 − (v/v0)^δ − (s*/h)²],
/// s* = s0 + v·T0 + v·Δv/(2√(a_max·b)).
pub fn idm_acceleration(state: &CfState, p: &IdmParams) -> Result<f64, PhysicsError> {
    if state.h <= 0.0 {
        return Err(PhysicsError::NonpositiveSpacing);
    }
    let s_star = p.s0 + state.v * p.t0 + state.v * state.dv / (2.0 * (p.a_max * p.b).sqrt());
    Ok(p.a_max * (1.0 - (state.v / p.v0).powf(p.delta) - (s_star / state.h).powi(2)))
}

// ── LWR composition ──────────────────────────────────────────────────

/// The LWR prediction stack: a density network ρ̂(t,x), a
/// fundamental-diagram learner q̂ = N_ω(ρ̂), and the speed head
/// û = q̂ / max(ρ̂, floor). Inputs are affinely normalized before the
/// networks; tangent seeds carry the chain factor so the residual comes
/// out in physical units.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LwrPinn {
    pub punn: Mlp,
    pub fd: Mlp,
    pub input_shift: [f64; 2],
    pub input_scale: [f64; 2],
    pub density_floor: f64,
    /// Constant added to the density head so ρ̂ can start near the data
    /// mean instead of 0, keeping the speed head û = q̂/ρ̂ well scaled
    /// from the first epoch.
    #[serde(default)]
    pub density_offset: f64,
    pub param_len: usize,
}

pub const DENSITY_FLOOR: f64 = 1e-6;

impl LwrPinn {
    /// Builds the two networks into one flat parameter vector with the
    /// given specs and normalization; returns the initial parameters.
    pub fn build(
        punn_spec: MlpSpec,
        fd_spec: MlpSpec,
        seed: u64,
        input_shift: [f64; 2],
        input_scale: [f64; 2],
    ) -> (Self, Vec<f64>) {
        assert_eq!(punn_spec.input_dim, 2);
        assert_eq!(fd_spec.input_dim, 1);
        let (punn, punn_params) = build_network(&punn_spec, "punn", 0, seed);
        let (fd, fd_params) = build_network(&fd_spec, "fd", punn_spec.param_count(), seed ^ 0x9e37_79b9);
        let mut theta = punn_params.values;
        theta.extend(fd_params.values);
        let param_len = theta.len();
        // temper the density output layer so ρ̂ starts close to the
        // offset: the speed head divides by ρ̂, and an initial density
        // crossing zero blows up the data loss
        let (woff, _, i, o) = *punn.layer_offsets().last().expect("at least one layer");
        for w in &mut theta[woff..woff + i * o] {
            *w *= 0.2;
        }
        let model = LwrPinn {
            punn,
            fd,
            input_shift,
            input_scale,
            density_floor: DENSITY_FLOOR,
            density_offset: 0.0,
            param_len,
        };
        (model, theta)
    }

    /// Full-scale networks: PUNN 2→1 with 8x20 hidden, FD learner
    /// 1→1 with 2x20 hidden.
    pub fn full_sized(seed: u64, input_shift: [f64; 2], input_scale: [f64; 2]) -> (Self, Vec<f64>) {
        Self::build(
            MlpSpec::new(2, 1, 8, 20),
            MlpSpec::new(1, 1, 2, 20),
            seed,
            input_shift,
            input_scale,
        )
    }

    pub fn normalize(&self, t: f64, x: f64) -> [f64; 2] {
        [
            (t - self.input_shift[0]) / self.input_scale[0],
            (x - self.input_shift[1]) / self.input_scale[1],
        ]
    }

    pub fn density(&self, theta: &[f64], t: f64, x: f64) -> Result<f64, PhysicsError> {
        let n = self.normalize(t, x);
        Ok(self.punn.forward(theta, &n)?[0] + self.density_offset)
    }

    /// Forwards the density network on the tape and applies the
    /// constant output offset.
    pub fn density_on_tape(
        &self,
        tape: &mut Tape,
        theta: &[f64],
        xin: NodeId,
        batch: usize,
    ) -> NodeId {
        let raw = self.punn.forward_on_tape(tape, theta, xin);
        if self.density_offset == 0.0 {
            return raw;
        }
        let c = tape.constant(&vec![self.density_offset; batch], 1, batch);
        tape.add(raw, c).expect("matching shapes")
    }

    pub fn flow(&self, theta: &[f64], t: f64, x: f64) -> Result<f64, PhysicsError> {
        let rho = self.density(theta, t, x)?;
        Ok(self.fd.forward(theta, &[rho])?[0])
    }

    pub fn speed(&self, theta: &[f64], t: f64, x: f64) -> Result<f64, PhysicsError> {
        let rho = self.density(theta, t, x)?;
        let q = self.fd.forward(theta, &[rho])?[0];
        Ok(q / rho.max(self.density_floor))
    }

    /// Records the batched residual f̂ = ∂ρ̂/∂t + ∂q̂/∂x on a tape with
    /// two tangent seeds. `points` are physical (t, x) pairs.
    pub fn residual_on_tape(
        &self,
        tape: &mut Tape,
        theta: &[f64],
        points: &[(f64, f64)],
    ) -> Result<NodeId, PhysicsError> {
        assert_eq!(tape.n_tangents(), 2);
        let batch = points.len();
        let mut primal = Vec::with_capacity(2 * batch);
        let mut seed_t = vec![0.0; 2 * batch];
        let mut seed_x = vec![0.0; 2 * batch];
        for (s, (t, x)) in points.iter().enumerate() {
            let n = self.normalize(*t, *x);
            primal.extend_from_slice(&n);
            // d(normalized input)/d(physical coordinate)
            seed_t[2 * s] = 1.0 / self.input_scale[0];
            seed_x[2 * s + 1] = 1.0 / self.input_scale[1];
        }
        let xin = tape
            .input_with_tangents(&primal, &[&seed_t, &seed_x], 2, batch)
            .expect("two seeds on a k=2 tape");
        let rho = self.density_on_tape(tape, theta, xin, batch);
        let q = self.fd.forward_on_tape(tape, theta, rho);
        let drho_dt = tape.tangent(rho, 0).expect("seed 0");
        let dq_dx = tape.tangent(q, 1).expect("seed 1");
        let resid = tape.add(drho_dt, dq_dx).expect("matching shapes");
        if tape.value(resid).iter().any(|v| !v.is_finite()) {
            return Err(PhysicsError::NonFiniteResidual);
        }
        Ok(resid)
    }

    /// Single-point residual value.
    pub fn residual(&self, theta: &[f64], t: f64, x: f64) -> Result<f64, PhysicsError> {
        let mut tape = Tape::new(self.param_len, 2);
        let node = self.residual_on_tape(&mut tape, theta, &[(t, x)])?;
        Ok(tape.jet(node, 0, 0).primal)
    }
}

/// The car-following prediction stack: a PUNN mapping the state
/// (v, Δv, h) to acceleration, with affine input normalization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CfPinn {
    pub punn: Mlp,
    pub input_shift: [f64; 3],
    pub input_scale: [f64; 3],
    pub param_len: usize,
}

impl CfPinn {
    pub fn build(
        spec: MlpSpec,
        seed: u64,
        input_shift: [f64; 3],
        input_scale: [f64; 3],
    ) -> (Self, Vec<f64>) {
        assert_eq!(spec.input_dim, 3);
        let (punn, params) = build_network(&spec, "cf_punn", 0, seed);
        let param_len = params.values.len();
        (CfPinn { punn, input_shift, input_scale, param_len }, params.values)
    }

    /// Full-scale network: 3→1 with 3x60 hidden.
    pub fn full_sized(seed: u64, input_shift: [f64; 3], input_scale: [f64; 3]) -> (Self, Vec<f64>) {
        Self::build(MlpSpec::new(3, 1, 3, 60), seed, input_shift, input_scale)
    }

    pub fn normalize(&self, s: &CfState) -> [f64; 3] {
        [
            (s.v - self.input_shift[0]) / self.input_scale[0],
            (s.dv - self.input_shift[1]) / self.input_scale[1],
            (s.h - self.input_shift[2]) / self.input_scale[2],
        ]
    }

    pub fn accel(&self, theta: &[f64], s: &CfState) -> Result<f64, PhysicsError> {
        Ok(self.punn.forward(theta, &self.normalize(s))?[0])
    }

    /// Records the batched acceleration prediction on a tape.
    pub fn accel_on_tape(&self, tape: &mut Tape, theta: &[f64], states: &[CfState]) -> NodeId {
        let mut primal = Vec::with_capacity(3 * states.len());
        for s in states {
            primal.extend_from_slice(&self.normalize(s));
        }
        let xin = tape.input(&primal, 3, states.len());
        self.punn.forward_on_tape(tape, theta, xin)
    }
}

// ── Rollout ──────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Rollout {
    pub t: Vec<f64>,
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    pub collided: bool,
}

/// Steps a follower against a fixed leader trajectory with an arbitrary
/// acceleration model: v ← max(0, v + a·Δt), x ← x + v·Δt. Spacing is
/// recomputed against the leader each step; if it closes to zero the
/// collision flag is set and spacing clamps to 1e-3.
pub fn rollout<F>(
    x0: f64,
    v0: f64,
    leader_x: &[f64],
    leader_v: &[f64],
    dt: f64,
    mut accel: F,
) -> Rollout
where
    F: FnMut(&CfState) -> f64,
{
    assert!(dt > 0.0);
    assert_eq!(leader_x.len(), leader_v.len());
    let n = leader_x.len();
    let mut out = Rollout {
        t: Vec::with_capacity(n),
        x: Vec::with_capacity(n),
        v: Vec::with_capacity(n),
        collided: false,
    };
    let mut x = x0;
    let mut v = v0;
    for i in 0..n {
        out.t.push(i as f64 * dt);
        out.x.push(x);
        out.v.push(v);
        if i + 1 == n {
            break;
        }
        let mut h = leader_x[i] - x;
        if h <= 0.0 {
            out.collided = true;
            h = 1e-3;
        }
        let a = accel(&CfState { v, dv: v - leader_v[i], h });
        v = (v + a * dt).max(0.0);
        x += v * dt;
    }
    out
}

// ── GA calibration ───────────────────────────────────────────────────

/// Per-parameter search bounds (low, high).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdmBounds {
    pub v0: (f64, f64),
    pub t0: (f64, f64),
    pub s0: (f64, f64),
    pub a_max: (f64, f64),
    pub b: (f64, f64),
    pub delta: (f64, f64),
}

impl Default for IdmBounds {
    fn default() -> Self {
        IdmBounds {
            v0: (5.0, 45.0),
            t0: (0.3, 4.0),
            s0: (0.5, 8.0),
            a_max: (0.3, 4.0),
            b: (0.5, 5.0),
            delta: (1.0, 10.0),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaConfig {
    pub population: usize,
    pub generations: usize,
    pub crossover_rate: f64,
    pub mutation_rate: f64,
    /// Mutation standard deviation as a fraction of each bound range.
    pub mutation_scale: f64,
    pub bounds: IdmBounds,
    /// When false, δ stays fixed at 4 and is not searched.
    pub calibrate_delta: bool,
    pub seed: u64,
}

impl Default for GaConfig {
    fn default() -> Self {
        GaConfig {
            population: 100,
            generations: 200,
            crossover_rate: 0.9,
            mutation_rate: 0.15,
            mutation_scale: 0.1,
            bounds: IdmBounds::default(),
            calibrate_delta: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaLog {
    /// Best fitness (acceleration MSE) per generation.
    pub best_fitness: Vec<f64>,
    pub final_fitness: f64,
}

/// Acceleration MSE of an IDM parameterization against observed
/// (state, acceleration) samples. Infeasible states score infinity.
pub fn idm_fitness(samples: &[(CfState, f64)], p: &IdmParams) -> f64 {
    let mut sum = 0.0;
    for (s, a_obs) in samples {
        match idm_acceleration(s, p) {
            Ok(a) if a.is_finite() => sum += (a - a_obs) * (a - a_obs),
            _ => return f64::INFINITY,
        }
    }
    sum / samples.len() as f64
}

fn genome_bounds(cfg: &GaConfig) -> Vec<(f64, f64)> {
    let b = &cfg.bounds;
    let mut out = vec![b.v0, b.t0, b.s0, b.a_max, b.b];
    if cfg.calibrate_delta {
        out.push(b.delta);
    }
    out
}

fn genome_to_params(g: &[f64], cfg: &GaConfig) -> IdmParams {
    IdmParams {
        v0: g[0],
        t0: g[1],
        s0: g[2],
        a_max: g[3],
        b: g[4],
        delta: if cfg.calibrate_delta { g[5] } else { 4.0 },
    }
}

/// Real-coded GA: tournament selection (k = 2), blend crossover,
/// Gaussian mutation, elitism of one. Deterministic for a fixed seed.
pub fn calibrate_idm(
    trajectories: &[CfTrajectory],
    cfg: &GaConfig,
) -> Result<(IdmParams, GaLog), PhysicsError> {
    let samples: Vec<(CfState, f64)> = trajectories
        .iter()
        .flat_map(|t| t.observed_accelerations())
        .collect();
    if samples.is_empty() {
        return Err(PhysicsError::EmptyData);
    }
    assert!(cfg.population >= 2 && cfg.population % 2 == 0);

    let bounds = genome_bounds(cfg);
    let dim = bounds.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    let mut pop: Vec<Vec<f64>> = (0..cfg.population)
        .map(|_| bounds.iter().map(|(lo, hi)| rng.gen_range(*lo..*hi)).collect())
        .collect();
    let mut fit: Vec<f64> = pop
        .iter()
        .map(|g| idm_fitness(&samples, &genome_to_params(g, cfg)))
        .collect();

    let mut log = GaLog { best_fitness: Vec::with_capacity(cfg.generations), final_fitness: 0.0 };

    for _ in 0..cfg.generations {
        let best_idx = argmin(&fit);
        log.best_fitness.push(fit[best_idx]);

        let mut next: Vec<Vec<f64>> = vec![pop[best_idx].clone()];
        while next.len() < cfg.population {
            let p1 = tournament(&fit, &mut rng);
            let p2 = tournament(&fit, &mut rng);
            let (mut c1, mut c2) = (pop[p1].clone(), pop[p2].clone());
            if rng.gen::<f64>() < cfg.crossover_rate {
                for d in 0..dim {
                    // BLX-style blend around the parents
                    let lo = c1[d].min(c2[d]);
                    let hi = c1[d].max(c2[d]);
                    let span = (hi - lo).max(1e-12);
                    let (blo, bhi) = (lo - 0.5 * span, hi + 0.5 * span);
                    c1[d] = rng.gen_range(blo..bhi);
                    c2[d] = rng.gen_range(blo..bhi);
                }
            }
            for c in [&mut c1, &mut c2] {
                for d in 0..dim {
                    if rng.gen::<f64>() < cfg.mutation_rate {
                        let range = bounds[d].1 - bounds[d].0;
                        c[d] += normal.sample(&mut rng) * cfg.mutation_scale * range;
                    }
                    c[d] = c[d].clamp(bounds[d].0, bounds[d].1);
                }
            }
            next.push(c1);
            if next.len() < cfg.population {
                next.push(c2);
            }
        }
        pop = next;
        fit = pop
            .iter()
            .map(|g| idm_fitness(&samples, &genome_to_params(g, cfg)))
            .collect();
    }

    let best_idx = argmin(&fit);
    log.final_fitness = fit[best_idx];
    Ok((genome_to_params(&pop[best_idx], cfg), log))
}

fn argmin(fit: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..fit.len() {
        if fit[i] < fit[best] {
            best = i;
        }
    }
    best
}

fn tournament(fit: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let a = rng.gen_range(0..fit.len());
    let b = rng.gen_range(0..fit.len());
    if fit[a] <= fit[b] {
        a
    } else {
        b
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example_params() -> IdmParams {
        IdmParams { v0: 30.0, t0: 1.5, s0: 2.0, a_max: 1.0, b: 2.0, delta: 4.0 }
    }

    #[test]
    fn idm_equilibrium_at_rest() {
        // v=0, Δv=0, h=s0: s*=s0, the two deficit terms cancel
        let a = idm_acceleration(&CfState { v: 0.0, dv: 0.0, h: 2.0 }, &example_params()).unwrap();
        assert!(a.abs() < 1e-15);
    }

    #[test]
    fn idm_free_flow_limit() {
        let p = example_params();
        let a = idm_acceleration(&CfState { v: p.v0, dv: 0.0, h: 1e12 }, &p).unwrap();
        assert!(a.abs() < 1e-12);
    }

    #[test]
    fn idm_worked_example() {
        // s* = 2 + 15 + 0 = 17, a = 1 − (1/3)⁴ − (17/20)²
        let a = idm_acceleration(&CfState { v: 10.0, dv: 0.0, h: 20.0 }, &example_params()).unwrap();
        assert!((a - 0.265154320987654).abs() < 1e-12);
    }

    #[test]
    fn idm_rejects_nonpositive_spacing() {
        let r = idm_acceleration(&CfState { v: 1.0, dv: 0.0, h: 0.0 }, &example_params());
        assert!(matches!(r, Err(PhysicsError::NonpositiveSpacing)));
    }

    #[test]
    fn idm_monotone_in_v_and_h() {
        let p = example_params();
        let mut prev = f64::INFINITY;
        for i in 0..=20 {
            let v = p.v0 * i as f64 / 20.0;
            let a = idm_acceleration(&CfState { v, dv: 0.0, h: 30.0 }, &p).unwrap();
            assert!(a < prev);
            prev = a;
        }
        let mut prev = f64::NEG_INFINITY;
        for i in 1..=20 {
            let h = 5.0 * i as f64;
            let a = idm_acceleration(&CfState { v: 10.0, dv: 0.0, h }, &p).unwrap();
            assert!(a > prev);
            prev = a;
        }
    }

    #[test]
    fn idm_bounded_by_a_max() {
        let p = example_params();
        for v in [0.0, 5.0, 20.0, 40.0] {
            for dv in [-5.0, 0.0, 5.0] {
                for h in [1.0, 10.0, 100.0] {
                    let a = idm_acceleration(&CfState { v, dv, h }, &p).unwrap();
                    assert!(a <= p.a_max);
                }
            }
        }
    }

    fn tiny_lwr() -> (LwrPinn, Vec<f64>) {
        LwrPinn::build(
            MlpSpec::new(2, 1, 2, 6),
            MlpSpec::new(1, 1, 1, 6),
            11,
            [0.0, 0.0],
            [1.0, 1.0],
        )
    }

    #[test]
    fn residual_zero_for_constant_density() {
        let (model, mut theta) = tiny_lwr();
        theta.fill(0.0); // constant (zero) density field
        let r = model.residual(&theta, 0.3, 0.7).unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn residual_identity_composition() {
        // ρ(t,x) = x and q = ρ: f̂ = 0 + 1 = 1
        let punn = MlpSpec::new(2, 1, 0, 0);
        let fd = MlpSpec::new(1, 1, 0, 0);
        let (model, mut theta) = LwrPinn::build(punn, fd, 1, [0.0, 0.0], [1.0, 1.0]);
        theta.copy_from_slice(&[0.0, 1.0, 0.0, 1.0, 0.0]); // ρ: w=(0,1) b=0; q: w=1 b=0
        let r = model.residual(&theta, 0.2, 0.9).unwrap();
        assert!((r - 1.0).abs() < 1e-15);
    }

    #[test]
    fn residual_matches_stencil_oracle() {
        let (model, theta) = tiny_lwr();
        let h = 1e-4;
        for (t, x) in [(0.1, 0.2), (0.5, -0.3), (0.9, 0.8)] {
            let r = model.residual(&theta, t, x).unwrap();
            let drho_dt =
                (model.density(&theta, t + h, x).unwrap() - model.density(&theta, t - h, x).unwrap())
                    / (2.0 * h);
            let dq_dx =
                (model.flow(&theta, t, x + h).unwrap() - model.flow(&theta, t, x - h).unwrap())
                    / (2.0 * h);
            let oracle = drho_dt + dq_dx;
            assert!((r - oracle).abs() / oracle.abs().max(1e-8) <= 1e-4, "{r} vs {oracle}");
        }
    }

    #[test]
    fn residual_respects_normalization_chain() {
        // with non-trivial input normalization the residual must still
        // be the physical-unit derivative, checked against a stencil on
        // the normalizing model itself
        let (model, theta) = tiny_lwr();
        let scaled = LwrPinn {
            input_shift: [0.5, -1.0],
            input_scale: [2.0, 4.0],
            ..model
        };
        let (t, x) = (0.9, 0.7);
        let r = scaled.residual(&theta, t, x).unwrap();
        let h = 1e-4;
        let drho_dt = (scaled.density(&theta, t + h, x).unwrap()
            - scaled.density(&theta, t - h, x).unwrap())
            / (2.0 * h);
        let dq_dx = (scaled.flow(&theta, t, x + h).unwrap()
            - scaled.flow(&theta, t, x - h).unwrap())
            / (2.0 * h);
        let oracle = drho_dt + dq_dx;
        assert!((r - oracle).abs() / oracle.abs().max(1e-8) <= 1e-4, "{r} vs {oracle}");
    }

    #[test]
    fn cf_pinn_tape_matches_plain() {
        let (model, theta) = CfPinn::build(
            MlpSpec::new(3, 1, 2, 8),
            7,
            [0.0, -5.0, 0.0],
            [30.0, 10.0, 100.0],
        );
        let states = [
            CfState { v: 10.0, dv: 0.0, h: 20.0 },
            CfState { v: 3.0, dv: -2.0, h: 55.0 },
        ];
        let mut tape = Tape::new(model.param_len, 0);
        let out = model.accel_on_tape(&mut tape, &theta, &states);
        for (i, s) in states.iter().enumerate() {
            let plain = model.accel(&theta, s).unwrap();
            assert!((tape.jet(out, i, 0).primal - plain).abs() < 1e-15);
        }
    }

    #[test]
    fn rollout_constant_speed() {
        let leader_x: Vec<f64> = (0..100).map(|i| 1000.0 + i as f64).collect();
        let leader_v = vec![10.0; 100];
        let r = rollout(0.0, 5.0, &leader_x, &leader_v, 0.1, |_| 0.0);
        for (i, x) in r.x.iter().enumerate() {
            assert!((x - 0.5 * i as f64).abs() < 1e-12);
        }
        assert!(!r.collided);
    }

    #[test]
    fn rollout_idm_approaches_desired_speed() {
        let p = example_params();
        let n = 2000;
        let leader_x: Vec<f64> = (0..n).map(|i| 1e7 + i as f64).collect();
        let leader_v = vec![1.0; n];
        let r = rollout(0.0, 2.0, &leader_x, &leader_v, 0.1, |s| {
            idm_acceleration(s, &p).unwrap_or(0.0)
        });
        for w in r.v.windows(2) {
            assert!(w[1] >= w[0] - 1e-12);
            assert!(w[1] < p.v0);
        }
        assert!(*r.v.last().unwrap() > 0.9 * p.v0);
    }

    #[test]
    fn rollout_matches_hand_stepped_trace() {
        let p = example_params();
        let dt = 0.1;
        let leader_x = [50.0, 51.0, 52.0, 53.0];
        let leader_v = [10.0, 10.0, 10.0, 10.0];
        // hand-step the same update rule
        let (mut x, mut v) = (30.0, 10.0);
        let mut expect = vec![(x, v)];
        for i in 0..3 {
            let h = leader_x[i] - x;
            let a = idm_acceleration(&CfState { v, dv: v - leader_v[i], h }, &p).unwrap();
            v = (v + a * dt).max(0.0);
            x += v * dt;
            expect.push((x, v));
        }
        let r = rollout(30.0, 10.0, &leader_x, &leader_v, dt, |s| {
            idm_acceleration(s, &p).unwrap()
        });
        for i in 0..4 {
            assert_eq!(r.x[i], expect[i].0, "bitwise position at step {i}");
            assert_eq!(r.v[i], expect[i].1, "bitwise speed at step {i}");
        }
    }

    #[test]
    fn rollout_halving_dt_converges() {
        let p = example_params();
        let horizon = 10.0;
        let run = |dt: f64| {
            let n = (horizon / dt) as usize + 1;
            let leader_x: Vec<f64> = (0..n).map(|i| 40.0 + 8.0 * i as f64 * dt).collect();
            let leader_v = vec![8.0; n];
            rollout(0.0, 12.0, &leader_x, &leader_v, dt, |s| {
                idm_acceleration(s, &p).unwrap()
            })
        };
        let coarse = run(0.1);
        let fine = run(0.05);
        let diff = (coarse.x.last().unwrap() - fine.x.last().unwrap()).abs();
        assert!(diff < 1.0, "O(Δt) gap too large: {diff}");
    }
}
