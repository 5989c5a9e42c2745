//! Gradient combiners producing a common descent direction.
//!
//! Two families: the Frank–Wolfe minimum-norm point of the gradients'
//! convex hull (TMGD), and the three dual-cone rules (center, average,
//! projection). A nonzero combined direction has nonnegative inner
//! product with every objective gradient, so a small step along its
//! negation improves all objectives at once.

use crate::vecmath::{self, VecError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MooError {
    #[error("gradient set needs two objectives for dual-cone rules, got {0}")]
    NotTwoObjectives(usize),
    #[error("empty gradient set")]
    Empty,
    #[error(transparent)]
    Vec(#[from] VecError),
}

/// Per-objective gradients over the full parameter vector.
#[derive(Debug, Clone)]
pub struct GradientSet {
    pub grads: Vec<Vec<f64>>,
    pub labels: Vec<String>,
}

impl GradientSet {
    pub fn new(grads: Vec<Vec<f64>>, labels: Vec<String>) -> Self {
        assert_eq!(grads.len(), labels.len());
        assert!(!grads.is_empty());
        let d = grads[0].len();
        assert!(grads.iter().all(|g| g.len() == d));
        GradientSet { grads, labels }
    }

    pub fn pair(data: Vec<f64>, physics: Vec<f64>) -> Self {
        Self::new(vec![data, physics], vec!["data".into(), "physics".into()])
    }

    pub fn dim(&self) -> usize {
        self.grads[0].len()
    }
}

/// Convex coefficients on the gradient hull.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimplexWeights {
    pub alpha: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DcgdConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Stop when the total gradient norm drops below this.
    pub gradient_threshold: f64,
    /// Stop when the inter-gradient angle exceeds π minus this.
    pub conflict_threshold: f64,
}

impl Default for DcgdConfig {
    fn default() -> Self {
        DcgdConfig {
            learning_rate: 1e-3,
            max_epochs: 10_000,
            gradient_threshold: 1e-8,
            conflict_threshold: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    Stationary,
    GradientVanished,
    ConflictThreshold,
    EpochLimit,
}

/// Result of one combination step.
#[derive(Debug, Clone)]
pub struct CombineOutcome {
    pub direction: Vec<f64>,
    /// Simplex weights; produced by the min-norm path only.
    pub weights: Option<SimplexWeights>,
    pub stationary: bool,
    /// Angle φ between the two objective gradients (NaN when undefined).
    pub angle: f64,
    /// Set when a stop condition fired instead of a step.
    pub stop: Option<StopReason>,
}

impl CombineOutcome {
    fn stopped(reason: StopReason, dim: usize, angle: f64) -> Self {
        CombineOutcome {
            direction: vec![0.0; dim],
            weights: None,
            stationary: true,
            angle,
            stop: Some(reason),
        }
    }
}

pub const DEFAULT_STATIONARITY_TOL: f64 = 1e-8;
pub const DEFAULT_FW_MAX_ITER: usize = 100;

/// Closed-form min-norm point on the segment [g1, g2]:
/// α* = clamp(⟨g2−g1, g2⟩ / ‖g1−g2‖², 0, 1), x = α*·g1 + (1−α*)·g2.
fn min_norm_two(g1: &[f64], g2: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let diff = vecmath::sub(g1, g2);
    let denom = vecmath::dot(&diff, &diff);
    let a = if denom == 0.0 {
        0.5
    } else {
        ((vecmath::dot(g2, g2) - vecmath::dot(g1, g2)) / denom).clamp(0.0, 1.0)
    };
    let mut x = vecmath::scale(g1, a);
    vecmath::axpy(&mut x, 1.0 - a, g2);
    (vec![a, 1.0 - a], x)
}

/// Frank–Wolfe search for the minimum-norm point of the gradient hull.
/// Returns the simplex weights and the point x = Σ αⱼ gⱼ. With exactly
/// two gradients the exact closed form is used; the iterative path
/// handles any count and tracks its best iterate.
pub fn frank_wolfe_min_norm(
    grads: &GradientSet,
    max_iter: usize,
    tol: f64,
) -> (SimplexWeights, Vec<f64>) {
    let n = grads.grads.len();
    if n == 1 {
        return (SimplexWeights { alpha: vec![1.0] }, grads.grads[0].clone());
    }
    if n == 2 {
        let (alpha, x) = min_norm_two(&grads.grads[0], &grads.grads[1]);
        return (SimplexWeights { alpha }, x);
    }

    let m = vecmath::gram_matrix(&grads.grads).expect("nonempty, equal dims");
    let mut alpha = vec![1.0 / n as f64; n];
    let mut best_alpha = alpha.clone();
    let mut best_sq = quad_form(&m, &alpha);

    for _ in 0..max_iter {
        // mv[r] = (Mα)_r; the hull vertex minimizing ⟨x, g_r⟩
        let mv: Vec<f64> = (0..n).map(|r| vecmath::dot(&m[r], &alpha)).collect();
        let r_hat = (0..n)
            .min_by(|a, b| mv[*a].partial_cmp(&mv[*b]).expect("finite gram"))
            .expect("nonempty");
        let xtx = vecmath::dot(&mv, &alpha);
        // 1-D quadratic along the segment toward e_{r̂}:
        // q(γ) = (1−γ)² xᵀx + 2γ(1−γ)(Mα)_r̂ + γ² M_r̂r̂
        let denom = xtx - 2.0 * mv[r_hat] + m[r_hat][r_hat];
        let gamma = if denom <= 0.0 {
            if mv[r_hat] < xtx { 1.0 } else { 0.0 }
        } else {
            ((xtx - mv[r_hat]) / denom).clamp(0.0, 1.0)
        };
        for (i, a) in alpha.iter_mut().enumerate() {
            *a = (1.0 - gamma) * *a + if i == r_hat { gamma } else { 0.0 };
        }
        let sq = quad_form(&m, &alpha);
        if sq < best_sq {
            best_sq = sq;
            best_alpha = alpha.clone();
        }
        // Wolfe's criterion within tol certifies minimality; γ ∼ 0 means
        // no further progress along any vertex.
        if xtx - mv[r_hat] <= tol || gamma <= tol {
            break;
        }
    }

    // The line-search loop has a sublinear rate; a few active-set
    // refinement passes on the identified support push the certificate
    // to machine precision.
    let alpha = refine_min_norm(&m, &best_alpha);
    let x = combine(&grads.grads, &alpha);
    (SimplexWeights { alpha }, x)
}

/// Active-set refinement of the minimum-norm point. Solves the
/// equality-constrained quadratic on the current support, moves the
/// feasible iterate toward it (dropping vertices whose coefficient
/// would go negative), and grows the support with any vertex violating
/// Wolfe's criterion.
fn refine_min_norm(m: &[Vec<f64>], alpha0: &[f64]) -> Vec<f64> {
    let n = alpha0.len();
    let mut alpha = alpha0.to_vec();
    let mut support: Vec<usize> = (0..n).filter(|&i| alpha[i] > 1e-12).collect();
    if support.is_empty() {
        support.push(0);
        alpha[0] = 1.0;
    }

    for _ in 0..4 * n + 16 {
        // inner loop: shrink support until the affine solution is feasible
        let mut beta: Vec<f64> = Vec::new();
        loop {
            beta = match affine_min_norm(m, &support) {
                Some(b) => b,
                None => break, // singular face; keep current iterate
            };
            if beta.iter().all(|&b| b >= -1e-12) {
                break;
            }
            // largest step from alpha toward beta staying feasible
            let mut t = 1.0;
            let mut drop_pos = None;
            for (pos, &i) in support.iter().enumerate() {
                if beta[pos] < 0.0 {
                    let ti = alpha[i] / (alpha[i] - beta[pos]);
                    if ti < t {
                        t = ti;
                        drop_pos = Some(pos);
                    }
                }
            }
            for (pos, &i) in support.iter().enumerate() {
                alpha[i] = (1.0 - t) * alpha[i] + t * beta[pos];
            }
            match drop_pos {
                Some(pos) => {
                    alpha[support[pos]] = 0.0;
                    support.remove(pos);
                }
                None => break,
            }
            if support.len() == 1 {
                alpha[support[0]] = 1.0;
                break;
            }
        }
        if beta_is_feasible(&beta, &support) {
            for a in alpha.iter_mut() {
                *a = 0.0;
            }
            for (pos, &i) in support.iter().enumerate() {
                alpha[i] = beta[pos].max(0.0);
            }
        }
        // Wolfe check: add the worst violating vertex, if any
        let mv: Vec<f64> = (0..n).map(|r| vecmath::dot(&m[r], &alpha)).collect();
        let xtx = vecmath::dot(&mv, &alpha);
        let r_hat = (0..n)
            .min_by(|a, b| mv[*a].partial_cmp(&mv[*b]).expect("finite gram"))
            .expect("nonempty");
        if mv[r_hat] >= xtx - 1e-12 * (1.0 + xtx) {
            break;
        }
        if support.contains(&r_hat) {
            break;
        }
        support.push(r_hat);
    }
    // renormalize against accumulated rounding
    let s: f64 = alpha.iter().sum();
    if s > 0.0 {
        for a in alpha.iter_mut() {
            *a /= s;
        }
    }
    alpha
}

fn beta_is_feasible(beta: &[f64], support: &[usize]) -> bool {
    beta.len() == support.len() && beta.iter().all(|&b| b >= -1e-12)
}

/// Minimizes βᵀ M_S β subject to Σβ = 1 on the given support via the
/// KKT system [2M_S, 1; 1ᵀ, 0]. Returns None when the face is singular.
fn affine_min_norm(m: &[Vec<f64>], support: &[usize]) -> Option<Vec<f64>> {
    let k = support.len();
    if k == 1 {
        return Some(vec![1.0]);
    }
    let dim = k + 1;
    let mut a = vec![vec![0.0; dim + 1]; dim];
    for (r, &i) in support.iter().enumerate() {
        for (c, &jj) in support.iter().enumerate() {
            a[r][c] = 2.0 * m[i][jj];
        }
        a[r][k] = 1.0;
        a[r][dim] = 0.0;
    }
    for c in 0..k {
        a[k][c] = 1.0;
    }
    a[k][dim] = 1.0;
    // Gaussian elimination with partial pivoting
    for col in 0..dim {
        let piv = (col..dim).max_by(|&x, &y| a[x][col].abs().partial_cmp(&a[y][col].abs()).unwrap())?;
        if a[piv][col].abs() < 1e-14 {
            return None;
        }
        a.swap(col, piv);
        for row in 0..dim {
            if row != col {
                let f = a[row][col] / a[col][col];
                for c in col..=dim {
                    a[row][c] -= f * a[col][c];
                }
            }
        }
    }
    Some((0..k).map(|r| a[r][dim] / a[r][r]).collect())
}

fn quad_form(m: &[Vec<f64>], alpha: &[f64]) -> f64 {
    let n = alpha.len();
    let mut q = 0.0;
    for i in 0..n {
        for j in 0..n {
            q += alpha[i] * m[i][j] * alpha[j];
        }
    }
    q
}

fn combine(grads: &[Vec<f64>], alpha: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; grads[0].len()];
    for (g, a) in grads.iter().zip(alpha) {
        vecmath::axpy(&mut x, *a, g);
    }
    x
}

/// Wolfe's criterion slack: min_j (⟨x, gⱼ⟩ − ‖x‖²). Nonnegative (within
/// tolerance) certifies that x is the hull's minimum-norm point.
pub fn wolfe_certificate(x: &[f64], grads: &GradientSet) -> f64 {
    let xx = vecmath::dot(x, x);
    grads
        .grads
        .iter()
        .map(|g| vecmath::dot(x, g) - xx)
        .fold(f64::INFINITY, f64::min)
}

/// Membership in the dual cone of the two objective gradients:
/// ⟨v, g_b⟩ ≥ 0 and ⟨v, g_r⟩ ≥ 0.
pub fn dual_cone_contains(v: &[f64], grads: &GradientSet) -> Result<bool, MooError> {
    if grads.grads.len() != 2 {
        return Err(MooError::NotTwoObjectives(grads.grads.len()));
    }
    Ok(grads.grads.iter().all(|g| vecmath::dot(v, g) >= 0.0))
}

/// Common stop handling for the dual-cone rules. Returns the total
/// gradient and angle when the step should proceed.
fn dcgd_prologue(
    grads: &GradientSet,
    cfg: &DcgdConfig,
) -> Result<Result<(Vec<f64>, f64), CombineOutcome>, MooError> {
    if grads.grads.len() != 2 {
        return Err(MooError::NotTwoObjectives(grads.grads.len()));
    }
    let dim = grads.dim();
    let gb = &grads.grads[0];
    let gr = &grads.grads[1];
    let total = vecmath::add(gb, gr);
    if vecmath::norm(gb) == 0.0 || vecmath::norm(gr) == 0.0 {
        return Ok(Err(CombineOutcome::stopped(StopReason::GradientVanished, dim, f64::NAN)));
    }
    let phi = vecmath::angle_between(gb, gr).expect("nonzero norms checked");
    if std::f64::consts::PI - cfg.conflict_threshold < phi {
        return Ok(Err(CombineOutcome::stopped(StopReason::ConflictThreshold, dim, phi)));
    }
    if vecmath::norm(&total) < cfg.gradient_threshold {
        return Ok(Err(CombineOutcome::stopped(StopReason::GradientVanished, dim, phi)));
    }
    Ok(Ok((total, phi)))
}

/// Center rule: project the total gradient onto the bisector
/// g_c = g_b/‖g_b‖ + g_r/‖g_r‖.
pub fn dcgd_center(grads: &GradientSet, cfg: &DcgdConfig) -> Result<CombineOutcome, MooError> {
    let (total, phi) = match dcgd_prologue(grads, cfg)? {
        Ok(v) => v,
        Err(out) => return Ok(out),
    };
    let gb = &grads.grads[0];
    let gr = &grads.grads[1];
    let mut gc = vecmath::scale(gb, 1.0 / vecmath::norm(gb));
    vecmath::axpy(&mut gc, 1.0 / vecmath::norm(gr), gr);
    // φ < π guarantees g_c ≠ 0
    let direction = vecmath::project_onto(&total, &gc)?;
    Ok(CombineOutcome { direction, weights: None, stationary: false, angle: phi, stop: None })
}

/// Average rule: total gradient if already in the dual cone, otherwise
/// the mean of its two orthogonal-complement projections.
pub fn dcgd_average(grads: &GradientSet, cfg: &DcgdConfig) -> Result<CombineOutcome, MooError> {
    let (total, phi) = match dcgd_prologue(grads, cfg)? {
        Ok(v) => v,
        Err(out) => return Ok(out),
    };
    let direction = if dual_cone_contains(&total, grads)? {
        total
    } else {
        let gb = &grads.grads[0];
        let gr = &grads.grads[1];
        let pr = vecmath::project_onto_complement(&total, gr)?;
        let pb = vecmath::project_onto_complement(&total, gb)?;
        let mut d = vecmath::scale(&pr, 0.5);
        vecmath::axpy(&mut d, 0.5, &pb);
        d
    };
    Ok(CombineOutcome { direction, weights: None, stationary: false, angle: phi, stop: None })
}

/// Projection rule: drop the component conflicting with whichever
/// objective gradient the total gradient opposes.
pub fn dcgd_projection(grads: &GradientSet, cfg: &DcgdConfig) -> Result<CombineOutcome, MooError> {
    let (total, phi) = match dcgd_prologue(grads, cfg)? {
        Ok(v) => v,
        Err(out) => return Ok(out),
    };
    let gb = &grads.grads[0];
    let gr = &grads.grads[1];
    let direction = if dual_cone_contains(&total, grads)? {
        total
    } else if vecmath::dot(&total, gr) < 0.0 {
        vecmath::project_onto_complement(&total, gr)?
    } else {
        vecmath::project_onto_complement(&total, gb)?
    };
    Ok(CombineOutcome { direction, weights: None, stationary: false, angle: phi, stop: None })
}

/// Min-norm combination step for TMGD training.
pub fn tmgd_combine(grads: &GradientSet, cfg: &DcgdConfig) -> Result<CombineOutcome, MooError> {
    let dim = grads.dim();
    let angle = if grads.grads.len() == 2 {
        vecmath::angle_between(&grads.grads[0], &grads.grads[1]).unwrap_or(f64::NAN)
    } else {
        f64::NAN
    };
    if grads.grads.iter().all(|g| vecmath::norm(g) < cfg.gradient_threshold) {
        return Ok(CombineOutcome::stopped(StopReason::GradientVanished, dim, angle));
    }
    let (weights, x) = frank_wolfe_min_norm(grads, DEFAULT_FW_MAX_ITER, DEFAULT_STATIONARITY_TOL);
    if vecmath::norm(&x) <= DEFAULT_STATIONARITY_TOL {
        let mut out = CombineOutcome::stopped(StopReason::Stationary, dim, angle);
        out.weights = Some(weights);
        return Ok(out);
    }
    Ok(CombineOutcome { direction: x, weights: Some(weights), stationary: false, angle, stop: None })
}

/// Brute-force min-norm over a simplex grid. Exhaustive verification
/// oracle for the Frank–Wolfe solver; supports 2 or 3 objectives.
pub fn brute_force_min_norm(grads: &[Vec<f64>], step: f64) -> f64 {
    let n = grads.len();
    let m = (1.0 / step).round() as usize;
    let mut best = f64::INFINITY;
    match n {
        2 => {
            for i in 0..=m {
                let a = i as f64 * step;
                let x = combine(grads, &[a, 1.0 - a]);
                best = best.min(vecmath::dot(&x, &x));
            }
        }
        3 => {
            for i in 0..=m {
                let a = i as f64 * step;
                for jj in 0..=(m - i) {
                    let b = jj as f64 * step;
                    let x = combine(grads, &[a, b, 1.0 - a - b]);
                    best = best.min(vecmath::dot(&x, &x));
                }
            }
        }
        _ => panic!("oracle supports 2-3 objectives"),
    }
    best.sqrt()
}

/// Pareto stationarity: the hull's min-norm point has norm ≤ tol, or
/// every gradient has norm ≤ tol.
pub fn stationarity_check(grads: &GradientSet, tol: f64) -> bool {
    if grads.grads.iter().all(|g| vecmath::norm(g) <= tol) {
        return true;
    }
    let (_, x) = frank_wolfe_min_norm(grads, DEFAULT_FW_MAX_ITER, tol.min(DEFAULT_STATIONARITY_TOL));
    vecmath::norm(&x) <= tol
}
