//! Closed-form constants of the convergence and communication analysis.
//!
//! All logarithms are natural. Functions are pure and return [`Error::Domain`] outside
//! their domains.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::ScoreBounds;

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::domain(format!("discount must lie in (0, 1), got {gamma}")));
    }
    Ok(())
}

fn check_nonnegative(what: &str, v: f64) -> Result<()> {
    if !(v >= 0.0 && v.is_finite()) {
        return Err(Error::domain(format!("{what} must be finite and non-negative, got {v}")));
    }
    Ok(())
}

/// Smoothness constant of a learner's objective:
/// `L_m = (F + G^2 + 2 gamma G^2 / (1 - gamma)) gamma l_bar / (1 - gamma)^2`.
pub fn smoothness(f: f64, g: f64, gamma: f64, loss_bound: f64) -> Result<f64> {
    check_gamma(gamma)?;
    check_nonnegative("F", f)?;
    check_nonnegative("G", g)?;
    check_nonnegative("loss bound", loss_bound)?;
    let g2 = g * g;
    Ok((f + g2 + 2.0 * gamma * g2 / (1.0 - gamma)) * gamma * loss_bound / (1.0 - gamma).powi(2))
}

/// Deviation bound of a single-trajectory gradient, `V_m = 2 G l_bar gamma / (1 - gamma)^2`.
pub fn pg_deviation(g: f64, gamma: f64, loss_bound: f64) -> Result<f64> {
    check_gamma(gamma)?;
    check_nonnegative("G", g)?;
    check_nonnegative("loss bound", loss_bound)?;
    Ok(2.0 * g * loss_bound * gamma / (1.0 - gamma).powi(2))
}

/// High-probability squared deviation of an `N`-trajectory batch gradient,
/// `2 ln(2K / delta) V^2 / N`.
pub fn concentration_sigma2(deviation: f64, batch_size: usize, iterations: usize, delta: f64) -> Result<f64> {
    check_nonnegative("deviation", deviation)?;
    if batch_size == 0 || iterations == 0 {
        return Err(Error::domain("batch size and iteration count must be at least 1"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::domain(format!("delta must lie in (0, 1), got {delta}")));
    }
    Ok(2.0 * (2.0 * iterations as f64 / delta).ln() * deviation * deviation / batch_size as f64)
}

/// Bound on the gradient error from truncating at horizon `T`:
/// `sum_m G l_bar_m (T + gamma / (1 - gamma)) gamma^T / (1 - gamma)`.
pub fn truncation_sigma(g: f64, gamma: f64, loss_bounds: &[f64], horizon: usize) -> Result<f64> {
    check_gamma(gamma)?;
    check_nonnegative("G", g)?;
    let mut total = 0.0;
    for &b in loss_bounds {
        check_nonnegative("loss bound", b)?;
        total += b;
    }
    let t = horizon as f64;
    Ok(g * total * (t + gamma / (1.0 - gamma)) * gamma.powi(horizon as i32) / (1.0 - gamma))
}

/// Per-learner and aggregate constants of a problem instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemConstants {
    pub score: ScoreBounds,
    pub gamma: f64,
    pub loss_bounds: Vec<f64>,
    /// `L_m` per learner.
    pub smoothness: Vec<f64>,
    /// `L`, evaluated at `sum_m l_bar_m`.
    pub total_smoothness: f64,
    /// `V_m` per learner.
    pub deviation: Vec<f64>,
}

impl ProblemConstants {
    pub fn new(score: ScoreBounds, gamma: f64, loss_bounds: &[f64]) -> Result<Self> {
        if loss_bounds.is_empty() {
            return Err(Error::domain("at least one learner is required"));
        }
        let smoothness = loss_bounds
            .iter()
            .map(|&b| self::smoothness(score.f, score.g, gamma, b))
            .collect::<Result<Vec<_>>>()?;
        let total_smoothness = self::smoothness(score.f, score.g, gamma, loss_bounds.iter().sum())?;
        let deviation = loss_bounds
            .iter()
            .map(|&b| pg_deviation(score.g, gamma, b))
            .collect::<Result<Vec<_>>>()?;
        Ok(ProblemConstants {
            score,
            gamma,
            loss_bounds: loss_bounds.to_vec(),
            smoothness,
            total_smoothness,
            deviation,
        })
    }

    pub fn learners(&self) -> usize {
        self.loss_bounds.len()
    }

    pub fn truncation_sigma(&self, horizon: usize) -> f64 {
        truncation_sigma(self.score.g, self.gamma, &self.loss_bounds, horizon)
            .expect("validated constants")
    }

    /// Per-learner `sigma^2_{m,N,delta/K}`.
    pub fn sigma2(&self, batch_size: usize, iterations: usize, delta: f64) -> Result<Vec<f64>> {
        self.deviation
            .iter()
            .map(|&v| concentration_sigma2(v, batch_size, iterations, delta))
            .collect()
    }
}

/// Learner hardness, trigger thresholds and their empirical distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardnessProfile {
    /// `H(m) = L_m^2 / L^2`.
    pub hardness: Vec<f64>,
    /// `gamma_d = xi_d / (3 d alpha^2 L^2 M^2)` for `d = 1..=D`.
    pub thresholds: Vec<f64>,
}

impl HardnessProfile {
    /// Fraction of learners with `H(m) <= gamma`.
    pub fn cdf(&self, gamma: f64) -> f64 {
        self.hardness.iter().filter(|&&h| h <= gamma).count() as f64 / self.hardness.len() as f64
    }
}

pub fn hardness_profile(
    learner_smoothness: &[f64],
    total_smoothness: f64,
    xi: &[f64],
    alpha: f64,
) -> Result<HardnessProfile> {
    if !(total_smoothness > 0.0 && total_smoothness.is_finite()) {
        return Err(Error::domain("aggregate smoothness must be positive"));
    }
    if learner_smoothness.is_empty() {
        return Err(Error::domain("at least one learner is required"));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::domain("stepsize must be positive"));
    }
    let l2 = total_smoothness * total_smoothness;
    let m2 = (learner_smoothness.len() as f64).powi(2);
    Ok(HardnessProfile {
        hardness: learner_smoothness.iter().map(|l| l * l / l2).collect(),
        thresholds: xi
            .iter()
            .enumerate()
            .map(|(i, x)| x / (3.0 * (i + 1) as f64 * alpha * alpha * l2 * m2))
            .collect(),
    })
}

/// Predicted communication saving.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommReduction {
    /// `sum_d (1/d - 1/(d+1)) h(gamma_d)`.
    pub delta_c: f64,
    /// `(1 - delta_c) / (1 - 3 sum_d xi_d)`, the bound on the LAPG/PG upload ratio.
    pub ratio_bound: f64,
    /// A hardness value `gamma'` with `gamma' < h(gamma') / ((D + 1) D M^2)`, if any.
    pub strict_improvement_witness: Option<f64>,
}

impl CommReduction {
    pub fn strict_improvement(&self) -> bool {
        self.strict_improvement_witness.is_some()
    }
}

pub fn comm_reduction(profile: &HardnessProfile, xi: &[f64]) -> Result<CommReduction> {
    let depth = profile.thresholds.len();
    let delta_c: f64 = profile
        .thresholds
        .iter()
        .enumerate()
        .map(|(i, &g)| {
            let d = (i + 1) as f64;
            (1.0 / d - 1.0 / (d + 1.0)) * profile.cdf(g)
        })
        .sum();
    let slack = 1.0 - 3.0 * xi.iter().sum::<f64>();
    if slack <= 0.0 {
        return Err(Error::domain("3 * sum(xi) must be below 1"));
    }
    let m2 = (profile.hardness.len() as f64).powi(2);
    let denom = ((depth + 1) * depth) as f64 * m2;
    // h only jumps at hardness values, so checking those points suffices
    let strict_improvement_witness = if depth == 0 {
        None
    } else {
        let mut grid = profile.hardness.clone();
        grid.sort_by(f64::total_cmp);
        grid.into_iter().find(|&g| g < profile.cdf(g) / denom)
    };
    Ok(CommReduction {
        delta_c,
        ratio_bound: (1.0 - delta_c) / slack,
        strict_improvement_witness,
    })
}

/// Largest stepsize `(1 - 3 sum xi) / L` covered by the convergence guarantee.
pub fn max_stepsize(xi: &[f64], total_smoothness: f64) -> Result<f64> {
    if !(total_smoothness > 0.0 && total_smoothness.is_finite()) {
        return Err(Error::domain("aggregate smoothness must be positive"));
    }
    let slack = 1.0 - 3.0 * xi.iter().sum::<f64>();
    if slack <= 0.0 {
        return Err(Error::domain(format!(
            "infeasible trigger weights: 3 * sum(xi) = {} >= 1",
            3.0 * xi.iter().sum::<f64>()
        )));
    }
    Ok(slack / total_smoothness)
}

/// `V^k = gap + (3 / (2 alpha)) sum_{d=1}^{D} (sum_{tau=d}^{D} xi_tau) ||theta^{k+1-d} - theta^{k-d}||^2`.
///
/// `diff_sq[d - 1]` is the squared norm of the `d`-th most recent parameter difference;
/// entries beyond the history contribute zero.
pub fn lyapunov(objective_gap: f64, diff_sq: &[f64], xi: &[f64], alpha: f64) -> f64 {
    let mut tail = 0.0;
    let mut weighted = 0.0;
    for d in (0..xi.len()).rev() {
        tail += xi[d];
        if let Some(v) = diff_sq.get(d) {
            weighted += tail * v;
        }
    }
    objective_gap + 3.0 / (2.0 * alpha) * weighted
}

/// Inputs of [`plan_parameters`] beyond the problem constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanRequest {
    pub epsilon: f64,
    pub delta: f64,
    pub xi: Vec<f64>,
    /// Stepsize; defaults to the largest admissible one.
    pub alpha: Option<f64>,
    /// Bound on the initial Lyapunov value; defaults to `sum_m l_bar_m / (1 - gamma)`.
    pub initial_lyapunov: Option<f64>,
    /// Shares of `epsilon` for the optimization, truncation and sampling terms.
    pub budget: [f64; 3],
}

impl PlanRequest {
    pub fn new(epsilon: f64, delta: f64, xi: Vec<f64>) -> Self {
        PlanRequest {
            epsilon,
            delta,
            xi,
            alpha: None,
            initial_lyapunov: None,
            budget: [1.0 / 3.0; 3],
        }
    }
}

/// Horizon, iteration count and batch size meeting an accuracy target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremPlan {
    pub epsilon: f64,
    pub delta: f64,
    pub horizon: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub alpha: f64,
    pub alpha_max: f64,
    pub initial_lyapunov: f64,
    pub sigma_t: f64,
    /// `sigma^2_{m,N,delta/K}` at the planned `N` and `K`.
    pub sigma2_per_learner: Vec<f64>,
}

const HORIZON_SCAN_LIMIT: usize = 1_000_000;

/// Splits `epsilon` across `2 V^1 / (alpha K) + 3 sigma_T^2 + 21 sigma^2_{N,delta/K}` and returns
/// the smallest `T`, `K`, `N` meeting each share, with
/// `sigma^2_{N,delta/K} = M sum_m sigma^2_{m,N,delta/K}`.
pub fn plan_parameters(constants: &ProblemConstants, request: &PlanRequest) -> Result<TheoremPlan> {
    let PlanRequest { epsilon, delta, .. } = *request;
    if !(epsilon > 0.0 && epsilon < 1.0) || !(delta > 0.0 && delta < 1.0) {
        return Err(Error::domain("epsilon and delta must lie in (0, 1)"));
    }
    if request.budget.iter().any(|b| !(*b > 0.0)) || request.budget.iter().sum::<f64>() > 1.0 + 1e-12 {
        return Err(Error::domain("budget shares must be positive and sum to at most 1"));
    }
    let alpha_max = max_stepsize(&request.xi, constants.total_smoothness)?;
    let alpha = request.alpha.unwrap_or(alpha_max);
    if !(alpha > 0.0) {
        return Err(Error::domain("stepsize must be positive"));
    }
    let v1 = request
        .initial_lyapunov
        .unwrap_or_else(|| constants.loss_bounds.iter().sum::<f64>() / (1.0 - constants.gamma));
    let [b_opt, b_trunc, b_sample] = request.budget;

    let horizon = (1..HORIZON_SCAN_LIMIT)
        .find(|&t| 3.0 * constants.truncation_sigma(t).powi(2) <= b_trunc * epsilon)
        .ok_or_else(|| Error::domain("no horizon meets the truncation budget"))?;

    let iterations = ceil_count(2.0 * v1 / (alpha * b_opt * epsilon))?;

    let m = constants.learners() as f64;
    let dev_sq: f64 = constants.deviation.iter().map(|v| v * v).sum();
    let log_term = (2.0 * iterations as f64 / delta).ln();
    let batch_size = ceil_count(21.0 * m * 2.0 * log_term * dev_sq / (b_sample * epsilon))?;

    Ok(TheoremPlan {
        epsilon,
        delta,
        horizon,
        iterations,
        batch_size,
        alpha,
        alpha_max,
        initial_lyapunov: v1,
        sigma_t: constants.truncation_sigma(horizon),
        sigma2_per_learner: constants.sigma2(batch_size, iterations, delta)?,
    })
}

/// Ceiling that ignores a relative rounding excess of one part in 10^12, floored at 1.
fn ceil_count(x: f64) -> Result<usize> {
    if !x.is_finite() || x > usize::MAX as f64 / 2.0 {
        return Err(Error::domain(format!("count {x} is not representable")));
    }
    Ok(((x * (1.0 - 1e-12)).ceil() as usize).max(1))
}
