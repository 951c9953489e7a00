//! G(PO)MDP gradient estimates and exact finite-horizon gradients for tabular MDPs.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envs::{TabularMdp, Task, Trajectory};
use crate::error::{Error, Result};
use crate::params::ParamVector;
use crate::policy::{Policy, PolicyBundle};
use crate::seed::StreamId;
use crate::space::{Action, State};

/// A learner's mini-batch gradient and what it was computed from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    pub learner_id: usize,
    pub iteration: usize,
    pub grad: ParamVector,
    pub batch_size: usize,
    pub horizon: usize,
    /// Trace of the sample covariance of the per-trajectory gradients, divided by the
    /// batch size. `None` when the batch has a single trajectory.
    pub variance_estimate: Option<f64>,
    /// Batch mean of the discounted loss `sum_t gamma^t l_m(s_t, a_t)`.
    pub objective_estimate: f64,
}

/// Truncated objective and its exact gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct ExactGradient {
    pub grad: ParamVector,
    pub objective: f64,
}

/// Batch size, horizon and discount of a gradient estimate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub batch_size: usize,
    pub horizon: usize,
    pub gamma: f64,
}

/// `sum_t (sum_{tau <= t} score_tau) gamma^t l_m(s_t, a_t)` over one trajectory, with a running
/// score prefix sum. `gamma^0 = 1` also for `gamma = 0`.
pub fn gpomdp_single(
    trajectory: &Trajectory,
    bundle: &PolicyBundle,
    theta: &[f64],
    loss_index: usize,
    gamma: f64,
) -> Result<ParamVector> {
    let d = bundle.dim();
    let mut prefix = vec![0.0; d];
    let mut score = vec![0.0; d];
    let mut out = vec![0.0; d];
    let mut discount = 1.0;
    for step in &trajectory.steps {
        let loss = *step
            .losses
            .get(loss_index)
            .ok_or_else(|| Error::config(format!("trajectory has no loss {loss_index}")))?;
        bundle.score_into(theta, &step.state, &step.actions, &mut score)?;
        let weight = discount * loss;
        for ((o, p), s) in out.iter_mut().zip(prefix.iter_mut()).zip(&score) {
            *p += s;
            *o += weight * *p;
        }
        discount *= gamma;
    }
    Ok(ParamVector::from(out))
}

/// `sum_t gamma^t l_m(s_t, a_t)`.
pub fn discounted_loss(trajectory: &Trajectory, loss_index: usize, gamma: f64) -> f64 {
    let mut discount = 1.0;
    let mut total = 0.0;
    for step in &trajectory.steps {
        total += discount * step.losses[loss_index];
        discount *= gamma;
    }
    total
}

/// Mini-batch G(PO)MDP estimate from `batch_size` fresh rollouts. Trajectory `n` uses the
/// stream `(master, learner_id, iteration, n)`; rollouts run in parallel and are reduced in
/// ascending `n`.
pub fn gpomdp_batch(
    task: &Task,
    bundle: &PolicyBundle,
    theta: &[f64],
    learner_id: usize,
    iteration: usize,
    spec: &BatchSpec,
    master: u64,
) -> Result<GradientReport> {
    if spec.batch_size == 0 {
        return Err(Error::config("batch size must be at least 1"));
    }
    check_gamma(spec.gamma)?;
    let samples: Vec<(ParamVector, f64)> = (0..spec.batch_size)
        .into_par_iter()
        .map(|n| {
            let id = StreamId {
                master,
                learner: learner_id as u64,
                iteration: iteration as u64,
                trajectory: n as u64,
            };
            let traj = task.env.rollout_seeded(bundle, theta, spec.horizon, id)?;
            let g = gpomdp_single(&traj, bundle, theta, task.loss_index, spec.gamma)?;
            Ok((g, discounted_loss(&traj, task.loss_index, spec.gamma)))
        })
        .collect::<Result<_>>()?;

    let n = spec.batch_size as f64;
    let mut grad = ParamVector::zeros(bundle.dim());
    let mut objective = 0.0;
    for (g, c) in &samples {
        grad.add_assign(g);
        objective += c;
    }
    grad.scale(1.0 / n);
    if !grad.is_finite() {
        return Err(Error::numeric("batch gradient is not finite"));
    }
    let grads: Vec<&[f64]> = samples.iter().map(|(g, _)| g.as_slice()).collect();
    Ok(GradientReport {
        learner_id,
        iteration,
        grad,
        batch_size: spec.batch_size,
        horizon: spec.horizon,
        variance_estimate: variance_proxy(&grads),
        objective_estimate: objective / n,
    })
}

/// `tr(sample covariance) / N` of per-trajectory gradients, the on-line estimate of the
/// batch gradient's squared deviation. `None` for fewer than two samples.
pub fn variance_proxy(per_trajectory: &[&[f64]]) -> Option<f64> {
    let n = per_trajectory.len();
    if n < 2 {
        return None;
    }
    let d = per_trajectory[0].len();
    let mut mean = vec![0.0; d];
    for g in per_trajectory {
        for (m, v) in mean.iter_mut().zip(*g) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let spread: f64 = per_trajectory
        .iter()
        .map(|g| g.iter().zip(&mean).map(|(v, m)| (v - m) * (v - m)).sum::<f64>())
        .sum();
    Some(spread / ((n - 1) as f64 * n as f64))
}

/// Triangle-inequality bound on `||gpomdp_single||`: the prefix sum at step `t` has at most
/// `t + 1` scores of norm `<= g`, giving `sum_{t=0}^{T} (t + 1) g gamma^t l_bar`.
pub fn norm_bound(g: f64, loss_bound: f64, gamma: f64, horizon: usize) -> f64 {
    let mut discount = 1.0;
    let mut total = 0.0;
    for t in 0..=horizon {
        total += (t + 1) as f64 * discount;
        discount *= gamma;
    }
    g * loss_bound * total
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::config(format!("discount must lie in [0, 1), got {gamma}")));
    }
    Ok(())
}

fn single_policy(bundle: &PolicyBundle) -> Result<&Policy> {
    match bundle.policies() {
        [p] => Ok(p),
        _ => Err(Error::config(
            "exact gradients need a single policy over the joint action",
        )),
    }
}

/// Exact truncated gradient by enumerating every support trajectory.
///
/// Uses the likelihood-ratio form `E[(sum_t score_t) (sum_t gamma^t l_t)]`, which shares
/// no code path with [`gpomdp_single`] beyond the score function.
pub fn exact_gradient_enumerated(
    mdp: &TabularMdp,
    bundle: &PolicyBundle,
    theta: &[f64],
    loss_index: usize,
    horizon: usize,
    gamma: f64,
) -> Result<ExactGradient> {
    check_gamma(gamma)?;
    let policy = single_policy(bundle)?;
    check_loss_index(mdp, loss_index)?;
    let tables = PolicyTables::new(policy, mdp, theta)?;
    let d = policy.dim();
    let mut grad = vec![0.0; d];
    let mut objective = 0.0;
    let mut score_sum = vec![0.0; d];
    for path in mdp.enumerate(horizon)? {
        let mut prob = path.weight;
        let mut cost = 0.0;
        let mut discount = 1.0;
        score_sum.fill(0.0);
        for (&s, &a) in path.states.iter().zip(&path.actions) {
            prob *= tables.prob(s, a);
            cost += discount * mdp.loss(loss_index, s, a);
            discount *= gamma;
            for (acc, v) in score_sum.iter_mut().zip(tables.score(s, a)) {
                *acc += v;
            }
        }
        let w = prob * cost;
        objective += w;
        for (g, s) in grad.iter_mut().zip(&score_sum) {
            *g += w * s;
        }
    }
    Ok(ExactGradient {
        grad: ParamVector::from(grad),
        objective,
    })
}

/// Exact truncated gradient by dynamic programming: forward state occupancies `d_t` and
/// backward discounted action values `Q_t`, then
/// `grad = sum_t sum_{s,a} d_t(s) pi(a|s) Q_t(s,a) score(s,a)`. Cost is linear in the horizon.
pub fn exact_gradient_dp(
    mdp: &TabularMdp,
    bundle: &PolicyBundle,
    theta: &[f64],
    loss_index: usize,
    horizon: usize,
    gamma: f64,
) -> Result<ExactGradient> {
    check_gamma(gamma)?;
    let policy = single_policy(bundle)?;
    check_loss_index(mdp, loss_index)?;
    let tables = PolicyTables::new(policy, mdp, theta)?;
    let (ns, na) = (mdp.states, mdp.actions);

    let mut occupancy = Vec::with_capacity(horizon + 1);
    occupancy.push(mdp.rho.clone());
    for t in 0..horizon {
        let cur = &occupancy[t];
        let mut next = vec![0.0; ns];
        for s in 0..ns {
            for a in 0..na {
                let w = cur[s] * tables.prob(s, a);
                for (n, p) in next.iter_mut().zip(mdp.row(s, a)) {
                    *n += w * p;
                }
            }
        }
        occupancy.push(next);
    }

    let discounts: Vec<f64> = std::iter::successors(Some(1.0), |g| Some(g * gamma))
        .take(horizon + 1)
        .collect();
    let mut grad = vec![0.0; policy.dim()];
    let mut objective = 0.0;
    let mut value_next = vec![0.0; ns];
    for t in (0..=horizon).rev() {
        let mut value = vec![0.0; ns];
        for s in 0..ns {
            for a in 0..na {
                let future: f64 = if t < horizon {
                    mdp.row(s, a).iter().zip(&value_next).map(|(p, v)| p * v).sum()
                } else {
                    0.0
                };
                let q = discounts[t] * mdp.loss(loss_index, s, a) + future;
                let pi = tables.prob(s, a);
                value[s] += pi * q;
                let w = occupancy[t][s] * pi * q;
                for (g, v) in grad.iter_mut().zip(tables.score(s, a)) {
                    *g += w * v;
                }
            }
        }
        if t == 0 {
            objective = value.iter().zip(&mdp.rho).map(|(v, r)| v * r).sum();
        }
        value_next = value;
    }
    Ok(ExactGradient {
        grad: ParamVector::from(grad),
        objective,
    })
}

fn check_loss_index(mdp: &TabularMdp, loss_index: usize) -> Result<()> {
    if loss_index >= mdp.learners() {
        return Err(Error::config(format!("loss index {loss_index} outside 0..{}", mdp.learners())));
    }
    Ok(())
}

/// `pi(a|s)` and `score(s, a)` for every state-action pair.
struct PolicyTables {
    actions: usize,
    dim: usize,
    probs: Vec<f64>,
    scores: Vec<f64>,
}

impl PolicyTables {
    fn new(policy: &Policy, mdp: &TabularMdp, theta: &[f64]) -> Result<Self> {
        if policy.action_count() != Some(mdp.actions) {
            return Err(Error::config("policy action count does not match the MDP"));
        }
        let dim = policy.dim();
        let mut probs = Vec::with_capacity(mdp.states * mdp.actions);
        let mut scores = vec![0.0; mdp.states * mdp.actions * dim];
        for s in 0..mdp.states {
            let state = State::Discrete(s);
            probs.extend(policy.probabilities(theta, &state)?);
            for a in 0..mdp.actions {
                let idx = s * mdp.actions + a;
                policy.score_into(theta, &state, &Action::Discrete(a), &mut scores[idx * dim..(idx + 1) * dim])?;
            }
        }
        Ok(PolicyTables {
            actions: mdp.actions,
            dim,
            probs,
            scores,
        })
    }

    fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.actions + a]
    }

    fn score(&self, s: usize, a: usize) -> &[f64] {
        let idx = s * self.actions + a;
        &self.scores[idx * self.dim..(idx + 1) * self.dim]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::Step;

    fn tabular_bundle(states: usize, actions: usize) -> PolicyBundle {
        PolicyBundle::Joint(Policy::new(PolicySpec::tabular(states, actions)).unwrap())
    }

    use crate::policy::PolicySpec;

    fn step(s: usize, a: usize, loss: f64) -> Step {
        Step {
            state: State::Discrete(s),
            actions: vec![Action::Discrete(a)],
            losses: vec![loss],
        }
    }

    #[test]
    fn single_step_is_score_times_loss() {
        let bundle = tabular_bundle(2, 2);
        let theta = [0.3, -0.1, 0.0, 0.7];
        let traj = Trajectory {
            steps: vec![step(1, 0, 0.4)],
            seed: None,
        };
        let g = gpomdp_single(&traj, &bundle, &theta, 0, 0.9).unwrap();
        let mut score = vec![0.0; 4];
        bundle
            .score_into(&theta, &State::Discrete(1), &[Action::Discrete(0)], &mut score)
            .unwrap();
        let expected: Vec<f64> = score.iter().map(|s| s * 0.4).collect();
        assert_eq!(g.as_slice(), expected.as_slice());
    }

    #[test]
    fn zero_discount_keeps_first_term_only() {
        let bundle = tabular_bundle(2, 2);
        let theta = [0.3, -0.1, 0.0, 0.7];
        let long = Trajectory {
            steps: vec![step(1, 0, 0.4), step(0, 1, 0.9), step(1, 1, 0.2)],
            seed: None,
        };
        let short = Trajectory {
            steps: vec![step(1, 0, 0.4)],
            seed: None,
        };
        assert_eq!(
            gpomdp_single(&long, &bundle, &theta, 0, 0.0).unwrap(),
            gpomdp_single(&short, &bundle, &theta, 0, 0.9).unwrap()
        );
    }

    #[test]
    fn zero_losses_zero_gradient() {
        let bundle = tabular_bundle(2, 2);
        let traj = Trajectory {
            steps: vec![step(1, 0, 0.0), step(0, 1, 0.0)],
            seed: None,
        };
        let g = gpomdp_single(&traj, &bundle, &[0.5, 0.1, -0.2, 0.0], 0, 0.9).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
        assert!(gpomdp_single(&traj, &bundle, &[0.0; 4], 1, 0.9).is_err());
    }

    #[test]
    fn proxy_of_identical_samples_is_zero() {
        let g = [1.0, 2.0, 3.0];
        assert_eq!(variance_proxy(&[&g, &g, &g]), Some(0.0));
        assert_eq!(variance_proxy(&[&g]), None);
        // two samples at distance 2 on one axis: unbiased variance 2, over N = 2
        assert_eq!(variance_proxy(&[&[0.0], &[2.0]]), Some(1.0));
    }

    #[test]
    fn norm_bound_closed_form() {
        // sum_{t=0}^{2} (t + 1) 0.5^t = 1 + 1 + 0.75
        assert!((norm_bound(2.0, 3.0, 0.5, 2) - 6.0 * 2.75).abs() < 1e-15);
        assert_eq!(norm_bound(1.0, 1.0, 0.0, 5), 1.0);
    }

    #[test]
    fn degenerate_mdp_has_closed_form_objective() {
        let mdp = TabularMdp::new(1, 1, vec![1.0], vec![1.0], vec![vec![0.7]], None).unwrap();
        let bundle = tabular_bundle(1, 1);
        for route in [exact_gradient_enumerated, exact_gradient_dp] {
            let exact = route(&mdp, &bundle, &[0.3], 0, 5, 0.8).unwrap();
            let expected = 0.7 * (1.0 - 0.8f64.powi(6)) / 0.2;
            assert!((exact.objective - expected).abs() < 1e-14);
            assert_eq!(exact.grad.as_slice(), &[0.0]);
        }
    }
}
