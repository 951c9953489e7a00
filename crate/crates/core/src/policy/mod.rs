//! Parameterized stochastic policies with exact log-probabilities and score functions.
//!
//! Four families are supported:
//!
//! * tabular softmax: one logit per `(state, action)` pair, `theta[s * A + a]`;
//! * linear softmax: logits `theta_a . phi(s)`, layout `[action][feature]`;
//! * linear Gaussian: mean `mu_i = theta_i . phi(s)` with a fixed covariance,
//!   layout `[action dim][feature]`;
//! * MLP softmax: two hidden layers followed by a softmax over actions.

mod bounds;
mod bundle;
mod mlp;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamVector;
use crate::space::{Action, State};

pub use bounds::{score_bounds_estimate, SampleBox, ScoreBounds};
pub use bundle::PolicyBundle;
pub use mlp::Activation;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyFamily {
    TabularSoftmax,
    LinearSoftmax,
    LinearGaussian,
    MlpSoftmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ActionSpace {
    Discrete { actions: usize },
    /// Row-major `dim x dim` covariance.
    Continuous { dim: usize, covariance: Vec<f64> },
}

/// Feature map `phi(s)` used by the linear families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMap {
    /// `phi(s) = s` for continuous states.
    Identity,
    /// `phi(s) = [s, 1]`, or `[onehot(s), 1]` for discrete states.
    WithBias,
    /// `phi(s) = e_s` for discrete states.
    OneHot,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicySpec {
    pub family: PolicyFamily,
    /// Number of states (tabular, one-hot inputs) or state vector length.
    pub state_dim: usize,
    pub action_space: ActionSpace,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation: Option<Activation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_map: Option<FeatureMap>,
}

impl PolicySpec {
    pub fn tabular(states: usize, actions: usize) -> Self {
        PolicySpec {
            family: PolicyFamily::TabularSoftmax,
            state_dim: states,
            action_space: ActionSpace::Discrete { actions },
            hidden: None,
            activation: None,
            feature_map: None,
        }
    }

    pub fn linear_softmax(state_dim: usize, actions: usize, feature_map: FeatureMap) -> Self {
        PolicySpec {
            family: PolicyFamily::LinearSoftmax,
            state_dim,
            action_space: ActionSpace::Discrete { actions },
            hidden: None,
            activation: None,
            feature_map: Some(feature_map),
        }
    }

    pub fn linear_gaussian(
        state_dim: usize,
        dim: usize,
        covariance: Vec<f64>,
        feature_map: FeatureMap,
    ) -> Self {
        PolicySpec {
            family: PolicyFamily::LinearGaussian,
            state_dim,
            action_space: ActionSpace::Continuous { dim, covariance },
            hidden: None,
            activation: None,
            feature_map: Some(feature_map),
        }
    }

    pub fn mlp(state_dim: usize, actions: usize, hidden: [usize; 2], activation: Activation) -> Self {
        PolicySpec {
            family: PolicyFamily::MlpSoftmax,
            state_dim,
            action_space: ActionSpace::Discrete { actions },
            hidden: Some(hidden),
            activation: Some(activation),
            feature_map: None,
        }
    }
}

#[derive(Clone, Debug)]
enum Kind {
    Tabular {
        states: usize,
        actions: usize,
    },
    LinearSoftmax {
        features: usize,
        actions: usize,
    },
    LinearGaussian {
        features: usize,
        dim: usize,
        chol: DMatrix<f64>,
        precision: DMatrix<f64>,
        log_norm: f64,
    },
    Mlp(mlp::Mlp),
}

/// A validated policy, ready for evaluation.
#[derive(Clone, Debug)]
pub struct Policy {
    spec: PolicySpec,
    kind: Kind,
}

impl Policy {
    pub fn new(spec: PolicySpec) -> Result<Self> {
        let discrete_actions = match &spec.action_space {
            ActionSpace::Discrete { actions } => {
                if *actions < 2 && spec.family != PolicyFamily::TabularSoftmax {
                    return Err(Error::config("discrete action count must be at least 2"));
                }
                if *actions == 0 {
                    return Err(Error::config("discrete action count must be positive"));
                }
                Some(*actions)
            }
            ActionSpace::Continuous { .. } => None,
        };
        if spec.state_dim == 0 {
            return Err(Error::config("state_dim must be positive"));
        }
        let kind = match spec.family {
            PolicyFamily::TabularSoftmax => Kind::Tabular {
                states: spec.state_dim,
                actions: discrete_actions
                    .ok_or_else(|| Error::config("tabular softmax requires discrete actions"))?,
            },
            PolicyFamily::LinearSoftmax => Kind::LinearSoftmax {
                features: feature_len(&spec)?,
                actions: discrete_actions
                    .ok_or_else(|| Error::config("linear softmax requires discrete actions"))?,
            },
            PolicyFamily::LinearGaussian => {
                let ActionSpace::Continuous { dim, covariance } = &spec.action_space else {
                    return Err(Error::config("linear Gaussian requires a continuous action space"));
                };
                let (chol, precision, log_norm) = gaussian_factors(*dim, covariance)?;
                Kind::LinearGaussian {
                    features: feature_len(&spec)?,
                    dim: *dim,
                    chol,
                    precision,
                    log_norm,
                }
            }
            PolicyFamily::MlpSoftmax => {
                let [h1, h2] = spec
                    .hidden
                    .ok_or_else(|| Error::config("MLP policy requires hidden widths"))?;
                if h1 == 0 || h2 == 0 {
                    return Err(Error::config("hidden widths must be at least 1"));
                }
                Kind::Mlp(mlp::Mlp {
                    input: spec.state_dim,
                    hidden1: h1,
                    hidden2: h2,
                    output: discrete_actions
                        .ok_or_else(|| Error::config("MLP softmax requires discrete actions"))?,
                    activation: spec.activation.unwrap_or(Activation::Relu),
                })
            }
        };
        Ok(Policy { spec, kind })
    }

    pub fn spec(&self) -> &PolicySpec {
        &self.spec
    }

    /// Length of the parameter vector.
    pub fn dim(&self) -> usize {
        match &self.kind {
            Kind::Tabular { states, actions } => states * actions,
            Kind::LinearSoftmax { features, actions } => features * actions,
            Kind::LinearGaussian { features, dim, .. } => features * dim,
            Kind::Mlp(net) => net.param_count(),
        }
    }

    /// Number of discrete actions, `None` for continuous policies.
    pub fn action_count(&self) -> Option<usize> {
        match &self.kind {
            Kind::Tabular { actions, .. } | Kind::LinearSoftmax { actions, .. } => Some(*actions),
            Kind::Mlp(net) => Some(net.output),
            Kind::LinearGaussian { .. } => None,
        }
    }

    /// Initial parameters: Glorot-uniform for the MLP, zeros otherwise.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        match &self.kind {
            Kind::Mlp(net) => ParamVector::from(net.init(rng)),
            _ => ParamVector::zeros(self.dim()),
        }
    }

    /// Closed-form score bounds where they exist for every parameter value.
    ///
    /// Tabular softmax: `||e_a - p||^2 = (1 - p_a)^2 + sum_{b != a} p_b^2 < 2`, and the
    /// Hessian of the log-softmax has entries `p_i p_j` or `p_i (1 - p_i)`, both `<= 1/4`.
    pub fn certified_bounds(&self) -> Option<ScoreBounds> {
        match &self.kind {
            Kind::Tabular { actions, .. } if *actions >= 2 => Some(ScoreBounds {
                g: std::f64::consts::SQRT_2,
                f: 0.25,
                certified: true,
            }),
            _ => None,
        }
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.dim() {
            return Err(Error::config(format!(
                "parameter length {} does not match policy dimension {}",
                theta.len(),
                self.dim()
            )));
        }
        if let Some(i) = theta.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("parameter entry {i} is not finite")));
        }
        Ok(())
    }

    fn check_discrete_action(&self, action: &Action) -> Result<usize> {
        let n = self.action_count().expect("discrete policy");
        match action {
            Action::Discrete(a) if *a < n => Ok(*a),
            Action::Discrete(a) => Err(Error::config(format!("action {a} outside 0..{n}"))),
            Action::Continuous(_) => Err(Error::config("continuous action for a discrete policy")),
        }
    }

    fn features(&self, state: &State) -> Result<Vec<f64>> {
        let map = self.spec.feature_map.unwrap_or(FeatureMap::Identity);
        let n = self.spec.state_dim;
        match (map, state) {
            (FeatureMap::Identity, State::Continuous(s)) => {
                check_len(s, n)?;
                Ok(s.clone())
            }
            (FeatureMap::WithBias, State::Continuous(s)) => {
                check_len(s, n)?;
                let mut v = s.clone();
                v.push(1.0);
                Ok(v)
            }
            (FeatureMap::WithBias, State::Discrete(s)) => {
                let mut v = one_hot(*s, n)?;
                v.push(1.0);
                Ok(v)
            }
            (FeatureMap::OneHot, State::Discrete(s)) => one_hot(*s, n),
            (map, state) => Err(Error::config(format!(
                "feature map {map:?} cannot encode state {state:?}"
            ))),
        }
    }

    fn network_input(&self, state: &State) -> Result<Vec<f64>> {
        match state {
            State::Continuous(s) => {
                check_len(s, self.spec.state_dim)?;
                Ok(s.clone())
            }
            State::Discrete(s) => one_hot(*s, self.spec.state_dim),
        }
    }

    /// Action logits of a discrete policy.
    pub fn logits(&self, theta: &[f64], state: &State) -> Result<Vec<f64>> {
        self.check_theta(theta)?;
        match &self.kind {
            Kind::Tabular { states, actions } => {
                let s = tabular_state(state, *states)?;
                Ok(theta[s * actions..(s + 1) * actions].to_vec())
            }
            Kind::LinearSoftmax { features, actions } => {
                let phi = self.features(state)?;
                Ok((0..*actions)
                    .map(|a| dot(&theta[a * features..(a + 1) * features], &phi))
                    .collect())
            }
            Kind::Mlp(net) => Ok(net.forward(theta, &self.network_input(state)?).logits),
            Kind::LinearGaussian { .. } => {
                Err(Error::config("logits requested from a continuous policy"))
            }
        }
    }

    /// Action probabilities of a discrete policy.
    pub fn probabilities(&self, theta: &[f64], state: &State) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(theta, state)?))
    }

    /// Mean action of the Gaussian policy.
    pub fn mean(&self, theta: &[f64], state: &State) -> Result<Vec<f64>> {
        self.check_theta(theta)?;
        let Kind::LinearGaussian { features, dim, .. } = &self.kind else {
            return Err(Error::config("mean requested from a discrete policy"));
        };
        let phi = self.features(state)?;
        Ok((0..*dim)
            .map(|i| dot(&theta[i * features..(i + 1) * features], &phi))
            .collect())
    }

    /// `log pi(a | s; theta)`.
    pub fn log_prob(&self, theta: &[f64], state: &State, action: &Action) -> Result<f64> {
        match &self.kind {
            Kind::LinearGaussian {
                dim,
                precision,
                log_norm,
                ..
            } => {
                let mu = self.mean(theta, state)?;
                let a = continuous_action(action, *dim)?;
                let r = DVector::from_iterator(*dim, a.iter().zip(&mu).map(|(a, m)| a - m));
                Ok(log_norm - 0.5 * r.dot(&(precision * &r)))
            }
            _ => {
                let logits = self.logits(theta, state)?;
                let a = self.check_discrete_action(action)?;
                Ok(log_softmax(&logits)[a])
            }
        }
    }

    /// `grad_theta log pi(a | s; theta)` written into `out` (overwritten).
    pub fn score_into(
        &self,
        theta: &[f64],
        state: &State,
        action: &Action,
        out: &mut [f64],
    ) -> Result<()> {
        self.check_theta(theta)?;
        if out.len() != self.dim() {
            return Err(Error::config("score buffer has the wrong length"));
        }
        match &self.kind {
            Kind::Tabular { states, actions } => {
                let s = tabular_state(state, *states)?;
                let a = self.check_discrete_action(action)?;
                out.fill(0.0);
                let p = softmax(&theta[s * actions..(s + 1) * actions]);
                for (b, pb) in p.iter().enumerate() {
                    out[s * actions + b] = indicator(a == b) - pb;
                }
            }
            Kind::LinearSoftmax { features, actions } => {
                let a = self.check_discrete_action(action)?;
                let phi = self.features(state)?;
                let logits: Vec<f64> = (0..*actions)
                    .map(|b| dot(&theta[b * features..(b + 1) * features], &phi))
                    .collect();
                let p = softmax(&logits);
                for b in 0..*actions {
                    let w = indicator(a == b) - p[b];
                    for (o, f) in out[b * features..(b + 1) * features].iter_mut().zip(&phi) {
                        *o = w * f;
                    }
                }
            }
            Kind::LinearGaussian {
                features,
                dim,
                precision,
                ..
            } => {
                let phi = self.features(state)?;
                let mu: Vec<f64> = (0..*dim)
                    .map(|i| dot(&theta[i * features..(i + 1) * features], &phi))
                    .collect();
                let a = continuous_action(action, *dim)?;
                let r = DVector::from_iterator(*dim, a.iter().zip(&mu).map(|(a, m)| a - m));
                let w = precision * r;
                for i in 0..*dim {
                    for (o, f) in out[i * features..(i + 1) * features].iter_mut().zip(&phi) {
                        *o = w[i] * f;
                    }
                }
            }
            Kind::Mlp(net) => {
                let a = self.check_discrete_action(action)?;
                let x = self.network_input(state)?;
                let fw = net.forward(theta, &x);
                let p = softmax(&fw.logits);
                let dlogits: Vec<f64> = p
                    .iter()
                    .enumerate()
                    .map(|(b, pb)| indicator(a == b) - pb)
                    .collect();
                net.backward(theta, &x, &fw, &dlogits, out);
            }
        }
        Ok(())
    }

    pub fn score(&self, theta: &[f64], state: &State, action: &Action) -> Result<ParamVector> {
        let mut out = vec![0.0; self.dim()];
        self.score_into(theta, state, action, &mut out)?;
        Ok(ParamVector::from(out))
    }

    /// Draws an action. Discrete families use inverse-CDF sampling with one uniform draw;
    /// the Gaussian draws `mu + C z` with `C C^T = Sigma` and `z` standard normal.
    pub fn sample_action<R: Rng + ?Sized>(
        &self,
        theta: &[f64],
        state: &State,
        rng: &mut R,
    ) -> Result<Action> {
        match &self.kind {
            Kind::LinearGaussian { dim, chol, .. } => {
                let mu = self.mean(theta, state)?;
                let z = DVector::from_iterator(*dim, (0..*dim).map(|_| rng.sample(StandardNormal)));
                let noise = chol * z;
                Ok(Action::Continuous(
                    mu.iter().zip(noise.iter()).map(|(m, n)| m + n).collect(),
                ))
            }
            _ => {
                let p = self.probabilities(theta, state)?;
                let u: f64 = rng.random();
                Ok(Action::Discrete(inverse_cdf(&p, u)))
            }
        }
    }
}

/// Index of the first category whose cumulative probability exceeds `u`.
pub fn inverse_cdf(probs: &[f64], u: f64) -> usize {
    let mut cumulative = 0.0;
    for (i, p) in probs.iter().enumerate() {
        cumulative += p;
        if u < cumulative {
            return i;
        }
    }
    probs.len() - 1
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

fn gaussian_factors(dim: usize, covariance: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>, f64)> {
    if dim == 0 || covariance.len() != dim * dim {
        return Err(Error::config(format!(
            "covariance must have {} entries for action dimension {dim}",
            dim * dim
        )));
    }
    let sigma = DMatrix::from_row_slice(dim, dim, covariance);
    if (&sigma - sigma.transpose()).amax() > 1e-12 * sigma.amax().max(1.0) {
        return Err(Error::config("covariance is not symmetric"));
    }
    let chol = sigma
        .clone()
        .cholesky()
        .ok_or_else(|| Error::config("covariance is not positive definite"))?;
    let l = chol.l();
    let log_det: f64 = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let precision = chol.inverse();
    let log_norm = -0.5 * (dim as f64 * (2.0 * std::f64::consts::PI).ln() + log_det);
    Ok((l, precision, log_norm))
}

fn feature_len(spec: &PolicySpec) -> Result<usize> {
    Ok(match spec.feature_map.unwrap_or(FeatureMap::Identity) {
        FeatureMap::Identity | FeatureMap::OneHot => spec.state_dim,
        FeatureMap::WithBias => spec.state_dim + 1,
    })
}

fn tabular_state(state: &State, states: usize) -> Result<usize> {
    match state {
        State::Discrete(s) if *s < states => Ok(*s),
        State::Discrete(s) => Err(Error::config(format!("state {s} outside 0..{states}"))),
        State::Continuous(_) => Err(Error::config("tabular policy requires a discrete state")),
    }
}

fn continuous_action(action: &Action, dim: usize) -> Result<&[f64]> {
    match action {
        Action::Continuous(a) if a.len() == dim => Ok(a),
        Action::Continuous(a) => Err(Error::config(format!(
            "action has length {}, expected {dim}",
            a.len()
        ))),
        Action::Discrete(_) => Err(Error::config("discrete action for a continuous policy")),
    }
}

fn check_len(s: &[f64], n: usize) -> Result<()> {
    if s.len() != n {
        return Err(Error::config(format!("state has length {}, expected {n}", s.len())));
    }
    Ok(())
}

fn one_hot(s: usize, n: usize) -> Result<Vec<f64>> {
    if s >= n {
        return Err(Error::config(format!("state {s} outside 0..{n}")));
    }
    let mut v = vec![0.0; n];
    v[s] = 1.0;
    Ok(v)
}

fn indicator(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
