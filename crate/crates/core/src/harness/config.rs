//! Experiment configuration (TOML) and the shipped presets.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::analysis::ProblemConstants;
use crate::envs::{make_parallel_instances, CoopNavConfig, Env, ParallelBase, TabularMdp, Task};
use crate::error::{Error, Result};
use crate::estimator::BatchSpec;
use crate::lapg::{GradientSource, Mode, TriggerConfig, VarianceMode};
use crate::policy::{Activation, FeatureMap, Policy, PolicyBundle, PolicySpec, ScoreBounds};

/// Prefix selecting a built-in configuration instead of a file.
pub const PRESET_PREFIX: &str = "preset:";

pub const PRESETS: [&str; 7] = [
    "coopnav-m2-hetero",
    "coopnav-m2-homo",
    "coopnav-m5-relu",
    "coopnav-m5-softplus",
    "tabular-oracle",
    "tabular-hetero",
    "parallel-tabular",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub env: EnvConfig,
    pub policy: PolicyConfig,
    pub algo: AlgoConfig,
    pub seeds: SeedConfig,
    #[serde(default)]
    pub transport: TransportKind,
    /// Output directory; relative paths resolve against `LAPG_OUTPUT_ROOT` when it is set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub analysis: AnalysisConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EnvConfig {
    CoopNav(CoopNavConfig),
    Tabular(TabularConfig),
    Parallel(ParallelConfig),
}

/// Exactly one of `random` and `file`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TabularConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub random: Option<RandomTabular>,
    /// MDP in the tabular text format, relative to the configuration file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomTabular {
    pub states: usize,
    pub actions: usize,
    #[serde(default = "one")]
    pub learners: usize,
    pub seed: u64,
    /// Per-learner multipliers of the loss tables and bounds; empty means all 1.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub loss_scales: Vec<f64>,
}

fn one() -> usize {
    1
}

/// Workers sharing one base environment with perturbed losses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParallelConfig {
    pub workers: usize,
    pub heterogeneity: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tabular: Option<TabularConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coop_nav: Option<CoopNavConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PolicyConfig {
    /// One softmax table over the joint action (tabular environments).
    Tabular,
    /// One MLP per agent over the full observation.
    Mlp { hidden: [usize; 2], activation: Activation },
    /// One linear softmax with bias per agent over the full observation.
    LinearSoftmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgoConfig {
    #[serde(default = "both_modes")]
    pub modes: Vec<Mode>,
    pub alpha: f64,
    #[serde(default)]
    pub momentum: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub horizon: usize,
    pub gamma: f64,
    #[serde(default)]
    pub source: GradientSource,
    #[serde(default)]
    pub trigger: TriggerBlock,
    /// Run every mode on the same rollout streams.
    #[serde(default = "yes")]
    pub paired: bool,
}

fn both_modes() -> Vec<Mode> {
    vec![Mode::Pg, Mode::Lapg]
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriggerBlock {
    #[serde(default)]
    pub xi: Vec<f64>,
    #[serde(default)]
    pub variance_mode: VarianceMode,
    #[serde(default = "default_delta")]
    pub delta: f64,
}

fn default_delta() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedConfig {
    pub master: u64,
    pub runs: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransportKind {
    #[default]
    InProcess,
    Socket,
}

/// Accuracy targets for the `analyze` report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    pub epsilon: f64,
    pub delta: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            epsilon: 0.1,
            delta: 0.1,
        }
    }
}

/// Environments and policies built from a configuration.
pub struct Instance {
    /// One task per learner.
    pub tasks: Vec<Task>,
    pub bundle: Arc<PolicyBundle>,
}

impl Instance {
    pub fn learners(&self) -> usize {
        self.tasks.len()
    }

    pub fn loss_bounds(&self) -> Vec<f64> {
        self.tasks.iter().map(Task::loss_bound).collect()
    }

    /// Certified score bounds of the joint policy, if every component has them.
    pub fn score_bounds(&self) -> Option<ScoreBounds> {
        let parts: Option<Vec<ScoreBounds>> =
            self.bundle.policies().iter().map(Policy::certified_bounds).collect();
        let parts = parts?;
        Some(ScoreBounds {
            g: parts.iter().map(|b| b.g * b.g).sum::<f64>().sqrt(),
            f: parts.iter().map(|b| b.f).fold(0.0, f64::max),
            certified: true,
        })
    }

    pub fn constants(&self, gamma: f64) -> Option<Result<ProblemConstants>> {
        self.score_bounds()
            .map(|s| ProblemConstants::new(s, gamma, &self.loss_bounds()))
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a file, or a preset when `source` is `preset:NAME`. Relative MDP file paths are
    /// resolved against the configuration's directory.
    pub fn load(source: &str) -> Result<Self> {
        if let Some(name) = source.strip_prefix(PRESET_PREFIX) {
            return preset(name);
        }
        let path = Path::new(source);
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    fn resolve_paths(&mut self, dir: &Path) {
        let fix = |t: &mut TabularConfig| {
            if let Some(f) = &mut t.file {
                if f.is_relative() {
                    *f = dir.join(&*f);
                }
            }
        };
        match &mut self.env {
            EnvConfig::Tabular(t) => fix(t),
            EnvConfig::Parallel(ParallelConfig { tabular: Some(t), .. }) => fix(t),
            _ => {}
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    /// Field-level checks that do not need the environment to be built.
    pub fn validate(&self) -> Result<()> {
        let a = &self.algo;
        let field = |path: &str, msg: String| Err(Error::config(format!("{path}: {msg}")));
        if a.modes.is_empty() {
            return field("algo.modes", "at least one mode is required".into());
        }
        if !(a.alpha > 0.0 && a.alpha.is_finite()) {
            return field("algo.alpha", format!("must be positive, got {}", a.alpha));
        }
        if !(0.0..1.0).contains(&a.momentum) {
            return field("algo.momentum", format!("must lie in [0, 1), got {}", a.momentum));
        }
        if a.batch_size == 0 {
            return field("algo.batch_size", "must be at least 1".into());
        }
        if !(0.0..1.0).contains(&a.gamma) {
            return field("algo.gamma", format!("must lie in [0, 1), got {}", a.gamma));
        }
        if let Err(Error::Config(msg)) = self.trigger().validate() {
            return field("algo.trigger", msg);
        }
        if self.seeds.runs == 0 {
            return field("seeds.runs", "must be at least 1".into());
        }
        if !(self.analysis.epsilon > 0.0 && self.analysis.epsilon < 1.0) {
            return field("analysis.epsilon", "must lie in (0, 1)".into());
        }
        if !(self.analysis.delta > 0.0 && self.analysis.delta < 1.0) {
            return field("analysis.delta", "must lie in (0, 1)".into());
        }
        let tabular_ok = |t: &TabularConfig, path: &str| match (&t.random, &t.file) {
            (Some(_), None) | (None, Some(_)) => Ok(()),
            _ => field(path, "exactly one of `random` and `file` is required".into()),
        };
        let is_tabular = match &self.env {
            EnvConfig::CoopNav(c) => {
                if let Err(Error::Config(msg)) = c.validate() {
                    return field("env", msg);
                }
                false
            }
            EnvConfig::Tabular(t) => {
                tabular_ok(t, "env")?;
                true
            }
            EnvConfig::Parallel(p) => {
                if p.workers == 0 {
                    return field("env.workers", "must be at least 1".into());
                }
                if !(0.0..1.0).contains(&p.heterogeneity) {
                    return field("env.heterogeneity", "must lie in [0, 1)".into());
                }
                match (&p.tabular, &p.coop_nav) {
                    (Some(t), None) => {
                        tabular_ok(t, "env.tabular")?;
                        true
                    }
                    (None, Some(_)) => false,
                    _ => return field("env", "exactly one of `tabular` and `coop_nav` is required".into()),
                }
            }
        };
        match (&self.policy, is_tabular) {
            (PolicyConfig::Tabular, false) => {
                field("policy.kind", "tabular policies need a tabular environment".into())
            }
            (PolicyConfig::Mlp { .. } | PolicyConfig::LinearSoftmax, true) => {
                field("policy.kind", "coop-nav environments need per-agent policies".into())
            }
            _ if a.source == GradientSource::Exact && !is_tabular => {
                field("algo.source", "exact gradients need a tabular environment".into())
            }
            _ => Ok(()),
        }
    }

    pub fn trigger(&self) -> TriggerConfig {
        TriggerConfig {
            xi: self.algo.trigger.xi.clone(),
            alpha: self.algo.alpha,
            variance_mode: self.algo.trigger.variance_mode,
            delta: self.algo.trigger.delta,
            iterations: self.algo.iterations,
        }
    }

    pub fn batch(&self) -> BatchSpec {
        BatchSpec {
            batch_size: self.algo.batch_size,
            horizon: self.algo.horizon,
            gamma: self.algo.gamma,
        }
    }

    /// Builds the learners' tasks and the shared policy bundle.
    pub fn instantiate(&self) -> Result<Instance> {
        let tasks = match &self.env {
            EnvConfig::CoopNav(c) => shared_tasks(Env::CoopNav(crate::envs::CoopNav::new(c.clone())?))?,
            EnvConfig::Tabular(t) => shared_tasks(Env::Tabular(load_tabular(t)?))?,
            EnvConfig::Parallel(p) => {
                let base = match (&p.tabular, &p.coop_nav) {
                    (Some(t), _) => ParallelBase::Tabular(load_tabular(t)?),
                    (_, Some(c)) => ParallelBase::CoopNav(c.clone()),
                    _ => return Err(Error::config("env: parallel base missing")),
                };
                let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
                make_parallel_instances(&base, p.workers, p.heterogeneity, &mut rng)?
                    .into_iter()
                    .map(|e| Task::new(Arc::new(e), 0))
                    .collect::<Result<_>>()?
            }
        };
        let env = &tasks[0].env;
        let bundle = match &self.policy {
            PolicyConfig::Tabular => {
                let mdp = env.tabular().ok_or_else(|| Error::config("policy.kind: tabular needs a tabular environment"))?;
                PolicyBundle::Joint(Policy::new(PolicySpec::tabular(mdp.states, mdp.actions))?)
            }
            PolicyConfig::Mlp { hidden, activation } => per_agent(env, |d, a| PolicySpec::mlp(d, a, *hidden, *activation))?,
            PolicyConfig::LinearSoftmax => per_agent(env, |d, a| PolicySpec::linear_softmax(d, a, FeatureMap::WithBias))?,
        };
        for t in &tasks {
            t.env.check_bundle(&bundle)?;
        }
        Ok(Instance {
            tasks,
            bundle: Arc::new(bundle),
        })
    }

    /// Non-fatal findings: a LAPG stepsize above the certified maximum.
    pub fn warnings(&self, instance: &Instance) -> Vec<String> {
        let mut out = Vec::new();
        if !self.algo.modes.contains(&Mode::Lapg) {
            return out;
        }
        if let Some(Ok(c)) = instance.constants(self.algo.gamma) {
            if let Ok(max) = crate::analysis::max_stepsize(&self.algo.trigger.xi, c.total_smoothness) {
                if self.algo.alpha > max {
                    out.push(format!("algo.alpha: {} exceeds (1 - 3 sum xi) / L = {max}", self.algo.alpha));
                }
            }
        }
        out
    }
}

fn shared_tasks(env: Env) -> Result<Vec<Task>> {
    let env = Arc::new(env);
    (0..env.learners()).map(|m| Task::new(env.clone(), m)).collect()
}

fn per_agent(env: &Env, spec: impl Fn(usize, usize) -> PolicySpec) -> Result<PolicyBundle> {
    let policies = (0..env.action_components())
        .map(|_| Policy::new(spec(env.observation_dim(), env.actions_per_component())))
        .collect::<Result<_>>()?;
    Ok(PolicyBundle::PerAgent(policies))
}

fn load_tabular(t: &TabularConfig) -> Result<TabularMdp> {
    match (&t.random, &t.file) {
        (Some(r), None) => {
            let mdp = TabularMdp::random(r.states, r.actions, r.learners, &mut ChaCha8Rng::seed_from_u64(r.seed))?;
            if r.loss_scales.is_empty() {
                return Ok(mdp);
            }
            if r.loss_scales.len() != r.learners {
                return Err(Error::config(format!(
                    "env.random.loss_scales: {} entries for {} learners",
                    r.loss_scales.len(),
                    r.learners
                )));
            }
            let losses = mdp
                .losses
                .iter()
                .zip(&r.loss_scales)
                .map(|(table, s)| table.iter().map(|l| l * s).collect())
                .collect();
            let bounds = mdp.bounds.iter().zip(&r.loss_scales).map(|(b, s)| b * s).collect();
            TabularMdp::new(mdp.states, mdp.actions, mdp.transitions, mdp.rho, losses, Some(bounds))
        }
        (None, Some(path)) => std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("env.file: cannot read {}: {e}", path.display())))?
            .parse(),
        _ => Err(Error::config("env: exactly one of `random` and `file` is required")),
    }
}

fn coopnav_experiment(name: &str, env: CoopNavConfig, hidden: [usize; 2], activation: Activation, batch: usize, runs: usize) -> ExperimentConfig {
    ExperimentConfig {
        name: name.into(),
        env: EnvConfig::CoopNav(env),
        policy: PolicyConfig::Mlp { hidden, activation },
        algo: AlgoConfig {
            modes: both_modes(),
            alpha: 0.01,
            momentum: 0.6,
            iterations: 300,
            batch_size: batch,
            horizon: 20,
            gamma: 0.99,
            source: GradientSource::Sampled,
            trigger: TriggerBlock {
                xi: vec![0.03; 10],
                variance_mode: VarianceMode::Off,
                delta: 0.1,
            },
            paired: true,
        },
        seeds: SeedConfig { master: 1, runs },
        transport: TransportKind::InProcess,
        output: None,
        analysis: AnalysisConfig::default(),
    }
}

fn tabular_experiment(name: &str, env: EnvConfig, alpha: f64) -> ExperimentConfig {
    ExperimentConfig {
        name: name.into(),
        env,
        policy: PolicyConfig::Tabular,
        algo: AlgoConfig {
            modes: both_modes(),
            alpha,
            momentum: 0.0,
            iterations: 200,
            batch_size: 10,
            horizon: 4,
            gamma: 0.5,
            source: GradientSource::Sampled,
            trigger: TriggerBlock {
                xi: vec![0.03; 10],
                variance_mode: VarianceMode::Off,
                delta: 0.1,
            },
            paired: true,
        },
        seeds: SeedConfig { master: 1, runs: 10 },
        transport: TransportKind::InProcess,
        output: None,
        analysis: AnalysisConfig::default(),
    }
}

fn random_tabular(states: usize, actions: usize, learners: usize, seed: u64, loss_scales: Vec<f64>) -> TabularConfig {
    TabularConfig {
        random: Some(RandomTabular {
            states,
            actions,
            learners,
            seed,
            loss_scales,
        }),
        file: None,
    }
}

/// Seed of the heterogeneous coop-nav reward scales.
pub const HETERO_SCALE_SEED: u64 = 12;

/// The built-in configuration `name`.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let cfg = match name {
        "coopnav-m2-hetero" => coopnav_experiment(name, CoopNavConfig::heterogeneous(2, HETERO_SCALE_SEED), [30, 10], Activation::Relu, 10, 10),
        "coopnav-m2-homo" => coopnav_experiment(name, CoopNavConfig::homogeneous(2), [30, 10], Activation::Relu, 10, 10),
        "coopnav-m5-relu" => coopnav_experiment(name, CoopNavConfig::heterogeneous(5, HETERO_SCALE_SEED), [50, 20], Activation::Relu, 8, 5),
        "coopnav-m5-softplus" => coopnav_experiment(name, CoopNavConfig::heterogeneous(5, HETERO_SCALE_SEED), [50, 20], Activation::Softplus, 8, 5),
        "tabular-oracle" => tabular_experiment(name, EnvConfig::Tabular(random_tabular(3, 2, 2, 2024, vec![])), 0.5),
        "tabular-hetero" => tabular_experiment(name, EnvConfig::Tabular(random_tabular(3, 2, 2, 2024, vec![1.0, 9.0])), 0.1),
        "parallel-tabular" => tabular_experiment(
            name,
            EnvConfig::Parallel(ParallelConfig {
                workers: 4,
                heterogeneity: 0.5,
                seed: 11,
                tabular: Some(random_tabular(4, 2, 1, 2025, vec![])),
                coop_nav: None,
            }),
            0.5,
        ),
        other => {
            return Err(Error::config(format!(
                "unknown preset `{other}`; available: {}",
                PRESETS.join(", ")
            )))
        }
    };
    cfg.validate()?;
    Ok(cfg)
}
