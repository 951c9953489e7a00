#![allow(dead_code)]

use std::sync::Arc;

use lapg::envs::{Env, TabularMdp, Task};
use lapg::policy::{Policy, PolicyBundle, PolicySpec};
use lapg::space::{Action, State};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Seeded 3-state, 2-action, 2-learner MDP shared by the oracle tests.
pub fn oracle_mdp() -> TabularMdp {
    TabularMdp::random(3, 2, 2, &mut ChaCha8Rng::seed_from_u64(2024)).unwrap()
}

pub fn tabular_bundle(mdp: &TabularMdp) -> PolicyBundle {
    PolicyBundle::Joint(Policy::new(PolicySpec::tabular(mdp.states, mdp.actions)).unwrap())
}

pub fn random_theta(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn task(mdp: &TabularMdp, loss_index: usize) -> Task {
    Task::new(Arc::new(Env::Tabular(mdp.clone())), loss_index).unwrap()
}

/// `pi(a|s)` under a single-policy bundle.
pub fn prob(bundle: &PolicyBundle, theta: &[f64], s: usize, a: usize) -> f64 {
    bundle
        .log_prob(theta, &State::Discrete(s), &[Action::Discrete(a)])
        .unwrap()
        .exp()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

pub mod engine {
    use std::sync::Arc;

    use lapg::envs::{Env, TabularMdp, Task};
    use lapg::estimator::BatchSpec;
    use lapg::lapg::{GradientSource, Learner, LearnerConfig, Mode, TriggerConfig, VarianceMode};
    use lapg::policy::PolicyBundle;
    use lapg::transport::Responder;

    pub fn trigger(xi: Vec<f64>, alpha: f64, variance_mode: VarianceMode, iterations: usize) -> TriggerConfig {
        TriggerConfig {
            xi,
            alpha,
            variance_mode,
            delta: 0.1,
            iterations,
        }
    }

    pub struct Setup {
        pub mode: Mode,
        pub trigger: TriggerConfig,
        pub batch: BatchSpec,
        pub source: GradientSource,
        pub master: u64,
        pub sigma2: Vec<f64>,
    }

    pub fn responders(mdp: &TabularMdp, bundle: &PolicyBundle, s: &Setup) -> Vec<Box<dyn Responder>> {
        let env = Arc::new(Env::Tabular(mdp.clone()));
        let bundle = Arc::new(bundle.clone());
        let m = mdp.learners();
        (0..m)
            .map(|i| {
                let cfg = LearnerConfig {
                    mode: s.mode,
                    trigger: s.trigger.clone(),
                    batch: s.batch,
                    source: s.source,
                    master: s.master,
                    analytic_sigma2: s.sigma2.get(i).copied().unwrap_or(0.0),
                };
                let task = Task::new(env.clone(), i).unwrap();
                Box::new(Learner::new(i, m, task, bundle.clone(), cfg).unwrap()) as Box<dyn Responder>
            })
            .collect()
    }
}
