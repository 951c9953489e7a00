use std::fmt;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::ExperimentConfig;
use super::metrics::{read_aggregate_csv, AggregateRow};
use crate::analysis::{
    comm_reduction, hardness_profile, plan_parameters, CommReduction, HardnessProfile, PlanRequest,
    ProblemConstants, TheoremPlan,
};
use crate::error::{Error, Result};
use crate::estimator::{exact_gradient_dp, exact_gradient_enumerated, gpomdp_batch};
use crate::policy::{score_bounds_estimate, SampleBox, ScoreBounds};
use crate::seed::{derive_master, seed_stream, CONTROLLER};

/// Summary of two experiment directories, `a` the reference (usually PG).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Comparison {
    pub iterations: usize,
    pub final_reward_a: f64,
    pub final_reward_b: f64,
    /// `final_reward_b - final_reward_a`.
    pub final_reward_gap: f64,
    /// Half standard deviation of `a`'s final reward across runs.
    pub half_std_a: f64,
    pub within_half_std: bool,
    pub reward_threshold: f64,
    pub iterations_to_threshold_a: Option<usize>,
    pub iterations_to_threshold_b: Option<usize>,
    pub uploads_to_threshold_a: Option<f64>,
    pub uploads_to_threshold_b: Option<f64>,
    pub final_uploads_a: f64,
    pub final_uploads_b: f64,
    /// `final_uploads_b / final_uploads_a`.
    pub upload_ratio: f64,
}

fn aggregate_path(dir: &Path) -> PathBuf {
    if dir.is_file() {
        dir.to_path_buf()
    } else {
        dir.join("aggregate.csv")
    }
}

fn first_reaching(rows: &[AggregateRow], threshold: f64) -> Option<&AggregateRow> {
    rows.iter().find(|r| r.avg_reward_mean >= threshold)
}

/// Compares the aggregates in two mode directories (or aggregate files). The reward
/// threshold defaults to the lower of the two final mean rewards.
pub fn compare(a: &Path, b: &Path, threshold: Option<f64>) -> Result<Comparison> {
    let ra = read_aggregate_csv(&aggregate_path(a))?;
    let rb = read_aggregate_csv(&aggregate_path(b))?;
    if ra.len() != rb.len() {
        return Err(Error::config(format!(
            "iteration counts differ: {} vs {}",
            ra.len(),
            rb.len()
        )));
    }
    let (Some(la), Some(lb)) = (ra.last(), rb.last()) else {
        return Err(Error::config("nothing to compare: both runs are empty"));
    };
    let threshold = threshold.unwrap_or(la.avg_reward_mean.min(lb.avg_reward_mean));
    let ta = first_reaching(&ra, threshold);
    let tb = first_reaching(&rb, threshold);
    let gap = lb.avg_reward_mean - la.avg_reward_mean;
    Ok(Comparison {
        iterations: ra.len(),
        final_reward_a: la.avg_reward_mean,
        final_reward_b: lb.avg_reward_mean,
        final_reward_gap: gap,
        half_std_a: la.avg_reward_half_std,
        within_half_std: gap.abs() <= la.avg_reward_half_std,
        reward_threshold: threshold,
        iterations_to_threshold_a: ta.map(|r| r.iteration),
        iterations_to_threshold_b: tb.map(|r| r.iteration),
        uploads_to_threshold_a: ta.map(|r| r.cumulative_uploads_mean),
        uploads_to_threshold_b: tb.map(|r| r.cumulative_uploads_mean),
        final_uploads_a: la.cumulative_uploads_mean,
        final_uploads_b: lb.cumulative_uploads_mean,
        upload_ratio: lb.cumulative_uploads_mean / la.cumulative_uploads_mean,
    })
}

/// Closed-form quantities for a configuration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnalysisReport {
    pub name: String,
    pub learners: usize,
    pub score: ScoreBounds,
    pub constants: ProblemConstants,
    pub truncation_sigma: f64,
    /// `sigma^2_{m,N,delta/K}` at the configured `N`, `K` and trigger `delta`.
    pub sigma2_per_learner: Vec<f64>,
    pub alpha: f64,
    pub alpha_max: Option<f64>,
    pub stepsize_certified: Option<bool>,
    pub hardness: Option<HardnessProfile>,
    pub reduction: Option<CommReduction>,
    pub plan: Option<TheoremPlan>,
    /// Problems met while evaluating optional quantities.
    pub notes: Vec<String>,
}

/// Score bounds of the configured policy: certified when available, otherwise sampled
/// maxima over a box of parameters and observations.
fn score_for(cfg: &ExperimentConfig, instance: &super::Instance) -> Result<ScoreBounds> {
    if let Some(s) = instance.score_bounds() {
        return Ok(s);
    }
    let mut rng = seed_stream(cfg.seeds.master, CONTROLLER, 1, 0);
    let region = SampleBox {
        theta: (-1.0, 1.0),
        state: (-1.0, 1.0),
        action: (-1.0, 1.0),
        discrete_states: false,
    };
    let mut g2 = 0.0;
    let mut f: f64 = 0.0;
    for p in instance.bundle.policies() {
        let s = score_bounds_estimate(p, &region, 200, &mut rng)?;
        g2 += s.g * s.g;
        f = f.max(s.f);
    }
    Ok(ScoreBounds {
        g: g2.sqrt(),
        f,
        certified: false,
    })
}

fn keep<T>(notes: &mut Vec<String>, r: Result<T>, what: &str) -> Option<T> {
    r.map_err(|e| notes.push(format!("{what}: {e}"))).ok()
}

pub fn analyze(cfg: &ExperimentConfig) -> Result<AnalysisReport> {
    let instance = cfg.instantiate()?;
    let score = score_for(cfg, &instance)?;
    let constants = ProblemConstants::new(score, cfg.algo.gamma, &instance.loss_bounds())?;
    let trigger = cfg.trigger();
    let mut notes = Vec::new();
    let alpha_max = keep(&mut notes, crate::analysis::max_stepsize(&trigger.xi, constants.total_smoothness), "alpha_max");
    let hardness = keep(
        &mut notes,
        hardness_profile(&constants.smoothness, constants.total_smoothness, &trigger.xi, trigger.alpha),
        "hardness",
    );
    let reduction = match &hardness {
        Some(h) if !trigger.xi.is_empty() => keep(&mut notes, comm_reduction(h, &trigger.xi), "communication reduction"),
        _ => None,
    };
    let plan = keep(
        &mut notes,
        plan_parameters(
            &constants,
            &PlanRequest::new(cfg.analysis.epsilon, cfg.analysis.delta, trigger.xi.clone()),
        ),
        "plan",
    );
    let sigma2_per_learner = constants.sigma2(cfg.algo.batch_size, cfg.algo.iterations.max(1), trigger.delta)?;
    if !score.certified {
        notes.push("score bounds are sampled maxima, not certified bounds".into());
    }
    Ok(AnalysisReport {
        name: cfg.name.clone(),
        learners: instance.learners(),
        truncation_sigma: constants.truncation_sigma(cfg.algo.horizon),
        sigma2_per_learner,
        alpha: trigger.alpha,
        stepsize_certified: alpha_max.map(|a| trigger.alpha <= a),
        alpha_max,
        hardness,
        reduction,
        plan,
        notes,
        score,
        constants,
    })
}

impl fmt::Display for AnalysisReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "experiment          {}", self.name)?;
        writeln!(f, "learners            {}", self.learners)?;
        writeln!(
            f,
            "score bounds        G = {:.6}, F = {:.6} ({})",
            self.score.g,
            self.score.f,
            if self.score.certified { "certified" } else { "sampled" }
        )?;
        writeln!(f, "smoothness L_m      {:?}", self.constants.smoothness)?;
        writeln!(f, "smoothness L        {:.6}", self.constants.total_smoothness)?;
        writeln!(f, "deviation V_m       {:?}", self.constants.deviation)?;
        writeln!(f, "truncation sigma_T  {:.6e}", self.truncation_sigma)?;
        writeln!(f, "sigma^2_m           {:?}", self.sigma2_per_learner)?;
        write!(f, "stepsize            {}", self.alpha)?;
        match (self.alpha_max, self.stepsize_certified) {
            (Some(a), Some(ok)) => writeln!(f, " (alpha_max {a:.6e}, {})", if ok { "within" } else { "exceeds" })?,
            _ => writeln!(f)?,
        }
        if let Some(h) = &self.hardness {
            writeln!(f, "hardness H(m)       {:?}", h.hardness)?;
            writeln!(f, "thresholds gamma_d  {:?}", h.thresholds)?;
        }
        if let Some(r) = &self.reduction {
            writeln!(f, "delta C             {:.6}", r.delta_c)?;
            writeln!(f, "upload ratio bound  {:.6}", r.ratio_bound)?;
            writeln!(f, "strict improvement  {}", r.strict_improvement())?;
        }
        if let Some(p) = &self.plan {
            writeln!(
                f,
                "plan (eps {}, delta {})  T = {}, K = {}, N = {}, alpha = {:.6e}",
                p.epsilon, p.delta, p.horizon, p.iterations, p.batch_size, p.alpha
            )?;
        }
        for n in &self.notes {
            writeln!(f, "note: {n}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LearnerOracle {
    pub learner: usize,
    pub objective: f64,
    /// Largest relative gap between the enumeration and dynamic-programming gradients;
    /// `None` when enumeration is refused as too large.
    pub enumeration_vs_dp: Option<f64>,
    /// Largest relative error of central finite differences of the objective.
    pub finite_difference: f64,
    /// Distance of one configured batch estimate from the exact gradient.
    pub batch_distance: f64,
    /// Single-trajectory deviation bound `V_m`.
    pub deviation_bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleReport {
    pub name: String,
    pub horizon: usize,
    pub learners: Vec<LearnerOracle>,
    pub tolerance: f64,
    pub passed: bool,
}

const ORACLE_TOLERANCE: f64 = 1e-6;

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Checks the gradient oracles against each other at the first run's initial parameters.
pub fn oracle_check(cfg: &ExperimentConfig) -> Result<OracleReport> {
    let instance = cfg.instantiate()?;
    let theta = instance
        .bundle
        .init_params(&mut seed_stream(derive_master(cfg.seeds.master, 0), CONTROLLER, 0, 0));
    let spec = cfg.batch();
    let (horizon, gamma) = (spec.horizon, spec.gamma);
    let constants = instance.constants(gamma).transpose()?;
    let mut learners = Vec::new();
    for (m, task) in instance.tasks.iter().enumerate() {
        let mdp = task
            .env
            .tabular()
            .ok_or_else(|| Error::config("oracle-check needs a tabular environment"))?;
        let li = task.loss_index;
        let dp = exact_gradient_dp(mdp, &instance.bundle, &theta, li, horizon, gamma)?;
        let enumeration_vs_dp = match exact_gradient_enumerated(mdp, &instance.bundle, &theta, li, horizon, gamma) {
            Ok(e) => Some(e.grad.iter().zip(dp.grad.iter()).map(|(a, b)| rel(*a, *b)).fold(0.0, f64::max)),
            Err(Error::EnumerationTooLarge { .. }) => None,
            Err(e) => return Err(e),
        };
        let h = 1e-5;
        let mut probe = theta.to_vec();
        let mut finite_difference: f64 = 0.0;
        for j in 0..theta.len() {
            probe[j] = theta[j] + h;
            let up = exact_gradient_dp(mdp, &instance.bundle, &probe, li, horizon, gamma)?.objective;
            probe[j] = theta[j] - h;
            let down = exact_gradient_dp(mdp, &instance.bundle, &probe, li, horizon, gamma)?.objective;
            probe[j] = theta[j];
            finite_difference = finite_difference.max(rel((up - down) / (2.0 * h), dp.grad[j]));
        }
        let batch = gpomdp_batch(task, &instance.bundle, &theta, m, 0, &spec, cfg.seeds.master)?;
        learners.push(LearnerOracle {
            learner: m + 1,
            objective: dp.objective,
            enumeration_vs_dp,
            finite_difference,
            batch_distance: batch.grad.distance_sq(&dp.grad).sqrt(),
            deviation_bound: constants.as_ref().map_or(f64::NAN, |c| c.deviation[m]),
        });
    }
    let passed = learners.iter().all(|l| {
        l.enumeration_vs_dp.is_none_or(|e| e < ORACLE_TOLERANCE) && l.finite_difference < ORACLE_TOLERANCE
    });
    Ok(OracleReport {
        name: cfg.name.clone(),
        horizon,
        learners,
        tolerance: ORACLE_TOLERANCE,
        passed,
    })
}

impl fmt::Display for OracleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "experiment {} (horizon {})", self.name, self.horizon)?;
        for l in &self.learners {
            writeln!(
                f,
                "learner {}: objective {:.6}, enumeration vs dp {}, finite differences {:.3e}, batch distance {:.4} (V_m {:.4})",
                l.learner,
                l.objective,
                l.enumeration_vs_dp.map_or("skipped".to_string(), |e| format!("{e:.3e}")),
                l.finite_difference,
                l.batch_distance,
                l.deviation_bound
            )?;
        }
        writeln!(f, "{}", if self.passed { "PASS" } else { "FAIL" })
    }
}
