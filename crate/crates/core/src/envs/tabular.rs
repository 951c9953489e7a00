use std::fmt::Write as _;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Step, Trajectory};
use crate::error::{Error, Result};
use crate::space::{Action, State};

/// Largest number of support paths [`TabularMdp::enumerate`] will walk.
pub const ENUMERATION_LIMIT: f64 = 1e7;

const ROW_TOLERANCE: f64 = 1e-12;

/// A finite MDP with joint actions and one loss table per learner.
///
/// `transitions[(s * actions + a) * states + s']` holds `P(s' | s, a)` and
/// `losses[m][s * actions + a]` holds `l_m(s, a)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularMdp {
    pub states: usize,
    pub actions: usize,
    pub transitions: Vec<f64>,
    pub rho: Vec<f64>,
    pub losses: Vec<Vec<f64>>,
    /// Per-learner loss bounds; every entry of `losses[m]` lies in `[0, bounds[m]]`.
    pub bounds: Vec<f64>,
}

impl TabularMdp {
    /// Builds and validates an MDP. When `bounds` is `None` each learner's bound is the
    /// largest entry of its table (or 1 for an all-zero table).
    pub fn new(
        states: usize,
        actions: usize,
        transitions: Vec<f64>,
        rho: Vec<f64>,
        losses: Vec<Vec<f64>>,
        bounds: Option<Vec<f64>>,
    ) -> Result<Self> {
        let bounds = bounds.unwrap_or_else(|| {
            losses
                .iter()
                .map(|table| {
                    let max = table.iter().copied().fold(0.0, f64::max);
                    if max > 0.0 {
                        max
                    } else {
                        1.0
                    }
                })
                .collect()
        });
        let mdp = TabularMdp {
            states,
            actions,
            transitions,
            rho,
            losses,
            bounds,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    /// Random instance: transition rows and `rho` from normalized uniforms,
    /// losses uniform in `[0, 1)`, bounds 1.
    pub fn random<R: Rng + ?Sized>(states: usize, actions: usize, learners: usize, rng: &mut R) -> Result<Self> {
        let mut transitions = Vec::with_capacity(states * actions * states);
        for _ in 0..states * actions {
            transitions.extend(random_simplex(states, rng));
        }
        let rho = random_simplex(states, rng);
        let losses = (0..learners)
            .map(|_| (0..states * actions).map(|_| rng.random::<f64>()).collect())
            .collect();
        Self::new(states, actions, transitions, rho, losses, Some(vec![1.0; learners]))
    }

    pub fn validate(&self) -> Result<()> {
        let (s, a) = (self.states, self.actions);
        if s == 0 || a == 0 {
            return Err(Error::config("tabular MDP needs at least one state and one action"));
        }
        if self.transitions.len() != s * a * s {
            return Err(Error::config(format!(
                "transition tensor has {} entries, expected {}",
                self.transitions.len(),
                s * a * s
            )));
        }
        for (i, row) in self.transitions.chunks_exact(s).enumerate() {
            check_distribution(row, &format!("transition row (s={}, a={})", i / a, i % a))?;
        }
        if self.rho.len() != s {
            return Err(Error::config(format!("rho has {} entries, expected {s}", self.rho.len())));
        }
        check_distribution(&self.rho, "initial distribution")?;
        if self.losses.is_empty() {
            return Err(Error::config("tabular MDP needs at least one loss table"));
        }
        if self.bounds.len() != self.losses.len() {
            return Err(Error::config("one loss bound per learner is required"));
        }
        for (m, (table, &bound)) in self.losses.iter().zip(&self.bounds).enumerate() {
            if table.len() != s * a {
                return Err(Error::config(format!("loss table {m} has the wrong size")));
            }
            if !(bound > 0.0 && bound.is_finite()) {
                return Err(Error::config(format!("loss bound {m} must be positive and finite")));
            }
            if let Some(v) = table.iter().find(|v| !(**v >= 0.0 && **v <= bound)) {
                return Err(Error::config(format!(
                    "loss table {m} has entry {v} outside [0, {bound}]"
                )));
            }
        }
        Ok(())
    }

    pub fn learners(&self) -> usize {
        self.losses.len()
    }

    pub fn p(&self, s: usize, a: usize, next: usize) -> f64 {
        self.transitions[(s * self.actions + a) * self.states + next]
    }

    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.actions + a) * self.states;
        &self.transitions[start..start + self.states]
    }

    pub fn loss(&self, m: usize, s: usize, a: usize) -> f64 {
        self.losses[m][s * self.actions + a]
    }

    pub(crate) fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> State {
        State::Discrete(sample_index(&self.rho, rng.random()))
    }

    pub(crate) fn step<R: Rng + ?Sized>(
        &self,
        state: &State,
        actions: &[Action],
        rng: &mut R,
    ) -> Result<(State, Vec<f64>)> {
        let s = self.check_state(state)?;
        let a = self.check_action(actions)?;
        let losses = self.losses.iter().map(|t| t[s * self.actions + a]).collect();
        let next = sample_index(self.row(s, a), rng.random());
        Ok((State::Discrete(next), losses))
    }

    fn check_state(&self, state: &State) -> Result<usize> {
        match state {
            State::Discrete(s) if *s < self.states => Ok(*s),
            other => Err(Error::config(format!("invalid tabular state {other:?}"))),
        }
    }

    fn check_action(&self, actions: &[Action]) -> Result<usize> {
        match actions {
            [Action::Discrete(a)] if *a < self.actions => Ok(*a),
            other => Err(Error::config(format!("invalid tabular joint action {other:?}"))),
        }
    }

    /// Number of `(s_0, a_0, ..., s_T, a_T)` sequences, before pruning zero-probability ones.
    pub fn path_count(&self, horizon: usize) -> f64 {
        ((self.states * self.actions) as f64).powi(horizon as i32 + 1)
    }

    /// Every support trajectory of length `horizon + 1` together with its
    /// `rho(s_0) prod P(s_{t+1} | s_t, a_t)` factor. Policy factors are left to the caller,
    /// so every action is enumerated at every step.
    pub fn enumerate(&self, horizon: usize) -> Result<PathIter<'_>> {
        let paths = self.path_count(horizon);
        if paths > ENUMERATION_LIMIT {
            return Err(Error::EnumerationTooLarge {
                paths,
                limit: ENUMERATION_LIMIT,
            });
        }
        Ok(PathIter::new(self, horizon))
    }

    /// Plain-text form accepted by [`FromStr`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# states actions learners");
        let _ = writeln!(out, "{} {} {}", self.states, self.actions, self.learners());
        let _ = writeln!(out, "# transition rows P(. | s, a), s-major");
        for row in self.transitions.chunks_exact(self.states) {
            let _ = writeln!(out, "{}", join(row));
        }
        let _ = writeln!(out, "# initial distribution");
        let _ = writeln!(out, "{}", join(&self.rho));
        for (m, table) in self.losses.iter().enumerate() {
            let _ = writeln!(out, "# loss table of learner {m}, one row per state");
            for row in table.chunks_exact(self.actions) {
                let _ = writeln!(out, "{}", join(row));
            }
        }
        let _ = writeln!(out, "# loss bounds");
        let _ = writeln!(out, "{}", join(&self.bounds));
        out
    }
}

/// Parses the plain-text matrix format:
///
/// ```text
/// # comments run to end of line
/// S A M
/// <S*A rows of S transition probabilities>
/// <S entries of rho>
/// <M tables of S rows with A losses each>
/// <optional line of M loss bounds>
/// ```
///
/// Line breaks are not significant; entries are read in order.
impl FromStr for TabularMdp {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut tokens = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or(""))
            .flat_map(str::split_whitespace);
        let mut count = |what: &str| -> Result<usize> {
            tokens
                .next()
                .ok_or_else(|| Error::config(format!("missing {what} in header")))?
                .parse::<usize>()
                .map_err(|e| Error::config(format!("bad {what}: {e}")))
        };
        let states = count("state count")?;
        let actions = count("action count")?;
        let learners = count("learner count")?;
        let values: Vec<f64> = tokens
            .map(|t| t.parse::<f64>().map_err(|e| Error::config(format!("bad number {t:?}: {e}"))))
            .collect::<Result<_>>()?;

        let sa = states * actions;
        let required = sa * states + states + learners * sa;
        let bounds = match values.len() {
            n if n == required => None,
            n if n == required + learners => Some(values[required..].to_vec()),
            n => {
                return Err(Error::config(format!(
                    "expected {required} entries (or {} with bounds), found {n}",
                    required + learners
                )))
            }
        };
        let transitions = values[..sa * states].to_vec();
        let rho = values[sa * states..sa * states + states].to_vec();
        let losses = values[sa * states + states..required]
            .chunks_exact(sa.max(1))
            .map(<[f64]>::to_vec)
            .collect();
        TabularMdp::new(states, actions, transitions, rho, losses, bounds)
    }
}

/// One enumerated support path.
#[derive(Clone, Debug, PartialEq)]
pub struct Path {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    /// `rho(s_0) prod_t P(s_{t+1} | s_t, a_t)`.
    pub weight: f64,
}

impl Path {
    pub fn to_trajectory(&self, mdp: &TabularMdp) -> Trajectory {
        let steps = self
            .states
            .iter()
            .zip(&self.actions)
            .map(|(&s, &a)| Step {
                state: State::Discrete(s),
                actions: vec![Action::Discrete(a)],
                losses: (0..mdp.learners()).map(|m| mdp.loss(m, s, a)).collect(),
            })
            .collect();
        Trajectory { steps, seed: None }
    }
}

/// Depth-first walk over support paths.
pub struct PathIter<'a> {
    mdp: &'a TabularMdp,
    len: usize,
    // choice[2t] = s_t, choice[2t + 1] = a_t; prefix weights per depth
    choice: Vec<usize>,
    weight: Vec<f64>,
    started: bool,
    done: bool,
}

impl<'a> PathIter<'a> {
    fn new(mdp: &'a TabularMdp, horizon: usize) -> Self {
        PathIter {
            mdp,
            len: 2 * (horizon + 1),
            choice: Vec::new(),
            weight: Vec::new(),
            started: false,
            done: false,
        }
    }

    /// Weight of setting position `pos` to `value` given the current prefix.
    fn factor(&self, pos: usize, value: usize) -> f64 {
        if pos == 0 {
            self.mdp.rho[value]
        } else if pos % 2 == 1 {
            1.0
        } else {
            self.mdp.p(self.choice[pos - 2], self.choice[pos - 1], value)
        }
    }

    fn width(&self, pos: usize) -> usize {
        if pos % 2 == 0 {
            self.mdp.states
        } else {
            self.mdp.actions
        }
    }

    /// Extends the prefix with the first support value at each depth starting at `from`,
    /// backtracking as needed. Returns false when the tree is exhausted.
    fn descend(&mut self, mut from: usize) -> bool {
        loop {
            let pos = self.choice.len();
            if pos == self.len {
                return true;
            }
            let parent = if pos == 0 { 1.0 } else { self.weight[pos - 1] };
            match (from..self.width(pos)).find(|&v| self.factor(pos, v) > 0.0) {
                Some(v) => {
                    let w = parent * self.factor(pos, v);
                    self.choice.push(v);
                    self.weight.push(w);
                    from = 0;
                }
                None => match self.choice.pop() {
                    Some(last) => {
                        self.weight.pop();
                        from = last + 1;
                    }
                    None => return false,
                },
            }
        }
    }
}

impl Iterator for PathIter<'_> {
    type Item = Path;

    fn next(&mut self) -> Option<Path> {
        if self.done {
            return None;
        }
        let found = if self.started {
            let last = self.choice.pop().expect("non-empty after a yielded path");
            self.weight.pop();
            self.descend(last + 1)
        } else {
            self.started = true;
            self.descend(0)
        };
        if !found {
            self.done = true;
            return None;
        }
        Some(Path {
            states: self.choice.iter().step_by(2).copied().collect(),
            actions: self.choice.iter().skip(1).step_by(2).copied().collect(),
            weight: *self.weight.last().expect("full path"),
        })
    }
}

fn check_distribution(row: &[f64], what: &str) -> Result<()> {
    if row.iter().any(|p| !(*p >= 0.0 && p.is_finite())) {
        return Err(Error::config(format!("{what} has a negative or non-finite entry")));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > ROW_TOLERANCE {
        return Err(Error::config(format!("{what} sums to {sum}, not 1")));
    }
    Ok(())
}

fn random_simplex<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.05).collect();
    let sum: f64 = raw.iter().sum();
    let mut row: Vec<f64> = raw.iter().map(|v| v / sum).collect();
    // put the rounding residue on the largest entry so the row sums to 1 closely
    let residue = 1.0 - row.iter().sum::<f64>();
    let (imax, _) = row
        .iter()
        .enumerate()
        .fold((0, f64::MIN), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
    row[imax] += residue;
    row
}

/// Inverse-CDF draw from a discrete distribution.
pub(crate) fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last_support = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_support = i;
        }
        acc += p;
        if u < acc && p > 0.0 {
            return i;
        }
    }
    last_support
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(" ")
}
