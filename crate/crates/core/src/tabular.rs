//! Finite MDPs, the value-iteration oracle, and tabular Q / double / cross
//! Q-learning with convergence traces against `Q*`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{self, SimRng};
use crate::util::argmax;

/// Zero-mean noise added to a reward mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RewardNoise {
    None,
    /// Uniform on `[-width/2, width/2]`.
    Uniform { width: f64 },
    /// `+high` with probability `p_high`, otherwise `-high * p_high / (1 - p_high)`.
    TwoPoint { p_high: f64, high: f64 },
}

impl RewardNoise {
    fn validate(&self) -> Result<()> {
        match *self {
            RewardNoise::None => Ok(()),
            RewardNoise::Uniform { width } if width >= 0.0 && width.is_finite() => Ok(()),
            RewardNoise::TwoPoint { p_high, high }
                if p_high > 0.0 && p_high < 1.0 && high.is_finite() =>
            {
                Ok(())
            }
            other => Err(Error::config(format!("invalid reward noise {other:?}"))),
        }
    }

    pub fn sample(&self, rng: &mut SimRng) -> f64 {
        match *self {
            RewardNoise::None => 0.0,
            RewardNoise::Uniform { width } => {
                if width == 0.0 {
                    0.0
                } else {
                    rng.random_range(-width / 2.0..width / 2.0)
                }
            }
            RewardNoise::TwoPoint { p_high, high } => {
                if rng.random::<f64>() < p_high {
                    high
                } else {
                    -high * p_high / (1.0 - p_high)
                }
            }
        }
    }
}

/// Explicit finite MDP `<S, A, T, R, gamma>` with terminal flags and an
/// initial-state distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteMdp {
    n_states: usize,
    n_actions: usize,
    /// `[s][a][s']`, flattened.
    transitions: Vec<f64>,
    rewards: Vec<f64>,
    noise: Vec<RewardNoise>,
    terminal: Vec<bool>,
    gamma: f64,
    initial: Vec<f64>,
}

/// Row-building input for [`FiniteMdp::new`].
#[derive(Debug, Clone)]
pub struct MdpSpec {
    pub n_states: usize,
    pub n_actions: usize,
    /// `transitions[s][a]` is a distribution over next states.
    pub transitions: Vec<Vec<Vec<f64>>>,
    pub rewards: Vec<Vec<f64>>,
    pub noise: Vec<Vec<RewardNoise>>,
    pub terminal: Vec<bool>,
    pub gamma: f64,
    /// Distribution over episode start states; must avoid terminal states.
    pub initial: Vec<f64>,
}

impl MdpSpec {
    /// All-zero rewards, no noise, every state non-terminal, all transitions
    /// self-loops. Callers fill in what they need.
    pub fn blank(n_states: usize, n_actions: usize, gamma: f64) -> Self {
        let transitions = (0..n_states)
            .map(|s| {
                (0..n_actions)
                    .map(|_| {
                        let mut row = vec![0.0; n_states];
                        row[s] = 1.0;
                        row
                    })
                    .collect()
            })
            .collect();
        Self {
            n_states,
            n_actions,
            transitions,
            rewards: vec![vec![0.0; n_actions]; n_states],
            noise: vec![vec![RewardNoise::None; n_actions]; n_states],
            terminal: vec![false; n_states],
            gamma,
            initial: one_hot(n_states, 0),
        }
    }

    pub fn deterministic(&mut self, s: usize, a: usize, next: usize, reward: f64) {
        let mut row = vec![0.0; self.n_states];
        row[next] = 1.0;
        self.transitions[s][a] = row;
        self.rewards[s][a] = reward;
    }
}

const ROW_SUM_TOL: f64 = 1e-12;

fn one_hot(n: usize, at: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[at] = 1.0;
    v
}

fn sample_index(probs: &[f64], rng: &mut SimRng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left a sliver above the last cumulative value.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

impl FiniteMdp {
    pub fn new(spec: MdpSpec) -> Result<Self> {
        let MdpSpec {
            n_states,
            n_actions,
            transitions,
            rewards,
            noise,
            terminal,
            gamma,
            initial,
        } = spec;
        if n_states == 0 || n_actions == 0 {
            return Err(Error::config("MDP needs at least one state and one action"));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::config(format!("discount must lie in [0, 1), got {gamma}")));
        }
        if transitions.len() != n_states
            || rewards.len() != n_states
            || noise.len() != n_states
            || terminal.len() != n_states
        {
            return Err(Error::config("per-state tables must have one entry per state"));
        }
        if initial.len() != n_states || initial.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::config("initial distribution must have one weight per state"));
        }
        if (initial.iter().sum::<f64>() - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::config("initial distribution must sum to 1"));
        }
        if let Some(s) = (0..n_states).find(|&s| terminal[s] && initial[s] > 0.0) {
            return Err(Error::config(format!("episodes cannot start in terminal state {s}")));
        }
        let mut flat = Vec::with_capacity(n_states * n_actions * n_states);
        for s in 0..n_states {
            if transitions[s].len() != n_actions
                || rewards[s].len() != n_actions
                || noise[s].len() != n_actions
            {
                return Err(Error::config(format!("state {s}: need one entry per action")));
            }
            for a in 0..n_actions {
                let row = &transitions[s][a];
                if row.len() != n_states || row.iter().any(|&p| !(p >= 0.0)) {
                    return Err(Error::config(format!("T[{s}][{a}] is not a distribution")));
                }
                let total: f64 = row.iter().sum();
                if (total - 1.0).abs() > ROW_SUM_TOL {
                    return Err(Error::config(format!("T[{s}][{a}] sums to {total}")));
                }
                if !rewards[s][a].is_finite() {
                    return Err(Error::config(format!("R[{s}][{a}] is not finite")));
                }
                noise[s][a].validate()?;
                if terminal[s]
                    && (row[s] != 1.0 || rewards[s][a] != 0.0 || noise[s][a] != RewardNoise::None)
                {
                    return Err(Error::config(format!(
                        "terminal state {s} must self-loop with zero reward"
                    )));
                }
                flat.extend_from_slice(row);
            }
        }
        Ok(Self {
            n_states,
            n_actions,
            transitions: flat,
            rewards: rewards.into_iter().flatten().collect(),
            noise: noise.into_iter().flatten().collect(),
            terminal,
            gamma,
            initial,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn initial_distribution(&self) -> &[f64] {
        &self.initial
    }

    pub fn sample_start(&self, rng: &mut SimRng) -> usize {
        sample_index(&self.initial, rng)
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let base = (s * self.n_actions + a) * self.n_states;
        &self.transitions[base..base + self.n_states]
    }

    pub fn reward_mean(&self, s: usize, a: usize) -> f64 {
        self.rewards[s * self.n_actions + a]
    }

    pub fn reward_noise(&self, s: usize, a: usize) -> RewardNoise {
        self.noise[s * self.n_actions + a]
    }

    pub fn check_index(&self, s: usize, a: usize) -> Result<()> {
        if s >= self.n_states || a >= self.n_actions {
            return Err(Error::Index(format!(
                "(s={s}, a={a}) outside {}x{} MDP",
                self.n_states, self.n_actions
            )));
        }
        Ok(())
    }

    pub fn sample_next(&self, s: usize, a: usize, rng: &mut SimRng) -> usize {
        sample_index(self.transition_row(s, a), rng)
    }

    pub fn sample_reward(&self, s: usize, a: usize, rng: &mut SimRng) -> f64 {
        self.reward_mean(s, a) + self.reward_noise(s, a).sample(rng)
    }

    /// One application of the Bellman optimality operator.
    pub fn bellman_backup(&self, q: &QTable) -> QTable {
        let v: Vec<f64> = (0..self.n_states)
            .map(|s| {
                if self.terminal[s] {
                    0.0
                } else {
                    q.max_value(s)
                }
            })
            .collect();
        let mut out = QTable::zeros(self.n_states, self.n_actions);
        for s in 0..self.n_states {
            if self.terminal[s] {
                continue;
            }
            for a in 0..self.n_actions {
                let expected: f64 = self
                    .transition_row(s, a)
                    .iter()
                    .zip(&v)
                    .map(|(p, vs)| p * vs)
                    .sum();
                out.set(s, a, self.reward_mean(s, a) + self.gamma * expected);
            }
        }
        out
    }

    /// Max-norm Bellman residual `||T q - q||`.
    pub fn bellman_residual(&self, q: &QTable) -> f64 {
        self.bellman_backup(q).max_norm_distance(q)
    }
}

/// Shipped MDPs.
pub mod presets {
    use super::*;

    /// One state, one action, reward `r` forever.
    pub fn single_state(reward: f64, gamma: f64) -> Result<FiniteMdp> {
        let mut spec = MdpSpec::blank(1, 1, gamma);
        spec.rewards[0][0] = reward;
        FiniteMdp::new(spec)
    }

    /// `s0 -> s1` with reward 0, then `s1 -> end` with reward 1.
    pub fn two_step_chain(gamma: f64) -> Result<FiniteMdp> {
        let mut spec = MdpSpec::blank(3, 1, gamma);
        spec.deterministic(0, 0, 1, 0.0);
        spec.deterministic(1, 0, 2, 1.0);
        spec.terminal[2] = true;
        FiniteMdp::new(spec)
    }

    /// Shape of a generated MDP.
    #[derive(Debug, Clone, Copy, PartialEq)]
    pub struct RandomMdp {
        /// States that episodes pass through.
        pub transient: usize,
        /// Terminal states appended after the transient ones.
        pub absorbing: usize,
        pub actions: usize,
        pub gamma: f64,
        pub noise_width: f64,
        /// Probability that any transient `(s, a)` ends the episode, split
        /// evenly over the absorbing states.
        pub end_prob: f64,
    }

    impl RandomMdp {
        /// 3 transient + 3 absorbing states, 3 actions, gamma 0.95, noise width 2.
        pub const BENCHMARK: RandomMdp = RandomMdp {
            transient: 3,
            absorbing: 3,
            actions: 3,
            gamma: 0.95,
            noise_width: 2.0,
            end_prob: 0.75,
        };

        /// Draw transition weights and reward means from `seed`.
        ///
        /// Mass that stays in the episode is spread over the transient states
        /// by normalized uniform weights; reward means are uniform on
        /// `[-1, 1]`. Episodes start uniformly over the transient states.
        pub fn generate(&self, seed: u64) -> Result<FiniteMdp> {
            if self.transient == 0 || self.absorbing == 0 {
                return Err(Error::config("random MDP needs transient and absorbing states"));
            }
            if !(0.0..=1.0).contains(&self.end_prob) {
                return Err(Error::config("end_prob must lie in [0, 1]"));
            }
            let mut rng = rng::stream(seed, "random-mdp");
            let n = self.transient + self.absorbing;
            let mut spec = MdpSpec::blank(n, self.actions, self.gamma);
            for t in self.transient..n {
                spec.terminal[t] = true;
            }
            spec.initial = (0..n)
                .map(|s| if s < self.transient { 1.0 / self.transient as f64 } else { 0.0 })
                .collect();
            let per_end = self.end_prob / self.absorbing as f64;
            for s in 0..self.transient {
                for a in 0..self.actions {
                    let weights: Vec<f64> =
                        (0..self.transient).map(|_| rng.random_range(0.05..1.0)).collect();
                    let total: f64 = weights.iter().sum();
                    let mut row: Vec<f64> = weights
                        .iter()
                        .map(|w| w / total * (1.0 - self.end_prob))
                        .collect();
                    row.extend(std::iter::repeat_n(per_end, self.absorbing));
                    // Put the rounding remainder on the last entry so the row sums to 1.
                    let partial: f64 = row[..n - 1].iter().sum();
                    row[n - 1] = 1.0 - partial;
                    spec.transitions[s][a] = row;
                    spec.rewards[s][a] = rng.random_range(-1.0..1.0);
                    spec.noise[s][a] = RewardNoise::Uniform {
                        width: self.noise_width,
                    };
                }
            }
            FiniteMdp::new(spec)
        }
    }

    /// Fixed-seed 6-state, 3-action MDP used by the convergence checks.
    pub fn convergence_benchmark() -> FiniteMdp {
        RandomMdp::BENCHMARK
            .generate(CONVERGENCE_SEED)
            .expect("benchmark MDP is valid")
    }

    pub const CONVERGENCE_SEED: u64 = 2024;

    /// Start state `A`: action 0 moves to `B` for free, every other action
    /// ends the episode with reward -1. Every action in `B` ends the episode
    /// with mean reward 0 and uniform noise of width 4, so `Q*(A) = 0` while
    /// the greedy max over `B`'s noisy estimates drifts upward.
    pub fn maximization_bias(n_actions: usize, gamma: f64) -> Result<FiniteMdp> {
        if n_actions < 2 {
            return Err(Error::config("maximization-bias MDP needs at least two actions"));
        }
        let mut spec = MdpSpec::blank(3, n_actions, gamma);
        let (a, b, end) = (0, 1, 2);
        spec.deterministic(a, 0, b, 0.0);
        for act in 0..n_actions {
            if act > 0 {
                spec.deterministic(a, act, end, -1.0);
            }
            spec.deterministic(b, act, end, 0.0);
            spec.noise[b][act] = RewardNoise::Uniform { width: 4.0 };
        }
        spec.terminal[end] = true;
        FiniteMdp::new(spec)
    }
}

/// Tabular action values.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    n_states: usize,
    n_actions: usize,
    values: Vec<f64>,
}

impl QTable {
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            values: vec![0.0; n_states * n_actions],
        }
    }

    pub fn for_mdp(mdp: &FiniteMdp) -> Self {
        Self::zeros(mdp.n_states, mdp.n_actions)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    #[inline]
    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    #[inline]
    pub fn set(&mut self, s: usize, a: usize, v: f64) {
        self.values[s * self.n_actions + a] = v;
    }

    #[inline]
    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn max_value(&self, s: usize) -> f64 {
        self.row(s).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn greedy(&self, s: usize) -> usize {
        argmax(self.row(s))
    }

    pub fn max_norm_distance(&self, other: &QTable) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn mean_of(tables: &[QTable]) -> QTable {
        let mut out = QTable::zeros(tables[0].n_states, tables[0].n_actions);
        let k = tables.len() as f64;
        for t in tables {
            for (o, v) in out.values.iter_mut().zip(&t.values) {
                *o += v;
            }
        }
        out.values.iter_mut().for_each(|v| *v /= k);
        out
    }

    fn check(&self, t: &Experience) -> Result<()> {
        if t.s >= self.n_states || t.s_next >= self.n_states || t.a >= self.n_actions {
            return Err(Error::Index(format!(
                "transition ({}, {}, -> {}) outside {}x{} table",
                t.s, t.a, t.s_next, self.n_states, self.n_actions
            )));
        }
        Ok(())
    }
}

/// Solve the Bellman optimality equations by fixed-point iteration.
///
/// Returns a table whose max-norm Bellman residual is below `tol`.
pub fn value_iteration(mdp: &FiniteMdp, tol: f64) -> Result<QTable> {
    if !(mdp.gamma < 1.0) {
        return Err(Error::config("value iteration needs gamma < 1"));
    }
    if !(tol > 0.0) {
        return Err(Error::config("tolerance must be positive"));
    }
    let mut q = QTable::for_mdp(mdp);
    loop {
        let next = mdp.bellman_backup(&q);
        let delta = next.max_norm_distance(&q);
        q = next;
        // ||T q' - q'|| <= gamma * ||q' - q|| < tol
        if delta < tol {
            return Ok(q);
        }
    }
}

/// One observed step `<s, a, r, s', done>` in a finite MDP.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Experience {
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub s_next: usize,
    pub done: bool,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config(format!("step size {alpha} outside [0, 1]")));
    }
    Ok(())
}

/// Q-learning update in place.
pub fn q_step(table: &mut QTable, t: &Experience, alpha: f64, gamma: f64) -> Result<()> {
    table.check(t)?;
    check_alpha(alpha)?;
    let target = if t.done {
        t.r
    } else {
        t.r + gamma * table.max_value(t.s_next)
    };
    let q = table.get(t.s, t.a);
    table.set(t.s, t.a, q + alpha * (target - q));
    Ok(())
}

/// Which of the two tables a double-Q step updated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Updated {
    A,
    B,
}

/// Double Q-learning; a fair coin picks the table that learns.
pub fn double_q_step(
    table_a: &mut QTable,
    table_b: &mut QTable,
    t: &Experience,
    alpha: f64,
    gamma: f64,
    rng: &mut SimRng,
) -> Result<Updated> {
    table_a.check(t)?;
    table_b.check(t)?;
    check_alpha(alpha)?;
    let (learner, evaluator, which) = if rng.random::<bool>() {
        (table_a, &*table_b, Updated::A)
    } else {
        (table_b, &*table_a, Updated::B)
    };
    select_evaluate_update(learner, evaluator, t, alpha, gamma);
    Ok(which)
}

fn select_evaluate_update(
    learner: &mut QTable,
    evaluator: &QTable,
    t: &Experience,
    alpha: f64,
    gamma: f64,
) {
    let target = if t.done {
        t.r
    } else {
        let best = learner.greedy(t.s_next);
        t.r + gamma * evaluator.get(t.s_next, best)
    };
    let q = learner.get(t.s, t.a);
    learner.set(t.s, t.a, q + alpha * (target - q));
}

/// Cross Q-learning: table `i` selects `a'`, table `j` evaluates it; only `i` changes.
pub fn cross_q_step(
    tables: &mut [QTable],
    i: usize,
    j: usize,
    t: &Experience,
    alpha: f64,
    gamma: f64,
) -> Result<()> {
    let k = tables.len();
    if k < 2 {
        return Err(Error::config(format!("cross step needs K >= 2, got {k}")));
    }
    if i == j {
        return Err(Error::config("learner and evaluator must differ"));
    }
    if i >= k || j >= k {
        return Err(Error::Index(format!("table index out of range for K = {k}")));
    }
    check_alpha(alpha)?;
    tables[i].check(t)?;
    tables[j].check(t)?;
    let (learner, evaluator) = if i < j {
        let (head, tail) = tables.split_at_mut(j);
        (&mut head[i], &tail[0])
    } else {
        let (head, tail) = tables.split_at_mut(i);
        (&mut tail[0], &head[j])
    };
    select_evaluate_update(learner, evaluator, t, alpha, gamma);
    Ok(())
}

/// Step sizes and exploration for tabular runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearningSchedule {
    /// `alpha = 1 / n(s, a)^omega`, with `n` the table's update count for the pair.
    pub omega: f64,
    pub epsilon: f64,
}

impl Default for LearningSchedule {
    fn default() -> Self {
        Self {
            omega: 0.8,
            epsilon: 0.1,
        }
    }
}

impl LearningSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega > 0.5 && self.omega <= 1.0) {
            return Err(Error::config(format!("omega {} outside (0.5, 1]", self.omega)));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::config(format!("epsilon {} outside [0, 1]", self.epsilon)));
        }
        Ok(())
    }

    pub fn alpha(&self, visits: u64) -> f64 {
        (visits.max(1) as f64).powf(-self.omega)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TabularAlgo {
    Q,
    Double,
    Cross,
}

impl TabularAlgo {
    pub fn name(self) -> &'static str {
        match self {
            TabularAlgo::Q => "q",
            TabularAlgo::Double => "double",
            TabularAlgo::Cross => "cross",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "q" => Ok(TabularAlgo::Q),
            "double" => Ok(TabularAlgo::Double),
            "cross" => Ok(TabularAlgo::Cross),
            other => Err(Error::config(format!(
                "unknown tabular algo `{other}` (q | double | cross)"
            ))),
        }
    }

    pub fn check_k(self, k: usize) -> Result<()> {
        let ok = match self {
            TabularAlgo::Q => k == 1,
            TabularAlgo::Double => k == 2,
            TabularAlgo::Cross => k >= 2,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!(
                "algo {} is inconsistent with K = {k} (q: 1, double: 2, cross: >= 2)",
                self.name()
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint {
    pub step: u64,
    pub max_norm_error: f64,
}

/// Everything a tabular run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularOutcome {
    pub q_star: QTable,
    pub tables: Vec<QTable>,
    pub trace: Vec<TracePoint>,
}

impl TabularOutcome {
    pub fn mean_table(&self) -> QTable {
        QTable::mean_of(&self.tables)
    }

    pub fn final_error(&self) -> f64 {
        self.trace.last().map_or(f64::NAN, |p| p.max_norm_error)
    }
}

/// Tolerance used for the `Q*` oracle inside [`run_tabular`].
pub const ORACLE_TOL: f64 = 1e-12;

/// Learn on `mdp` for `steps` environment steps.
///
/// The behavior policy is epsilon-greedy on the mean of the K tables; episodes
/// restart from the initial distribution. Cross picks learner `i` uniformly and evaluator
/// `j` uniformly from the remaining `K - 1` on every step. The trace records
/// the max-norm distance of the mean table to `Q*` every `trace_every` steps
/// and at the final step.
pub fn run_tabular(
    mdp: &FiniteMdp,
    algo: TabularAlgo,
    k: usize,
    steps: u64,
    schedule: LearningSchedule,
    trace_every: u64,
    seed: u64,
) -> Result<TabularOutcome> {
    algo.check_k(k)?;
    schedule.validate()?;
    if trace_every == 0 {
        return Err(Error::config("trace_every must be >= 1"));
    }
    let q_star = value_iteration(mdp, ORACLE_TOL)?;
    let mut env_rng = rng::stream(seed, "env");
    let mut behavior_rng = rng::stream(seed, "exploration");
    let mut learner_rng = rng::stream(seed, "learner");

    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut tables = vec![QTable::zeros(ns, na); k];
    let mut visits = vec![vec![0u64; ns * na]; k];
    let mut trace = Vec::new();
    let mut s = mdp.sample_start(&mut env_rng);

    for step in 1..=steps {
        let greedy_table;
        let behavior = if k == 1 {
            &tables[0]
        } else {
            greedy_table = QTable::mean_of(&tables);
            &greedy_table
        };
        let a = if behavior_rng.random::<f64>() < schedule.epsilon {
            behavior_rng.random_range(0..na)
        } else {
            behavior.greedy(s)
        };
        let s_next = mdp.sample_next(s, a, &mut env_rng);
        let r = mdp.sample_reward(s, a, &mut env_rng);
        let t = Experience {
            s,
            a,
            r,
            s_next,
            done: mdp.is_terminal(s_next),
        };
        let cell = s * na + a;
        let gamma = mdp.gamma();
        match algo {
            TabularAlgo::Q => {
                visits[0][cell] += 1;
                q_step(&mut tables[0], &t, schedule.alpha(visits[0][cell]), gamma)?;
            }
            TabularAlgo::Double => {
                // Flip the coin here so the visit count belongs to the updated table.
                let (first, rest) = tables.split_at_mut(1);
                let learner = if learner_rng.random::<bool>() { 0 } else { 1 };
                visits[learner][cell] += 1;
                let alpha = schedule.alpha(visits[learner][cell]);
                if learner == 0 {
                    select_evaluate_update(&mut first[0], &rest[0], &t, alpha, gamma);
                } else {
                    select_evaluate_update(&mut rest[0], &first[0], &t, alpha, gamma);
                }
            }
            TabularAlgo::Cross => {
                let i = learner_rng.random_range(0..k);
                let mut j = learner_rng.random_range(0..k - 1);
                if j >= i {
                    j += 1;
                }
                visits[i][cell] += 1;
                cross_q_step(&mut tables, i, j, &t, schedule.alpha(visits[i][cell]), gamma)?;
            }
        }
        s = if t.done {
            mdp.sample_start(&mut env_rng)
        } else {
            s_next
        };

        if step % trace_every == 0 || step == steps {
            let mean = QTable::mean_of(&tables);
            trace.push(TracePoint {
                step,
                max_norm_error: mean.max_norm_distance(&q_star),
            });
        }
    }
    Ok(TabularOutcome {
        q_star,
        tables,
        trace,
    })
}

pub const TABULAR_CSV_HEADER: &str = "step,algo,K,seed,max_norm_error";

pub fn trace_csv_rows(algo: TabularAlgo, k: usize, seed: u64, trace: &[TracePoint]) -> String {
    let mut out = String::new();
    for p in trace {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            p.step,
            algo.name(),
            k,
            seed,
            p.max_norm_error
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::presets::*;
    use super::*;

    fn exp(s: usize, a: usize, r: f64, s_next: usize, done: bool) -> Experience {
        Experience {
            s,
            a,
            r,
            s_next,
            done,
        }
    }

    #[test]
    fn geometric_series() {
        let mdp = single_state(1.0, 0.5).unwrap();
        let q = value_iteration(&mdp, 1e-12).unwrap();
        assert!((q.get(0, 0) - 2.0).abs() < 1e-11);
    }

    #[test]
    fn myopic_value_iteration_returns_rewards() {
        let mdp = RandomMdp { gamma: 0.0, ..RandomMdp::BENCHMARK }.generate(3).unwrap();
        let q = value_iteration(&mdp, 1e-12).unwrap();
        for s in 0..3 {
            for a in 0..3 {
                assert_eq!(q.get(s, a), mdp.reward_mean(s, a));
            }
        }
    }

    #[test]
    fn chain_hand_solution() {
        let mdp = two_step_chain(0.9).unwrap();
        let q = value_iteration(&mdp, 1e-12).unwrap();
        assert!((q.get(0, 0) - 0.9).abs() < 1e-12);
        assert!((q.get(1, 0) - 1.0).abs() < 1e-12);
        assert_eq!(q.get(2, 0), 0.0);
    }

    #[test]
    fn value_iteration_residual_below_tol() {
        let mdp = convergence_benchmark();
        for tol in [1e-3, 1e-8] {
            let q = value_iteration(&mdp, tol).unwrap();
            assert!(mdp.bellman_residual(&q) < tol);
        }
        assert!(value_iteration(&mdp, 0.0).is_err());
    }

    #[test]
    fn mdp_validation() {
        assert!(matches!(single_state(1.0, 1.0), Err(Error::Config(_))));
        let mut spec = MdpSpec::blank(2, 1, 0.9);
        spec.transitions[0][0] = vec![0.5, 0.4];
        assert!(FiniteMdp::new(spec).is_err());
        let mut spec = MdpSpec::blank(2, 1, 0.9);
        spec.terminal[1] = true;
        spec.rewards[1][0] = 1.0;
        assert!(FiniteMdp::new(spec).is_err());
        let mut spec = MdpSpec::blank(2, 1, 0.9);
        spec.terminal[1] = true;
        spec.initial = vec![0.5, 0.5];
        assert!(FiniteMdp::new(spec).is_err());
    }

    #[test]
    fn random_mdp_rows_are_distributions() {
        let mdp = convergence_benchmark();
        for s in 0..mdp.n_states() {
            for a in 0..mdp.n_actions() {
                let total: f64 = mdp.transition_row(s, a).iter().sum();
                assert!((total - 1.0).abs() <= 1e-12);
            }
        }
        assert!((0..6).all(|s| mdp.is_terminal(s) == (s >= 3)));
    }

    #[test]
    fn zero_step_leaves_table() {
        let mut q = QTable::zeros(2, 2);
        q.set(0, 1, 3.0);
        q.set(1, 0, 2.0);
        let before = q.clone();
        q_step(&mut q, &exp(0, 1, 5.0, 1, false), 0.0, 0.9).unwrap();
        assert_eq!(q, before);
    }

    #[test]
    fn full_overwrite_myopic() {
        let mut q = QTable::zeros(2, 2);
        q.set(1, 0, 9.0);
        q_step(&mut q, &exp(0, 1, 0.7, 1, false), 1.0, 0.0).unwrap();
        assert_eq!(q.get(0, 1), 0.7);
    }

    #[test]
    fn q_step_substitution() {
        let mut q = QTable::zeros(2, 2);
        q.set(1, 1, 2.0);
        q_step(&mut q, &exp(0, 0, 1.0, 1, false), 0.5, 0.9).unwrap();
        assert!((q.get(0, 0) - 1.4).abs() < 1e-15);
    }

    #[test]
    fn q_step_terminal_uses_reward_only() {
        let mut q = QTable::zeros(2, 2);
        q.set(1, 1, 100.0);
        q_step(&mut q, &exp(0, 0, 1.0, 1, true), 1.0, 0.9).unwrap();
        assert_eq!(q.get(0, 0), 1.0);
    }

    #[test]
    fn q_step_index_errors() {
        let mut q = QTable::zeros(2, 2);
        assert!(matches!(q_step(&mut q, &exp(2, 0, 1.0, 1, false), 0.5, 0.9), Err(Error::Index(_))));
        assert!(matches!(q_step(&mut q, &exp(0, 2, 1.0, 1, false), 0.5, 0.9), Err(Error::Index(_))));
        assert!(matches!(q_step(&mut q, &exp(0, 0, 1.0, 5, false), 0.5, 0.9), Err(Error::Index(_))));
    }

    fn sample_table(seed: u64) -> QTable {
        let mut r = rng::seeded(seed);
        let mut q = QTable::zeros(3, 3);
        for s in 0..3 {
            for a in 0..3 {
                q.set(s, a, r.random_range(-2.0..2.0));
            }
        }
        q
    }

    #[test]
    fn double_with_identical_tables_matches_q_step() {
        let t = exp(0, 2, 0.3, 1, false);
        let base = sample_table(1);
        let mut reference = base.clone();
        q_step(&mut reference, &t, 0.4, 0.9).unwrap();
        let (mut a, mut b) = (base.clone(), base.clone());
        let which = double_q_step(&mut a, &mut b, &t, 0.4, 0.9, &mut rng::seeded(2)).unwrap();
        let updated = if which == Updated::A { &a } else { &b };
        assert_eq!(updated.get(0, 2), reference.get(0, 2));
        let untouched = if which == Updated::A { &b } else { &a };
        assert_eq!(untouched, &base);
    }

    #[test]
    fn double_terminal_target() {
        let (mut a, mut b) = (sample_table(3), sample_table(4));
        let which = double_q_step(&mut a, &mut b, &exp(1, 1, 2.5, 2, true), 1.0, 0.9, &mut rng::seeded(0)).unwrap();
        let updated = if which == Updated::A { &a } else { &b };
        assert_eq!(updated.get(1, 1), 2.5);
    }

    #[test]
    fn double_is_reproducible() {
        let run = |seed| {
            let (mut a, mut b) = (QTable::zeros(3, 3), QTable::zeros(3, 3));
            let mut r = rng::seeded(seed);
            for n in 0..50 {
                let t = exp(n % 3, (n / 3) % 3, (n as f64).sin(), (n + 1) % 3, n % 7 == 0);
                double_q_step(&mut a, &mut b, &t, 0.3, 0.9, &mut r).unwrap();
            }
            (a, b)
        };
        assert_eq!(run(8), run(8));
    }

    #[test]
    fn cross_k2_is_one_double_direction() {
        let t = exp(0, 1, 0.5, 2, false);
        let (a, b) = (sample_table(5), sample_table(6));
        let mut tables = vec![a.clone(), b.clone()];
        cross_q_step(&mut tables, 1, 0, &t, 0.6, 0.9).unwrap();
        // Find a seed whose coin updates B, then compare.
        let mut seed = 0;
        loop {
            let (mut da, mut db) = (a.clone(), b.clone());
            if double_q_step(&mut da, &mut db, &t, 0.6, 0.9, &mut rng::seeded(seed)).unwrap() == Updated::B {
                assert_eq!(tables[1], db);
                assert_eq!(tables[0], da);
                break;
            }
            seed += 1;
        }
    }

    #[test]
    fn cross_identical_tables_match_q_step() {
        let t = exp(2, 0, -0.4, 1, false);
        let base = sample_table(9);
        let mut reference = base.clone();
        q_step(&mut reference, &t, 0.25, 0.95).unwrap();
        let mut tables = vec![base.clone(); 4];
        cross_q_step(&mut tables, 2, 3, &t, 0.25, 0.95).unwrap();
        assert_eq!(tables[2], reference);
    }

    #[test]
    fn cross_substitution() {
        let mut learner = QTable::zeros(2, 2);
        learner.set(1, 1, 10.0); // learner's argmax at s' is action 1
        let mut evaluator = QTable::zeros(2, 2);
        evaluator.set(1, 1, 3.0);
        evaluator.set(1, 0, 50.0);
        let mut tables = vec![learner, evaluator];
        cross_q_step(&mut tables, 0, 1, &exp(0, 0, 1.0, 1, false), 1.0, 0.5).unwrap();
        assert_eq!(tables[0].get(0, 0), 2.5);
    }

    #[test]
    fn cross_touches_only_learner() {
        let mut tables: Vec<_> = (0..5).map(sample_table).collect();
        let before = tables.clone();
        cross_q_step(&mut tables, 3, 1, &exp(1, 2, 1.0, 0, false), 0.5, 0.9).unwrap();
        for (k, (a, b)) in tables.iter().zip(&before).enumerate() {
            if k != 3 {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn cross_errors() {
        let mut tables = vec![QTable::zeros(2, 2); 3];
        let t = exp(0, 0, 1.0, 1, false);
        assert!(matches!(cross_q_step(&mut tables, 1, 1, &t, 0.5, 0.9), Err(Error::Config(_))));
        assert!(matches!(cross_q_step(&mut tables[..1], 0, 1, &t, 0.5, 0.9), Err(Error::Config(_))));
        assert!(cross_q_step(&mut tables, 0, 3, &t, 0.5, 0.9).is_err());
    }

    #[test]
    fn one_state_converges_for_every_algo() {
        let mdp = single_state(1.0, 0.5).unwrap();
        for (algo, k) in [(TabularAlgo::Q, 1), (TabularAlgo::Double, 2), (TabularAlgo::Cross, 3)] {
            let out = run_tabular(&mdp, algo, k, 20_000, LearningSchedule::default(), 1000, 1).unwrap();
            assert!(out.final_error() < 1e-4, "{algo:?}: {}", out.final_error());
        }
    }

    #[test]
    fn run_rejects_inconsistent_k() {
        let mdp = single_state(1.0, 0.5).unwrap();
        let s = LearningSchedule::default();
        assert!(run_tabular(&mdp, TabularAlgo::Q, 2, 10, s, 1, 0).is_err());
        assert!(run_tabular(&mdp, TabularAlgo::Double, 3, 10, s, 1, 0).is_err());
        assert!(run_tabular(&mdp, TabularAlgo::Cross, 1, 10, s, 1, 0).is_err());
        let bad = LearningSchedule { omega: 0.5, epsilon: 0.1 };
        assert!(run_tabular(&mdp, TabularAlgo::Q, 1, 10, bad, 1, 0).is_err());
    }

    #[test]
    fn runs_are_reproducible() {
        let mdp = convergence_benchmark();
        let s = LearningSchedule::default();
        let a = run_tabular(&mdp, TabularAlgo::Cross, 4, 5_000, s, 500, 3).unwrap();
        let b = run_tabular(&mdp, TabularAlgo::Cross, 4, 5_000, s, 500, 3).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.trace.len(), 10);
    }

    #[test]
    fn maximization_bias_oracle() {
        let mdp = maximization_bias(8, 0.95).unwrap();
        let q = value_iteration(&mdp, 1e-12).unwrap();
        assert_eq!(q.get(0, 0), 0.0);
        assert_eq!(q.get(0, 3), -1.0);
        assert!((0..8).all(|a| q.get(1, a) == 0.0));
        assert!(maximization_bias(1, 0.95).is_err());
    }

    #[test]
    fn initial_distribution_respected() {
        let mdp = convergence_benchmark();
        let mut r = rng::seeded(4);
        let mut counts = [0usize; 6];
        for _ in 0..3000 {
            counts[mdp.sample_start(&mut r)] += 1;
        }
        assert!(counts[3..].iter().all(|&c| c == 0));
        assert!(counts[..3].iter().all(|&c| c > 900));
    }

    #[test]
    fn alpha_schedule() {
        let s = LearningSchedule::default();
        assert_eq!(s.alpha(1), 1.0);
        assert!((s.alpha(32) - 32f64.powf(-0.8)).abs() < 1e-15);
    }
}
