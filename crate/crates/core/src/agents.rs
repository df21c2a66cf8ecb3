//! Q-ensembles and the vanilla / double / cross DQN update rules, with
//! replay, bootstrap masks, dueling heads and ensemble action selection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    adam_step, mlp_backward, mlp_backward_with_input, mlp_forward, mlp_init_with, mlp_predict,
    Activation, AdamState, Matrix, MlpParams,
};
use crate::rng::SimRng;
use crate::util::argmax;

/// One experience tuple. `done` marks a true terminal; time-limit ends are not terminal.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: usize,
    pub r: f64,
    pub s_next: Vec<f64>,
    pub done: bool,
}

pub const DEFAULT_REPLAY_CAPACITY: usize = 50_000;

/// FIFO ring of transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    obs_dim: usize,
    items: Vec<Transition>,
    /// Slot the next push overwrites once full.
    head: usize,
}

/// Minibatch in matrix form. `masks[k][row]` is member `k`'s bootstrap weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub s: Matrix,
    pub a: Vec<usize>,
    pub r: Vec<f64>,
    pub s_next: Matrix,
    pub done: Vec<bool>,
    pub masks: Option<Vec<Vec<f64>>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    pub fn from_transitions(items: &[&Transition]) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::shape("empty batch"));
        }
        let s: Vec<&[f64]> = items.iter().map(|t| t.s.as_slice()).collect();
        let s_next: Vec<&[f64]> = items.iter().map(|t| t.s_next.as_slice()).collect();
        Ok(Self {
            s: Matrix::from_rows(&s)?,
            a: items.iter().map(|t| t.a).collect(),
            r: items.iter().map(|t| t.r).collect(),
            s_next: Matrix::from_rows(&s_next)?,
            done: items.iter().map(|t| t.done).collect(),
            masks: None,
        })
    }
}

impl ReplayBuffer {
    pub fn new(capacity: usize, obs_dim: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("replay capacity must be >= 1"));
        }
        Ok(Self {
            capacity,
            obs_dim,
            items: Vec::with_capacity(capacity.min(4096)),
            head: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        if t.s.len() != self.obs_dim || t.s_next.len() != self.obs_dim {
            return Err(Error::shape(format!(
                "transition observations must have length {}",
                self.obs_dim
            )));
        }
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.head] = t;
            self.head = (self.head + 1) % self.capacity;
        }
        Ok(())
    }

    /// Stored transitions from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        let (newer, older) = self.items.split_at(self.head);
        older.iter().chain(newer)
    }

    fn gate(&self, n: usize) -> Result<()> {
        if n == 0 || self.items.len() < n {
            return Err(Error::InsufficientData {
                needed: n.max(1),
                available: self.items.len(),
            });
        }
        Ok(())
    }

    /// `n` draws, uniform with replacement.
    pub fn sample(&self, n: usize, rng: &mut SimRng) -> Result<Vec<&Transition>> {
        self.gate(n)?;
        Ok((0..n)
            .map(|_| &self.items[rng.random_range(0..self.items.len())])
            .collect())
    }

    /// A minibatch plus, when `mask_p < 1`, i.i.d. Bernoulli(`mask_p`) masks for `k` members.
    pub fn sample_batch(&self, n: usize, k: usize, mask_p: f64, rng: &mut SimRng) -> Result<Batch> {
        if !(mask_p > 0.0 && mask_p <= 1.0) {
            return Err(Error::config(format!("mask probability {mask_p} outside (0, 1]")));
        }
        let items = self.sample(n, rng)?;
        let mut batch = Batch::from_transitions(&items)?;
        if mask_p < 1.0 {
            batch.masks = Some(
                (0..k)
                    .map(|_| {
                        (0..n)
                            .map(|_| if rng.random::<f64>() < mask_p { 1.0 } else { 0.0 })
                            .collect()
                    })
                    .collect(),
            );
        }
        Ok(batch)
    }
}

/// Linear anneal from `start` to `end` over `horizon` steps, then constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub horizon: u64,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        Self {
            start: 1.0,
            end: 0.02,
            horizon: 10_000,
        }
    }
}

impl EpsilonSchedule {
    pub fn validate(&self) -> Result<()> {
        for v in [self.start, self.end] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("epsilon {v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn at(&self, step: u64) -> f64 {
        if step >= self.horizon {
            return self.end;
        }
        let frac = step as f64 / self.horizon as f64;
        self.start + frac * (self.end - self.start)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DuelingMode {
    Mean,
    Max,
}

/// `Q_a = V + A_a - mean(A)` or `Q_a = V + A_a - max(A)`.
pub fn dueling_aggregate(v: f64, adv: &[f64], mode: DuelingMode) -> Result<Vec<f64>> {
    if adv.is_empty() {
        return Err(Error::shape("dueling aggregation needs at least one advantage"));
    }
    let baseline = match mode {
        DuelingMode::Mean => adv.iter().sum::<f64>() / adv.len() as f64,
        DuelingMode::Max => adv[argmax(adv)],
    };
    Ok(adv.iter().map(|a| v + (a - baseline)).collect())
}

/// Gradients `(dL/dV, dL/dA)` of the aggregation given `dL/dQ`.
pub fn dueling_backward(adv: &[f64], dq: &[f64], mode: DuelingMode) -> (f64, Vec<f64>) {
    let total: f64 = dq.iter().sum();
    let mut da = dq.to_vec();
    match mode {
        DuelingMode::Mean => {
            let share = total / adv.len() as f64;
            da.iter_mut().for_each(|d| *d -= share);
        }
        DuelingMode::Max => da[argmax(adv)] -= total,
    }
    (total, da)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    /// K independent networks.
    Separate,
    /// One trunk of hidden layers feeding K linear heads.
    Shared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    Vanilla,
    Double,
    Cross,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionStrategy {
    /// Majority vote over the members' greedy actions.
    Vote,
    /// Act greedily with one member drawn at the start of each episode.
    Bootstrap,
    /// Always member 0.
    Single,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// One learner per environment step.
    OneMember,
    /// Every member learns each step from its own minibatch.
    AllMembers,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LearnerChoice {
    Uniform,
    RoundRobin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvaluatorDraw {
    /// One evaluator for the whole minibatch.
    PerBatch,
    /// A fresh evaluator for every row.
    PerRow,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    pub algo: Algo,
    pub strategy: ActionStrategy,
    pub k: usize,
    pub architecture: Architecture,
    pub hidden: Vec<usize>,
    pub dueling: Option<DuelingMode>,
    pub train_mode: TrainMode,
    pub learner_choice: LearnerChoice,
    pub evaluator_draw: EvaluatorDraw,
    pub gamma: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Steps between target copies; 0 disables target networks.
    pub target_sync: u64,
    /// Bootstrap-mask keep probability; 1 disables masking.
    pub mask_p: f64,
    pub replay_capacity: usize,
    /// Learning waits until the buffer holds this many transitions (and at least one batch).
    pub learning_starts: usize,
    pub epsilon: EpsilonSchedule,
}

impl AgentConfig {
    /// CartPole hyperparameters: hidden [64, 32], Adam 1e-3, gamma 0.99,
    /// batch 32, replay 5e4, epsilon 1 -> 0.02 over 1e4 steps. Vanilla and
    /// double sync targets every 500 steps; cross evaluates with live peers.
    pub fn paper(algo: Algo, k: usize) -> Self {
        Self {
            algo,
            strategy: ActionStrategy::Vote,
            k,
            architecture: Architecture::Separate,
            hidden: vec![64, 32],
            dueling: None,
            train_mode: TrainMode::OneMember,
            learner_choice: LearnerChoice::Uniform,
            evaluator_draw: EvaluatorDraw::PerBatch,
            gamma: 0.99,
            batch_size: 32,
            learning_rate: crate::nn::DEFAULT_LEARNING_RATE,
            target_sync: if algo == Algo::Cross { 0 } else { 500 },
            mask_p: 1.0,
            replay_capacity: DEFAULT_REPLAY_CAPACITY,
            learning_starts: 0,
            epsilon: EpsilonSchedule::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("K must be >= 1"));
        }
        if self.algo == Algo::Cross && self.k < 2 {
            return Err(Error::config(format!("cross needs K >= 2, got {}", self.k)));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::config("hidden layers must be a non-empty list of positive sizes"));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::config(format!("gamma {} outside [0, 1)", self.gamma)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !(self.mask_p > 0.0 && self.mask_p <= 1.0) {
            return Err(Error::config(format!("mask_p {} outside (0, 1]", self.mask_p)));
        }
        if self.replay_capacity < self.batch_size {
            return Err(Error::config("replay capacity must hold at least one batch"));
        }
        self.epsilon.validate()
    }
}

/// Which copy of the weights to read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weights {
    Online,
    /// The frozen copy when target networks are enabled, otherwise the live weights.
    Target,
}

#[derive(Debug, Clone, PartialEq)]
struct Nets {
    trunk: Option<MlpParams>,
    heads: Vec<MlpParams>,
}

/// K Q-networks over a shared observation and action space.
#[derive(Debug, Clone)]
pub struct QEnsemble {
    obs_dim: usize,
    n_actions: usize,
    dueling: Option<DuelingMode>,
    online: Nets,
    target: Option<Nets>,
    trunk_adam: Option<AdamState>,
    head_adams: Vec<AdamState>,
    learning_rate: f64,
    next_learner: usize,
}

impl QEnsemble {
    pub fn new(
        obs_dim: usize,
        n_actions: usize,
        config: &AgentConfig,
        rng: &mut SimRng,
    ) -> Result<Self> {
        config.validate()?;
        if obs_dim == 0 || n_actions == 0 {
            return Err(Error::config("observation and action spaces must be non-empty"));
        }
        let out = n_actions + usize::from(config.dueling.is_some());
        let (trunk, heads) = match config.architecture {
            Architecture::Separate => {
                let mut sizes = vec![obs_dim];
                sizes.extend(&config.hidden);
                sizes.push(out);
                let heads = (0..config.k)
                    .map(|_| mlp_init_with(&sizes, Activation::Identity, rng))
                    .collect::<Result<Vec<_>>>()?;
                (None, heads)
            }
            Architecture::Shared => {
                let mut sizes = vec![obs_dim];
                sizes.extend(&config.hidden);
                let trunk = mlp_init_with(&sizes, Activation::Relu, rng)?;
                let last = *config.hidden.last().expect("validated non-empty");
                let heads = (0..config.k)
                    .map(|_| mlp_init_with(&[last, out], Activation::Identity, rng))
                    .collect::<Result<Vec<_>>>()?;
                (Some(trunk), heads)
            }
        };
        let online = Nets { trunk, heads };
        Ok(Self {
            obs_dim,
            n_actions,
            dueling: config.dueling,
            target: (config.target_sync > 0).then(|| online.clone()),
            trunk_adam: online.trunk.as_ref().map(AdamState::new),
            head_adams: online.heads.iter().map(AdamState::new).collect(),
            online,
            learning_rate: config.learning_rate,
            next_learner: 0,
        })
    }

    pub fn k(&self) -> usize {
        self.online.heads.len()
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn has_targets(&self) -> bool {
        self.target.is_some()
    }

    pub fn is_shared(&self) -> bool {
        self.online.trunk.is_some()
    }

    /// Member `k`'s own parameters (the head, in shared mode).
    pub fn member(&self, k: usize) -> &MlpParams {
        &self.online.heads[k]
    }

    pub fn trunk(&self) -> Option<&MlpParams> {
        self.online.trunk.as_ref()
    }

    pub fn target_member(&self, k: usize) -> Option<&MlpParams> {
        self.target.as_ref().map(|t| &t.heads[k])
    }

    pub fn target_trunk(&self) -> Option<&MlpParams> {
        self.target.as_ref().and_then(|t| t.trunk.as_ref())
    }

    /// Copy online weights into the target networks (no-op without targets).
    pub fn sync_targets(&mut self) {
        if let Some(t) = self.target.as_mut() {
            t.clone_from(&self.online);
        }
    }

    /// Make every member a copy of member 0, targets included. Useful for
    /// collapsing the update rules onto each other.
    pub fn make_identical(&mut self) {
        let first = self.online.heads[0].clone();
        for h in &mut self.online.heads {
            h.clone_from(&first);
        }
        self.sync_targets();
        let adam = self.head_adams[0].clone();
        for a in &mut self.head_adams {
            a.clone_from(&adam);
        }
    }

    /// Apply `f` to every online and target parameter.
    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        let nets = std::iter::once(&mut self.online).chain(self.target.as_mut());
        for n in nets {
            if let Some(t) = n.trunk.as_mut() {
                t.for_each_param_mut(&mut f);
            }
            for h in &mut n.heads {
                h.for_each_param_mut(&mut f);
            }
        }
    }

    fn nets(&self, which: Weights) -> &Nets {
        match (which, &self.target) {
            (Weights::Target, Some(t)) => t,
            _ => &self.online,
        }
    }

    fn check_states(&self, states: &Matrix) -> Result<()> {
        if states.cols() != self.obs_dim {
            return Err(Error::shape(format!(
                "states have {} features, ensemble expects {}",
                states.cols(),
                self.obs_dim
            )));
        }
        Ok(())
    }

    fn aggregate_rows(&self, raw: Matrix) -> Result<Matrix> {
        let Some(mode) = self.dueling else {
            return Ok(raw);
        };
        let mut q = Matrix::zeros(raw.rows(), self.n_actions);
        for r in 0..raw.rows() {
            let row = raw.row(r);
            let agg = dueling_aggregate(row[0], &row[1..], mode)?;
            q.row_mut(r).copy_from_slice(&agg);
        }
        Ok(q)
    }

    fn features(&self, nets: &Nets, states: &Matrix) -> Result<Option<Matrix>> {
        nets.trunk.as_ref().map(|t| mlp_predict(t, states)).transpose()
    }

    /// Q-values of member `k` on a batch of states (`rows x n_actions`).
    pub fn q_values(&self, k: usize, states: &Matrix, which: Weights) -> Result<Matrix> {
        self.check_states(states)?;
        let nets = self.nets(which);
        let feats = self.features(nets, states)?;
        let raw = mlp_predict(&nets.heads[k], feats.as_ref().unwrap_or(states))?;
        self.aggregate_rows(raw)
    }

    /// Q-values of every member on a batch of states.
    pub fn all_q_values(&self, states: &Matrix, which: Weights) -> Result<Vec<Matrix>> {
        self.check_states(states)?;
        let nets = self.nets(which);
        let feats = self.features(nets, states)?;
        let input = feats.as_ref().unwrap_or(states);
        nets.heads
            .iter()
            .map(|h| self.aggregate_rows(mlp_predict(h, input)?))
            .collect()
    }

    /// Per-member Q-vectors for one state.
    pub fn q_single(&self, s: &[f64]) -> Result<Vec<Vec<f64>>> {
        let m = Matrix::from_vec(1, s.len(), s.to_vec())?;
        Ok(self
            .all_q_values(&m, Weights::Online)?
            .into_iter()
            .map(|q| q.row(0).to_vec())
            .collect())
    }

    /// One gradient step of member `i` on the weighted MSE `mean_b w_b (Q_i(s_b, a_b) - y_b)^2`.
    ///
    /// Only the taken action's output receives gradient. Shared-trunk
    /// gradients are scaled by `1/K` before the trunk's Adam step. Returns the
    /// loss measured before the update.
    pub fn train_member(
        &mut self,
        i: usize,
        batch: &Batch,
        targets: &[f64],
        weights: Option<&[f64]>,
    ) -> Result<f64> {
        let n = batch.len();
        if targets.len() != n || weights.is_some_and(|w| w.len() != n) {
            return Err(Error::shape("targets and weights must have one entry per row"));
        }
        if i >= self.k() {
            return Err(Error::Index(format!("member {i} out of range for K = {}", self.k())));
        }
        self.check_states(&batch.s)?;
        let trunk_pass = match &self.online.trunk {
            Some(t) => Some(mlp_forward(t, &batch.s)?),
            None => None,
        };
        let head_input = trunk_pass.as_ref().map_or(&batch.s, |(h, _)| h);
        let (raw, head_cache) = mlp_forward(&self.online.heads[i], head_input)?;

        let mut loss = 0.0;
        let mut d_raw = Matrix::zeros(n, raw.cols());
        for b in 0..n {
            let a = batch.a[b];
            if a >= self.n_actions {
                return Err(Error::Index(format!("action {a} out of range")));
            }
            let row = raw.row(b);
            let q = match self.dueling {
                Some(mode) => dueling_aggregate(row[0], &row[1..], mode)?[a],
                None => row[a],
            };
            let w = weights.map_or(1.0, |w| w[b]);
            let diff = q - targets[b];
            loss += w * diff * diff;
            let g = 2.0 * w * diff / n as f64;
            if g == 0.0 {
                continue;
            }
            match self.dueling {
                Some(mode) => {
                    let mut dq = vec![0.0; self.n_actions];
                    dq[a] = g;
                    let (dv, da) = dueling_backward(&row[1..], &dq, mode);
                    let out = d_raw.row_mut(b);
                    out[0] = dv;
                    out[1..].copy_from_slice(&da);
                }
                None => d_raw.set(b, a, g),
            }
        }
        loss /= n as f64;

        let lr = self.learning_rate;
        let k = self.k() as f64;
        match trunk_pass {
            Some((_, trunk_cache)) => {
                let (head_grads, d_feat) =
                    mlp_backward_with_input(&self.online.heads[i], &head_cache, &d_raw)?;
                let trunk = self.online.trunk.as_mut().expect("shared mode");
                let mut trunk_grads = mlp_backward(trunk, &trunk_cache, &d_feat)?;
                trunk_grads.scale(1.0 / k);
                adam_step(&mut self.online.heads[i], &head_grads, &mut self.head_adams[i], lr)?;
                let adam = self.trunk_adam.as_mut().expect("shared mode");
                adam_step(trunk, &trunk_grads, adam, lr)?;
            }
            None => {
                let grads = mlp_backward(&self.online.heads[i], &head_cache, &d_raw)?;
                adam_step(&mut self.online.heads[i], &grads, &mut self.head_adams[i], lr)?;
            }
        }
        Ok(loss)
    }

    /// Masked MSE of member `i` against `targets`, without updating.
    pub fn batch_loss(&self, i: usize, batch: &Batch, targets: &[f64]) -> Result<f64> {
        let q = self.q_values(i, &batch.s, Weights::Online)?;
        let n = batch.len();
        Ok((0..n)
            .map(|b| (q.get(b, batch.a[b]) - targets[b]).powi(2))
            .sum::<f64>()
            / n as f64)
    }
}

/// Epsilon-greedy over the chosen strategy.
///
/// Vote ties go to the action with the largest summed Q across members, then
/// to the lowest index.
pub fn select_action(
    ensemble: &QEnsemble,
    s: &[f64],
    strategy: ActionStrategy,
    epsilon: f64,
    rng: &mut SimRng,
    episode_head: usize,
) -> Result<usize> {
    if rng.random::<f64>() < epsilon {
        return Ok(rng.random_range(0..ensemble.n_actions()));
    }
    greedy_action(ensemble, s, strategy, episode_head)
}

pub fn greedy_action(
    ensemble: &QEnsemble,
    s: &[f64],
    strategy: ActionStrategy,
    episode_head: usize,
) -> Result<usize> {
    let m = Matrix::from_vec(1, s.len(), s.to_vec())?;
    match strategy {
        ActionStrategy::Vote => {
            let qs = ensemble.q_single(s)?;
            Ok(majority_vote(&qs))
        }
        ActionStrategy::Bootstrap => {
            if episode_head >= ensemble.k() {
                return Err(Error::Index(format!("episode head {episode_head} out of range")));
            }
            let q = ensemble.q_values(episode_head, &m, Weights::Online)?;
            Ok(argmax(q.row(0)))
        }
        ActionStrategy::Single => Ok(argmax(ensemble.q_values(0, &m, Weights::Online)?.row(0))),
    }
}

/// Majority over per-member argmaxes; ties by summed Q, then lowest index.
pub fn majority_vote(q_per_member: &[Vec<f64>]) -> usize {
    let n_actions = q_per_member[0].len();
    let mut votes = vec![0usize; n_actions];
    let mut summed = vec![0.0; n_actions];
    for q in q_per_member {
        votes[argmax(q)] += 1;
        for (s, v) in summed.iter_mut().zip(q) {
            *s += v;
        }
    }
    let top = *votes.iter().max().expect("non-empty");
    let mut best: Option<usize> = None;
    for a in (0..n_actions).filter(|&a| votes[a] == top) {
        if best.is_none_or(|b| summed[a] > summed[b]) {
            best = Some(a);
        }
    }
    best.expect("at least one action has the top count")
}

fn draw_peer(k: usize, i: usize, rng: &mut SimRng) -> usize {
    let j = rng.random_range(0..k - 1);
    if j >= i {
        j + 1
    } else {
        j
    }
}

/// TD targets for learner `i` on `batch`.
///
/// Vanilla evaluates `max_a' Q_target_i(s', a')`; double selects with the
/// online member `i` and evaluates with its target copy; cross selects with
/// member `i` and evaluates with a peer `j != i` (its target copy when
/// targets are enabled).
pub fn td_targets(
    ensemble: &QEnsemble,
    batch: &Batch,
    algo: Algo,
    learner: usize,
    gamma: f64,
    draw: EvaluatorDraw,
    rng: &mut SimRng,
) -> Result<Vec<f64>> {
    let k = ensemble.k();
    if learner >= k {
        return Err(Error::Index(format!("learner {learner} out of range for K = {k}")));
    }
    if algo == Algo::Cross && k < 2 {
        return Err(Error::config("cross targets need K >= 2"));
    }
    let n = batch.len();
    let next = &batch.s_next;
    let mut y = batch.r.clone();
    match algo {
        Algo::Vanilla => {
            let tq = ensemble.q_values(learner, next, Weights::Target)?;
            for b in 0..n {
                if !batch.done[b] {
                    let row = tq.row(b);
                    y[b] += gamma * row[argmax(row)];
                }
            }
        }
        Algo::Double => {
            let oq = ensemble.q_values(learner, next, Weights::Online)?;
            let tq = ensemble.q_values(learner, next, Weights::Target)?;
            for b in 0..n {
                if !batch.done[b] {
                    y[b] += gamma * tq.get(b, argmax(oq.row(b)));
                }
            }
        }
        Algo::Cross => {
            let oq = ensemble.q_values(learner, next, Weights::Online)?;
            match draw {
                EvaluatorDraw::PerBatch => {
                    let j = draw_peer(k, learner, rng);
                    let eq = ensemble.q_values(j, next, Weights::Target)?;
                    for b in 0..n {
                        if !batch.done[b] {
                            y[b] += gamma * eq.get(b, argmax(oq.row(b)));
                        }
                    }
                }
                EvaluatorDraw::PerRow => {
                    let peers: Vec<usize> = (0..n).map(|_| draw_peer(k, learner, rng)).collect();
                    let all = ensemble.all_q_values(next, Weights::Target)?;
                    for b in 0..n {
                        if !batch.done[b] {
                            y[b] += gamma * all[peers[b]].get(b, argmax(oq.row(b)));
                        }
                    }
                }
            }
        }
    }
    Ok(y)
}

/// Random streams an agent consumes while learning.
#[derive(Debug, Clone)]
pub struct TrainRngs {
    pub replay: SimRng,
    pub learner: SimRng,
}

/// One learning step. Returns `None` while the buffer holds fewer than a batch.
///
/// Target copies are synced whenever `global_step` is a multiple of the sync period.
pub fn train_step(
    ensemble: &mut QEnsemble,
    buffer: &ReplayBuffer,
    config: &AgentConfig,
    rngs: &mut TrainRngs,
    global_step: u64,
) -> Result<Option<f64>> {
    let loss = if buffer.len() < config.batch_size.max(config.learning_starts) {
        None
    } else {
        let k = ensemble.k();
        let learners: Vec<usize> = match config.train_mode {
            TrainMode::AllMembers => (0..k).collect(),
            TrainMode::OneMember => vec![match config.learner_choice {
                LearnerChoice::Uniform => rngs.learner.random_range(0..k),
                LearnerChoice::RoundRobin => {
                    let i = ensemble.next_learner;
                    ensemble.next_learner = (i + 1) % k;
                    i
                }
            }],
        };
        let mut total = 0.0;
        for &i in &learners {
            let batch = buffer.sample_batch(config.batch_size, k, config.mask_p, &mut rngs.replay)?;
            let y = td_targets(
                ensemble,
                &batch,
                config.algo,
                i,
                config.gamma,
                config.evaluator_draw,
                &mut rngs.learner,
            )?;
            let weights = batch.masks.as_ref().map(|m| m[i].as_slice());
            total += ensemble.train_member(i, &batch, &y, weights)?;
        }
        Some(total / learners.len() as f64)
    };
    if config.target_sync > 0 && global_step > 0 && global_step.is_multiple_of(config.target_sync) {
        ensemble.sync_targets();
    }
    Ok(loss)
}

/// An ensemble with its replay memory, schedule and random streams.
#[derive(Debug, Clone)]
pub struct Agent {
    pub config: AgentConfig,
    pub ensemble: QEnsemble,
    pub buffer: ReplayBuffer,
    rngs: TrainRngs,
    exploration: SimRng,
    global_step: u64,
    episode_head: usize,
}

impl Agent {
    /// Streams `agent-init`, `replay`, `learner` and `exploration` all derive from `seed`.
    pub fn new(obs_dim: usize, n_actions: usize, config: AgentConfig, seed: u64) -> Result<Self> {
        let ensemble = QEnsemble::new(
            obs_dim,
            n_actions,
            &config,
            &mut crate::rng::stream(seed, "agent-init"),
        )?;
        Ok(Self {
            buffer: ReplayBuffer::new(config.replay_capacity, obs_dim)?,
            ensemble,
            rngs: TrainRngs {
                replay: crate::rng::stream(seed, "replay"),
                learner: crate::rng::stream(seed, "learner"),
            },
            exploration: crate::rng::stream(seed, "exploration"),
            global_step: 0,
            episode_head: 0,
            config,
        })
    }

    pub fn global_step(&self) -> u64 {
        self.global_step
    }

    pub fn episode_head(&self) -> usize {
        self.episode_head
    }

    pub fn epsilon(&self) -> f64 {
        self.config.epsilon.at(self.global_step)
    }

    /// Draw the acting member for the coming episode.
    pub fn begin_episode(&mut self) {
        self.episode_head = self.exploration.random_range(0..self.ensemble.k());
    }

    pub fn act(&mut self, s: &[f64]) -> Result<usize> {
        let eps = self.epsilon();
        select_action(
            &self.ensemble,
            s,
            self.config.strategy,
            eps,
            &mut self.exploration,
            self.episode_head,
        )
    }

    /// Store a transition, advance the step counter and run one learning step.
    pub fn observe(&mut self, t: Transition) -> Result<Option<f64>> {
        self.buffer.push(t)?;
        self.global_step += 1;
        train_step(
            &mut self.ensemble,
            &self.buffer,
            &self.config,
            &mut self.rngs,
            self.global_step,
        )
    }
}
