//! Episodic environments: the 3-action CartPole and finite-MDP episodes.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::SimRng;
use crate::tabular::FiniteMdp;

/// Outcome of one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Vec<f64>,
    pub reward: f64,
    /// The episode is over; no further steps until reset.
    pub done: bool,
    /// The episode ended on the step limit rather than a terminal state.
    /// Implies `done`. Learners keep bootstrapping through these.
    pub truncated: bool,
    /// 1-based index of this step within the episode.
    pub step: u32,
}

impl StepResult {
    /// Whether the next state is a true terminal (value zero).
    pub fn terminal(&self) -> bool {
        self.done && !self.truncated
    }
}

pub trait EpisodicEnv {
    fn observation_dim(&self) -> usize;
    fn num_actions(&self) -> usize;
    fn reset(&mut self, rng: &mut SimRng) -> Vec<f64>;
    fn step(&mut self, action: usize, rng: &mut SimRng) -> Result<StepResult>;
}

/// `(x, x_dot, theta, theta_dot)` in meters, m/s, radians, rad/s.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CartPoleState {
    pub x: f64,
    pub x_dot: f64,
    pub theta: f64,
    pub theta_dot: f64,
}

impl CartPoleState {
    pub fn to_vec(&self) -> Vec<f64> {
        vec![self.x, self.x_dot, self.theta, self.theta_dot]
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CartPoleParams {
    pub gravity: f64,
    pub cart_mass: f64,
    pub pole_mass: f64,
    /// Distance from the pivot to the pole's center of mass.
    pub half_length: f64,
    pub force_mag: f64,
    pub dt: f64,
    pub x_threshold: f64,
    pub theta_threshold: f64,
    pub max_steps: u32,
    pub reset_bound: f64,
}

impl Default for CartPoleParams {
    fn default() -> Self {
        Self {
            gravity: 9.8,
            cart_mass: 1.0,
            pole_mass: 0.1,
            half_length: 0.5,
            force_mag: 10.0,
            dt: 0.02,
            x_threshold: 2.4,
            theta_threshold: 15.0 * PI / 180.0,
            max_steps: 200,
            reset_bound: 0.05,
        }
    }
}

impl CartPoleParams {
    pub fn out_of_bounds(&self, s: &CartPoleState) -> bool {
        s.x.abs() > self.x_threshold || s.theta.abs() > self.theta_threshold
    }
}

/// Force direction for each action index.
pub const CARTPOLE_FORCE_DIRECTIONS: [f64; 3] = [-1.0, 0.0, 1.0];

/// One explicit-Euler step of the cart-pole equations of motion.
pub fn cartpole_dynamics(p: &CartPoleParams, s: &CartPoleState, force: f64) -> CartPoleState {
    let total_mass = p.cart_mass + p.pole_mass;
    let pole_mass_length = p.pole_mass * p.half_length;
    let (sin, cos) = s.theta.sin_cos();
    let temp = (force + pole_mass_length * s.theta_dot * s.theta_dot * sin) / total_mass;
    let theta_acc = (p.gravity * sin - cos * temp)
        / (p.half_length * (4.0 / 3.0 - p.pole_mass * cos * cos / total_mass));
    let x_acc = temp - pole_mass_length * theta_acc * cos / total_mass;
    CartPoleState {
        x: s.x + p.dt * s.x_dot,
        x_dot: s.x_dot + p.dt * x_acc,
        theta: s.theta + p.dt * s.theta_dot,
        theta_dot: s.theta_dot + p.dt * theta_acc,
    }
}

pub fn cartpole_reset(p: &CartPoleParams, rng: &mut SimRng) -> CartPoleState {
    let b = p.reset_bound;
    let mut draw = || rng.random_range(-b..=b);
    CartPoleState {
        x: draw(),
        x_dot: draw(),
        theta: draw(),
        theta_dot: draw(),
    }
}

/// CartPole with actions `{0, 1, 2}` pushing with force `{-1, 0, +1} * force_mag`.
#[derive(Debug, Clone)]
pub struct CartPole {
    params: CartPoleParams,
    state: CartPoleState,
    steps: u32,
    done: bool,
}

impl Default for CartPole {
    fn default() -> Self {
        Self::new(CartPoleParams::default())
    }
}

impl CartPole {
    /// Starts at the origin; call [`EpisodicEnv::reset`] before stepping for a random start.
    pub fn new(params: CartPoleParams) -> Self {
        Self {
            params,
            state: CartPoleState {
                x: 0.0,
                x_dot: 0.0,
                theta: 0.0,
                theta_dot: 0.0,
            },
            steps: 0,
            done: false,
        }
    }

    /// Place the system in an explicit state with a fresh step counter.
    pub fn with_state(params: CartPoleParams, state: CartPoleState) -> Self {
        Self {
            state,
            ..Self::new(params)
        }
    }

    pub fn params(&self) -> &CartPoleParams {
        &self.params
    }

    pub fn state(&self) -> CartPoleState {
        self.state
    }

    pub fn steps(&self) -> u32 {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }
}

impl EpisodicEnv for CartPole {
    fn observation_dim(&self) -> usize {
        4
    }

    fn num_actions(&self) -> usize {
        3
    }

    fn reset(&mut self, rng: &mut SimRng) -> Vec<f64> {
        self.state = cartpole_reset(&self.params, rng);
        self.steps = 0;
        self.done = false;
        self.state.to_vec()
    }

    fn step(&mut self, action: usize, _rng: &mut SimRng) -> Result<StepResult> {
        if self.done {
            return Err(Error::Protocol("step called on a finished episode; reset first".into()));
        }
        let dir = *CARTPOLE_FORCE_DIRECTIONS
            .get(action)
            .ok_or_else(|| Error::Index(format!("action {action} outside 0..3")))?;
        self.state = cartpole_dynamics(&self.params, &self.state, dir * self.params.force_mag);
        self.steps += 1;
        let failed = self.params.out_of_bounds(&self.state);
        let truncated = !failed && self.steps >= self.params.max_steps;
        self.done = failed || truncated;
        Ok(StepResult {
            observation: self.state.to_vec(),
            reward: 1.0,
            done: self.done,
            truncated,
            step: self.steps,
        })
    }
}

/// One sampled transition of a finite MDP.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MdpStep {
    pub next_state: usize,
    pub reward: f64,
    /// `next_state` is terminal.
    pub done: bool,
}

pub fn mdp_env_step(mdp: &FiniteMdp, s: usize, a: usize, rng: &mut SimRng) -> Result<MdpStep> {
    mdp.check_index(s, a)?;
    if mdp.is_terminal(s) {
        return Err(Error::Protocol(format!("state {s} is terminal")));
    }
    let next_state = mdp.sample_next(s, a, rng);
    let reward = mdp.sample_reward(s, a, rng);
    Ok(MdpStep {
        next_state,
        reward,
        done: mdp.is_terminal(next_state),
    })
}

/// Finite MDP exposed through [`EpisodicEnv`] with one-hot observations.
#[derive(Debug, Clone)]
pub struct MdpEnv {
    mdp: FiniteMdp,
    state: usize,
    steps: u32,
    max_steps: Option<u32>,
    done: bool,
}

impl MdpEnv {
    pub fn new(mdp: FiniteMdp, max_steps: Option<u32>) -> Self {
        Self {
            mdp,
            state: 0,
            steps: 0,
            max_steps,
            done: true,
        }
    }

    pub fn mdp(&self) -> &FiniteMdp {
        &self.mdp
    }

    pub fn state(&self) -> usize {
        self.state
    }

    fn one_hot(&self, s: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.mdp.n_states()];
        v[s] = 1.0;
        v
    }
}

impl EpisodicEnv for MdpEnv {
    fn observation_dim(&self) -> usize {
        self.mdp.n_states()
    }

    fn num_actions(&self) -> usize {
        self.mdp.n_actions()
    }

    fn reset(&mut self, rng: &mut SimRng) -> Vec<f64> {
        self.state = self.mdp.sample_start(rng);
        self.steps = 0;
        self.done = false;
        self.one_hot(self.state)
    }

    fn step(&mut self, action: usize, rng: &mut SimRng) -> Result<StepResult> {
        if self.done {
            return Err(Error::Protocol("step called on a finished episode; reset first".into()));
        }
        let out = mdp_env_step(&self.mdp, self.state, action, rng)?;
        self.state = out.next_state;
        self.steps += 1;
        let truncated = !out.done && self.max_steps.is_some_and(|m| self.steps >= m);
        self.done = out.done || truncated;
        Ok(StepResult {
            observation: self.one_hot(out.next_state),
            reward: out.reward,
            done: self.done,
            truncated,
            step: self.steps,
        })
    }
}
