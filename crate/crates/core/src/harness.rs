//! Experiment configs, the training/evaluation loop, and CSV output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::agents::{
    greedy_action, ActionStrategy, Agent, AgentConfig, Algo, Architecture, DuelingMode,
    EpsilonSchedule, EvaluatorDraw, LearnerChoice, QEnsemble, ReplayBuffer, TrainMode, Transition,
    Weights,
};
use crate::envs::{CartPole, CartPoleParams, EpisodicEnv, MdpEnv};
use crate::error::{Error, Result};
use crate::nn::Matrix;
use crate::rng::{self, SimRng};
use crate::tabular::presets::{self, RandomMdp, CONVERGENCE_SEED};
use crate::tabular::{
    run_tabular, trace_csv_rows, FiniteMdp, LearningSchedule, TabularAlgo, TABULAR_CSV_HEADER,
};

/// Environment selector and its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum EnvConfig {
    CartPole { max_steps: u32 },
    /// A generated finite MDP with one-hot observations.
    RandomMdp { mdp_seed: u64, max_steps: u32 },
}

impl EnvConfig {
    pub fn build(&self) -> Result<Box<dyn EpisodicEnv>> {
        match *self {
            EnvConfig::CartPole { max_steps } => Ok(Box::new(CartPole::new(CartPoleParams {
                max_steps,
                ..CartPoleParams::default()
            }))),
            EnvConfig::RandomMdp {
                mdp_seed,
                max_steps,
            } => Ok(Box::new(MdpEnv::new(
                RandomMdp::BENCHMARK.generate(mdp_seed)?,
                Some(max_steps),
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub episodes: u32,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub env: EnvConfig,
    pub agent: AgentConfig,
    pub eval_period: u32,
    pub eval_episodes: u32,
    pub probe_period: u32,
    pub probe_samples: usize,
}

/// Environment variable that overrides `experiment.out_dir`.
pub const OUT_DIR_ENV: &str = "CROSSQ_OUT_DIR";

const SECTIONS: [&str; 5] = ["experiment", "env", "agent", "eval", "probe"];

const KNOWN_KEYS: [(&str, &[&str]); 5] = [
    ("experiment", &["name", "episodes", "seeds", "out_dir"]),
    ("env", &["name", "max_steps", "mdp_seed"]),
    (
        "agent",
        &[
            "algo",
            "k",
            "strategy",
            "architecture",
            "hidden",
            "dueling",
            "train_mode",
            "learner_choice",
            "evaluator_draw",
            "gamma",
            "batch_size",
            "learning_rate",
            "target_sync",
            "mask_p",
            "replay_capacity",
            "learning_starts",
            "epsilon_start",
            "epsilon_end",
            "epsilon_steps",
        ],
    ),
    ("eval", &["period", "episodes"]),
    ("probe", &["period", "samples"]),
];

const REQUIRED_KEYS: [&str; 4] = ["experiment.episodes", "env.name", "agent.algo", "agent.k"];

fn suggest<'a>(word: &str, candidates: impl IntoIterator<Item = &'a str>) -> Option<&'a str> {
    candidates
        .into_iter()
        .map(|c| (strsim::jaro_winkler(word, c), c))
        .filter(|(score, _)| *score > 0.8)
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, c)| c)
}

fn unknown(key: String, candidates: &[&str]) -> Error {
    let leaf = key.rsplit('.').next().unwrap_or(&key).to_string();
    let message = match suggest(&leaf, candidates.iter().copied()) {
        Some(s) => format!("unknown key (did you mean `{s}`?)"),
        None => format!("unknown key (expected one of: {})", candidates.join(", ")),
    };
    Error::parse(key, message)
}

/// Typed view over one section that reports errors by dotted key.
struct Section<'a> {
    name: &'static str,
    table: Option<&'a Table>,
}

impl<'a> Section<'a> {
    fn raw(&self, key: &str) -> Option<&'a Value> {
        self.table.and_then(|t| t.get(key))
    }

    fn path(&self, key: &str) -> String {
        format!("{}.{key}", self.name)
    }

    fn mismatch(&self, key: &str, want: &str, got: &Value) -> Error {
        Error::parse(self.path(key), format!("expected {want}, found {}", got.type_str()))
    }

    fn string(&self, key: &str) -> Result<Option<String>> {
        match self.raw(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.clone())),
            Some(v) => Err(self.mismatch(key, "a string", v)),
        }
    }

    fn float(&self, key: &str) -> Result<Option<f64>> {
        match self.raw(key) {
            None => Ok(None),
            Some(Value::Float(f)) => Ok(Some(*f)),
            Some(Value::Integer(i)) => Ok(Some(*i as f64)),
            Some(v) => Err(self.mismatch(key, "a number", v)),
        }
    }

    fn uint(&self, key: &str) -> Result<Option<u64>> {
        match self.raw(key) {
            None => Ok(None),
            Some(Value::Integer(i)) if *i >= 0 => Ok(Some(*i as u64)),
            Some(v) => Err(self.mismatch(key, "a non-negative integer", v)),
        }
    }

    fn uint_list(&self, key: &str) -> Result<Option<Vec<u64>>> {
        match self.raw(key) {
            None => Ok(None),
            Some(Value::Array(items)) => items
                .iter()
                .map(|v| match v {
                    Value::Integer(i) if *i >= 0 => Ok(*i as u64),
                    other => Err(self.mismatch(key, "a list of non-negative integers", other)),
                })
                .collect::<Result<Vec<_>>>()
                .map(Some),
            Some(v) => Err(self.mismatch(key, "a list", v)),
        }
    }

    fn choice<T: Copy>(&self, key: &str, options: &[(&str, T)]) -> Result<Option<T>> {
        let Some(s) = self.string(key)? else {
            return Ok(None);
        };
        if let Some((_, v)) = options.iter().find(|(name, _)| *name == s) {
            return Ok(Some(*v));
        }
        let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
        let hint = suggest(&s, names.iter().copied())
            .map(|n| format!(" (did you mean `{n}`?)"))
            .unwrap_or_default();
        Err(Error::parse(
            self.path(key),
            format!("`{s}` is not one of {}{hint}", names.join(", ")),
        ))
    }
}

fn narrow<T: TryFrom<u64>>(key: &str, v: u64) -> Result<T> {
    T::try_from(v).map_err(|_| Error::parse(key, format!("{v} is out of range")))
}

const ALGOS: [(&str, Algo); 3] = [
    ("vanilla", Algo::Vanilla),
    ("double", Algo::Double),
    ("cross", Algo::Cross),
];
const STRATEGIES: [(&str, ActionStrategy); 3] = [
    ("vote", ActionStrategy::Vote),
    ("bootstrap", ActionStrategy::Bootstrap),
    ("single", ActionStrategy::Single),
];
const ARCHITECTURES: [(&str, Architecture); 2] = [
    ("separate", Architecture::Separate),
    ("shared", Architecture::Shared),
];
const DUELING: [(&str, Option<DuelingMode>); 3] = [
    ("none", None),
    ("mean", Some(DuelingMode::Mean)),
    ("max", Some(DuelingMode::Max)),
];
const TRAIN_MODES: [(&str, TrainMode); 2] = [
    ("one-member", TrainMode::OneMember),
    ("all-members", TrainMode::AllMembers),
];
const LEARNER_CHOICES: [(&str, LearnerChoice); 2] = [
    ("uniform", LearnerChoice::Uniform),
    ("round-robin", LearnerChoice::RoundRobin),
];
const EVALUATOR_DRAWS: [(&str, EvaluatorDraw); 2] = [
    ("per-batch", EvaluatorDraw::PerBatch),
    ("per-row", EvaluatorDraw::PerRow),
];

fn name_of<T: PartialEq + Copy>(options: &[(&'static str, T)], v: T) -> &'static str {
    options
        .iter()
        .find(|(_, o)| *o == v)
        .map(|(n, _)| *n)
        .expect("every variant has a name")
}

impl ExperimentConfig {
    /// Parse a TOML document with sections `experiment`, `env`, `agent`,
    /// `eval` and `probe`. Unset optional keys take the CartPole defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let doc: Table = toml::from_str(text).map_err(|e| Error::parse("document", e.message()))?;
        for (key, value) in &doc {
            if !SECTIONS.contains(&key.as_str()) {
                return Err(unknown(key.clone(), &SECTIONS));
            }
            if !value.is_table() {
                return Err(Error::parse(key.clone(), "expected a section"));
            }
        }
        for (section, known) in KNOWN_KEYS {
            if let Some(t) = doc.get(section).and_then(Value::as_table) {
                for key in t.keys() {
                    if !known.contains(&key.as_str()) {
                        return Err(unknown(format!("{section}.{key}"), known));
                    }
                }
            }
        }
        let missing: Vec<&str> = REQUIRED_KEYS
            .iter()
            .copied()
            .filter(|path| {
                let (section, key) = path.split_once('.').expect("dotted");
                doc.get(section)
                    .and_then(Value::as_table)
                    .and_then(|t| t.get(key))
                    .is_none()
            })
            .collect();
        if let Some(first) = missing.first() {
            return Err(Error::parse(
                *first,
                format!("missing required keys: {}", missing.join(", ")),
            ));
        }

        let section = |name: &'static str| Section {
            name,
            table: doc.get(name).and_then(Value::as_table),
        };
        let (ex, env, ag, ev, pr) = (
            section("experiment"),
            section("env"),
            section("agent"),
            section("eval"),
            section("probe"),
        );

        let env_name = env.string("name")?.expect("required");
        let max_steps: u32 = narrow("env.max_steps", env.uint("max_steps")?.unwrap_or(200))?;
        let mdp_seed = env.uint("mdp_seed")?;
        let env_cfg = match env_name.as_str() {
            "cartpole" => {
                if mdp_seed.is_some() {
                    return Err(Error::parse("env.mdp_seed", "only valid with name = \"random_mdp\""));
                }
                EnvConfig::CartPole { max_steps }
            }
            "random_mdp" => EnvConfig::RandomMdp {
                mdp_seed: mdp_seed.unwrap_or(CONVERGENCE_SEED),
                max_steps,
            },
            other => {
                let hint = suggest(other, ["cartpole", "random_mdp"])
                    .map(|n| format!(" (did you mean `{n}`?)"))
                    .unwrap_or_default();
                return Err(Error::parse(
                    "env.name",
                    format!("unknown environment `{other}`{hint}"),
                ));
            }
        };
        if max_steps == 0 {
            return Err(Error::parse("env.max_steps", "must be >= 1"));
        }

        let algo = ag.choice("algo", &ALGOS)?.expect("required");
        let k: usize = narrow("agent.k", ag.uint("k")?.expect("required"))?;
        let mut agent = AgentConfig::paper(algo, k);
        if let Some(v) = ag.choice("strategy", &STRATEGIES)? {
            agent.strategy = v;
        }
        if let Some(v) = ag.choice("architecture", &ARCHITECTURES)? {
            agent.architecture = v;
        }
        if let Some(v) = ag.uint_list("hidden")? {
            agent.hidden = v
                .into_iter()
                .map(|h| narrow("agent.hidden", h))
                .collect::<Result<_>>()?;
        }
        if let Some(v) = ag.choice("dueling", &DUELING)? {
            agent.dueling = v;
        }
        if let Some(v) = ag.choice("train_mode", &TRAIN_MODES)? {
            agent.train_mode = v;
        }
        if let Some(v) = ag.choice("learner_choice", &LEARNER_CHOICES)? {
            agent.learner_choice = v;
        }
        if let Some(v) = ag.choice("evaluator_draw", &EVALUATOR_DRAWS)? {
            agent.evaluator_draw = v;
        }
        if let Some(v) = ag.float("gamma")? {
            agent.gamma = v;
        }
        if let Some(v) = ag.uint("batch_size")? {
            agent.batch_size = narrow("agent.batch_size", v)?;
        }
        if let Some(v) = ag.float("learning_rate")? {
            agent.learning_rate = v;
        }
        if let Some(v) = ag.uint("target_sync")? {
            agent.target_sync = v;
        }
        if let Some(v) = ag.float("mask_p")? {
            agent.mask_p = v;
        }
        if let Some(v) = ag.uint("replay_capacity")? {
            agent.replay_capacity = narrow("agent.replay_capacity", v)?;
        }
        if let Some(v) = ag.uint("learning_starts")? {
            agent.learning_starts = narrow("agent.learning_starts", v)?;
        }
        agent.epsilon = EpsilonSchedule {
            start: ag.float("epsilon_start")?.unwrap_or(agent.epsilon.start),
            end: ag.float("epsilon_end")?.unwrap_or(agent.epsilon.end),
            horizon: ag.uint("epsilon_steps")?.unwrap_or(agent.epsilon.horizon),
        };
        agent
            .validate()
            .map_err(|e| Error::parse("agent", e.to_string()))?;

        let config = Self {
            name: ex.string("name")?.unwrap_or_else(|| "experiment".into()),
            episodes: narrow("experiment.episodes", ex.uint("episodes")?.expect("required"))?,
            seeds: ex.uint_list("seeds")?.unwrap_or_else(|| vec![0]),
            out_dir: PathBuf::from(ex.string("out_dir")?.unwrap_or_else(|| "runs".into())),
            env: env_cfg,
            agent,
            eval_period: narrow("eval.period", ev.uint("period")?.unwrap_or(20))?,
            eval_episodes: narrow("eval.episodes", ev.uint("episodes")?.unwrap_or(10))?,
            probe_period: narrow("probe.period", pr.uint("period")?.unwrap_or(20))?,
            probe_samples: narrow("probe.samples", pr.uint("samples")?.unwrap_or(1024))?,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 {
            return Err(Error::parse("experiment.episodes", "must be >= 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::parse("experiment.seeds", "must list at least one seed"));
        }
        if self.eval_period == 0 {
            return Err(Error::parse("eval.period", "must be >= 1"));
        }
        if self.probe_period == 0 {
            return Err(Error::parse("probe.period", "must be >= 1"));
        }
        if self.probe_samples == 0 {
            return Err(Error::parse("probe.samples", "must be >= 1"));
        }
        Ok(())
    }

    /// Canonical TOML text; `parse(to_toml())` reproduces the config.
    pub fn to_toml(&self) -> String {
        let a = &self.agent;
        let list = |v: &[u64]| {
            v.iter()
                .map(u64::to_string)
                .collect::<Vec<_>>()
                .join(", ")
        };
        let mut out = String::new();
        let _ = writeln!(out, "[experiment]");
        let _ = writeln!(out, "name = {}", Value::from(self.name.as_str()));
        let _ = writeln!(out, "episodes = {}", self.episodes);
        let _ = writeln!(out, "seeds = [{}]", list(&self.seeds));
        let _ = writeln!(
            out,
            "out_dir = {}",
            Value::from(self.out_dir.to_string_lossy().as_ref())
        );
        let _ = writeln!(out, "\n[env]");
        match self.env {
            EnvConfig::CartPole { max_steps } => {
                let _ = writeln!(out, "name = \"cartpole\"\nmax_steps = {max_steps}");
            }
            EnvConfig::RandomMdp {
                mdp_seed,
                max_steps,
            } => {
                let _ = writeln!(
                    out,
                    "name = \"random_mdp\"\nmax_steps = {max_steps}\nmdp_seed = {mdp_seed}"
                );
            }
        }
        let hidden: Vec<u64> = a.hidden.iter().map(|&h| h as u64).collect();
        let _ = writeln!(out, "\n[agent]");
        let _ = writeln!(out, "algo = \"{}\"", name_of(&ALGOS, a.algo));
        let _ = writeln!(out, "k = {}", a.k);
        let _ = writeln!(out, "strategy = \"{}\"", name_of(&STRATEGIES, a.strategy));
        let _ = writeln!(out, "architecture = \"{}\"", name_of(&ARCHITECTURES, a.architecture));
        let _ = writeln!(out, "hidden = [{}]", list(&hidden));
        let _ = writeln!(out, "dueling = \"{}\"", name_of(&DUELING, a.dueling));
        let _ = writeln!(out, "train_mode = \"{}\"", name_of(&TRAIN_MODES, a.train_mode));
        let _ = writeln!(out, "learner_choice = \"{}\"", name_of(&LEARNER_CHOICES, a.learner_choice));
        let _ = writeln!(out, "evaluator_draw = \"{}\"", name_of(&EVALUATOR_DRAWS, a.evaluator_draw));
        let _ = writeln!(out, "gamma = {:?}", a.gamma);
        let _ = writeln!(out, "batch_size = {}", a.batch_size);
        let _ = writeln!(out, "learning_rate = {:?}", a.learning_rate);
        let _ = writeln!(out, "target_sync = {}", a.target_sync);
        let _ = writeln!(out, "mask_p = {:?}", a.mask_p);
        let _ = writeln!(out, "replay_capacity = {}", a.replay_capacity);
        let _ = writeln!(out, "learning_starts = {}", a.learning_starts);
        let _ = writeln!(out, "epsilon_start = {:?}", a.epsilon.start);
        let _ = writeln!(out, "epsilon_end = {:?}", a.epsilon.end);
        let _ = writeln!(out, "epsilon_steps = {}", a.epsilon.horizon);
        let _ = writeln!(out, "\n[eval]\nperiod = {}\nepisodes = {}", self.eval_period, self.eval_episodes);
        let _ = writeln!(out, "\n[probe]\nperiod = {}\nsamples = {}", self.probe_period, self.probe_samples);
        out
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    /// `CROSSQ_OUT_DIR` when set, otherwise `experiment.out_dir`.
    pub fn resolved_out_dir(&self) -> PathBuf {
        std::env::var_os(OUT_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| self.out_dir.clone())
    }
}

/// Shipped experiment presets, by name.
pub fn presets() -> BTreeMap<&'static str, &'static str> {
    BTreeMap::from([
        ("cartpole_vanilla", include_str!("../configs/cartpole_vanilla.toml")),
        ("cartpole_double", include_str!("../configs/cartpole_double.toml")),
        ("cartpole_cross_k5", include_str!("../configs/cartpole_cross_k5.toml")),
        ("cartpole_cross_k10", include_str!("../configs/cartpole_cross_k10.toml")),
        ("cartpole_cross_k5_dueling", include_str!("../configs/cartpole_cross_k5_dueling.toml")),
        ("cartpole_cross_k5_bootstrap", include_str!("../configs/cartpole_cross_k5_bootstrap.toml")),
        (
            "cartpole_cross_k5_dueling_bootstrap",
            include_str!("../configs/cartpole_cross_k5_dueling_bootstrap.toml"),
        ),
    ])
}

pub fn tabular_presets() -> BTreeMap<&'static str, &'static str> {
    BTreeMap::from([
        ("tabular_cross_k4", include_str!("../configs/tabular_cross_k4.toml")),
        ("tabular_max_bias", include_str!("../configs/tabular_max_bias.toml")),
    ])
}

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let all = presets();
    match all.get(name) {
        Some(text) => ExperimentConfig::parse(text),
        None => Err(Error::config(format!(
            "no preset `{name}` (available: {})",
            all.keys().copied().collect::<Vec<_>>().join(", ")
        ))),
    }
}

/// Which finite MDP a tabular run uses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TabularMdp {
    /// The 6-state, 3-action noisy convergence benchmark.
    Benchmark,
    /// A generated MDP of the benchmark's shape from another seed.
    Random { seed: u64 },
    /// Two-state chain with eight equally valued noisy actions in the second state.
    MaximizationBias,
}

impl TabularMdp {
    pub fn build(self) -> Result<FiniteMdp> {
        match self {
            TabularMdp::Benchmark => Ok(presets::convergence_benchmark()),
            TabularMdp::Random { seed } => RandomMdp::BENCHMARK.generate(seed),
            TabularMdp::MaximizationBias => presets::maximization_bias(8, 0.95),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularConfig {
    pub mdp: TabularMdp,
    pub algo: TabularAlgo,
    pub k: usize,
    pub steps: u64,
    pub seeds: Vec<u64>,
    pub trace_every: u64,
    pub schedule: LearningSchedule,
}

const TABULAR_KEYS: [&str; 9] = [
    "mdp", "mdp_seed", "algo", "k", "steps", "seeds", "trace_every", "omega", "epsilon",
];

impl TabularConfig {
    /// Parse a `[tabular]` document. Only `algo` is required.
    pub fn parse(text: &str) -> Result<Self> {
        let doc: Table = toml::from_str(text).map_err(|e| Error::parse("document", e.message()))?;
        for key in doc.keys() {
            if key != "tabular" {
                return Err(unknown(key.clone(), &["tabular"]));
            }
        }
        let table = doc.get("tabular").and_then(Value::as_table);
        if let Some(t) = table {
            for key in t.keys() {
                if !TABULAR_KEYS.contains(&key.as_str()) {
                    return Err(unknown(format!("tabular.{key}"), &TABULAR_KEYS));
                }
            }
        }
        let sec = Section { name: "tabular", table };
        let Some(algo_name) = sec.string("algo")? else {
            return Err(Error::parse("tabular.algo", "missing required keys: tabular.algo"));
        };
        let algo = TabularAlgo::parse(&algo_name).map_err(|e| Error::parse("tabular.algo", e.to_string()))?;
        let mdp_seed = sec.uint("mdp_seed")?;
        let mdp = match sec.string("mdp")?.as_deref().unwrap_or("benchmark") {
            "benchmark" if mdp_seed.is_none() => TabularMdp::Benchmark,
            "random" => TabularMdp::Random {
                seed: mdp_seed.unwrap_or(CONVERGENCE_SEED),
            },
            "maximization_bias" if mdp_seed.is_none() => TabularMdp::MaximizationBias,
            "benchmark" | "maximization_bias" => {
                return Err(Error::parse("tabular.mdp_seed", "only valid with mdp = \"random\""))
            }
            other => {
                let names = ["benchmark", "random", "maximization_bias"];
                let hint = suggest(other, names)
                    .map(|n| format!(" (did you mean `{n}`?)"))
                    .unwrap_or_default();
                return Err(Error::parse("tabular.mdp", format!("unknown MDP `{other}`{hint}")));
            }
        };
        let default_k = match algo {
            TabularAlgo::Q => 1,
            TabularAlgo::Double => 2,
            TabularAlgo::Cross => 4,
        };
        let defaults = LearningSchedule::default();
        let config = Self {
            mdp,
            algo,
            k: narrow("tabular.k", sec.uint("k")?.unwrap_or(default_k))?,
            steps: sec.uint("steps")?.unwrap_or(200_000),
            seeds: sec.uint_list("seeds")?.unwrap_or_else(|| vec![0]),
            trace_every: sec.uint("trace_every")?.unwrap_or(1000),
            schedule: LearningSchedule {
                omega: sec.float("omega")?.unwrap_or(defaults.omega),
                epsilon: sec.float("epsilon")?.unwrap_or(defaults.epsilon),
            },
        };
        config.algo.check_k(config.k).map_err(|e| Error::parse("tabular.k", e.to_string()))?;
        config
            .schedule
            .validate()
            .map_err(|e| Error::parse("tabular", e.to_string()))?;
        if config.seeds.is_empty() {
            return Err(Error::parse("tabular.seeds", "must list at least one seed"));
        }
        if config.trace_every == 0 {
            return Err(Error::parse("tabular.trace_every", "must be >= 1"));
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// CSV with header for every seed, in seed order.
    pub fn run_csv(&self) -> Result<String> {
        let mdp = self.mdp.build()?;
        let mut out = format!("{TABULAR_CSV_HEADER}\n");
        for &seed in &self.seeds {
            let outcome = run_tabular(&mdp, self.algo, self.k, self.steps, self.schedule, self.trace_every, seed)?;
            out.push_str(&trace_csv_rows(self.algo, self.k, seed, &outcome.trace));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRow {
    pub episode: u32,
    /// Environment steps taken so far, across episodes.
    pub steps: u64,
    pub ret: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalPoint {
    pub episode: u32,
    pub returns: Vec<f64>,
}

impl EvalPoint {
    pub fn mean(&self) -> f64 {
        crate::util::mean(&self.returns)
    }

    pub fn std(&self) -> f64 {
        crate::util::sample_std(&self.returns)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRow {
    pub episode: u32,
    pub mean_q: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsLog {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub train: Vec<TrainRow>,
    pub eval: Vec<EvalPoint>,
    pub probe: Vec<ProbeRow>,
}

impl MetricsLog {
    pub fn train_csv(&self) -> String {
        let mut s = String::from("episode,steps,return\n");
        for r in &self.train {
            let _ = writeln!(s, "{},{},{}", r.episode, r.steps, r.ret);
        }
        s
    }

    pub fn eval_csv(&self) -> String {
        let mut s = String::from("episode,eval_index,return\n");
        for p in &self.eval {
            for (i, r) in p.returns.iter().enumerate() {
                let _ = writeln!(s, "{},{},{}", p.episode, i, r);
            }
        }
        s
    }

    pub fn probe_csv(&self) -> String {
        let mut s = String::from("episode,mean_q\n");
        for p in &self.probe {
            let _ = writeln!(s, "{},{}", p.episode, p.mean_q);
        }
        s
    }

    pub fn metadata(&self) -> String {
        format!(
            "# resolved configuration for this run\n[run]\nseed = {}\nconfig_sha256 = \"{}\"\ncrate_version = \"{}\"\n\n{}",
            self.seed,
            self.config.hash(),
            env!("CARGO_PKG_VERSION"),
            self.config.to_toml()
        )
    }

    /// Mean eval return over the last `n` eval points.
    pub fn final_eval_mean(&self, n: usize) -> f64 {
        let tail = &self.eval[self.eval.len().saturating_sub(n)..];
        let all: Vec<f64> = tail.iter().flat_map(|p| p.returns.iter().copied()).collect();
        crate::util::mean(&all)
    }
}

/// Write `train.csv`, `eval.csv`, `probe.csv` and `metadata.toml` into `dir`.
pub fn write_metrics(log: &MetricsLog, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = [
        ("train.csv", log.train_csv()),
        ("eval.csv", log.eval_csv()),
        ("probe.csv", log.probe_csv()),
        ("metadata.toml", log.metadata()),
    ];
    let mut written = Vec::new();
    for (name, body) in files {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

/// Greedy returns of `episodes` fresh episodes; never touches the replay buffer.
pub fn evaluate_policy(
    ensemble: &QEnsemble,
    env: &mut dyn EpisodicEnv,
    episodes: u32,
    rng: &mut SimRng,
) -> Result<Vec<f64>> {
    let mut returns = Vec::with_capacity(episodes as usize);
    for _ in 0..episodes {
        let mut s = env.reset(rng);
        let mut total = 0.0;
        loop {
            let a = greedy_action(ensemble, &s, ActionStrategy::Vote, 0)?;
            let out = env.step(a, rng)?;
            total += out.reward;
            s = out.observation;
            if out.done {
                break;
            }
        }
        returns.push(total);
    }
    Ok(returns)
}

/// Mean over members and over `min(n, len)` stored `(s, a)` pairs of `Q^k(s, a)`.
pub fn q_probe(ensemble: &QEnsemble, buffer: &ReplayBuffer, n: usize, rng: &mut SimRng) -> Result<f64> {
    if buffer.is_empty() {
        return Err(Error::InsufficientData {
            needed: 1,
            available: 0,
        });
    }
    let items = buffer.sample(n.min(buffer.len()), rng)?;
    let rows: Vec<&[f64]> = items.iter().map(|t| t.s.as_slice()).collect();
    let states = Matrix::from_rows(&rows)?;
    let all = ensemble.all_q_values(&states, Weights::Online)?;
    let mut total = 0.0;
    for q in &all {
        for (b, t) in items.iter().enumerate() {
            total += q.get(b, t.a);
        }
    }
    Ok(total / (all.len() * items.len()) as f64)
}

/// Train on the configured environment and record the measurement series.
pub fn run_experiment(config: &ExperimentConfig, seed: u64) -> Result<MetricsLog> {
    let env = config.env.build()?;
    let eval_env = config.env.build()?;
    let agent = Agent::new(env.observation_dim(), env.num_actions(), config.agent.clone(), seed)?;
    run_with(config, seed, env, eval_env, agent)
}

/// Like [`run_experiment`] with caller-supplied environments and agent.
pub fn run_with(
    config: &ExperimentConfig,
    seed: u64,
    mut env: Box<dyn EpisodicEnv>,
    mut eval_env: Box<dyn EpisodicEnv>,
    mut agent: Agent,
) -> Result<MetricsLog> {
    config.validate()?;
    for e in [&env, &eval_env] {
        if e.observation_dim() != agent.ensemble.obs_dim() || e.num_actions() != agent.ensemble.n_actions() {
            return Err(Error::config(format!(
                "environment is {}-dim with {} actions, agent expects {}-dim with {}",
                e.observation_dim(),
                e.num_actions(),
                agent.ensemble.obs_dim(),
                agent.ensemble.n_actions()
            )));
        }
    }
    let mut env_rng = rng::stream(seed, "env");
    let mut eval_rng = rng::stream(seed, "eval");
    let mut probe_rng = rng::stream(seed, "probe");
    let mut log = MetricsLog {
        config: config.clone(),
        seed,
        train: Vec::with_capacity(config.episodes as usize),
        eval: Vec::new(),
        probe: Vec::new(),
    };

    for episode in 1..=config.episodes {
        agent.begin_episode();
        let mut s = env.reset(&mut env_rng);
        let mut ret = 0.0;
        loop {
            let a = agent.act(&s)?;
            let out = env.step(a, &mut env_rng)?;
            ret += out.reward;
            let terminal = out.terminal();
            let done = out.done;
            let s_next = out.observation;
            agent.observe(Transition {
                s: std::mem::take(&mut s),
                a,
                r: out.reward,
                s_next: s_next.clone(),
                done: terminal,
            })?;
            s = s_next;
            if done {
                break;
            }
        }
        log.train.push(TrainRow {
            episode,
            steps: agent.global_step(),
            ret,
        });
        if episode % config.eval_period == 0 {
            let returns = evaluate_policy(&agent.ensemble, eval_env.as_mut(), config.eval_episodes, &mut eval_rng)?;
            log.eval.push(EvalPoint { episode, returns });
        }
        if episode % config.probe_period == 0 {
            let mean_q = q_probe(&agent.ensemble, &agent.buffer, config.probe_samples, &mut probe_rng)?;
            log.probe.push(ProbeRow { episode, mean_q });
        }
    }
    Ok(log)
}
