#![allow(clippy::needless_range_loop)]

use crossq::agents::*;
use crossq::rng::{self, SimRng};
use proptest::prelude::*;
use rand::Rng;

fn random_transitions(n: usize, obs_dim: usize, n_actions: usize, rng: &mut SimRng) -> Vec<Transition> {
    (0..n)
        .map(|_| Transition {
            s: (0..obs_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            a: rng.random_range(0..n_actions),
            r: rng.random_range(-1.0..1.0),
            s_next: (0..obs_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            done: rng.random_bool(0.2),
        })
        .collect()
}

fn small_config(algo: Algo, k: usize, architecture: Architecture) -> AgentConfig {
    AgentConfig {
        hidden: vec![8, 6],
        architecture,
        batch_size: 8,
        ..AgentConfig::paper(algo, k)
    }
}

fn filled_buffer(n: usize, obs_dim: usize, n_actions: usize, seed: u64) -> ReplayBuffer {
    let mut r = rng::seeded(seed);
    let mut buf = ReplayBuffer::new(1000, obs_dim).unwrap();
    for t in random_transitions(n, obs_dim, n_actions, &mut r) {
        buf.push(t).unwrap();
    }
    buf
}

// Pearson statistic against a uniform expectation.
fn chi_square(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn cross_step_touches_only_the_learner(seed in 0u64..10_000, k in 2usize..6, shared in any::<bool>()) {
        let arch = if shared { Architecture::Shared } else { Architecture::Separate };
        let cfg = small_config(Algo::Cross, k, arch);
        let mut init = rng::seeded(seed);
        let mut ens = QEnsemble::new(3, 2, &cfg, &mut init).unwrap();
        let buf = filled_buffer(40, 3, 2, seed + 1);
        let before: Vec<_> = (0..k).map(|m| ens.member(m).clone()).collect();
        let mut rngs = TrainRngs { replay: rng::seeded(seed + 2), learner: rng::seeded(seed + 3) };
        train_step(&mut ens, &buf, &cfg, &mut rngs, 1).unwrap().unwrap();
        let changed: Vec<usize> = (0..k).filter(|&m| *ens.member(m) != before[m]).collect();
        prop_assert_eq!(changed.len(), 1);
    }

    #[test]
    fn identical_members_collapse_algorithms(seed in 0u64..10_000, k in 2usize..5, gamma in 0.0f64..1.0) {
        let cfg = AgentConfig { target_sync: 10, ..small_config(Algo::Cross, k, Architecture::Separate) };
        let mut init = rng::seeded(seed);
        let mut ens = QEnsemble::new(4, 3, &cfg, &mut init).unwrap();
        ens.make_identical();
        let mut r = rng::seeded(seed ^ 0xabc);
        let items = random_transitions(16, 4, 3, &mut r);
        let refs: Vec<&Transition> = items.iter().collect();
        let batch = Batch::from_transitions(&refs).unwrap();
        let learner = r.random_range(0..k);
        let draw = if r.random_bool(0.5) { EvaluatorDraw::PerRow } else { EvaluatorDraw::PerBatch };
        let v = td_targets(&ens, &batch, Algo::Vanilla, learner, gamma, draw, &mut r).unwrap();
        let d = td_targets(&ens, &batch, Algo::Double, learner, gamma, draw, &mut r).unwrap();
        let c = td_targets(&ens, &batch, Algo::Cross, learner, gamma, draw, &mut r).unwrap();
        prop_assert_eq!(&v, &d);
        prop_assert_eq!(&v, &c);
    }

    #[test]
    fn targets_hold_last_snapshot(seed in 0u64..10_000, period in 2u64..7) {
        let cfg = AgentConfig { target_sync: period, ..small_config(Algo::Double, 1, Architecture::Separate) };
        let mut init = rng::seeded(seed);
        let mut ens = QEnsemble::new(3, 2, &cfg, &mut init).unwrap();
        let buf = filled_buffer(30, 3, 2, seed);
        let mut rngs = TrainRngs { replay: rng::seeded(seed + 1), learner: rng::seeded(seed + 2) };
        let mut snapshot = ens.member(0).clone();
        for step in 1..=(3 * period + 1) {
            train_step(&mut ens, &buf, &cfg, &mut rngs, step).unwrap();
            if step % period == 0 {
                snapshot = ens.member(0).clone();
            }
            prop_assert_eq!(ens.target_member(0).unwrap(), &snapshot);
        }
    }

    #[test]
    fn terminal_rows_and_zero_gamma_give_reward(seed in 0u64..10_000) {
        let cfg = small_config(Algo::Cross, 3, Architecture::Separate);
        let mut init = rng::seeded(seed);
        let ens = QEnsemble::new(2, 2, &cfg, &mut init).unwrap();
        let mut r = rng::seeded(seed);
        let items = random_transitions(12, 2, 2, &mut r);
        let refs: Vec<&Transition> = items.iter().collect();
        let batch = Batch::from_transitions(&refs).unwrap();
        for algo in [Algo::Vanilla, Algo::Double, Algo::Cross] {
            let y0 = td_targets(&ens, &batch, algo, 0, 0.0, EvaluatorDraw::PerBatch, &mut r).unwrap();
            prop_assert_eq!(&y0, &batch.r);
            let y = td_targets(&ens, &batch, algo, 0, 0.99, EvaluatorDraw::PerRow, &mut r).unwrap();
            for b in 0..batch.len() {
                if batch.done[b] {
                    prop_assert_eq!(y[b], batch.r[b]);
                }
            }
        }
    }
}

#[test]
fn replay_sampling_is_uniform() {
    let mut buf = ReplayBuffer::new(10, 1).unwrap();
    // 25 pushes into capacity 10: slots hold transitions 15..25.
    for i in 0..25 {
        buf.push(Transition { s: vec![i as f64], a: 0, r: i as f64, s_next: vec![0.0], done: false }).unwrap();
    }
    let oldest: Vec<f64> = buf.iter().map(|t| t.r).collect();
    assert_eq!(oldest, (15..25).map(f64::from).collect::<Vec<_>>());
    let mut r = rng::seeded(11);
    let mut counts = [0usize; 10];
    for _ in 0..2000 {
        for t in buf.sample(10, &mut r).unwrap() {
            counts[t.r as usize - 15] += 1;
        }
    }
    // 99.9% point of chi-square with 9 degrees of freedom.
    assert!(chi_square(&counts) < 27.88, "{counts:?}");
}

#[test]
fn full_exploration_is_uniform_over_actions() {
    let cfg = small_config(Algo::Cross, 3, Architecture::Separate);
    let mut init = rng::seeded(4);
    let ens = QEnsemble::new(2, 3, &cfg, &mut init).unwrap();
    let mut r = rng::seeded(8);
    let mut counts = [0usize; 3];
    for _ in 0..30_000 {
        counts[select_action(&ens, &[0.3, -0.2], ActionStrategy::Vote, 1.0, &mut r, 0).unwrap()] += 1;
    }
    // 99.9% point of chi-square with 2 degrees of freedom.
    assert!(chi_square(&counts) < 13.82, "{counts:?}");
}

#[test]
fn small_step_reduces_batch_loss() {
    for seed in 0..20 {
        let cfg = AgentConfig { learning_rate: 1e-4, ..small_config(Algo::Vanilla, 1, Architecture::Separate) };
        let mut init = rng::seeded(seed);
        let mut ens = QEnsemble::new(3, 2, &cfg, &mut init).unwrap();
        let mut r = rng::seeded(seed + 100);
        let items = random_transitions(16, 3, 2, &mut r);
        let refs: Vec<&Transition> = items.iter().collect();
        let batch = Batch::from_transitions(&refs).unwrap();
        let y: Vec<f64> = (0..16).map(|_| r.random_range(-2.0..2.0)).collect();
        let before = ens.batch_loss(0, &batch, &y).unwrap();
        let reported = ens.train_member(0, &batch, &y, None).unwrap();
        let after = ens.batch_loss(0, &batch, &y).unwrap();
        assert_eq!(reported, before);
        assert!(after < before, "seed {seed}: {before} -> {after}");
    }
}

#[test]
fn matching_targets_leave_gradient_term_at_zero() {
    let cfg = small_config(Algo::Vanilla, 1, Architecture::Shared);
    let mut init = rng::seeded(3);
    let mut ens = QEnsemble::new(3, 2, &cfg, &mut init).unwrap();
    let mut r = rng::seeded(4);
    let items = random_transitions(8, 3, 2, &mut r);
    let refs: Vec<&Transition> = items.iter().collect();
    let batch = Batch::from_transitions(&refs).unwrap();
    let q = ens.q_values(0, &batch.s, Weights::Online).unwrap();
    let y: Vec<f64> = (0..8).map(|b| q.get(b, batch.a[b])).collect();
    let head = ens.member(0).clone();
    let trunk = ens.trunk().unwrap().clone();
    assert_eq!(ens.train_member(0, &batch, &y, None).unwrap(), 0.0);
    assert_eq!(ens.member(0), &head);
    assert_eq!(ens.trunk().unwrap(), &trunk);
}

#[test]
fn dueling_mean_zero_advantage_sum() {
    let mut r = rng::seeded(9);
    for _ in 0..1000 {
        let v = r.random_range(-5.0..5.0);
        let adv: Vec<f64> = (0..4).map(|_| r.random_range(-5.0..5.0)).collect();
        let q = dueling_aggregate(v, &adv, DuelingMode::Mean).unwrap();
        let gap: f64 = q.iter().map(|x| x - v).sum();
        assert!(gap.abs() < 1e-12);
        let best_adv = crossq::util::argmax(&adv);
        assert_eq!(crossq::util::argmax(&q), best_adv);
    }
}

#[test]
fn unanimous_members_win_vote() {
    let qs = vec![vec![0.1, 0.9, 0.3], vec![-1.0, 0.0, -0.5], vec![2.0, 3.0, 2.5]];
    assert_eq!(majority_vote(&qs), 1);
    // Two for action 0, two for 2: the pair with the larger summed Q wins.
    let split = vec![vec![1.0, 0.0, 0.5], vec![0.9, 0.0, 0.1], vec![0.0, 0.0, 2.0], vec![0.0, 0.0, 1.0]];
    assert_eq!(majority_vote(&split), 2);
}

#[test]
fn agent_runs_are_reproducible() {
    let run = |seed| {
        let mut agent = Agent::new(3, 2, small_config(Algo::Cross, 3, Architecture::Separate), seed).unwrap();
        let mut r = rng::seeded(1);
        let items = random_transitions(60, 3, 2, &mut r);
        let mut losses = Vec::new();
        for t in items {
            agent.act(&t.s).unwrap();
            losses.push(agent.observe(t).unwrap());
        }
        (losses, agent.ensemble.member(2).clone())
    };
    assert_eq!(run(5), run(5));
    assert_ne!(run(5).1, run(6).1);
}
