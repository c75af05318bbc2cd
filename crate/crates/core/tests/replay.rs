mod common;

use common::walk_episode;
use crl_core::envsuite::{TaskKind, Transition};
use crl_core::replay::{Episode, InsertionStrategy, ReplayBuffer, ReplayConfig, SamplingStrategy};
use crl_core::worldmodel::{EnsembleWorldModel, WorldModelConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn strategy() -> impl Strategy<Value = InsertionStrategy> {
    prop_oneof![
        Just(InsertionStrategy::Fifo),
        Just(InsertionStrategy::Reservoir),
        Just(InsertionStrategy::CoverageMax),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn capacity_is_never_exceeded(
        insertion in strategy(),
        capacity in 10usize..120,
        min_len in 1usize..4,
        lengths in prop::collection::vec(1usize..40, 1..40),
        seed in any::<u64>(),
    ) {
        let cfg = ReplayConfig::new(capacity, insertion, SamplingStrategy::Uniform).with_min_store_length(min_len);
        let mut buffer = ReplayBuffer::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kinds = [TaskKind::OpenRoom, TaskKind::KeyDoor, TaskKind::Crossing];
        let mut step = 0;
        for (i, &len) in lengths.iter().enumerate() {
            let ep = walk_episode(kinds[i % 3], seed.wrapping_add(i as u64), len, step);
            step += len as u64;
            buffer.offer(ep, &mut rng);
            prop_assert!(buffer.stored_transitions() <= capacity);
            let total: usize = buffer.episodes().map(Episode::len).sum();
            prop_assert_eq!(total, buffer.stored_transitions());
        }
    }

    #[test]
    fn sampled_segments_stay_inside_their_episode(
        lengths in prop::collection::vec(4usize..30, 1..10),
        count in 1usize..64,
        seed in any::<u64>(),
    ) {
        let cfg = ReplayConfig::new(10_000, InsertionStrategy::Fifo, SamplingStrategy::FiftyFifty).with_min_store_length(4);
        let mut buffer = ReplayBuffer::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (i, &len) in lengths.iter().enumerate() {
            buffer.offer(walk_episode(TaskKind::OpenRoom, i as u64, len, 0), &mut rng);
        }
        for seg in buffer.sample_minibatch(count, &mut rng).unwrap() {
            prop_assert_eq!(seg.len, 4);
            prop_assert!(seg.start + seg.len <= buffer.episode(seg.episode).len());
        }
    }
}

fn scored(score: f64, start: u64) -> Episode {
    let mut e = walk_episode(TaskKind::OpenRoom, start, 8, start);
    e = Episode::new(std::mem::take(&mut e.transitions), start, score);
    e
}

#[test]
fn uncertainty_sampling_follows_scores() {
    let cfg = ReplayConfig::new(1000, InsertionStrategy::Fifo, SamplingStrategy::Uncertainty).with_min_store_length(4);
    let mut buffer = ReplayBuffer::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    buffer.offer(scored(1.0, 0), &mut rng);
    buffer.offer(scored(3.0, 8), &mut rng);
    let draws = 100_000;
    let picks = buffer.sample_minibatch(draws, &mut rng).unwrap();
    let second = picks.iter().filter(|s| s.episode == 1).count() as f64;
    let ratio = second / (draws as f64 - second);
    assert!((ratio / 3.0 - 1.0).abs() < 0.05, "pick ratio {ratio}");
}

#[test]
fn uncertainty_score_survives_model_training() {
    let cfg = ReplayConfig::new(1000, InsertionStrategy::Fifo, SamplingStrategy::Uncertainty).with_min_store_length(4);
    let mut buffer = ReplayBuffer::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut model = EnsembleWorldModel::new(WorldModelConfig { hidden: 8, ..Default::default() }, 3).unwrap();
    for i in 0..4 {
        let ep = walk_episode(TaskKind::OpenRoom, i, 20, 20 * i);
        let score = model.episode_uncertainty(&ep.transitions);
        buffer.offer(Episode::new(ep.transitions, ep.start_step, score), &mut rng);
    }
    let before: Vec<f64> = buffer.episodes().map(Episode::uncertainty_score).collect();
    model.train(&buffer, 50).unwrap();
    let after: Vec<f64> = buffer.episodes().map(Episode::uncertainty_score).collect();
    assert_eq!(before, after);
    assert!(before.iter().all(|s| *s > 0.0));
}

fn unit(start: u64) -> Episode {
    let t: Transition = walk_episode(TaskKind::OpenRoom, 0, 1, 0).transitions.remove(0);
    Episode::new(vec![t], start, 0.0)
}

fn four_task_composition(insertion: InsertionStrategy, seed: u64) -> Vec<f64> {
    let per_task = 500;
    let cfg = ReplayConfig::new(per_task, insertion, SamplingStrategy::Uniform).with_min_store_length(1);
    let mut buffer = ReplayBuffer::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for step in 0..4 * per_task as u64 {
        buffer.offer(unit(step), &mut rng);
    }
    let starts: Vec<u64> = (1..4).map(|t| t * per_task as u64).collect();
    buffer.composition_snapshot(&starts)
}

#[test]
fn fifo_keeps_only_the_last_task() {
    let shares = four_task_composition(InsertionStrategy::Fifo, 0);
    assert!(shares[3] > 0.99, "{shares:?}");
}

#[test]
fn reservoir_keeps_every_task() {
    for seed in 0..5 {
        let shares = four_task_composition(InsertionStrategy::Reservoir, seed);
        for s in &shares {
            assert!((s - 0.25).abs() <= 0.15, "{shares:?}");
        }
    }
}

#[test]
fn unbounded_buffer_holds_budget_ratio_of_episodes() {
    // 1:6 budgets with the same episode length distribution in both phases
    let mut fractions = Vec::new();
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = ReplayConfig::new(1_000_000, InsertionStrategy::Reservoir, SamplingStrategy::Uniform).with_min_store_length(1);
        let mut buffer = ReplayBuffer::new(cfg).unwrap();
        let template = walk_episode(TaskKind::OpenRoom, seed, 100, 0).transitions;
        let (a, total) = (4_000u64, 28_000u64);
        let mut step = 0;
        while step < total {
            let len = rng.gen_range(4..=100);
            buffer.offer(Episode::new(template[..len].to_vec(), step, 0.0), &mut rng);
            step += len as u64;
        }
        fractions.push(buffer.composition_snapshot(&[a])[0]);
    }
    let mean = fractions.iter().sum::<f64>() / fractions.len() as f64;
    assert!((mean - 1.0 / 7.0).abs() < 0.02, "task-1 fraction {mean}");
}

#[test]
fn novel_task_gets_higher_coverage_priority() {
    let cfg = ReplayConfig::new(100_000, InsertionStrategy::CoverageMax, SamplingStrategy::Uniform).with_min_store_length(4);
    let mut buffer = ReplayBuffer::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for i in 0..20 {
        buffer.offer(walk_episode(TaskKind::OpenRoom, i, 30, 30 * i), &mut rng);
    }
    let mut within: Vec<f64> = buffer.episodes().skip(1).map(|e| e.coverage_priority.unwrap()).collect();
    within.sort_by(f64::total_cmp);
    let median = 0.5 * (within[within.len() / 2 - 1] + within[within.len() / 2]);
    buffer.offer(walk_episode(TaskKind::KeyDoor, 99, 30, 600), &mut rng);
    let novel = buffer.episodes().last().unwrap().coverage_priority.unwrap();
    assert!(novel > median, "novel {novel} vs within-task median {median}");
}
