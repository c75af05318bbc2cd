#![allow(dead_code)]

use crl_core::envsuite::{generate_task_sized, GridEnv, TaskKind, Transition, NUM_ACTIONS};
use crl_core::replay::Episode;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `steps` uniformly random transitions, resetting after every episode end.
pub fn random_walk(env: &mut GridEnv, steps: usize, rng: &mut ChaCha8Rng) -> Vec<Transition> {
    let mut obs = env.reset();
    let mut out = Vec::with_capacity(steps);
    while out.len() < steps {
        let action = rng.gen_range(0..NUM_ACTIONS);
        let step = env.step(action).expect("env steps");
        out.push(Transition {
            obs: obs.clone(),
            action,
            reward: step.reward,
            done: step.done,
            truncated: step.truncated,
            next_obs: step.obs.clone(),
        });
        obs = if step.done { env.reset() } else { step.obs };
    }
    out
}

/// A random-walk episode of exactly `len` steps on a 9×9 instance.
pub fn walk_episode(kind: TaskKind, seed: u64, len: usize, start_step: u64) -> Episode {
    let mut env = GridEnv::new(generate_task_sized(kind, 9, seed).expect("valid task"), 10_000);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Episode::new(random_walk(&mut env, len, &mut rng), start_step, 0.0)
}
