//! Frozen random recurrent embedder for whole trajectories.
//!
//! Coverage-maximising insertion needs a task-agnostic distance between
//! episodes. The embedder is an untrained tanh RNN over per-transition inputs
//! `[observation features, one-hot action, reward]`; its final hidden state is
//! the embedding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envsuite::{Transition, FEATURE_DIM, NUM_ACTIONS};
use crate::error::{Error, Result};
use crate::nn::{axpy, dot};

pub const DEFAULT_HIDDEN: usize = 32;
const SPECTRAL_RADIUS: f64 = 0.9;
/// Typical number of nonzero inputs per transition.
const ACTIVE_INPUTS: f64 = 32.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEmbedder {
    seed: u64,
    hidden: usize,
    input: usize,
    /// `[input][hidden]`
    w_in: Vec<f64>,
    /// `[hidden][hidden]`, row `j` holds the weights out of unit `j`
    w_rec: Vec<f64>,
    bias: Vec<f64>,
}

impl TrajectoryEmbedder {
    pub fn new(seed: u64, hidden: usize) -> Self {
        let input = FEATURE_DIM + NUM_ACTIONS + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a_in = (3.0 / ACTIVE_INPUTS).sqrt();
        let w_in = (0..input * hidden).map(|_| rng.gen_range(-a_in..a_in)).collect();
        let a_rec = (3.0 / hidden as f64).sqrt();
        let mut w_rec: Vec<f64> = (0..hidden * hidden).map(|_| rng.gen_range(-a_rec..a_rec)).collect();
        let sigma = spectral_norm(&w_rec, hidden);
        if sigma > 0.0 {
            for w in &mut w_rec {
                *w *= SPECTRAL_RADIUS / sigma;
            }
        }
        let bias = (0..hidden).map(|_| rng.gen_range(-0.1..0.1)).collect();
        Self {
            seed,
            hidden,
            input,
            w_in,
            w_rec,
            bias,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden
    }

    /// Recurrent weight matrix, row-major `[from][to]`.
    pub fn recurrent_weights(&self) -> &[f64] {
        &self.w_rec
    }

    /// Final hidden state after consuming the transitions in order.
    pub fn embed(&self, transitions: &[Transition]) -> Result<Vec<f64>> {
        if transitions.is_empty() {
            return Err(Error::EmptyEpisode);
        }
        let mut h = vec![0.0; self.hidden];
        let mut pre = vec![0.0; self.hidden];
        let mut features = vec![0.0; FEATURE_DIM];
        for tr in transitions {
            pre.copy_from_slice(&self.bias);
            tr.obs.write_features(&mut features);
            for (i, &x) in features.iter().enumerate() {
                if x != 0.0 {
                    axpy(x, self.row(i), &mut pre);
                }
            }
            axpy(1.0, self.row(FEATURE_DIM + tr.action), &mut pre);
            if tr.reward != 0.0 {
                axpy(tr.reward, self.row(FEATURE_DIM + NUM_ACTIONS), &mut pre);
            }
            for (j, &hj) in h.iter().enumerate() {
                if hj != 0.0 {
                    axpy(hj, &self.w_rec[j * self.hidden..(j + 1) * self.hidden], &mut pre);
                }
            }
            for (hj, p) in h.iter_mut().zip(&pre) {
                *hj = p.tanh();
            }
        }
        Ok(h)
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.w_in[i * self.hidden..(i + 1) * self.hidden]
    }
}

/// Euclidean distance between two embeddings.
pub fn l2_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

/// Largest singular value by power iteration on `WᵀW`.
fn spectral_norm(w: &[f64], n: usize) -> f64 {
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut u = vec![0.0; n];
    let mut sigma = 0.0;
    for _ in 0..200 {
        // u = W v  (w is [row][col])
        for (r, ur) in u.iter_mut().enumerate() {
            *ur = dot(&w[r * n..(r + 1) * n], &v);
        }
        // v = Wᵀ u
        v.fill(0.0);
        for (r, &ur) in u.iter().enumerate() {
            axpy(ur, &w[r * n..(r + 1) * n], &mut v);
        }
        let norm = dot(&v, &v).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        for x in &mut v {
            *x /= norm;
        }
        sigma = norm.sqrt();
    }
    sigma
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envsuite::{generate_task_sized, GridEnv, TaskKind};

    pub(crate) fn rollout(kind: TaskKind, seed: u64, actions: &[usize]) -> Vec<Transition> {
        let mut env = GridEnv::new(generate_task_sized(kind, 9, seed).unwrap(), 100);
        let mut obs = env.reset();
        let mut out = Vec::new();
        for &a in actions {
            let step = env.step(a).unwrap();
            out.push(Transition {
                obs: obs.clone(),
                action: a,
                reward: step.reward,
                done: step.done,
                truncated: step.truncated,
                next_obs: step.obs.clone(),
            });
            obs = step.obs;
            if step.done {
                break;
            }
        }
        out
    }

    #[test]
    fn deterministic_per_seed() {
        let ep = rollout(TaskKind::OpenRoom, 1, &[2, 2, 0, 2, 1, 2]);
        let a = TrajectoryEmbedder::new(7, 32).embed(&ep).unwrap();
        let b = TrajectoryEmbedder::new(7, 32).embed(&ep).unwrap();
        assert_eq!(a, b);
        assert_eq!(l2_distance(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn recurrent_weights_are_rescaled() {
        let e = TrajectoryEmbedder::new(3, 32);
        let sigma = spectral_norm(e.recurrent_weights(), 32);
        assert!((sigma - SPECTRAL_RADIUS).abs() < 1e-6, "{sigma}");
    }

    #[test]
    fn flipping_one_action_moves_the_embedding() {
        let actions = [2, 0, 2, 2, 1, 2, 0, 2, 1, 2];
        let ep = rollout(TaskKind::OpenRoom, 2, &actions);
        assert_eq!(ep.len(), 10);
        let mut flipped = ep.clone();
        flipped[4].action = 0;
        let e = TrajectoryEmbedder::new(11, 32);
        let d = l2_distance(&e.embed(&ep).unwrap(), &e.embed(&flipped).unwrap()).unwrap();
        assert!(d > 0.0);
    }

    #[test]
    fn reversal_changes_the_embedding() {
        let ep = rollout(TaskKind::Crossing, 5, &[2, 2, 1, 2, 0, 0, 2]);
        let mut rev = ep.clone();
        rev.reverse();
        let e = TrajectoryEmbedder::new(1, 32);
        assert_ne!(e.embed(&ep).unwrap(), e.embed(&rev).unwrap());
    }

    #[test]
    fn embeddings_stay_bounded() {
        let actions: Vec<usize> = (0..100).map(|i| (i * 7 + 3) % 4).collect();
        let ep = rollout(TaskKind::KeyDoor, 4, &actions);
        let v = TrajectoryEmbedder::new(0, 32).embed(&ep).unwrap();
        assert!(v.iter().all(|x| x.is_finite() && x.abs() <= 1.0));
    }

    #[test]
    fn empty_episode_is_an_error() {
        assert!(matches!(TrajectoryEmbedder::new(0, 8).embed(&[]), Err(Error::EmptyEpisode)));
    }

    #[test]
    fn distance_examples() {
        assert_eq!(l2_distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        assert!(l2_distance(&[1.0], &[1.0, 2.0]).is_err());
    }
}
