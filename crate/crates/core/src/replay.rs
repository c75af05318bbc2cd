//! Episodic replay buffer with selective insertion and mini-batch sampling.
//!
//! Capacity is counted in transitions; whole episodes are the unit of storage
//! and eviction. Insertion strategies decide what stays in the buffer,
//! sampling strategies decide what the learners see.

use std::collections::VecDeque;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embed::{l2_distance, TrajectoryEmbedder};
use crate::envsuite::{Cell, Heading, Observation, TaskKind, Transition, VIEW};
use crate::error::{Error, Result};

pub const DEFAULT_MIN_STORE_LENGTH: usize = 50;
pub const DEFAULT_REWARD_EPSILON: f64 = 1e-3;
pub const DEFAULT_COVERAGE_REFERENCE: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InsertionStrategy {
    Fifo,
    Reservoir,
    CoverageMax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingStrategy {
    Uniform,
    Uncertainty,
    Reward,
    FiftyFifty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplayConfig {
    /// Maximum number of stored transitions.
    pub capacity: usize,
    #[serde(default = "default_min_store_length")]
    pub min_store_length: usize,
    #[serde(default = "default_insertion")]
    pub insertion: InsertionStrategy,
    #[serde(default = "default_sampling")]
    pub sampling: SamplingStrategy,
    #[serde(default = "default_reward_epsilon")]
    pub reward_epsilon: f64,
    #[serde(default = "default_coverage_reference")]
    pub coverage_reference: usize,
    #[serde(default)]
    pub embedder_seed: u64,
    #[serde(default = "default_embedder_hidden")]
    pub embedder_hidden: usize,
}

fn default_min_store_length() -> usize {
    DEFAULT_MIN_STORE_LENGTH
}
fn default_insertion() -> InsertionStrategy {
    InsertionStrategy::Fifo
}
fn default_sampling() -> SamplingStrategy {
    SamplingStrategy::Uniform
}
fn default_reward_epsilon() -> f64 {
    DEFAULT_REWARD_EPSILON
}
fn default_coverage_reference() -> usize {
    DEFAULT_COVERAGE_REFERENCE
}
fn default_embedder_hidden() -> usize {
    crate::embed::DEFAULT_HIDDEN
}

impl ReplayConfig {
    pub fn new(capacity: usize, insertion: InsertionStrategy, sampling: SamplingStrategy) -> Self {
        Self {
            capacity,
            min_store_length: DEFAULT_MIN_STORE_LENGTH,
            insertion,
            sampling,
            reward_epsilon: DEFAULT_REWARD_EPSILON,
            coverage_reference: DEFAULT_COVERAGE_REFERENCE,
            embedder_seed: 0,
            embedder_hidden: crate::embed::DEFAULT_HIDDEN,
        }
    }

    pub fn with_min_store_length(mut self, n: usize) -> Self {
        self.min_store_length = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.capacity == 0 {
            return Err(Error::Config("buffer capacity must be positive".into()));
        }
        if self.min_store_length == 0 {
            return Err(Error::Config("min_store_length must be positive".into()));
        }
        if self.min_store_length > self.capacity {
            return Err(Error::Config("min_store_length exceeds capacity".into()));
        }
        if !(self.reward_epsilon > 0.0) {
            return Err(Error::Config("reward_epsilon must be positive".into()));
        }
        if self.coverage_reference == 0 {
            return Err(Error::Config("coverage_reference must be positive".into()));
        }
        Ok(())
    }
}

/// A stored trajectory plus the metadata the strategies rank it by.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub transitions: Vec<Transition>,
    pub episode_return: f64,
    uncertainty_score: f64,
    /// Position in the stream of offered episodes; assigned by the buffer.
    pub insertion_index: u64,
    /// Global environment step at which the episode started.
    pub start_step: u64,
    pub coverage_priority: Option<f64>,
    embedding: Option<Vec<f64>>,
}

impl Episode {
    /// `uncertainty_score` is fixed here and can never change afterwards.
    pub fn new(transitions: Vec<Transition>, start_step: u64, uncertainty_score: f64) -> Self {
        let episode_return = transitions.iter().map(|t| t.reward).sum();
        Self {
            transitions,
            episode_return,
            uncertainty_score: uncertainty_score.max(0.0),
            insertion_index: 0,
            start_step,
            coverage_priority: None,
            embedding: None,
        }
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn uncertainty_score(&self) -> f64 {
        self.uncertainty_score
    }

    pub fn embedding(&self) -> Option<&[f64]> {
        self.embedding.as_deref()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OfferOutcome {
    Accepted,
    Rejected,
    /// Shorter than `min_store_length`; not counted in the stream.
    TooShort,
}

impl OfferOutcome {
    pub fn accepted(self) -> bool {
        self == OfferOutcome::Accepted
    }
}

/// A training window `[start, start + len)` inside a stored episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentRef {
    /// Position of the episode in the buffer at sampling time.
    pub episode: usize,
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    config: ReplayConfig,
    episodes: VecDeque<Episode>,
    stored_transitions: usize,
    stream_count: u64,
    embedder: Option<TrajectoryEmbedder>,
}

impl ReplayBuffer {
    pub fn new(config: ReplayConfig) -> Result<Self> {
        config.validate()?;
        let embedder = (config.insertion == InsertionStrategy::CoverageMax)
            .then(|| TrajectoryEmbedder::new(config.embedder_seed, config.embedder_hidden));
        Ok(Self {
            config,
            episodes: VecDeque::new(),
            stored_transitions: 0,
            stream_count: 0,
            embedder,
        })
    }

    pub fn config(&self) -> &ReplayConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn stored_transitions(&self) -> usize {
        self.stored_transitions
    }

    /// Number of eligible episodes offered so far, accepted or not.
    pub fn stream_count(&self) -> u64 {
        self.stream_count
    }

    pub fn episodes(&self) -> impl ExactSizeIterator<Item = &Episode> {
        self.episodes.iter()
    }

    pub fn episode(&self, i: usize) -> &Episode {
        &self.episodes[i]
    }

    pub fn segment(&self, seg: &SegmentRef) -> &[Transition] {
        &self.episodes[seg.episode].transitions[seg.start..seg.start + seg.len]
    }

    /// Reservoir size `n` in episodes: capacity over the mean stored length.
    pub fn capacity_in_episodes(&self) -> f64 {
        if self.episodes.is_empty() {
            return f64::INFINITY;
        }
        let mean = self.stored_transitions as f64 / self.episodes.len() as f64;
        self.config.capacity as f64 / mean
    }

    /// Hands an episode to the active insertion strategy.
    pub fn offer<R: Rng>(&mut self, mut episode: Episode, rng: &mut R) -> OfferOutcome {
        if episode.len() < self.config.min_store_length {
            return OfferOutcome::TooShort;
        }
        episode.insertion_index = self.stream_count;
        self.stream_count += 1;
        if episode.len() > self.config.capacity {
            return OfferOutcome::Rejected;
        }
        let accepted = match self.config.insertion {
            InsertionStrategy::Fifo => self.insert_fifo(episode),
            InsertionStrategy::Reservoir => self.insert_reservoir(episode, rng),
            InsertionStrategy::CoverageMax => self.insert_coverage(episode, rng),
        };
        debug_assert!(self.stored_transitions <= self.config.capacity);
        if accepted {
            OfferOutcome::Accepted
        } else {
            OfferOutcome::Rejected
        }
    }

    fn push(&mut self, episode: Episode) {
        self.stored_transitions += episode.len();
        self.episodes.push_back(episode);
    }

    fn remove(&mut self, i: usize) {
        if let Some(ep) = self.episodes.remove(i) {
            self.stored_transitions -= ep.len();
        }
    }

    fn free(&self) -> usize {
        self.config.capacity - self.stored_transitions
    }

    fn insert_fifo(&mut self, episode: Episode) -> bool {
        while self.free() < episode.len() {
            self.remove(0);
        }
        self.push(episode);
        true
    }

    /// Accept with probability `min(n / t, 1)`; on acceptance evict uniformly
    /// random stored episodes until the newcomer fits.
    fn insert_reservoir<R: Rng>(&mut self, episode: Episode, rng: &mut R) -> bool {
        let n = self.capacity_in_episodes();
        let t = self.stream_count as f64;
        let p = (n / t).min(1.0);
        if p < 1.0 && !rng.gen_bool(p) {
            return false;
        }
        while self.free() < episode.len() {
            let victim = rng.gen_range(0..self.episodes.len());
            self.remove(victim);
        }
        self.push(episode);
        true
    }

    /// Median embedding distance to a random reference set is the priority;
    /// lowest-priority episodes are evicted first, and a newcomer that would be
    /// the lowest itself is turned away.
    fn insert_coverage<R: Rng>(&mut self, mut episode: Episode, rng: &mut R) -> bool {
        let embedder = self.embedder.as_ref().expect("coverage buffer owns an embedder");
        let emb = embedder.embed(&episode.transitions).expect("episode is nonempty");
        if !self.episodes.is_empty() {
            let k = self.config.coverage_reference.min(self.episodes.len());
            let mut dists: Vec<f64> = index::sample(rng, self.episodes.len(), k)
                .into_iter()
                .map(|i| {
                    let other = self.episodes[i].embedding.as_deref().expect("stored embedding");
                    l2_distance(&emb, other).expect("same embedder")
                })
                .collect();
            episode.coverage_priority = Some(median(&mut dists));
        }
        episode.embedding = Some(emb);
        if self.free() < episode.len() {
            let own = episode.coverage_priority.unwrap_or(0.0);
            let mut order: Vec<usize> = (0..self.episodes.len()).collect();
            order.sort_by(|&a, &b| {
                let pa = self.episodes[a].coverage_priority.unwrap_or(0.0);
                let pb = self.episodes[b].coverage_priority.unwrap_or(0.0);
                pa.total_cmp(&pb).then(a.cmp(&b))
            });
            let mut freed = self.free();
            let mut victims = Vec::new();
            for i in order {
                if freed >= episode.len() {
                    break;
                }
                if self.episodes[i].coverage_priority.unwrap_or(0.0) >= own {
                    return false;
                }
                freed += self.episodes[i].len();
                victims.push(i);
            }
            if freed < episode.len() {
                return false;
            }
            victims.sort_unstable_by(|a, b| b.cmp(a));
            for i in victims {
                self.remove(i);
            }
        }
        self.push(episode);
        true
    }

    /// Per-episode selection weights of the active strategy (unnormalised),
    /// or `None` when they degenerate and uniform sampling is used instead.
    fn strategy_weights(&self) -> Option<Vec<f64>> {
        let weights: Vec<f64> = match self.config.sampling {
            SamplingStrategy::Uniform | SamplingStrategy::FiftyFifty => return None,
            SamplingStrategy::Uncertainty => self.episodes.iter().map(|e| e.uncertainty_score).collect(),
            SamplingStrategy::Reward => {
                let min = self
                    .episodes
                    .iter()
                    .map(|e| e.episode_return)
                    .fold(f64::INFINITY, f64::min);
                self.episodes
                    .iter()
                    .map(|e| e.episode_return - min + self.config.reward_epsilon)
                    .collect()
            }
        };
        let total: f64 = weights.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            log::warn!(
                "{:?} sampling weights are degenerate (sum {total}); falling back to uniform",
                self.config.sampling
            );
            return None;
        }
        Some(weights)
    }

    /// Exact probability that a single draw picks each stored episode.
    pub fn selection_probabilities(&self) -> Vec<f64> {
        let m = self.episodes.len();
        if m == 0 {
            return Vec::new();
        }
        let uniform = 1.0 / m as f64;
        match self.config.sampling {
            SamplingStrategy::FiftyFifty => {
                let ranks = (m * (m + 1) / 2) as f64;
                (1..=m).map(|r| 0.5 * uniform + 0.5 * r as f64 / ranks).collect()
            }
            _ => match self.strategy_weights() {
                Some(w) => {
                    let total: f64 = w.iter().sum();
                    w.into_iter().map(|x| x / total).collect()
                }
                None => vec![uniform; m],
            },
        }
    }

    /// Draws `count` training segments of length `min_store_length`, choosing
    /// episodes by the active strategy and offsets uniformly.
    pub fn sample_minibatch<R: Rng>(&self, count: usize, rng: &mut R) -> Result<Vec<SegmentRef>> {
        if self.episodes.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        let m = self.episodes.len();
        let weighted = self.strategy_weights().map(|w| WeightedIndex::new(w).expect("positive weights"));
        // ranks 1..=m in insertion order; the buffer keeps episodes sorted by arrival
        let triangular = (self.config.sampling == SamplingStrategy::FiftyFifty)
            .then(|| WeightedIndex::new(1..=m).expect("positive ranks"));
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let episode = match (&weighted, &triangular) {
                (Some(dist), _) => dist.sample(rng),
                (None, Some(tri)) => {
                    if rng.gen_bool(0.5) {
                        rng.gen_range(0..m)
                    } else {
                        tri.sample(rng)
                    }
                }
                (None, None) => rng.gen_range(0..m),
            };
            let ep_len = self.episodes[episode].len();
            let len = self.config.min_store_length.min(ep_len);
            let start = rng.gen_range(0..=ep_len - len);
            out.push(SegmentRef { episode, start, len });
        }
        Ok(out)
    }

    /// Share of stored episodes per task phase. `boundaries` are the global
    /// steps at which each new task began (one fewer than the task count).
    pub fn composition_snapshot(&self, boundaries: &[u64]) -> Vec<f64> {
        let counts = self.composition_counts(boundaries);
        let total: usize = counts.iter().sum();
        if total == 0 {
            return vec![0.0; counts.len()];
        }
        counts.into_iter().map(|c| c as f64 / total as f64).collect()
    }

    pub fn composition_counts(&self, boundaries: &[u64]) -> Vec<usize> {
        let mut counts = vec![0usize; boundaries.len() + 1];
        for ep in &self.episodes {
            counts[task_of(ep.start_step, boundaries)] += 1;
        }
        counts
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let index = BufferIndex {
            version: FORMAT_VERSION,
            config: self.config.clone(),
            stream_count: self.stream_count,
            episodes: self
                .episodes
                .iter()
                .map(|e| EpisodeMeta {
                    len: e.len(),
                    episode_return: e.episode_return,
                    uncertainty_score: e.uncertainty_score,
                    insertion_index: e.insertion_index,
                    start_step: e.start_step,
                    coverage_priority: e.coverage_priority,
                    embedding: e.embedding.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&index)?;
        let mut bytes = Vec::with_capacity(MAGIC.len() + 8 + json.len() + self.stored_transitions * RECORD_LEN);
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&json);
        for ep in &self.episodes {
            for tr in &ep.transitions {
                pack_transition(tr, &mut bytes);
            }
        }
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::format(path, "missing replay header"));
        }
        let mut at = MAGIC.len();
        let json_len = u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes")) as usize;
        at += 8;
        if bytes.len() < at + json_len {
            return Err(Error::format(path, "truncated index"));
        }
        let index: BufferIndex = serde_json::from_slice(&bytes[at..at + json_len])?;
        at += json_len;
        if index.version != FORMAT_VERSION {
            return Err(Error::format(path, format!("unsupported version {}", index.version)));
        }
        let mut buffer = ReplayBuffer::new(index.config)?;
        buffer.stream_count = index.stream_count;
        for meta in index.episodes {
            let mut transitions = Vec::with_capacity(meta.len);
            for _ in 0..meta.len {
                let rec = bytes
                    .get(at..at + RECORD_LEN)
                    .ok_or_else(|| Error::format(path, "truncated transitions"))?;
                transitions.push(unpack_transition(rec).ok_or_else(|| Error::format(path, "bad transition record"))?);
                at += RECORD_LEN;
            }
            let mut ep = Episode::new(transitions, meta.start_step, meta.uncertainty_score);
            ep.episode_return = meta.episode_return;
            ep.insertion_index = meta.insertion_index;
            ep.coverage_priority = meta.coverage_priority;
            ep.embedding = meta.embedding;
            buffer.push(ep);
        }
        if at != bytes.len() {
            return Err(Error::format(path, "trailing bytes"));
        }
        Ok(buffer)
    }
}

pub fn task_of(step: u64, boundaries: &[u64]) -> usize {
    boundaries.iter().filter(|&&b| step >= b).count()
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

const MAGIC: &[u8] = b"CRLREPLAY\0";
const FORMAT_VERSION: u32 = 1;
const OBS_LEN: usize = 3 + VIEW * VIEW;
const RECORD_LEN: usize = 2 * OBS_LEN + 1 + 8 + 1;

#[derive(Serialize, Deserialize)]
struct BufferIndex {
    version: u32,
    config: ReplayConfig,
    stream_count: u64,
    episodes: Vec<EpisodeMeta>,
}

#[derive(Serialize, Deserialize)]
struct EpisodeMeta {
    len: usize,
    episode_return: f64,
    uncertainty_score: f64,
    insertion_index: u64,
    start_step: u64,
    coverage_priority: Option<f64>,
    embedding: Option<Vec<f64>>,
}

fn pack_obs(obs: &Observation, out: &mut Vec<u8>) {
    out.push(obs.kind.index() as u8);
    out.push(obs.heading.index() as u8);
    out.push(obs.carrying as u8);
    out.extend(obs.window.iter().map(|c| c.code()));
}

fn unpack_obs(rec: &[u8]) -> Option<Observation> {
    let kind = *TaskKind::ALL.get(rec[0] as usize)?;
    let heading = *Heading::ALL.get(rec[1] as usize)?;
    let mut window = [Cell::Floor; VIEW * VIEW];
    for (w, &c) in window.iter_mut().zip(&rec[3..OBS_LEN]) {
        *w = Cell::from_code(c)?;
    }
    Some(Observation {
        kind,
        window,
        heading,
        carrying: rec[2] != 0,
    })
}

fn pack_transition(tr: &Transition, out: &mut Vec<u8>) {
    pack_obs(&tr.obs, out);
    out.push(tr.action as u8);
    out.extend_from_slice(&tr.reward.to_le_bytes());
    out.push(tr.done as u8 | (tr.truncated as u8) << 1);
    pack_obs(&tr.next_obs, out);
}

fn unpack_transition(rec: &[u8]) -> Option<Transition> {
    let obs = unpack_obs(&rec[..OBS_LEN])?;
    let action = rec[OBS_LEN] as usize;
    let reward = f64::from_le_bytes(rec[OBS_LEN + 1..OBS_LEN + 9].try_into().ok()?);
    let flags = rec[OBS_LEN + 9];
    let next_obs = unpack_obs(&rec[OBS_LEN + 10..])?;
    Some(Transition {
        obs,
        action,
        reward,
        done: flags & 1 != 0,
        truncated: flags & 2 != 0,
        next_obs,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::envsuite::{generate_task_sized, GridEnv};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn dummy_obs(kind: TaskKind) -> Observation {
        Observation {
            kind,
            window: [Cell::Floor; VIEW * VIEW],
            heading: Heading::North,
            carrying: false,
        }
    }

    /// Episode of `len` identical no-op transitions.
    pub(crate) fn unit_episode(len: usize, reward: f64, start_step: u64) -> Episode {
        let tr = Transition {
            obs: dummy_obs(TaskKind::OpenRoom),
            action: 0,
            reward,
            done: false,
            truncated: false,
            next_obs: dummy_obs(TaskKind::OpenRoom),
        };
        Episode::new(vec![tr; len], start_step, 0.0)
    }

    pub(crate) fn env_episode(kind: TaskKind, seed: u64, len: usize, start_step: u64) -> Episode {
        let mut env = GridEnv::new(generate_task_sized(kind, 9, seed).unwrap(), 10_000);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut obs = env.reset();
        let mut out = Vec::new();
        while out.len() < len {
            // avoid ending the episode: never step forward into goal or hazard
            let mut a = rng.gen_range(0..4);
            if a == 2 {
                let ahead = obs.window[(VIEW - 2) * VIEW + VIEW / 2];
                if matches!(ahead, Cell::Goal | Cell::Hazard) {
                    a = 0;
                }
            }
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
        }
        Episode::new(out, start_step, 0.0)
    }

    fn buffer(capacity: usize, insertion: InsertionStrategy, sampling: SamplingStrategy) -> ReplayBuffer {
        ReplayBuffer::new(ReplayConfig::new(capacity, insertion, sampling).with_min_store_length(1)).unwrap()
    }

    #[test]
    fn empty_buffer_accepts_anything() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for ins in [InsertionStrategy::Fifo, InsertionStrategy::Reservoir, InsertionStrategy::CoverageMax] {
            let mut b = buffer(100, ins, SamplingStrategy::Uniform);
            assert!(b.offer(env_episode(TaskKind::OpenRoom, 1, 10, 0), &mut rng).accepted());
        }
    }

    #[test]
    fn too_short_is_distinct_and_not_counted() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = ReplayBuffer::new(ReplayConfig::new(1000, InsertionStrategy::Fifo, SamplingStrategy::Uniform)).unwrap();
        assert_eq!(b.offer(unit_episode(49, 0.0, 0), &mut rng), OfferOutcome::TooShort);
        assert_eq!(b.stream_count(), 0);
        assert!(b.offer(unit_episode(50, 0.0, 0), &mut rng).accepted());
        assert_eq!(b.stream_count(), 1);
    }

    #[test]
    fn fifo_evicts_oldest_until_it_fits() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = buffer(10, InsertionStrategy::Fifo, SamplingStrategy::Uniform);
        for i in 0..5 {
            b.offer(unit_episode(2, 0.0, i), &mut rng);
        }
        assert_eq!(b.stored_transitions(), 10);
        assert!(b.offer(unit_episode(5, 0.0, 99), &mut rng).accepted());
        let starts: Vec<u64> = b.episodes().map(|e| e.start_step).collect();
        assert_eq!(starts, vec![3, 4, 99]);
        assert!(b.stored_transitions() <= 10);
    }

    #[test]
    fn oversized_episode_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = buffer(10, InsertionStrategy::Fifo, SamplingStrategy::Uniform);
        assert_eq!(b.offer(unit_episode(11, 0.0, 0), &mut rng), OfferOutcome::Rejected);
        assert_eq!(b.stream_count(), 1);
    }

    #[test]
    fn reservoir_accepts_everything_until_full() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b = buffer(100, InsertionStrategy::Reservoir, SamplingStrategy::Uniform);
        for i in 0..100 {
            assert!(b.offer(unit_episode(1, 0.0, i), &mut rng).accepted());
        }
        assert_eq!(b.capacity_in_episodes(), 100.0);
    }

    #[test]
    fn reservoir_acceptance_rate_at_twice_capacity() {
        // n = 100 episodes, t = 200 -> min(n/t, 1) = 0.5
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut template = buffer(100, InsertionStrategy::Reservoir, SamplingStrategy::Uniform);
        for i in 0..199 {
            template.offer(unit_episode(1, 0.0, i), &mut rng);
        }
        assert_eq!(template.stream_count(), 199);
        let trials = 10_000;
        let mut accepted = 0;
        for _ in 0..trials {
            let mut b = template.clone();
            if b.offer(unit_episode(1, 0.0, 500), &mut rng).accepted() {
                accepted += 1;
            }
        }
        let rate = accepted as f64 / trials as f64;
        assert!((rate - 0.5).abs() < 0.03, "{rate}");
    }

    #[test]
    fn coverage_rejects_duplicate_when_full() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ep = env_episode(TaskKind::OpenRoom, 4, 10, 0);
        let mut b = buffer(10, InsertionStrategy::CoverageMax, SamplingStrategy::Uniform);
        assert!(b.offer(ep.clone(), &mut rng).accepted());
        assert_eq!(b.offer(ep, &mut rng), OfferOutcome::Rejected);
        assert_eq!(b.len(), 1);
    }

    #[test]
    fn coverage_duplicate_gets_zero_priority() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ep = env_episode(TaskKind::OpenRoom, 4, 10, 0);
        let mut b = buffer(100, InsertionStrategy::CoverageMax, SamplingStrategy::Uniform);
        b.offer(ep.clone(), &mut rng);
        b.offer(ep, &mut rng);
        assert_eq!(b.episode(1).coverage_priority, Some(0.0));
    }

    #[test]
    fn single_episode_is_always_sampled() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for s in [
            SamplingStrategy::Uniform,
            SamplingStrategy::Uncertainty,
            SamplingStrategy::Reward,
            SamplingStrategy::FiftyFifty,
        ] {
            let mut b = buffer(100, InsertionStrategy::Fifo, s);
            b.offer(unit_episode(7, 1.0, 0), &mut rng);
            let segs = b.sample_minibatch(50, &mut rng).unwrap();
            assert!(segs.iter().all(|s| s.episode == 0 && s.len == 1 && s.start < 7));
        }
    }

    #[test]
    fn empty_buffer_sampling_errors() {
        let b = buffer(10, InsertionStrategy::Fifo, SamplingStrategy::Uniform);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(b.sample_minibatch(1, &mut rng), Err(Error::EmptyBuffer)));
    }

    #[test]
    fn zero_uncertainty_falls_back_to_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = buffer(100, InsertionStrategy::Fifo, SamplingStrategy::Uncertainty);
        for i in 0..4 {
            b.offer(unit_episode(3, 0.0, i), &mut rng);
        }
        assert_eq!(b.selection_probabilities(), vec![0.25; 4]);
        assert_eq!(b.sample_minibatch(10, &mut rng).unwrap().len(), 10);
    }

    #[test]
    fn reward_weights_are_shifted_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = buffer(100, InsertionStrategy::Fifo, SamplingStrategy::Reward);
        b.offer(unit_episode(1, -1.0, 0), &mut rng);
        b.offer(unit_episode(1, 1.0, 1), &mut rng);
        let p = b.selection_probabilities();
        let eps = DEFAULT_REWARD_EPSILON;
        assert!((p[0] - eps / (2.0 + 2.0 * eps)).abs() < 1e-15);
        assert!((p[1] - (2.0 + eps) / (2.0 + 2.0 * eps)).abs() < 1e-15);
    }

    #[test]
    fn fifty_fifty_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = buffer(100, InsertionStrategy::Fifo, SamplingStrategy::FiftyFifty);
        for i in 0..4 {
            b.offer(unit_episode(1, 0.0, i), &mut rng);
        }
        let p = b.selection_probabilities();
        for (i, pi) in p.iter().enumerate() {
            let expected = 0.5 * 0.25 + 0.5 * (i + 1) as f64 / 10.0;
            assert!((pi - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn composition_attributes_by_start_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = buffer(100, InsertionStrategy::Fifo, SamplingStrategy::Uniform);
        for s in [0, 10, 20, 60, 70, 150] {
            b.offer(unit_episode(1, 0.0, s), &mut rng);
        }
        assert_eq!(b.composition_counts(&[50, 100]), vec![3, 2, 1]);
        let p = b.composition_snapshot(&[50, 100]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(buffer(10, InsertionStrategy::Fifo, SamplingStrategy::Uniform).composition_snapshot(&[5]), vec![0.0, 0.0]);
    }

    #[test]
    fn save_load_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut b = buffer(200, InsertionStrategy::CoverageMax, SamplingStrategy::Uncertainty);
        for i in 0..5 {
            let mut ep = env_episode(TaskKind::KeyDoor, i, 12, i * 100);
            ep.uncertainty_score = i as f64;
            b.offer(ep, &mut rng);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("buf.bin");
        b.save(&path).unwrap();
        let c = ReplayBuffer::load(&path).unwrap();
        assert_eq!(c.len(), b.len());
        assert_eq!(c.stream_count(), b.stream_count());
        assert_eq!(c.stored_transitions(), b.stored_transitions());
        for (x, y) in b.episodes().zip(c.episodes()) {
            assert_eq!(x, y);
        }
        fs::write(&path, b"garbage").unwrap();
        assert!(matches!(ReplayBuffer::load(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn config_validation() {
        assert!(ReplayBuffer::new(ReplayConfig::new(0, InsertionStrategy::Fifo, SamplingStrategy::Uniform)).is_err());
        assert!(ReplayBuffer::new(ReplayConfig::new(10, InsertionStrategy::Fifo, SamplingStrategy::Uniform)).is_err());
    }
}
