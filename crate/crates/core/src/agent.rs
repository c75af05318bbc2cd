//! Actor-critic trained on imagined rollouts, the L2-anchored baseline, and a
//! model-free learner that trains directly on replayed segments.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envsuite::{FEATURE_DIM, NUM_ACTIONS};
use crate::error::{Error, Result};
use crate::nn::{param_hash, softmax, Adam, Mlp, MlpTrace};
use crate::replay::ReplayBuffer;
use crate::worldmodel::{add_anchor_grad, validate_alphas, Dynamics, EnsembleWorldModel};

/// Anchor scales accepted by sweeps.
pub const LAMBDA_GRID: [f64; 7] = [1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_lr")]
    pub actor_lr: f64,
    #[serde(default = "default_lr")]
    pub critic_lr: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_entropy")]
    pub entropy: f64,
    #[serde(default = "default_alpha")]
    pub alpha_i: f64,
    #[serde(default = "default_alpha")]
    pub alpha_e: f64,
    /// Replay segments whose first state seeds a rollout (or, model-free,
    /// segments per update).
    #[serde(default = "default_starts")]
    pub batch_segments: usize,
    /// Evaluate with the most likely action instead of sampling.
    #[serde(default)]
    pub greedy_eval: bool,
    /// Polyak rate of the bootstrap critic; 1 tracks the online critic.
    #[serde(default = "default_target_rate")]
    pub target_rate: f64,
    /// Standardize the intrinsic reward with running statistics.
    #[serde(default)]
    pub normalize_intrinsic: bool,
}

fn default_hidden() -> usize {
    32
}
fn default_lr() -> f64 {
    1e-3
}
fn default_gamma() -> f64 {
    0.99
}
fn default_entropy() -> f64 {
    3e-3
}
fn default_alpha() -> f64 {
    0.9
}
fn default_target_rate() -> f64 {
    0.01
}
fn default_starts() -> usize {
    8
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            hidden: default_hidden(),
            actor_lr: default_lr(),
            critic_lr: default_lr(),
            gamma: default_gamma(),
            entropy: default_entropy(),
            alpha_i: default_alpha(),
            alpha_e: default_alpha(),
            batch_segments: default_starts(),
            greedy_eval: false,
            target_rate: default_target_rate(),
            normalize_intrinsic: false,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        validate_alphas(self.alpha_i, self.alpha_e)?;
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma = {} is outside [0, 1]", self.gamma)));
        }
        if self.hidden == 0 || self.batch_segments == 0 {
            return Err(Error::Config("agent hidden and batch_segments must be positive".into()));
        }
        for (name, v) in [("actor_lr", self.actor_lr), ("critic_lr", self.critic_lr), ("entropy", self.entropy)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and nonnegative")));
            }
        }
        if !(self.target_rate > 0.0 && self.target_rate <= 1.0) {
            return Err(Error::Config(format!("target_rate = {} is outside (0, 1]", self.target_rate)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActMode {
    Explore,
    Eval,
}

/// Exponential moving mean and variance of the intrinsic reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RunningStats {
    mean: f64,
    var: f64,
    seen: bool,
}

impl RunningStats {
    const DECAY: f64 = 0.99;

    fn new() -> Self {
        Self { mean: 0.0, var: 1.0, seen: false }
    }

    fn update(&mut self, values: &[f64]) {
        if values.is_empty() {
            return;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        if self.seen {
            let d = Self::DECAY;
            let delta = mean - self.mean;
            self.mean += (1.0 - d) * delta;
            self.var = d * self.var + (1.0 - d) * var + d * (1.0 - d) * delta * delta;
        } else {
            self.mean = mean;
            self.var = var;
            self.seen = true;
        }
    }

    fn normalize(&self, v: f64) -> f64 {
        (v - self.mean) / (self.var.sqrt() + 1e-8)
    }
}

/// One policy-gradient term: `-A log π(a|s) - η H(π(·|s))`.
#[derive(Debug, Clone, PartialEq)]
pub struct PgSample {
    pub feature: Vec<f64>,
    pub action: usize,
    pub advantage: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AcLoss {
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub mean_return: f64,
    pub steps: usize,
    pub nonfinite_rollouts: usize,
}

/// Per-sample policy-gradient term on an already forwarded trace; the
/// gradient of `(-A log π(a|s) - η H) / n` goes into `grad`. Returns `(loss, H)`.
#[allow(clippy::too_many_arguments)]
fn pg_term(
    net: &Mlp,
    feature: &[f64],
    trace: &MlpTrace,
    action: usize,
    advantage: f64,
    entropy_coef: f64,
    n: f64,
    grad: Option<(&mut [f64], &mut Vec<f64>)>,
) -> (f64, f64) {
    let p = softmax(&trace.output);
    let logp: Vec<f64> = p.iter().map(|x| x.max(1e-300).ln()).collect();
    let h: f64 = -p.iter().zip(&logp).map(|(a, b)| a * b).sum::<f64>();
    if let Some((g, scratch)) = grad {
        let d_out: Vec<f64> = (0..p.len())
            .map(|j| {
                let onehot = if j == action { 1.0 } else { 0.0 };
                (-advantage * (onehot - p[j]) + entropy_coef * p[j] * (logp[j] + h)) / n
            })
            .collect();
        net.backward(feature, trace, &d_out, g, scratch);
    }
    ((-advantage * logp[action] - entropy_coef * h) / n, h)
}

/// Per-sample `0.5 (V(s) - target)² / n` on an already forwarded trace.
fn value_term(net: &Mlp, feature: &[f64], trace: &MlpTrace, target: f64, n: f64, grad: Option<(&mut [f64], &mut Vec<f64>)>) -> f64 {
    let e = trace.output[0] - target;
    if let Some((g, scratch)) = grad {
        net.backward(feature, trace, &[e / n], g, scratch);
    }
    0.5 * e * e / n
}

/// Batch-mean policy surrogate `mean[-A log π(a|s) - η H(π(·|s))]`;
/// accumulates its gradient when `grad` is given. Returns `(loss, mean entropy)`.
pub fn policy_surrogate(net: &Mlp, samples: &[PgSample], entropy_coef: f64, mut grad: Option<&mut [f64]>) -> (f64, f64) {
    let n = samples.len().max(1) as f64;
    let mut trace = MlpTrace::new(net);
    let mut scratch = Vec::new();
    let mut loss = 0.0;
    let mut entropy_sum = 0.0;
    for s in samples {
        net.forward(&s.feature, &mut trace);
        let g = grad.as_deref_mut().map(|g| (g, &mut scratch));
        let (l, h) = pg_term(net, &s.feature, &trace, s.action, s.advantage, entropy_coef, n, g);
        loss += l;
        entropy_sum += h;
    }
    (loss, entropy_sum / n)
}

/// Batch-mean `0.5 (V(s) - target)²`.
pub fn value_loss(net: &Mlp, samples: &[(Vec<f64>, f64)], mut grad: Option<&mut [f64]>) -> f64 {
    let n = samples.len().max(1) as f64;
    let mut trace = MlpTrace::new(net);
    let mut scratch = Vec::new();
    let mut loss = 0.0;
    for (x, target) in samples {
        net.forward(x, &mut trace);
        loss += value_term(net, x, &trace, *target, n, grad.as_deref_mut().map(|g| (g, &mut scratch)));
    }
    loss
}

/// A visited state with its forward passes kept for the gradient step.
struct CachedStep {
    feature: Vec<f64>,
    action: usize,
    policy: MlpTrace,
    value: MlpTrace,
    target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActorCritic {
    config: AgentConfig,
    feature_dim: usize,
    policy: Mlp,
    value: Mlp,
    /// Slow copy of `value` used for bootstrapping.
    target: Mlp,
    policy_opt: Adam,
    value_opt: Adam,
    stats: RunningStats,
}

impl ActorCritic {
    pub fn new(config: AgentConfig, seed: u64) -> Result<Self> {
        Self::with_dims(config, FEATURE_DIM, NUM_ACTIONS, seed)
    }

    pub fn with_dims(config: AgentConfig, feature_dim: usize, num_actions: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // small last layer: the initial policy is close to uniform
        let policy = Mlp::new(feature_dim, config.hidden, num_actions, 0.01, &mut rng);
        let value = Mlp::new(feature_dim, config.hidden, 1, 0.1, &mut rng);
        Ok(Self {
            policy_opt: Adam::new(policy.len(), config.actor_lr),
            value_opt: Adam::new(value.len(), config.critic_lr),
            target: value.clone(),
            config,
            feature_dim,
            policy,
            value,
            stats: RunningStats::new(),
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn policy_net(&self) -> &Mlp {
        &self.policy
    }

    pub fn policy_net_mut(&mut self) -> &mut Mlp {
        &mut self.policy
    }

    pub fn value_net(&self) -> &Mlp {
        &self.value
    }

    pub fn num_actions(&self) -> usize {
        self.policy.output_dim()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = self.policy.params().to_vec();
        out.extend_from_slice(self.value.params());
        out
    }

    pub fn param_hash(&self) -> String {
        param_hash([self.policy.params(), self.value.params()])
    }

    pub fn probs(&self, feature: &[f64]) -> Vec<f64> {
        softmax(&self.policy.predict(feature))
    }

    fn bootstrap_value(&self, feature: &[f64]) -> f64 {
        self.target.predict(feature)[0]
    }

    pub fn state_value(&self, feature: &[f64]) -> f64 {
        self.value.predict(feature)[0]
    }

    pub fn entropy(&self, feature: &[f64]) -> f64 {
        -self.probs(feature).iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>()
    }

    /// Samples from the policy; in eval mode with `greedy_eval` takes the argmax.
    pub fn act<R: Rng>(&self, feature: &[f64], mode: ActMode, rng: &mut R) -> usize {
        let p = self.probs(feature);
        if mode == ActMode::Eval && self.config.greedy_eval {
            return argmax(&p);
        }
        sample_categorical(&p, rng)
    }

    /// Policy learning inside the model: `updates` batches of rollouts that
    /// start from replayed states. The model is only read.
    pub fn train_in_imagination<D: Dynamics, R: Rng>(
        &mut self,
        model: &D,
        buffer: &ReplayBuffer,
        updates: usize,
        rng: &mut R,
        anchor: Option<&L2Anchor>,
    ) -> Result<AcLoss> {
        if buffer.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        let mut total = AcLoss::default();
        for _ in 0..updates {
            let segs = buffer.sample_minibatch(self.config.batch_segments, rng)?;
            let starts: Vec<Vec<f64>> = segs.iter().map(|s| buffer.segment(s)[0].obs.features()).collect();
            let loss = self.update_from_starts(model, &starts, rng, anchor)?;
            accumulate(&mut total, &loss, updates);
        }
        Ok(total)
    }

    fn forward_both(&self, feature: &[f64]) -> (MlpTrace, MlpTrace) {
        let mut p = MlpTrace::new(&self.policy);
        let mut v = MlpTrace::new(&self.value);
        self.policy.forward(feature, &mut p);
        self.value.forward(feature, &mut v);
        (p, v)
    }

    /// One gradient step on rollouts imagined from the given start features.
    pub fn update_from_starts<D: Dynamics, R: Rng>(
        &mut self,
        model: &D,
        starts: &[Vec<f64>],
        rng: &mut R,
        anchor: Option<&L2Anchor>,
    ) -> Result<AcLoss> {
        if model.feature_dim() != self.feature_dim {
            return Err(Error::DimensionMismatch {
                expected: self.feature_dim,
                actual: model.feature_dim(),
            });
        }
        let horizon = model.horizon();
        let mut nonfinite = 0;
        let mut returns_sum = 0.0;
        let mut rollouts = Vec::with_capacity(starts.len());
        let mut intrinsic_seen = Vec::new();
        for start in starts {
            let mut feature = start.clone();
            let mut steps: Vec<(CachedStep, f64, f64, f64)> = Vec::with_capacity(horizon);
            let mut bootstrap = 0.0;
            for t in 0..horizon {
                let (pt, vt) = self.forward_both(&feature);
                let action = sample_categorical(&softmax(&pt.output), rng);
                let Some(step) = model.dream(&feature, action, rng) else {
                    nonfinite += 1;
                    break;
                };
                intrinsic_seen.push(step.intrinsic);
                let terminal = step.done_prob > 0.5;
                let cached = CachedStep {
                    feature: std::mem::replace(&mut feature, step.next),
                    action,
                    policy: pt,
                    value: vt,
                    target: 0.0,
                };
                steps.push((cached, step.reward, step.intrinsic, if terminal { 1.0 } else { step.done_prob }));
                if terminal {
                    break;
                }
                if t + 1 == horizon {
                    bootstrap = self.bootstrap_value(&feature);
                }
            }
            rollouts.push((steps, bootstrap));
        }
        let normalize = self.config.normalize_intrinsic && self.config.alpha_i != 0.0;
        if normalize {
            self.stats.update(&intrinsic_seen);
        }
        let mut batch = Vec::new();
        for (steps, bootstrap) in rollouts {
            let mut g = bootstrap;
            let first = batch.len();
            for (mut s, r_e, r_i, done) in steps.into_iter().rev() {
                let r_i = if normalize { self.stats.normalize(r_i) } else { r_i };
                // below the stop threshold the predicted termination still discounts
                g = self.config.alpha_i * r_i + self.config.alpha_e * r_e + self.config.gamma * (1.0 - done) * g;
                s.target = g;
                batch.push(s);
            }
            if batch.len() > first {
                returns_sum += g;
            }
        }
        let mut loss = self.apply_gradients(&batch, anchor)?;
        loss.mean_return = returns_sum / starts.len().max(1) as f64;
        loss.nonfinite_rollouts = nonfinite;
        Ok(loss)
    }

    /// Actor-critic step on real replayed segments with extrinsic rewards and
    /// n-step returns; no importance weighting. `None` when the buffer is empty.
    pub fn model_free_update<R: Rng>(
        &mut self,
        buffer: &ReplayBuffer,
        rng: &mut R,
        anchor: Option<&L2Anchor>,
    ) -> Result<Option<AcLoss>> {
        if buffer.is_empty() {
            return Ok(None);
        }
        let segs = buffer.sample_minibatch(self.config.batch_segments, rng)?;
        let mut batch = Vec::new();
        let mut returns_sum = 0.0;
        for seg in &segs {
            let tr = buffer.segment(seg);
            let last = tr.last().expect("segments are nonempty");
            let mut g = if last.terminal() {
                0.0
            } else {
                self.bootstrap_value(&last.next_obs.features())
            };
            for t in tr.iter().rev() {
                if t.terminal() {
                    g = 0.0;
                } else if t.truncated {
                    g = self.bootstrap_value(&t.next_obs.features());
                }
                g = t.reward + self.config.gamma * g;
                let feature = t.obs.features();
                let (policy, value) = self.forward_both(&feature);
                batch.push(CachedStep {
                    feature,
                    action: t.action,
                    policy,
                    value,
                    target: g,
                });
            }
            returns_sum += g;
        }
        let mut loss = self.apply_gradients(&batch, anchor)?;
        loss.mean_return = returns_sum / segs.len() as f64;
        Ok(Some(loss))
    }

    fn apply_gradients(&mut self, batch: &[CachedStep], anchor: Option<&L2Anchor>) -> Result<AcLoss> {
        let mut g_pi = vec![0.0; self.policy.len()];
        let mut g_v = vec![0.0; self.value.len()];
        let mut scratch = Vec::new();
        let n = batch.len().max(1) as f64;
        let (mut policy, mut value, mut entropy) = (0.0, 0.0, 0.0);
        for s in batch {
            let advantage = s.target - s.value.output[0];
            let (l, h) = pg_term(
                &self.policy,
                &s.feature,
                &s.policy,
                s.action,
                advantage,
                self.config.entropy,
                n,
                Some((&mut g_pi, &mut scratch)),
            );
            policy += l;
            entropy += h / n;
            value += value_term(&self.value, &s.feature, &s.value, s.target, n, Some((&mut g_v, &mut scratch)));
        }
        if !(policy.is_finite() && value.is_finite()) {
            return Err(Error::NonFinite("actor-critic loss".into()));
        }
        if let Some(a) = anchor {
            let ac = a.ac_params();
            let np = self.policy.len();
            if ac.len() != np + self.value.len() {
                return Err(Error::DimensionMismatch {
                    expected: np + self.value.len(),
                    actual: ac.len(),
                });
            }
            add_anchor_grad(self.policy.params(), &ac[..np], a.lambda(), &mut g_pi);
            add_anchor_grad(self.value.params(), &ac[np..], a.lambda(), &mut g_v);
        }
        self.policy_opt.step(self.policy.params_mut(), &g_pi);
        self.value_opt.step(self.value.params_mut(), &g_v);
        let tau = self.config.target_rate;
        for (t, v) in self.target.params_mut().iter_mut().zip(self.value.params()) {
            *t += tau * (v - *t);
        }
        if self.policy.params().iter().chain(self.value.params()).any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("actor-critic parameters".into()));
        }
        Ok(AcLoss {
            policy,
            value,
            entropy,
            mean_return: 0.0,
            steps: batch.len(),
            nonfinite_rollouts: 0,
        })
    }

    pub fn save(&self, path: &Path, rng: &ChaCha8Rng) -> Result<()> {
        let json = serde_json::to_vec(&AgentCheckpoint {
            agent: self.clone(),
            rng: rng.clone(),
        })?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, ChaCha8Rng)> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let ckpt: AgentCheckpoint = serde_json::from_slice(&bytes)?;
        Ok((ckpt.agent, ckpt.rng))
    }
}

#[derive(Serialize, Deserialize)]
struct AgentCheckpoint {
    agent: ActorCritic,
    rng: ChaCha8Rng,
}

fn accumulate(total: &mut AcLoss, loss: &AcLoss, updates: usize) {
    let n = updates as f64;
    total.policy += loss.policy / n;
    total.value += loss.value / n;
    total.entropy += loss.entropy / n;
    total.mean_return += loss.mean_return / n;
    total.steps += loss.steps;
    total.nonfinite_rollouts += loss.nonfinite_rollouts;
}

pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

pub fn sample_categorical<R: Rng>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, v) in p.iter().enumerate() {
        acc += v;
        if u < acc {
            return i;
        }
    }
    // rounding left a sliver above the total mass
    p.iter().rposition(|v| *v > 0.0).unwrap_or(p.len() - 1)
}

/// Parameters captured at a task boundary for the task-aware baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct L2Anchor {
    params: Vec<f64>,
    model_len: usize,
    lambda: f64,
}

impl L2Anchor {
    pub fn new(params: Vec<f64>, lambda: f64) -> Result<Self> {
        Self::with_split(params, 0, lambda)
    }

    fn with_split(params: Vec<f64>, model_len: usize, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!("anchor scale {lambda} must be finite and nonnegative")));
        }
        Ok(Self {
            params,
            model_len,
            lambda,
        })
    }

    /// Snapshot of world model followed by actor-critic parameters.
    pub fn capture(model: &EnsembleWorldModel, ac: &ActorCritic, lambda: f64) -> Result<Self> {
        let mut params = model.flat_params();
        let model_len = params.len();
        params.extend(ac.flat_params());
        Self::with_split(params, model_len, lambda)
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn model_params(&self) -> &[f64] {
        &self.params[..self.model_len]
    }

    pub fn ac_params(&self) -> &[f64] {
        &self.params[self.model_len..]
    }
}

/// `λ‖θ − θ_anchor‖²` over the full anchored parameter vector.
pub fn l2_regularized_loss(current: &[f64], anchor: &L2Anchor) -> Result<f64> {
    if current.len() != anchor.params.len() {
        return Err(Error::DimensionMismatch {
            expected: anchor.params.len(),
            actual: current.len(),
        });
    }
    let sq: f64 = current.iter().zip(&anchor.params).map(|(c, a)| (c - a) * (c - a)).sum();
    Ok(anchor.lambda * sq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::replay::tests::unit_episode;
    use crate::replay::{InsertionStrategy, ReplayConfig, SamplingStrategy};
    use crate::worldmodel::DreamStep;

    /// One state; action 1 pays 1, everything else 0, always terminal.
    struct Bandit;

    impl Dynamics for Bandit {
        fn feature_dim(&self) -> usize {
            FEATURE_DIM
        }
        fn horizon(&self) -> usize {
            15
        }
        fn dream<R: Rng>(&self, feature: &[f64], action: usize, _rng: &mut R) -> Option<DreamStep> {
            Some(DreamStep {
                next: feature.to_vec(),
                reward: if action == 1 { 1.0 } else { 0.0 },
                done_prob: 1.0,
                intrinsic: 0.0,
            })
        }
    }

    fn one_state_buffer() -> ReplayBuffer {
        let cfg = ReplayConfig::new(100, InsertionStrategy::Fifo, SamplingStrategy::Uniform).with_min_store_length(1);
        let mut b = ReplayBuffer::new(cfg).unwrap();
        b.offer(unit_episode(1, 0.0, 0), &mut ChaCha8Rng::seed_from_u64(0));
        b
    }

    #[test]
    fn zero_updates_leave_agent_unchanged() {
        let mut ac = ActorCritic::new(AgentConfig::default(), 1).unwrap();
        let before = ac.clone();
        ac.train_in_imagination(&Bandit, &one_state_buffer(), 0, &mut ChaCha8Rng::seed_from_u64(0), None)
            .unwrap();
        assert_eq!(ac, before);
    }

    #[test]
    fn bandit_is_solved_in_imagination() {
        let mut ac = ActorCritic::new(AgentConfig::default(), 2).unwrap();
        let b = one_state_buffer();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        ac.train_in_imagination(&Bandit, &b, 2000, &mut rng, None).unwrap();
        let p = ac.probs(&b.episode(0).transitions[0].obs.features());
        assert!(p[1] > 0.95, "{p:?}");
    }

    #[test]
    fn large_entropy_bonus_keeps_policy_uniform() {
        let cfg = AgentConfig {
            entropy: 10.0,
            ..Default::default()
        };
        let mut ac = ActorCritic::new(cfg, 2).unwrap();
        let b = one_state_buffer();
        ac.train_in_imagination(&Bandit, &b, 500, &mut ChaCha8Rng::seed_from_u64(1), None).unwrap();
        let h = ac.entropy(&b.episode(0).transitions[0].obs.features());
        assert!((h - (NUM_ACTIONS as f64).ln()).abs() < 1e-2, "{h}");
    }

    #[test]
    fn uniform_policy_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut counts = [0usize; 4];
        for _ in 0..100_000 {
            counts[sample_categorical(&[0.25; 4], &mut rng)] += 1;
        }
        for c in counts {
            assert!((c as f64 / 1e5 - 0.25).abs() < 0.01);
        }
    }

    #[test]
    fn one_hot_policy_is_deterministic_in_both_modes() {
        let mut ac = ActorCritic::with_dims(AgentConfig::default(), 3, 4, 0).unwrap();
        let n = ac.policy_net().len();
        // output bias strongly favours action 2
        ac.policy_net_mut().params_mut()[n - 2] = 1000.0;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for mode in [ActMode::Explore, ActMode::Eval] {
            for _ in 0..100 {
                assert_eq!(ac.act(&[0.3, -0.1, 1.0], mode, &mut rng), 2);
            }
        }
    }

    #[test]
    fn fixed_rng_reproduces_actions() {
        let ac = ActorCritic::new(AgentConfig::default(), 5).unwrap();
        let x = one_state_buffer().episode(0).transitions[0].obs.features();
        let seq = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| ac.act(&x, ActMode::Explore, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(seq(9), seq(9));
    }

    #[test]
    fn l2_examples() {
        let a = L2Anchor::new(vec![1.0], 1.0).unwrap();
        assert_eq!(l2_regularized_loss(&[3.0], &a).unwrap(), 4.0);
        assert_eq!(l2_regularized_loss(&[1.0], &a).unwrap(), 0.0);
        assert!(l2_regularized_loss(&[1.0, 2.0], &a).is_err());
        for lambda in LAMBDA_GRID {
            assert!(L2Anchor::new(vec![0.0], lambda).is_ok());
        }
        assert!(L2Anchor::new(vec![0.0], -1.0).is_err());
    }

    #[test]
    fn model_free_solves_bandit() {
        let cfg = AgentConfig {
            batch_segments: 16,
            ..Default::default()
        };
        let mut ac = ActorCritic::new(cfg, 3).unwrap();
        let rcfg = ReplayConfig::new(1000, InsertionStrategy::Fifo, SamplingStrategy::Uniform).with_min_store_length(1);
        let mut buffer = ReplayBuffer::new(rcfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = unit_episode(1, 0.0, 0).transitions[0].obs.clone();
        for step in 0..5000u64 {
            let a = ac.act(&x.features(), ActMode::Explore, &mut rng);
            let tr = crate::envsuite::Transition {
                obs: x.clone(),
                action: a,
                reward: if a == 1 { 1.0 } else { 0.0 },
                done: true,
                truncated: false,
                next_obs: x.clone(),
            };
            buffer.offer(crate::replay::Episode::new(vec![tr], step, 0.0), &mut rng);
            ac.model_free_update(&buffer, &mut rng, None).unwrap();
        }
        let p = ac.probs(&x.features());
        assert!(p[1] > 0.95, "{p:?}");
    }

    #[test]
    fn model_free_skips_empty_buffer_and_zero_lr_is_noop() {
        let cfg = AgentConfig {
            actor_lr: 0.0,
            critic_lr: 0.0,
            ..Default::default()
        };
        let mut ac = ActorCritic::new(cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let empty = ReplayBuffer::new(ReplayConfig::new(10, InsertionStrategy::Fifo, SamplingStrategy::Uniform).with_min_store_length(1)).unwrap();
        assert!(ac.model_free_update(&empty, &mut rng, None).unwrap().is_none());
        let before = ac.clone();
        ac.model_free_update(&one_state_buffer(), &mut rng, None).unwrap();
        assert_eq!(ac.flat_params(), before.flat_params());
    }

    #[test]
    fn checkpoint_keeps_rng_state() {
        let ac = ActorCritic::new(AgentConfig::default(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        rng.gen::<u64>();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("agent.json");
        ac.save(&path, &rng).unwrap();
        let (back, mut rng2) = ActorCritic::load(&path).unwrap();
        assert_eq!(back, ac);
        assert_eq!(rng2.gen::<u64>(), rng.gen::<u64>());
    }
}
