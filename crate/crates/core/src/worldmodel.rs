//! Ensemble forward model over observation features.
//!
//! Each member maps `[features, one-hot action]` to next features, reward and
//! a termination logit. The spread of the members' next-feature predictions is
//! the exploration signal; a single member drives each imagined step.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::envsuite::{Transition, FEATURE_DIM, NUM_ACTIONS};
use crate::error::{Error, Result};
use crate::nn::{param_hash, sigmoid, Adam, Mlp, MlpTrace};
use crate::replay::ReplayBuffer;

pub const DEFAULT_ENSEMBLE: usize = 5;
pub const DEFAULT_HORIZON: usize = 15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldModelConfig {
    #[serde(default = "default_ensemble")]
    pub ensemble_size: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Replay segments per member and batch.
    #[serde(default = "default_batch_segments")]
    pub batch_segments: usize,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    /// Drop reward and termination from the member loss; a separate head
    /// learns them for imagination.
    #[serde(default)]
    pub obs_only: bool,
}

fn default_ensemble() -> usize {
    DEFAULT_ENSEMBLE
}
fn default_hidden() -> usize {
    32
}
fn default_lr() -> f64 {
    1e-3
}
fn default_batch_segments() -> usize {
    4
}
fn default_horizon() -> usize {
    DEFAULT_HORIZON
}

impl Default for WorldModelConfig {
    fn default() -> Self {
        Self {
            ensemble_size: DEFAULT_ENSEMBLE,
            hidden: default_hidden(),
            lr: default_lr(),
            batch_segments: default_batch_segments(),
            horizon: DEFAULT_HORIZON,
            obs_only: false,
        }
    }
}

impl WorldModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ensemble_size == 0 {
            return Err(Error::Config("ensemble_size must be positive".into()));
        }
        if self.hidden == 0 || self.batch_segments == 0 {
            return Err(Error::Config("hidden and batch_segments must be positive".into()));
        }
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("model lr must be finite and nonnegative".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        crate::nn::hex(&Sha256::digest(json))
    }
}

/// `r = α_i r_i + α_e r_e` with both coefficients in `[0, 1]`.
pub fn combined_reward(r_i: f64, r_e: f64, alpha_i: f64, alpha_e: f64) -> Result<f64> {
    validate_alphas(alpha_i, alpha_e)?;
    Ok(alpha_i * r_i + alpha_e * r_e)
}

pub fn validate_alphas(alpha_i: f64, alpha_e: f64) -> Result<()> {
    for (name, a) in [("alpha_i", alpha_i), ("alpha_e", alpha_e)] {
        if !(0.0..=1.0).contains(&a) {
            return Err(Error::Config(format!("{name} = {a} is outside [0, 1]")));
        }
    }
    Ok(())
}

/// One supervised example for a member; `input` already holds the action.
#[derive(Debug, Clone, Copy)]
pub struct ModelSample<'a> {
    pub input: &'a [f64],
    pub next: &'a [f64],
    pub reward: f64,
    pub done: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub feature: f64,
    pub reward: f64,
    pub done: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.feature + self.reward + self.done
    }
}

/// Batch-mean loss of a network whose output is `[next features.., reward,
/// done logit]`: summed squared error on features, squared error on reward,
/// binary cross-entropy on termination. With `obs_only` only the feature term
/// is counted. Accumulates the gradient when `grad` is given.
pub fn member_loss(net: &Mlp, batch: &[ModelSample<'_>], obs_only: bool, mut grad: Option<&mut [f64]>) -> LossParts {
    let f = net.output_dim() - 2;
    let n = batch.len().max(1) as f64;
    let mut trace = MlpTrace::new(net);
    let mut d_out = vec![0.0; net.output_dim()];
    let mut scratch = Vec::new();
    let mut parts = LossParts::default();
    for s in batch {
        net.forward(s.input, &mut trace);
        let y = &trace.output;
        for d in 0..f {
            let e = y[d] - s.next[d];
            parts.feature += e * e / n;
            d_out[d] = 2.0 * e / n;
        }
        if obs_only {
            d_out[f] = 0.0;
            d_out[f + 1] = 0.0;
        } else {
            let e = y[f] - s.reward;
            parts.reward += e * e / n;
            d_out[f] = 2.0 * e / n;
            let (bce, d) = bce_with_logit(y[f + 1], s.done);
            parts.done += bce / n;
            d_out[f + 1] = d / n;
        }
        if let Some(g) = grad.as_deref_mut() {
            net.backward(s.input, &trace, &d_out, g, &mut scratch);
        }
    }
    parts
}

/// Reward and termination only; used by the separate head in obs-only mode.
fn head_loss(net: &Mlp, batch: &[ModelSample<'_>], grad: &mut [f64]) -> LossParts {
    let n = batch.len().max(1) as f64;
    let mut trace = MlpTrace::new(net);
    let mut d_out = [0.0; 2];
    let mut scratch = Vec::new();
    let mut parts = LossParts::default();
    for s in batch {
        net.forward(s.input, &mut trace);
        let e = trace.output[0] - s.reward;
        parts.reward += e * e / n;
        d_out[0] = 2.0 * e / n;
        let (bce, d) = bce_with_logit(trace.output[1], s.done);
        parts.done += bce / n;
        d_out[1] = d / n;
        net.backward(s.input, &trace, &d_out, grad, &mut scratch);
    }
    parts
}

/// Cross-entropy of a logit against a binary target, and its derivative.
fn bce_with_logit(logit: f64, target: bool) -> (f64, f64) {
    let t = if target { 1.0 } else { 0.0 };
    // log(1 + e^z) computed stably
    let softplus = logit.max(0.0) + (-logit.abs()).exp().ln_1p();
    (softplus - t * logit, sigmoid(logit) - t)
}

/// Population variance across members, averaged over output dimensions.
pub fn prediction_variance(predictions: &[&[f64]]) -> f64 {
    let k = predictions.len();
    if k == 0 {
        return 0.0;
    }
    let dims = predictions[0].len();
    if dims == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for d in 0..dims {
        // shift by the first member so exact agreement gives exactly zero
        let base = predictions[0][d];
        let mean = predictions.iter().map(|p| p[d] - base).sum::<f64>() / k as f64;
        total += predictions
            .iter()
            .map(|p| (p[d] - base - mean) * (p[d] - base - mean))
            .sum::<f64>()
            / k as f64;
    }
    (total / dims as f64).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Member {
    net: Mlp,
    adam: Adam,
    rng: ChaCha8Rng,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RewardHead {
    net: Mlp,
    adam: Adam,
    rng: ChaCha8Rng,
}

/// Everything the ensemble predicts for one `(feature, action)` input.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblePrediction {
    /// Next-feature prediction of every member.
    pub next: Vec<Vec<f64>>,
    /// Reward of every member, clamped to `[-1, 1]`.
    pub reward: Vec<f64>,
    pub done_prob: Vec<f64>,
    pub disagreement: f64,
}

/// Output of one imagined step before it is attached to a rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct DreamStep {
    pub next: Vec<f64>,
    pub reward: f64,
    pub done_prob: f64,
    pub intrinsic: f64,
}

/// Anything that can stand in for the environment during policy learning.
pub trait Dynamics {
    fn feature_dim(&self) -> usize;
    fn horizon(&self) -> usize;
    fn dream<R: Rng>(&self, feature: &[f64], action: usize, rng: &mut R) -> Option<DreamStep>;
}

impl Dynamics for EnsembleWorldModel {
    fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    fn horizon(&self) -> usize {
        self.config.horizon
    }

    fn dream<R: Rng>(&self, feature: &[f64], action: usize, rng: &mut R) -> Option<DreamStep> {
        self.sample_step(feature, action, rng)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImaginedStep {
    pub feature: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub intrinsic: f64,
    pub done_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImaginedRollout {
    pub steps: Vec<ImaginedStep>,
    /// A member produced a non-finite feature and the rollout was cut short.
    pub nonfinite: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelLoss {
    /// Mean total loss of each member over the batches.
    pub per_member: Vec<f64>,
    pub feature: f64,
    pub reward: f64,
    pub done: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleWorldModel {
    config: WorldModelConfig,
    feature_dim: usize,
    members: Vec<Member>,
    head: Option<RewardHead>,
    batches_trained: u64,
}

impl EnsembleWorldModel {
    pub fn new(config: WorldModelConfig, seed: u64) -> Result<Self> {
        Self::with_dims(config, FEATURE_DIM, seed)
    }

    /// Model over features of arbitrary width; used by small fixtures.
    pub fn with_dims(config: WorldModelConfig, feature_dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let input = feature_dim + NUM_ACTIONS;
        let members = (0..config.ensemble_size)
            .map(|k| {
                let mut rng = ChaCha8Rng::seed_from_u64(crate::envsuite::mix_seed(seed, k as u64));
                let net = Mlp::new(input, config.hidden, feature_dim + 2, 1.0, &mut rng);
                let adam = Adam::new(net.len(), config.lr);
                Member { net, adam, rng }
            })
            .collect();
        let head = config.obs_only.then(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(crate::envsuite::mix_seed(seed, u64::MAX));
            let net = Mlp::new(input, config.hidden, 2, 1.0, &mut rng);
            let adam = Adam::new(net.len(), config.lr);
            RewardHead { net, adam, rng }
        });
        Ok(Self {
            config,
            feature_dim,
            members,
            head,
            batches_trained: 0,
        })
    }

    pub fn config(&self) -> &WorldModelConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn ensemble_size(&self) -> usize {
        self.members.len()
    }

    pub fn batches_trained(&self) -> u64 {
        self.batches_trained
    }

    pub fn member(&self, k: usize) -> &Mlp {
        &self.members[k].net
    }

    pub fn member_mut(&mut self, k: usize) -> &mut Mlp {
        &mut self.members[k].net
    }

    /// Digest of every learnable parameter.
    pub fn param_hash(&self) -> String {
        let head = self.head.iter().map(|h| h.net.params());
        param_hash(self.members.iter().map(|m| m.net.params()).chain(head))
    }

    /// All parameters concatenated, members first.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for m in &self.members {
            out.extend_from_slice(m.net.params());
        }
        if let Some(h) = &self.head {
            out.extend_from_slice(h.net.params());
        }
        out
    }

    pub fn write_input(&self, feature: &[f64], action: usize, input: &mut Vec<f64>) {
        input.clear();
        input.extend_from_slice(feature);
        input.resize(self.feature_dim + NUM_ACTIONS, 0.0);
        input[self.feature_dim + action] = 1.0;
    }

    /// `batches` gradient steps per member, each on its own mini-batch.
    pub fn train(&mut self, buffer: &ReplayBuffer, batches: usize) -> Result<ModelLoss> {
        self.train_anchored(buffer, batches, None)
    }

    /// As [`train`](Self::train) with an optional `λ‖θ − θ_anchor‖²` penalty;
    /// `anchor` must match [`flat_params`](Self::flat_params).
    pub fn train_anchored(
        &mut self,
        buffer: &ReplayBuffer,
        batches: usize,
        anchor: Option<(&[f64], f64)>,
    ) -> Result<ModelLoss> {
        if buffer.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        if let Some((a, _)) = anchor {
            let expected = self.flat_params().len();
            if a.len() != expected {
                return Err(Error::DimensionMismatch {
                    expected,
                    actual: a.len(),
                });
            }
        }
        let k = self.members.len();
        let mut per_member = vec![0.0; k];
        let mut sums = LossParts::default();
        if batches == 0 {
            return Ok(ModelLoss {
                per_member,
                feature: 0.0,
                reward: 0.0,
                done: 0.0,
            });
        }
        let obs_only = self.config.obs_only;
        let width = self.feature_dim + NUM_ACTIONS;
        let mut inputs = Vec::new();
        let mut nexts = Vec::new();
        let mut labels = Vec::new();
        let mut offset = 0;
        for (i, member) in self.members.iter_mut().enumerate() {
            let n = member.net.len();
            for _ in 0..batches {
                let transitions = sample_transitions(buffer, self.config.batch_segments, &mut member.rng)?;
                fill_batch(&transitions, width, &mut inputs, &mut nexts, &mut labels);
                let batch = as_samples(&inputs, &nexts, &labels, width, self.feature_dim);
                let mut grad = vec![0.0; n];
                let parts = member_loss(&member.net, &batch, obs_only, Some(&mut grad));
                if !parts.total().is_finite() {
                    return Err(Error::NonFinite(format!("world-model member {i} loss")));
                }
                if let Some((a, lambda)) = anchor {
                    add_anchor_grad(member.net.params(), &a[offset..offset + n], lambda, &mut grad);
                }
                member.adam.step(member.net.params_mut(), &grad);
                per_member[i] += parts.total() / batches as f64;
                sums.feature += parts.feature;
                sums.reward += parts.reward;
                sums.done += parts.done;
            }
            offset += n;
        }
        if let Some(head) = &mut self.head {
            let n = head.net.len();
            for _ in 0..batches {
                let transitions = sample_transitions(buffer, self.config.batch_segments, &mut head.rng)?;
                fill_batch(&transitions, width, &mut inputs, &mut nexts, &mut labels);
                let batch = as_samples(&inputs, &nexts, &labels, width, self.feature_dim);
                let mut grad = vec![0.0; n];
                let parts = head_loss(&head.net, &batch, &mut grad);
                if !parts.total().is_finite() {
                    return Err(Error::NonFinite("reward head loss".into()));
                }
                if let Some((a, lambda)) = anchor {
                    add_anchor_grad(head.net.params(), &a[offset..offset + n], lambda, &mut grad);
                }
                head.adam.step(head.net.params_mut(), &grad);
                sums.reward += parts.reward * k as f64;
                sums.done += parts.done * k as f64;
            }
        }
        self.batches_trained += batches as u64;
        let denom = (k * batches) as f64;
        Ok(ModelLoss {
            per_member,
            feature: sums.feature / denom,
            reward: sums.reward / denom,
            done: sums.done / denom,
        })
    }

    /// Every member's prediction plus their disagreement.
    pub fn predict_all(&self, feature: &[f64], action: usize) -> EnsemblePrediction {
        let mut input = Vec::with_capacity(self.feature_dim + NUM_ACTIONS);
        self.write_input(feature, action, &mut input);
        let mut trace = MlpTrace::new(&self.members[0].net);
        let f = self.feature_dim;
        let mut next = Vec::with_capacity(self.members.len());
        let mut reward = Vec::with_capacity(self.members.len());
        let mut done_prob = Vec::with_capacity(self.members.len());
        for m in &self.members {
            m.net.forward(&input, &mut trace);
            next.push(trace.output[..f].to_vec());
            reward.push(trace.output[f].clamp(-1.0, 1.0));
            done_prob.push(sigmoid(trace.output[f + 1]));
        }
        if let Some(h) = &self.head {
            let mut ht = MlpTrace::new(&h.net);
            h.net.forward(&input, &mut ht);
            let r = ht.output[0].clamp(-1.0, 1.0);
            let d = sigmoid(ht.output[1]);
            reward.iter_mut().for_each(|x| *x = r);
            done_prob.iter_mut().for_each(|x| *x = d);
        }
        let refs: Vec<&[f64]> = next.iter().map(Vec::as_slice).collect();
        let disagreement = prediction_variance(&refs);
        EnsemblePrediction {
            next,
            reward,
            done_prob,
            disagreement,
        }
    }

    pub fn disagreement(&self, feature: &[f64], action: usize) -> f64 {
        self.predict_all(feature, action).disagreement
    }

    /// Mean disagreement over an episode's real transitions.
    pub fn episode_uncertainty(&self, transitions: &[Transition]) -> f64 {
        if transitions.is_empty() {
            return 0.0;
        }
        let total: f64 = transitions
            .iter()
            .map(|t| self.disagreement(&t.obs.features(), t.action))
            .sum();
        total / transitions.len() as f64
    }

    /// One imagined transition driven by a uniformly chosen member; `None`
    /// when the prediction is not finite.
    pub fn sample_step<R: Rng>(&self, feature: &[f64], action: usize, rng: &mut R) -> Option<DreamStep> {
        let pred = self.predict_all(feature, action);
        let k = rng.gen_range(0..self.members.len());
        if pred.next[k].iter().any(|x| !x.is_finite()) || !pred.disagreement.is_finite() {
            return None;
        }
        Some(DreamStep {
            reward: pred.reward[k],
            done_prob: pred.done_prob[k],
            intrinsic: pred.disagreement,
            next: pred.next.into_iter().nth(k).expect("member index in range"),
        })
    }

    /// Autoregressive rollout from `start`; `policy` maps a feature to an action.
    pub fn imagine<R, P>(&self, start: &[f64], mut policy: P, horizon: usize, rng: &mut R) -> ImaginedRollout
    where
        R: Rng,
        P: FnMut(&[f64], &mut R) -> usize,
    {
        let mut rollout = ImaginedRollout::default();
        let mut feature = start.to_vec();
        for _ in 0..horizon {
            let action = policy(&feature, rng);
            let Some(step) = self.sample_step(&feature, action, rng) else {
                log::warn!("imagined feature became non-finite; truncating rollout");
                rollout.nonfinite = true;
                break;
            };
            rollout.steps.push(ImaginedStep {
                feature: std::mem::take(&mut feature),
                action,
                reward: step.reward,
                intrinsic: step.intrinsic,
                done_prob: step.done_prob,
            });
            if step.done_prob > 0.5 {
                break;
            }
            feature = step.next;
        }
        rollout
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = ModelCheckpoint {
            config_hash: self.config.hash(),
            model: self.clone(),
        };
        let json = serde_json::to_vec(&ckpt)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let ckpt: ModelCheckpoint = serde_json::from_slice(&bytes)?;
        if ckpt.config_hash != ckpt.model.config.hash() {
            return Err(Error::format(path, "config hash mismatch"));
        }
        Ok(ckpt.model)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelCheckpoint {
    config_hash: String,
    model: EnsembleWorldModel,
}

pub(crate) fn add_anchor_grad(params: &[f64], anchor: &[f64], lambda: f64, grad: &mut [f64]) {
    for ((g, p), a) in grad.iter_mut().zip(params).zip(anchor) {
        *g += 2.0 * lambda * (p - a);
    }
}

fn sample_transitions<'b, R: Rng>(buffer: &'b ReplayBuffer, segments: usize, rng: &mut R) -> Result<Vec<&'b Transition>> {
    let segs = buffer.sample_minibatch(segments, rng)?;
    Ok(segs.iter().flat_map(|s| buffer.segment(s)).collect())
}

fn fill_batch(transitions: &[&Transition], width: usize, inputs: &mut Vec<f64>, nexts: &mut Vec<f64>, labels: &mut Vec<(f64, bool)>) {
    let f = width - NUM_ACTIONS;
    inputs.clear();
    inputs.resize(transitions.len() * width, 0.0);
    nexts.clear();
    nexts.resize(transitions.len() * f, 0.0);
    labels.clear();
    for (i, t) in transitions.iter().enumerate() {
        let row = &mut inputs[i * width..(i + 1) * width];
        t.obs.write_features(&mut row[..f]);
        row[f + t.action] = 1.0;
        t.next_obs.write_features(&mut nexts[i * f..(i + 1) * f]);
        labels.push((t.reward, t.terminal()));
    }
}

fn as_samples<'a>(inputs: &'a [f64], nexts: &'a [f64], labels: &[(f64, bool)], width: usize, f: usize) -> Vec<ModelSample<'a>> {
    labels
        .iter()
        .enumerate()
        .map(|(i, &(reward, done))| ModelSample {
            input: &inputs[i * width..(i + 1) * width],
            next: &nexts[i * f..(i + 1) * f],
            reward,
            done,
        })
        .collect()
}
