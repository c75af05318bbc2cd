//! Experiment runner: acting, replay, model and policy learning interleaved
//! over a task schedule, with periodic evaluation of every task.
//!
//! The learner never sees which task it is in. Task boundaries are only used
//! here for bookkeeping (evaluation, composition snapshots) and by the
//! task-aware L2 arm to capture its anchor.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{ActMode, ActorCritic, AgentConfig, L2Anchor};
use crate::envsuite::{make_schedule, mix_seed, ScheduleConfig, ScheduledTask, Transition, NUM_ACTIONS};
use crate::error::{Error, Result};
use crate::metrics::{self, AggregateMetric, EvalLog, MetricsSummary, ReferenceCurves};
use crate::replay::{task_of, Episode, InsertionStrategy, ReplayBuffer, ReplayConfig, SamplingStrategy};
use crate::worldmodel::{EnsembleWorldModel, WorldModelConfig};

pub const ENV_OUT_DIR: &str = "CRL_OUT_DIR";
pub const ENV_JOBS: &str = "CRL_JOBS";
const HISTOGRAM_DRAWS: usize = 1000;
const N_BOOT: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AgentMode {
    /// Imagination training on extrinsic reward only.
    WorldModel,
    /// Imagination training on the combined intrinsic and extrinsic reward.
    WorldModelExplore,
    /// Actor-critic on replayed real segments.
    ModelFree,
    /// `WorldModelExplore` plus an L2 pull towards the previous task's weights.
    TaskAwareL2,
    /// Uniformly random actions, no learning.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_mode")]
    pub mode: AgentMode,
    /// Anchor scale for `task-aware-l2`.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Environment steps between training rounds.
    #[serde(default = "default_train_every")]
    pub train_every: u64,
    #[serde(default = "one")]
    pub model_batches: usize,
    #[serde(default = "one")]
    pub policy_batches: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    #[serde(default = "default_eval_episodes")]
    pub eval_episodes: usize,
    /// Steps at which buffer composition is recorded; empty means every task
    /// boundary. The final step is always recorded.
    #[serde(default)]
    pub snapshot_steps: Vec<u64>,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
    #[serde(default)]
    pub checkpoints: bool,
    pub schedule: ScheduleConfig,
    pub replay: ReplayConfig,
    #[serde(default)]
    pub model: WorldModelConfig,
    #[serde(default)]
    pub agent: AgentConfig,
}

fn default_mode() -> AgentMode {
    AgentMode::WorldModelExplore
}
fn default_lambda() -> f64 {
    1.0
}
fn default_train_every() -> u64 {
    16
}
fn one() -> usize {
    1
}
fn default_eval_every() -> u64 {
    1000
}
fn default_eval_episodes() -> usize {
    10
}
fn default_bins() -> usize {
    20
}

impl RunConfig {
    pub fn new(schedule: ScheduleConfig, replay: ReplayConfig) -> Self {
        Self {
            seed: 0,
            mode: default_mode(),
            lambda: default_lambda(),
            train_every: default_train_every(),
            model_batches: 1,
            policy_batches: 1,
            eval_every: default_eval_every(),
            eval_episodes: default_eval_episodes(),
            snapshot_steps: Vec::new(),
            histogram_bins: default_bins(),
            checkpoints: false,
            schedule,
            replay,
            model: WorldModelConfig::default(),
            agent: AgentConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        make_schedule(&self.schedule)?;
        self.replay.validate()?;
        self.model.validate()?;
        self.agent.validate()?;
        if self.train_every == 0 || self.eval_every == 0 || self.eval_episodes == 0 {
            return Err(Error::Config("train_every, eval_every and eval_episodes must be positive".into()));
        }
        if self.histogram_bins == 0 {
            return Err(Error::Config("histogram_bins must be positive".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config("lambda must be finite and nonnegative".into()));
        }
        Ok(())
    }

    /// Step at which each task after the first begins.
    pub fn task_starts(&self) -> Vec<u64> {
        let mut acc = 0;
        let mut out = Vec::new();
        for t in &self.schedule.tasks[..self.schedule.tasks.len().saturating_sub(1)] {
            acc += t.budget;
            out.push(acc);
        }
        out
    }
}

/// Buffer state at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub step: u64,
    /// Stored episodes per task phase.
    pub counts: Vec<usize>,
    pub shares: Vec<f64>,
    /// `[task][bin]` counts of sampled episodes by insertion index, bins
    /// spanning `[0, stream_count)`.
    pub sampled_index_histogram: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutput {
    pub log: EvalLog,
    pub snapshots: Vec<Snapshot>,
    /// Distinct agent positions per task phase.
    pub visited_cells: Vec<usize>,
    pub episodes_offered: Vec<u64>,
    pub episodes_accepted: Vec<u64>,
}

impl RunOutput {
    pub fn final_snapshot(&self) -> &Snapshot {
        self.snapshots.last().expect("the final step is always snapshotted")
    }
}

#[derive(Serialize)]
struct RunSummary<'a> {
    schema_version: u32,
    config_seed: u64,
    metrics: Option<MetricsSummary>,
    snapshots: &'a [Snapshot],
    visited_cells: &'a [usize],
    episodes_offered: &'a [u64],
    episodes_accepted: &'a [u64],
}

struct Runner<'c> {
    config: &'c RunConfig,
    schedule: Vec<ScheduledTask>,
    task_starts: Vec<u64>,
    buffer: ReplayBuffer,
    model: Option<EnsembleWorldModel>,
    agent: ActorCritic,
    anchor: Option<L2Anchor>,
    rng: ChaCha8Rng,
    offer_rng: ChaCha8Rng,
    log: EvalLog,
    step: u64,
    last_eval: Option<u64>,
    snapshots: Vec<Snapshot>,
    visited: Vec<HashSet<(usize, usize)>>,
    offered: Vec<u64>,
    accepted: Vec<u64>,
}

impl<'c> Runner<'c> {
    fn new(config: &'c RunConfig) -> Result<Self> {
        config.validate()?;
        let schedule = make_schedule(&config.schedule)?;
        let n = schedule.len();
        let mut replay = config.replay.clone();
        replay.embedder_seed = mix_seed(config.seed, 6);
        let uses_model = !matches!(config.mode, AgentMode::ModelFree | AgentMode::Random);
        let model = uses_model
            .then(|| EnsembleWorldModel::new(config.model.clone(), mix_seed(config.seed, 2)))
            .transpose()?;
        let mut agent_cfg = config.agent.clone();
        if config.mode == AgentMode::WorldModel {
            agent_cfg.alpha_i = 0.0;
        }
        let agent = ActorCritic::new(agent_cfg, mix_seed(config.seed, 3))?;
        Ok(Self {
            config,
            task_starts: config.task_starts(),
            buffer: ReplayBuffer::new(replay)?,
            model,
            agent,
            anchor: None,
            rng: ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 1)),
            offer_rng: ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 4)),
            log: EvalLog::new(schedule.iter().map(|t| t.budget).collect())?,
            step: 0,
            last_eval: None,
            snapshots: Vec::new(),
            visited: vec![HashSet::new(); n],
            offered: vec![0; n],
            accepted: vec![0; n],
            schedule,
        })
    }

    fn run(mut self, out_dir: Option<&Path>) -> Result<RunOutput> {
        let started = Instant::now();
        self.evaluate()?;
        for tau in 0..self.schedule.len() {
            if self.config.mode == AgentMode::TaskAwareL2 && tau > 0 {
                let model = self.model.as_ref().expect("task-aware arm has a model");
                self.anchor = Some(L2Anchor::capture(model, &self.agent, self.config.lambda)?);
            }
            self.run_task(tau)?;
            if self.config.snapshot_steps.is_empty() {
                self.snapshot();
            }
            self.evaluate()?;
            if let Some(dir) = out_dir.filter(|_| self.config.checkpoints) {
                self.checkpoint(dir, tau)?;
            }
            log::info!(
                "task {tau} done at step {} ({:.1}s, buffer {} episodes / {} transitions)",
                self.step,
                started.elapsed().as_secs_f64(),
                self.buffer.len(),
                self.buffer.stored_transitions()
            );
        }
        if self.snapshots.last().map(|s| s.step) != Some(self.step) {
            self.snapshot();
        }
        let output = RunOutput {
            log: self.log,
            snapshots: self.snapshots,
            visited_cells: self.visited.iter().map(HashSet::len).collect(),
            episodes_offered: self.offered,
            episodes_accepted: self.accepted,
        };
        if let Some(dir) = out_dir {
            write_artifacts(dir, self.config, &output)?;
        }
        Ok(output)
    }

    fn run_task(&mut self, tau: usize) -> Result<()> {
        let task = self.schedule[tau].clone();
        let mut episode_no = 0;
        let mut env = task.training_env(episode_no)?;
        let mut obs = env.reset();
        let mut current: Vec<Transition> = Vec::new();
        let mut episode_start = self.step;
        let p = env.position();
        self.visited[tau].insert((p.x, p.y));
        for _ in 0..task.budget {
            let action = match self.config.mode {
                AgentMode::Random => self.rng.gen_range(0..NUM_ACTIONS),
                _ => self.agent.act(&obs.features(), ActMode::Explore, &mut self.rng),
            };
            let out = env.step(action)?;
            let p = env.position();
            self.visited[tau].insert((p.x, p.y));
            current.push(Transition {
                obs: std::mem::replace(&mut obs, out.obs),
                action,
                reward: out.reward,
                done: out.done,
                truncated: out.truncated,
                next_obs: obs.clone(),
            });
            self.step += 1;
            if out.done {
                self.offer(tau, std::mem::take(&mut current), episode_start);
                episode_no += 1;
                env = task.training_env(episode_no)?;
                obs = env.reset();
                episode_start = self.step;
            }
            if self.step % self.config.train_every == 0 {
                self.train()?;
            }
            if self.step % self.config.eval_every == 0 {
                self.evaluate()?;
            }
            if self.config.snapshot_steps.contains(&self.step) {
                self.snapshot();
            }
        }
        if !current.is_empty() {
            self.offer(tau, current, episode_start);
        }
        Ok(())
    }

    fn offer(&mut self, tau: usize, transitions: Vec<Transition>, start: u64) {
        let score = match (&self.model, self.config.replay.sampling) {
            (Some(m), SamplingStrategy::Uncertainty) => m.episode_uncertainty(&transitions),
            _ => 0.0,
        };
        let outcome = self.buffer.offer(Episode::new(transitions, start, score), &mut self.offer_rng);
        if outcome != crate::replay::OfferOutcome::TooShort {
            self.offered[tau] += 1;
        }
        if outcome.accepted() {
            self.accepted[tau] += 1;
        }
    }

    fn train(&mut self) -> Result<()> {
        if self.buffer.is_empty() {
            return Ok(());
        }
        let anchor = self.anchor.as_ref();
        match self.config.mode {
            AgentMode::Random => {}
            AgentMode::ModelFree => {
                for _ in 0..self.config.policy_batches {
                    self.agent.model_free_update(&self.buffer, &mut self.rng, anchor)?;
                }
            }
            _ => {
                let model = self.model.as_mut().expect("model-based arm has a model");
                let loss = model.train_anchored(
                    &self.buffer,
                    self.config.model_batches,
                    anchor.map(|a| (a.model_params(), a.lambda())),
                )?;
                let ac = self
                    .agent
                    .train_in_imagination(&*model, &self.buffer, self.config.policy_batches, &mut self.rng, anchor)?;
                if self.step % self.config.eval_every == 0 {
                    log::debug!(
                        "step {}: model loss {:.4} (feat {:.4}), policy {:.4}, value {:.4}, entropy {:.3}, return {:.3}",
                        self.step,
                        loss.per_member.iter().sum::<f64>() / loss.per_member.len() as f64,
                        loss.feature,
                        ac.policy,
                        ac.value,
                        ac.entropy,
                        ac.mean_return
                    );
                }
            }
        }
        Ok(())
    }

    /// Mean return of every task over its fixed evaluation episodes.
    fn evaluate(&mut self) -> Result<()> {
        if self.last_eval == Some(self.step) {
            return Ok(());
        }
        self.last_eval = Some(self.step);
        let n_tasks = self.schedule.len() as u64;
        for (tau, task) in self.schedule.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(self.config.seed, 5), self.step * n_tasks + tau as u64));
            let mut total = 0.0;
            for i in 0..self.config.eval_episodes {
                let mut env = task.eval_env(i as u64)?;
                let mut obs = env.reset();
                loop {
                    let action = match self.config.mode {
                        AgentMode::Random => rng.gen_range(0..NUM_ACTIONS),
                        _ => self.agent.act(&obs.features(), ActMode::Eval, &mut rng),
                    };
                    let out = env.step(action)?;
                    total += out.reward;
                    obs = out.obs;
                    if out.done {
                        break;
                    }
                }
            }
            let p = (total / self.config.eval_episodes as f64).clamp(-1.0, 1.0);
            self.log.push(self.step, tau, p)?;
        }
        Ok(())
    }

    fn snapshot(&mut self) {
        let counts = self.buffer.composition_counts(&self.task_starts);
        let shares = self.buffer.composition_snapshot(&self.task_starts);
        let bins = self.config.histogram_bins;
        let mut hist = vec![vec![0usize; bins]; counts.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(self.config.seed, 7), self.step));
        if let Ok(segs) = self.buffer.sample_minibatch(HISTOGRAM_DRAWS, &mut rng) {
            let stream = self.buffer.stream_count().max(1);
            for s in segs {
                let ep = self.buffer.episode(s.episode);
                let bin = ((ep.insertion_index * bins as u64) / stream) as usize;
                hist[task_of(ep.start_step, &self.task_starts)][bin.min(bins - 1)] += 1;
            }
        }
        self.snapshots.push(Snapshot {
            step: self.step,
            counts,
            shares,
            sampled_index_histogram: hist,
        });
    }

    fn checkpoint(&self, dir: &Path, tau: usize) -> Result<()> {
        let dir = dir.join("checkpoints");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        if let Some(m) = &self.model {
            m.save(&dir.join(format!("task{tau}_model.json")))?;
        }
        self.agent.save(&dir.join(format!("task{tau}_agent.json")), &self.rng)?;
        self.buffer.save(&dir.join(format!("task{tau}_buffer.bin")))
    }
}

fn write_artifacts(dir: &Path, config: &RunConfig, output: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    output.log.write_csv(&dir.join("eval_log.csv"))?;
    let path = dir.join("config.toml");
    fs::write(&path, config.to_toml()).map_err(|e| Error::io(&path, e))?;
    let summary = RunSummary {
        schema_version: metrics::SCHEMA_VERSION,
        config_seed: config.seed,
        metrics: MetricsSummary::compute(&output.log, None).ok(),
        snapshots: &output.snapshots,
        visited_cells: &output.visited_cells,
        episodes_offered: &output.episodes_offered,
        episodes_accepted: &output.episodes_accepted,
    };
    let path = dir.join("run_summary.json");
    fs::write(&path, serde_json::to_vec_pretty(&summary)?).map_err(|e| Error::io(&path, e))
}

/// Executes one run of the full schedule; writes artifacts when `out_dir` is set.
pub fn run_continual(config: &RunConfig, out_dir: Option<&Path>) -> Result<RunOutput> {
    Runner::new(config)?.run(out_dir)
}

/// Single-task run on task `task` of the schedule with everything else equal.
pub fn run_reference(config: &RunConfig, task: usize) -> Result<Vec<(u64, f64)>> {
    let entry = config
        .schedule
        .tasks
        .get(task)
        .ok_or_else(|| Error::Config(format!("no task {task} in the schedule")))?;
    let mut single = config.clone();
    single.schedule.tasks = vec![entry.clone()];
    single.snapshot_steps.clear();
    single.checkpoints = false;
    Ok(run_continual(&single, None)?.log.curve(0))
}

pub fn run_single_task_references(config: &RunConfig) -> Result<ReferenceCurves> {
    let curves = (0..config.schedule.tasks.len())
        .map(|t| run_reference(config, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(ReferenceCurves { curves })
}

/// Each task's curve over its own training phase, shifted to start at 0.
pub fn references_from_log(log: &EvalLog) -> ReferenceCurves {
    let mut start = 0;
    let mut curves = Vec::new();
    for (tau, end) in log.boundaries().into_iter().enumerate() {
        curves.push(
            log.curve(tau)
                .into_iter()
                .filter(|(s, _)| *s >= start && *s <= end)
                .map(|(s, p)| (s - start, p))
                .collect(),
        );
        start = end;
    }
    ReferenceCurves { curves }
}

/// Worker count from `CRL_JOBS`, else the machine's parallelism.
pub fn jobs_from_env() -> usize {
    std::env::var(ENV_JOBS)
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

pub fn out_dir_from_env() -> Option<PathBuf> {
    std::env::var_os(ENV_OUT_DIR).map(PathBuf::from)
}

/// Applies `f` to every item on up to `jobs` threads; results keep input order.
pub fn parallel_map<I, T, F>(items: Vec<I>, jobs: usize, f: F) -> Vec<T>
where
    I: Send + Sync,
    T: Send,
    F: Fn(&I) -> T + Sync,
{
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<T>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.max(1).min(items.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(item) = items.get(i) else { break };
                let r = f(item);
                results.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every item processed"))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    BufferSize,
    /// Sets both reward coefficients.
    Alpha,
    Lambda,
    Insertion,
    Sampling,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "buffer-size" | "buffer_size" => Ok(SweepAxis::BufferSize),
            "alpha" => Ok(SweepAxis::Alpha),
            "lambda" => Ok(SweepAxis::Lambda),
            "insertion" | "strategy" => Ok(SweepAxis::Insertion),
            "sampling" => Ok(SweepAxis::Sampling),
            _ => Err(Error::Config(format!("unknown sweep axis {s:?}"))),
        }
    }
}

/// `base` with one axis set to `value` (given in its config spelling).
pub fn apply_axis(base: &RunConfig, axis: SweepAxis, value: &str) -> Result<RunConfig> {
    let bad = |e: String| Error::Config(format!("bad {axis:?} value {value:?}: {e}"));
    let mut c = base.clone();
    match axis {
        SweepAxis::BufferSize => c.replay.capacity = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
        SweepAxis::Alpha => {
            let a: f64 = value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?;
            c.agent.alpha_i = a;
            c.agent.alpha_e = a;
        }
        SweepAxis::Lambda => {
            c.lambda = value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?;
            c.mode = AgentMode::TaskAwareL2;
        }
        SweepAxis::Insertion => {
            c.replay.insertion = serde_json::from_value::<InsertionStrategy>(serde_json::Value::String(value.into()))
                .map_err(|e| bad(e.to_string()))?
        }
        SweepAxis::Sampling => {
            c.replay.sampling = serde_json::from_value::<SamplingStrategy>(serde_json::Value::String(value.into()))
                .map_err(|e| bad(e.to_string()))?
        }
    }
    c.validate()?;
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub average_performance: f64,
    pub forgetting: f64,
    pub forward_transfer: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub runs: Vec<RunMetrics>,
    pub average_performance: AggregateMetric,
    pub forgetting: AggregateMetric,
    pub forward_transfer: Option<AggregateMetric>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
    /// Rank correlation of the axis value with each metric's IQM (numeric axes only).
    pub spearman_forgetting: Option<f64>,
    pub spearman_forward_transfer: Option<f64>,
}

/// Metrics of one finished run; forward transfer only with references.
pub fn run_metrics(seed: u64, log: &EvalLog, refs: Option<&ReferenceCurves>) -> Result<RunMetrics> {
    let summary = MetricsSummary::compute(log, refs)?;
    Ok(RunMetrics {
        seed,
        average_performance: summary.average_performance,
        forgetting: summary.forgetting.mean,
        forward_transfer: summary.forward_transfer.map(|f| f.mean).filter(|v| v.is_finite()),
    })
}

/// One run per (value, seed). References come from single-task runs of the
/// base config and are shared by every value of the axis.
pub fn run_sweep(base: &RunConfig, axis: SweepAxis, values: &[String], seeds: &[u64], jobs: usize) -> Result<SweepReport> {
    let configs: Vec<Vec<RunConfig>> = values
        .iter()
        .map(|v| {
            let c = apply_axis(base, axis, v)?;
            Ok(seeds.iter().map(|&s| RunConfig { seed: s, ..c.clone() }).collect())
        })
        .collect::<Result<_>>()?;
    let ref_jobs: Vec<(u64, usize)> = seeds
        .iter()
        .flat_map(|&s| (0..base.schedule.tasks.len()).map(move |t| (s, t)))
        .collect();
    let ref_curves = parallel_map(ref_jobs, jobs, |&(s, t)| run_reference(&RunConfig { seed: s, ..base.clone() }, t));
    let mut refs: Vec<ReferenceCurves> = Vec::new();
    let per_seed = base.schedule.tasks.len();
    let mut it = ref_curves.into_iter();
    for _ in seeds {
        let curves = it.by_ref().take(per_seed).collect::<Result<Vec<_>>>()?;
        refs.push(ReferenceCurves { curves });
    }
    let flat: Vec<(usize, usize)> = (0..values.len()).flat_map(|v| (0..seeds.len()).map(move |s| (v, s))).collect();
    let outputs = parallel_map(flat.clone(), jobs, |&(v, s)| run_continual(&configs[v][s], None));
    let mut rows = Vec::new();
    let mut agg_rng = ChaCha8Rng::seed_from_u64(mix_seed(base.seed, 8));
    let mut outputs = outputs.into_iter();
    for (v, value) in values.iter().enumerate() {
        let mut runs = Vec::new();
        for (s, &seed) in seeds.iter().enumerate() {
            let out = outputs.next().expect("one output per run")?;
            runs.push(run_metrics(seed, &out.log, Some(&refs[s]))?);
        }
        let avg: Vec<f64> = runs.iter().map(|r| r.average_performance).collect();
        let fgt: Vec<f64> = runs.iter().map(|r| r.forgetting).collect();
        let ft: Vec<f64> = runs.iter().filter_map(|r| r.forward_transfer).collect();
        rows.push(SweepRow {
            value: value.clone(),
            average_performance: AggregateMetric::from_values("average_performance", &avg, N_BOOT, &mut agg_rng)?,
            forgetting: AggregateMetric::from_values("forgetting", &fgt, N_BOOT, &mut agg_rng)?,
            forward_transfer: (!ft.is_empty())
                .then(|| AggregateMetric::from_values("forward_transfer", &ft, N_BOOT, &mut agg_rng))
                .transpose()?,
            runs,
        });
        log::info!("sweep {axis:?}={value} ({v}) done");
    }
    let xs: Option<Vec<f64>> = values.iter().map(|v| v.parse::<f64>().ok()).collect();
    let (sf, sft) = match xs {
        Some(xs) => {
            let f: Vec<f64> = rows.iter().map(|r| r.forgetting.iqm).collect();
            let ft: Option<Vec<f64>> = rows.iter().map(|r| r.forward_transfer.as_ref().map(|m| m.iqm)).collect();
            (metrics::spearman(&xs, &f), ft.and_then(|ft| metrics::spearman(&xs, &ft)))
        }
        None => (None, None),
    };
    Ok(SweepReport {
        axis,
        rows,
        spearman_forgetting: sf,
        spearman_forward_transfer: sft,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceRun {
    pub seed: u64,
    /// `(step, episodes per task)` at every snapshot.
    pub composition: Vec<(u64, Vec<usize>)>,
    pub first_task_share: f64,
    /// Best evaluation of the first task up to the end of its phase.
    pub first_task_peak: f64,
    pub first_task_final: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceReport {
    pub runs: Vec<ImbalanceRun>,
    pub median_first_task_share: f64,
    /// Median of `peak - final` for the first task.
    pub median_first_task_drop: f64,
}

/// Two-task schedule with a long second phase; tracks how much of the first
/// task survives in the buffer and in the policy.
pub fn scenario_imbalance(config: &RunConfig, seeds: &[u64], jobs: usize) -> Result<ImbalanceReport> {
    if config.schedule.tasks.len() != 2 {
        return Err(Error::Config("the imbalance scenario needs exactly two tasks".into()));
    }
    let first_end = config.schedule.tasks[0].budget;
    let outputs = parallel_map(seeds.to_vec(), jobs, |&s| run_continual(&RunConfig { seed: s, ..config.clone() }, None));
    let mut runs = Vec::new();
    for (out, &seed) in outputs.into_iter().zip(seeds) {
        let out = out?;
        let curve = out.log.curve(0);
        let peak = curve
            .iter()
            .filter(|(s, _)| *s <= first_end)
            .map(|p| p.1)
            .fold(f64::NEG_INFINITY, f64::max);
        runs.push(ImbalanceRun {
            seed,
            composition: out.snapshots.iter().map(|s| (s.step, s.counts.clone())).collect(),
            first_task_share: out.final_snapshot().shares[0],
            first_task_peak: peak,
            first_task_final: curve.last().map(|p| p.1).unwrap_or(f64::NAN),
        });
    }
    let shares: Vec<f64> = runs.iter().map(|r| r.first_task_share).collect();
    let drops: Vec<f64> = runs.iter().map(|r| r.first_task_peak - r.first_task_final).collect();
    Ok(ImbalanceReport {
        median_first_task_share: median(&shares),
        median_first_task_drop: median(&drops),
        runs,
    })
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Composition of a saved buffer given the steps at which tasks began.
pub fn inspect_buffer(path: &Path, task_starts: &[u64]) -> Result<(Vec<usize>, Vec<f64>)> {
    let buffer = ReplayBuffer::load(path)?;
    Ok((buffer.composition_counts(task_starts), buffer.composition_snapshot(task_starts)))
}
