//! Continual-learning metrics over evaluation logs, and IQM aggregation.
//!
//! A log holds `p_τ(t)` for every task `τ` at every evaluation step `t`. Task
//! `τ` trains on `[b_{τ-1}, b_τ)` where `b` are cumulative budgets; `t_f` is
//! the last boundary. Values at a boundary come from the nearest evaluation at
//! or before it.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
const CSV_MAGIC: &str = "# crl-eval-log";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub step: u64,
    pub task: usize,
    pub performance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalLog {
    budgets: Vec<u64>,
    entries: Vec<EvalEntry>,
}

impl EvalLog {
    pub fn new(budgets: Vec<u64>) -> Result<Self> {
        if budgets.is_empty() {
            return Err(Error::Config("an eval log needs at least one task".into()));
        }
        Ok(Self {
            budgets,
            entries: Vec::new(),
        })
    }

    /// Log with `tasks` equal budgets of `n` steps.
    pub fn uniform(tasks: usize, n: u64) -> Result<Self> {
        Self::new(vec![n; tasks])
    }

    pub fn num_tasks(&self) -> usize {
        self.budgets.len()
    }

    pub fn budgets(&self) -> &[u64] {
        &self.budgets
    }

    /// End step of every task's training phase; the last one is `t_f`.
    pub fn boundaries(&self) -> Vec<u64> {
        self.budgets
            .iter()
            .scan(0, |acc, b| {
                *acc += b;
                Some(*acc)
            })
            .collect()
    }

    pub fn final_step(&self) -> u64 {
        self.budgets.iter().sum()
    }

    pub fn entries(&self) -> &[EvalEntry] {
        &self.entries
    }

    pub fn push(&mut self, step: u64, task: usize, performance: f64) -> Result<()> {
        if task >= self.budgets.len() {
            return Err(Error::Config(format!("task {task} is outside the schedule")));
        }
        if !(-1.0..=1.0).contains(&performance) {
            return Err(Error::Config(format!("performance {performance} is outside [-1, 1]")));
        }
        self.entries.push(EvalEntry { step, task, performance });
        Ok(())
    }

    /// Evaluation points of one task in step order.
    pub fn curve(&self, task: usize) -> Vec<(u64, f64)> {
        let mut c: Vec<(u64, f64)> = self
            .entries
            .iter()
            .filter(|e| e.task == task)
            .map(|e| (e.step, e.performance))
            .collect();
        c.sort_by_key(|p| p.0);
        c
    }

    /// `p_τ(t)` from the latest evaluation at or before `t`.
    pub fn performance_at(&self, task: usize, step: u64) -> Option<f64> {
        self.entries
            .iter()
            .filter(|e| e.task == task && e.step <= step)
            .max_by_key(|e| e.step)
            .map(|e| e.performance)
    }

    fn require_at(&self, step: u64, what: &str) -> Result<Vec<f64>> {
        let values: Vec<Option<f64>> = (0..self.num_tasks()).map(|t| self.performance_at(t, step)).collect();
        let missing: Vec<String> = values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_none())
            .map(|(t, _)| t.to_string())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingEvaluation(format!(
                "{what} (step {step}) for tasks [{}]",
                missing.join(", ")
            )));
        }
        Ok(values.into_iter().map(|v| v.expect("checked")).collect())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{CSV_MAGIC} v{SCHEMA_VERSION}").unwrap();
        let budgets: Vec<String> = self.budgets.iter().map(u64::to_string).collect();
        writeln!(out, "# budgets={}", budgets.join(",")).unwrap();
        out.push_str("step,task,return\n");
        for e in &self.entries {
            writeln!(out, "{},{},{}", e.step, e.task, e.performance).unwrap();
        }
        out
    }

    pub fn from_csv(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        if header != format!("{CSV_MAGIC} v{SCHEMA_VERSION}") {
            return Err(Error::format(path, format!("unexpected header {header:?}")));
        }
        let budgets = lines
            .next()
            .and_then(|l| l.strip_prefix("# budgets="))
            .ok_or_else(|| Error::format(path, "missing budgets line"))?
            .split(',')
            .map(|b| b.parse::<u64>().map_err(|e| Error::format(path, e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        if lines.next() != Some("step,task,return") {
            return Err(Error::format(path, "missing column header"));
        }
        let mut log = EvalLog::new(budgets)?;
        for (i, line) in lines.enumerate() {
            let bad = || Error::format(path, format!("bad row {}: {line:?}", i + 1));
            let mut cols = line.split(',');
            let step = cols.next().and_then(|c| c.parse().ok()).ok_or_else(bad)?;
            let task = cols.next().and_then(|c| c.parse().ok()).ok_or_else(bad)?;
            let perf = cols.next().and_then(|c| c.parse().ok()).ok_or_else(bad)?;
            if cols.next().is_some() {
                return Err(bad());
            }
            log.push(step, task, perf).map_err(|_| bad())?;
        }
        Ok(log)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text, path)
    }
}

/// Single-task learning curves; step 0 is the start of each reference run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceCurves {
    pub curves: Vec<Vec<(u64, f64)>>,
}

impl ReferenceCurves {
    pub fn curve(&self, task: usize) -> Result<&[(u64, f64)]> {
        self.curves
            .get(task)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingEvaluation(format!("no reference curve for task {task}")))
    }
}

/// `(1/T) Σ_τ p_τ(t_f)`.
pub fn average_performance(log: &EvalLog) -> Result<f64> {
    let finals = log.require_at(log.final_step(), "final evaluation")?;
    Ok(finals.iter().sum::<f64>() / finals.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forgetting {
    pub mean: f64,
    pub per_task: Vec<f64>,
}

/// `F_τ = p_τ(b_τ) − p_τ(t_f)`, with the last task fixed at exactly zero.
pub fn forgetting(log: &EvalLog) -> Result<Forgetting> {
    let t = log.num_tasks();
    let finals = log.require_at(log.final_step(), "final evaluation")?;
    let mut per_task = Vec::with_capacity(t);
    for (tau, b) in log.boundaries().into_iter().enumerate() {
        if tau + 1 == t {
            per_task.push(0.0);
            break;
        }
        let at_end = log
            .performance_at(tau, b)
            .ok_or_else(|| Error::MissingEvaluation(format!("task {tau} at its boundary step {b}")))?;
        per_task.push(at_end - finals[tau]);
    }
    Ok(Forgetting {
        mean: per_task.iter().sum::<f64>() / t as f64,
        per_task,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardTransfer {
    /// Mean over tasks with a finite value.
    pub mean: f64,
    /// `+∞` marks a task whose own AUC is 1 (excluded from the mean).
    pub per_task: Vec<f64>,
    pub auc: Vec<f64>,
    pub auc_ref: Vec<f64>,
}

/// Normalised area under `curve` on `[start, end]` by the trapezoid rule.
/// The curve must contain evaluations at both ends.
pub fn normalized_auc(curve: &[(u64, f64)], start: u64, end: u64) -> Result<f64> {
    if end <= start {
        return Err(Error::Config(format!("empty interval [{start}, {end}]")));
    }
    let pts: Vec<(u64, f64)> = curve.iter().copied().filter(|(s, _)| *s >= start && *s <= end).collect();
    match (pts.first(), pts.last()) {
        (Some(a), Some(b)) if a.0 == start && b.0 == end => {}
        _ => {
            return Err(Error::MissingEvaluation(format!(
                "curve needs evaluations at both {start} and {end}"
            )))
        }
    }
    let area: f64 = pts
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) as f64 * 0.5 * (w[0].1 + w[1].1))
        .sum();
    Ok(area / (end - start) as f64)
}

/// `FT_τ = (AUC_τ − AUC_ref_τ) / (1 − AUC_τ)`.
pub fn forward_transfer(log: &EvalLog, refs: &ReferenceCurves) -> Result<ForwardTransfer> {
    let t = log.num_tasks();
    let mut per_task = Vec::with_capacity(t);
    let mut auc = Vec::with_capacity(t);
    let mut auc_ref = Vec::with_capacity(t);
    let mut start = 0;
    for (tau, end) in log.boundaries().into_iter().enumerate() {
        let n = end - start;
        let a = normalized_auc(&log.curve(tau), start, end)?;
        let r = normalized_auc(refs.curve(tau)?, 0, n)?;
        let ft = if (1.0 - a).abs() < 1e-9 {
            log::warn!("task {tau}: own AUC is 1, forward transfer undefined; excluded from the mean");
            f64::INFINITY
        } else {
            (a - r) / (1.0 - a)
        };
        per_task.push(ft);
        auc.push(a);
        auc_ref.push(r);
        start = end;
    }
    let finite: Vec<f64> = per_task.iter().copied().filter(|v| v.is_finite()).collect();
    let mean = if finite.is_empty() {
        f64::NAN
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    };
    Ok(ForwardTransfer {
        mean,
        per_task,
        auc,
        auc_ref,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Mean of the sorted values after dropping `⌊k/4⌋` from each tail; a plain
/// mean below four values.
pub fn iqm(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len();
    let trim = if k >= 4 { k / 4 } else { 0 };
    let mid = &v[trim..k - trim];
    mid.iter().sum::<f64>() / mid.len() as f64
}

/// IQM with a 95% percentile-bootstrap interval over runs.
pub fn iqm_bootstrap<R: Rng>(values: &[f64], n_boot: usize, rng: &mut R) -> Result<Interval> {
    if values.is_empty() {
        return Err(Error::Config("no runs to aggregate".into()));
    }
    if n_boot == 0 {
        return Err(Error::Config("n_boot must be at least 1".into()));
    }
    if values.len() < 4 {
        log::warn!("only {} runs: reporting a plain mean without trimming", values.len());
    }
    let point = iqm(values);
    let mut resample = vec![0.0; values.len()];
    let mut stats: Vec<f64> = (0..n_boot)
        .map(|_| {
            for r in resample.iter_mut() {
                *r = values[rng.gen_range(0..values.len())];
            }
            iqm(&resample)
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    Ok(Interval {
        point,
        lower: quantile(&stats, 0.025),
        upper: quantile(&stats, 0.975),
    })
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Spearman rank correlation with average ranks for ties; `None` when either
/// side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let rx = ranks(x);
    let ry = ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            out[idx[k]] = rank;
        }
        i = j + 1;
    }
    out
}

/// Per-run metric record written next to the eval log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub schema_version: u32,
    pub average_performance: f64,
    pub forgetting: Forgetting,
    pub forward_transfer: Option<ForwardTransfer>,
}

impl MetricsSummary {
    pub fn compute(log: &EvalLog, refs: Option<&ReferenceCurves>) -> Result<Self> {
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            average_performance: average_performance(log)?,
            forgetting: forgetting(log)?,
            forward_transfer: refs.map(|r| forward_transfer(log, r)).transpose()?,
        })
    }
}

/// Aggregate of one metric over runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetric {
    pub name: String,
    pub runs: usize,
    pub iqm: f64,
    pub lower: f64,
    pub upper: f64,
}

impl AggregateMetric {
    pub fn from_values<R: Rng>(name: &str, values: &[f64], n_boot: usize, rng: &mut R) -> Result<Self> {
        let ci = iqm_bootstrap(values, n_boot, rng)?;
        Ok(Self {
            name: name.to_string(),
            runs: values.len(),
            iqm: ci.point,
            lower: ci.lower,
            upper: ci.upper,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_task_log(p1_mid: f64, p1_end: f64) -> EvalLog {
        let mut log = EvalLog::uniform(2, 10).unwrap();
        for (step, a, b) in [(0, 0.0, 0.0), (10, p1_mid, 0.0), (20, p1_end, 1.0)] {
            log.push(step, 0, a).unwrap();
            log.push(step, 1, b).unwrap();
        }
        log
    }

    #[test]
    fn average_examples() {
        assert_eq!(average_performance(&two_task_log(1.0, 1.0)).unwrap(), 1.0);
        let mut log = EvalLog::uniform(2, 10).unwrap();
        log.push(20, 0, 1.0).unwrap();
        log.push(20, 1, 0.0).unwrap();
        assert_eq!(average_performance(&log).unwrap(), 0.5);
    }

    #[test]
    fn missing_final_lists_tasks() {
        let mut log = EvalLog::uniform(3, 10).unwrap();
        log.push(30, 1, 0.5).unwrap();
        let err = average_performance(&log).unwrap_err().to_string();
        assert!(err.contains("[0, 2]"), "{err}");
    }

    #[test]
    fn forgetting_examples() {
        let f = forgetting(&two_task_log(1.0, 0.4)).unwrap();
        assert!((f.per_task[0] - 0.6).abs() < 1e-15);
        assert_eq!(f.per_task[1], 0.0);
        assert!((f.mean - 0.3).abs() < 1e-15);
        let mut flat = EvalLog::uniform(3, 5).unwrap();
        for s in [0, 5, 10, 15] {
            for t in 0..3 {
                flat.push(s, t, 0.2).unwrap();
            }
        }
        assert_eq!(forgetting(&flat).unwrap().mean, 0.0);
    }

    #[test]
    fn boundary_uses_latest_earlier_evaluation() {
        let mut log = EvalLog::uniform(2, 10).unwrap();
        log.push(8, 0, 0.7).unwrap();
        log.push(12, 0, 0.1).unwrap();
        log.push(20, 0, 0.2).unwrap();
        log.push(20, 1, 0.2).unwrap();
        assert!((forgetting(&log).unwrap().per_task[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn ft_examples() {
        // p rises linearly 0 -> 1 over the task: AUC 0.5; reference flat 0.25
        let mut log = EvalLog::uniform(1, 10).unwrap();
        log.push(0, 0, 0.0).unwrap();
        log.push(10, 0, 1.0).unwrap();
        let refs = ReferenceCurves {
            curves: vec![vec![(0, 0.25), (10, 0.25)]],
        };
        let ft = forward_transfer(&log, &refs).unwrap();
        assert!((ft.per_task[0] - 0.5).abs() < 1e-15);
        let same = ReferenceCurves {
            curves: vec![log.curve(0)],
        };
        assert_eq!(forward_transfer(&log, &same).unwrap().mean, 0.0);
    }

    #[test]
    fn ft_sentinel_for_perfect_auc() {
        let mut log = EvalLog::uniform(2, 10).unwrap();
        for s in [0, 10, 20] {
            log.push(s, 0, 1.0).unwrap();
            log.push(s, 1, 0.5).unwrap();
        }
        let refs = ReferenceCurves {
            curves: vec![vec![(0, 0.0), (10, 0.0)], vec![(0, 0.0), (10, 0.0)]],
        };
        let ft = forward_transfer(&log, &refs).unwrap();
        assert!(ft.per_task[0].is_infinite());
        assert_eq!(ft.mean, ft.per_task[1]);
    }

    #[test]
    fn iqm_examples() {
        assert_eq!(iqm(&[1.0, 2.0, 3.0, 4.0]), 2.5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ci = iqm_bootstrap(&[0.3; 8], 1000, &mut rng).unwrap();
        assert_eq!((ci.point, ci.lower, ci.upper), (0.3, 0.3, 0.3));
        assert_eq!(iqm(&[1.0, 2.0]), 1.5);
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 35.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0], &[1.0, 1.0]), None);
        assert_eq!(ranks(&[5.0, 1.0, 5.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn csv_roundtrip() {
        let log = two_task_log(0.123456789, -0.25);
        let text = log.to_csv();
        let back = EvalLog::from_csv(&text, Path::new("x.csv")).unwrap();
        assert_eq!(back, log);
        assert!(EvalLog::from_csv("nope", Path::new("x.csv")).is_err());
    }

    #[test]
    fn performance_is_range_checked() {
        let mut log = EvalLog::uniform(1, 10).unwrap();
        assert!(log.push(0, 0, 1.5).is_err());
        assert!(log.push(0, 3, 0.0).is_err());
    }
}
