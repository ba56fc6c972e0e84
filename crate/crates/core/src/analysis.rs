//! Gate statistics, similarity traces, performance curves and masking ablations.
//!
//! Gate histories are row-major `episodes × hidden` buffers of the
//! reinstatement gate at each episode's retrieval step.

use serde::{Deserialize, Serialize};

use crate::a2c::{evaluate, EpisodeSummary, EvalSpec};
use crate::env::{EnvConfig, Split};
use crate::error::{Error, Result};
use crate::memory::EpisodicStore;
use crate::model::{CellMask, ModelParams};

/// Gate openness threshold for "episodic" neurons.
pub const OPEN_THRESHOLD: f64 = 0.9;
/// Gate openness threshold below which a neuron is "abstract".
pub const CLOSED_THRESHOLD: f64 = 0.1;

fn check_history(history: &[f64], hidden: usize) -> Result<usize> {
    if hidden == 0 || !history.len().is_multiple_of(hidden) {
        return Err(Error::Contract(format!(
            "gate history of {} values is not a whole number of {hidden}-wide rows",
            history.len()
        )));
    }
    Ok(history.len() / hidden)
}

/// Elementwise mean of the last `window` rows.
pub fn compute_r_star(history: &[f64], hidden: usize, window: usize) -> Result<Vec<f64>> {
    let rows = check_history(history, hidden)?;
    if window == 0 || rows < window {
        return Err(Error::Contract(format!(
            "gate history has {rows} episodes, r* needs a window of {window}"
        )));
    }
    let mut out = vec![0.0; hidden];
    for row in history[(rows - window) * hidden..].chunks_exact(hidden) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    let n = window as f64;
    out.iter_mut().for_each(|v| *v /= n);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub fractions: Vec<f64>,
}

/// `k` equal-width bins over [0, 1].
pub fn equal_bins(k: usize) -> Vec<f64> {
    (0..=k).map(|i| i as f64 / k as f64).collect()
}

/// Bins are half-open `[e_i, e_{i+1})` except the last, which is closed.
pub fn openness_histogram(values: &[f64], edges: &[f64]) -> Result<Histogram> {
    if edges.len() < 2 || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("bin edges must be strictly increasing".into()));
    }
    let (lo, hi) = (edges[0], edges[edges.len() - 1]);
    let bins = edges.len() - 1;
    let mut counts = vec![0usize; bins];
    for &v in values {
        if !(lo..=hi).contains(&v) {
            return Err(Error::Contract(format!("value {v} outside the bin range [{lo}, {hi}]")));
        }
        let k = edges[1..].partition_point(|&e| e <= v).min(bins - 1);
        counts[k] += 1;
    }
    let n = values.len().max(1) as f64;
    let fractions = counts.iter().map(|&c| c as f64 / n).collect();
    Ok(Histogram {
        edges: edges.to_vec(),
        counts,
        fractions,
    })
}

/// Fractions of neurons with `r* ≥ 0.9` and with `r* < 0.1`.
pub fn open_closed_fractions(r_star: &[f64]) -> (f64, f64) {
    let n = r_star.len().max(1) as f64;
    let open = r_star.iter().filter(|&&v| v >= OPEN_THRESHOLD).count() as f64;
    let closed = r_star.iter().filter(|&&v| v < CLOSED_THRESHOLD).count() as f64;
    (open / n, closed / n)
}

/// Mean over neurons of the population std of the gate within one window.
pub fn window_mean_std(history: &[f64], hidden: usize, start: usize, window: usize) -> f64 {
    let rows = &history[start * hidden..(start + window) * hidden];
    let n = window as f64;
    let mut mean = vec![0.0; hidden];
    for row in rows.chunks_exact(hidden) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; hidden];
    for row in rows.chunks_exact(hidden) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter().map(|s| (s / n).sqrt()).sum::<f64>() / hidden as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergencePoint {
    /// First episode of the window.
    pub start: usize,
    pub mean_std: f64,
}

/// Sliding-window per-neuron std, averaged over neurons, at every `stride`-th
/// window position. The final window is always included.
pub fn gate_convergence(
    history: &[f64],
    hidden: usize,
    window: usize,
    stride: usize,
) -> Result<Vec<ConvergencePoint>> {
    let rows = check_history(history, hidden)?;
    if window == 0 || stride == 0 {
        return Err(Error::Config("window and stride must be positive".into()));
    }
    if rows < window {
        return Ok(Vec::new());
    }
    let last = rows - window;
    let mut starts: Vec<usize> = (0..=last).step_by(stride).collect();
    if starts.last() != Some(&last) {
        starts.push(last);
    }
    Ok(starts
        .into_iter()
        .map(|start| ConvergencePoint {
            start,
            mean_std: window_mean_std(history, hidden, start, window),
        })
        .collect())
}

/// Last-window over first-window mean gate std.
pub fn convergence_ratio(history: &[f64], hidden: usize, window: usize) -> Result<f64> {
    let rows = check_history(history, hidden)?;
    if window == 0 || rows < window {
        return Err(Error::Contract(format!(
            "gate history has {rows} episodes, convergence needs a window of {window}"
        )));
    }
    let first = window_mean_std(history, hidden, 0, window);
    let last = window_mean_std(history, hidden, rows - window, window);
    Ok(if first == 0.0 { 0.0 } else { last / first })
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// A named set of neuron indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub lo: f64,
    pub hi: f64,
    pub indices: Vec<usize>,
}

/// Neurons grouped by r* into the ten bins `[0, .1), …, [.9, 1]`; empty bins are left out.
pub fn decile_regions(r_star: &[f64]) -> Vec<Region> {
    let edges = equal_bins(10);
    let mut regions: Vec<Region> = edges
        .windows(2)
        .map(|w| Region {
            lo: w[0],
            hi: w[1],
            indices: Vec::new(),
        })
        .collect();
    for (j, &v) in r_star.iter().enumerate() {
        let k = ((v * 10.0).floor() as usize).min(9);
        regions[k].indices.push(j);
    }
    regions.retain(|r| !r.indices.is_empty());
    regions
}

fn restrict(v: &[f64], ix: &[usize]) -> Vec<f64> {
    ix.iter().map(|&j| v[j]).collect()
}

/// Per-region cosine similarity between the cell at `fix_step` and every step.
pub fn cosine_consistency(cells: &[&[f64]], fix_step: usize, regions: &[Region]) -> Result<Vec<Vec<f64>>> {
    let anchor = cells.get(fix_step).ok_or_else(|| {
        Error::Contract(format!("fix step {fix_step} beyond an episode of {} steps", cells.len()))
    })?;
    Ok(regions
        .iter()
        .map(|region| {
            let a = restrict(anchor, &region.indices);
            cells
                .iter()
                .map(|c| cosine(&a, &restrict(c, &region.indices)))
                .collect()
        })
        .collect())
}

/// Running mean of [`cosine_consistency`] traces over episodes of varying length.
#[derive(Debug, Clone)]
pub struct CosineAccumulator {
    regions: Vec<Region>,
    sums: Vec<Vec<f64>>,
    counts: Vec<usize>,
}

impl CosineAccumulator {
    pub fn new(regions: Vec<Region>, max_steps: usize) -> Self {
        CosineAccumulator {
            sums: vec![vec![0.0; max_steps]; regions.len()],
            counts: vec![0; max_steps],
            regions,
        }
    }

    pub fn add(&mut self, cells: &[&[f64]], fix_step: usize) -> Result<()> {
        let traces = cosine_consistency(cells, fix_step, &self.regions)?;
        let len = cells.len().min(self.counts.len());
        for c in &mut self.counts[..len] {
            *c += 1;
        }
        for (sum, trace) in self.sums.iter_mut().zip(traces) {
            for (s, v) in sum.iter_mut().zip(trace) {
                *s += v;
            }
        }
        Ok(())
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    /// Per region, the mean similarity at each step that at least one episode reached.
    pub fn means(&self) -> Vec<Vec<f64>> {
        let len = self.counts.iter().take_while(|&&c| c > 0).count();
        self.sums
            .iter()
            .map(|sum| (0..len).map(|t| sum[t] / self.counts[t] as f64).collect())
            .collect()
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionKind {
    /// Neurons with `r* ≥ θ`.
    Episodic,
    /// Neurons with `r* < θ`.
    Abstract,
}

impl RegionKind {
    pub fn name(self) -> &'static str {
        match self {
            RegionKind::Episodic => "episodic",
            RegionKind::Abstract => "abstract",
        }
    }

    pub fn indices(self, r_star: &[f64], theta: f64) -> Vec<usize> {
        (0..r_star.len())
            .filter(|&j| (r_star[j] >= theta) == (self == RegionKind::Episodic))
            .collect()
    }

    pub fn mask(self, r_star: &[f64], theta: f64) -> Result<CellMask> {
        CellMask::new(self.indices(r_star, theta), r_star.len())
    }
}

impl std::str::FromStr for RegionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "episodic" => Ok(RegionKind::Episodic),
            "abstract" => Ok(RegionKind::Abstract),
            other => Err(Error::Config(format!("unknown region {other:?}"))),
        }
    }
}

/// θ grid 0.0, 0.1, …, 1.0.
pub fn theta_grid() -> Vec<f64> {
    (0..=10).map(|k| k as f64 / 10.0).collect()
}

/// Headline metrics of an evaluation sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub episodes: usize,
    pub mean_steps_to_fixation: f64,
    /// First-trial accuracy over episodes whose task occurred before.
    pub first_trial_accuracy: f64,
    pub repeat_episodes: usize,
    /// Mean accuracy over trials 2 to the last.
    pub later_trial_accuracy: f64,
    pub mean_reward: f64,
}

pub fn eval_metrics(summaries: &[EpisodeSummary]) -> EvalMetrics {
    let n = summaries.len().max(1) as f64;
    let repeats: Vec<&EpisodeSummary> = summaries.iter().filter(|s| s.exposure_count >= 1).collect();
    let first_trial_accuracy = if repeats.is_empty() {
        0.0
    } else {
        repeats.iter().map(|s| s.trial_accuracy(0)).sum::<f64>() / repeats.len() as f64
    };
    let mut later = 0.0;
    let mut later_n = 0usize;
    for s in summaries {
        for k in 1..s.choices.len() {
            later += s.trial_accuracy(k);
            later_n += 1;
        }
    }
    EvalMetrics {
        episodes: summaries.len(),
        mean_steps_to_fixation: summaries.iter().map(|s| s.steps_to_first_fixation() as f64).sum::<f64>() / n,
        first_trial_accuracy,
        repeat_episodes: repeats.len(),
        later_trial_accuracy: if later_n == 0 { 0.0 } else { later / later_n as f64 },
        mean_reward: summaries.iter().map(|s| s.total_reward).sum::<f64>() / n,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub theta: f64,
    pub region: RegionKind,
    pub dropped_count: usize,
    pub mean_steps_to_fixation: f64,
    pub first_trial_accuracy: f64,
}

/// Evaluation settings shared by every θ of an ablation sweep.
#[derive(Debug, Clone, Copy)]
pub struct AblationSpec {
    pub episodes: usize,
    pub split: Split,
    pub seed: u64,
}

/// For each θ, evaluates with the region's neurons zeroed every step. Each
/// evaluation starts from a copy of `memory` and uses the same eval seed.
pub fn masking_ablation(
    env: &EnvConfig,
    params: &ModelParams,
    memory: &EpisodicStore,
    r_star: &[f64],
    thetas: &[f64],
    region: RegionKind,
    spec: AblationSpec,
) -> Result<Vec<AblationResult>> {
    thetas
        .iter()
        .map(|&theta| {
            let mask = region.mask(r_star, theta)?;
            let mut mem = memory.clone();
            let summaries = evaluate(
                env,
                params,
                &mut mem,
                EvalSpec {
                    episodes: spec.episodes,
                    split: spec.split,
                    seed: spec.seed,
                    mask: Some(&mask),
                    retrieval_enabled: true,
                },
                |_, _| {},
            )?;
            let m = eval_metrics(&summaries);
            Ok(AblationResult {
                theta,
                region,
                dropped_count: mask.len(),
                mean_steps_to_fixation: m.mean_steps_to_fixation,
                first_trial_accuracy: m.first_trial_accuracy,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    /// Exposure count, or quantile index.
    pub group: usize,
    pub episodes: usize,
    /// Mean accuracy per trial.
    pub accuracy: Vec<f64>,
}

fn mean_accuracy<'a>(rows: impl Iterator<Item = &'a EpisodeSummary>, trials: usize) -> (usize, Vec<f64>) {
    let mut acc = vec![0.0; trials];
    let mut n = 0;
    for s in rows {
        n += 1;
        for (k, a) in acc.iter_mut().enumerate() {
            *a += s.trial_accuracy(k);
        }
    }
    if n > 0 {
        acc.iter_mut().for_each(|a| *a /= n as f64);
    }
    (n, acc)
}

/// Per-trial accuracy grouped by exposure count; exposures at or above
/// `cap` share the last group.
pub fn exposure_curve(log: &[EpisodeSummary], trials: usize, cap: usize) -> Vec<CurveRow> {
    (0..=cap)
        .filter_map(|g| {
            let (n, accuracy) = mean_accuracy(
                log.iter().filter(|s| s.exposure_count.min(cap) == g),
                trials,
            );
            (n > 0).then_some(CurveRow {
                group: g,
                episodes: n,
                accuracy,
            })
        })
        .collect()
}

/// Per-trial accuracy over `quantiles` contiguous, near-equal blocks of episodes.
pub fn training_quantile_curve(log: &[EpisodeSummary], trials: usize, quantiles: usize) -> Vec<CurveRow> {
    let n = log.len();
    (0..quantiles)
        .map(|q| {
            let (a, b) = (q * n / quantiles, (q + 1) * n / quantiles);
            let (count, accuracy) = mean_accuracy(log[a..b].iter(), trials);
            CurveRow {
                group: q,
                episodes: count,
                accuracy,
            }
        })
        .collect()
}
