//! Experiment configuration and the train / eval / analyze drivers.
//!
//! Configuration files are flat `key = value` text. Every key can also be
//! overridden through an environment variable named `EPH_` followed by the
//! key in upper case with dots replaced by underscores (`train.lr` becomes
//! `EPH_TRAIN_LR`). Each run directory receives the effective configuration
//! as `config.txt`, which reloads to the identical configuration.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::a2c::{
    evaluate, rank_seeds, score_run, train_run, EpisodeSummary, EvalSpec, SeedScore, TrainConfig,
};
use crate::analysis::{
    compute_r_star, convergence_ratio, decile_regions, equal_bins, eval_metrics, exposure_curve,
    gate_convergence, masking_ablation, open_closed_fractions, openness_histogram, theta_grid,
    training_quantile_curve, AblationResult, AblationSpec, ConvergencePoint, CosineAccumulator,
    CurveRow, EvalMetrics, Histogram, Region, RegionKind,
};
use crate::env::{EnvConfig, ObsEncoding, Split};
use crate::error::{Error, Result};
use crate::io;
use crate::memory::{EpisodicStore, StorageReport};
use crate::model::{CellMask, ModelConfig, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Full-size settings.
    Default,
    /// 64 hidden units on the full object set; a single run takes minutes.
    Reduced,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(Profile::Default),
            "reduced" => Ok(Profile::Reduced),
            other => Err(Error::Config(format!("unknown profile {other:?}"))),
        }
    }
}

/// Settings for the analysis pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    /// Seed of the fixed evaluation streams.
    pub eval_seed: u64,
    pub ablation_episodes: usize,
    pub cosine_episodes: usize,
    /// Neurons with r* at or above this are kept by the sparse store.
    pub sparse_threshold: f64,
    pub histogram_bins: usize,
    pub convergence_stride: usize,
    pub quantiles: usize,
    /// Exposure counts at or above this share one group in the exposure curve.
    pub exposure_cap: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            eval_seed: 9_001,
            ablation_episodes: 1_000,
            cosine_episodes: 1_000,
            sparse_threshold: 0.1,
            histogram_bins: 10,
            convergence_stride: 100,
            quantiles: 4,
            exposure_cap: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub analysis: AnalysisConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::profile(Profile::Default)
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_encoding(value: &str) -> Result<ObsEncoding> {
    if value == "one_hot" {
        return Ok(ObsEncoding::OneHot);
    }
    match value.strip_prefix("code:") {
        Some(dim) => Ok(ObsEncoding::Code {
            dim: parse("env.encoding", dim)?,
        }),
        None => Err(Error::Config(format!(
            "env.encoding: expected one_hot or code:<dim>, got {value:?}"
        ))),
    }
}

fn format_encoding(e: ObsEncoding) -> String {
    match e {
        ObsEncoding::OneHot => "one_hot".into(),
        ObsEncoding::Code { dim } => format!("code:{dim}"),
    }
}

impl ExperimentConfig {
    pub fn profile(profile: Profile) -> Self {
        let env = EnvConfig::default();
        let mut c = ExperimentConfig {
            model: ModelConfig {
                obs_width: env.obs_width(),
                ..ModelConfig::default()
            },
            env,
            train: TrainConfig::default(),
            analysis: AnalysisConfig::default(),
        };
        if profile == Profile::Reduced {
            c.model.hidden = 64;
            c.train.episodes_train = 50_000;
        }
        c.sync();
        c
    }

    /// Keeps derived fields in step with the settings they depend on.
    fn sync(&mut self) {
        self.model.obs_width = self.env.obs_width();
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        let a = &self.analysis;
        if a.histogram_bins == 0 || a.convergence_stride == 0 || a.quantiles == 0 {
            return Err(Error::Config(
                "analysis bins, stride and quantiles must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&a.sparse_threshold) {
            return Err(Error::Config("analysis.sparse_threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (e, m, t, a) = (&self.env, &self.model, &self.train, &self.analysis);
        vec![
            ("env.world_size", e.world_size.to_string()),
            ("env.field_size", e.field_size.to_string()),
            ("env.center", e.center.to_string()),
            ("env.trials", e.trials.to_string()),
            ("env.step_cap", e.step_cap.to_string()),
            ("env.num_objects", e.num_objects.to_string()),
            ("env.train_objects", e.train_objects.to_string()),
            ("env.reward_correct", e.reward_correct.to_string()),
            ("env.reward_wrong", e.reward_wrong.to_string()),
            ("env.reward_fixation", e.reward_fixation.to_string()),
            ("env.object_slots", format!("{},{}", e.object_slots[0], e.object_slots[1])),
            ("env.shuffle_sides", e.shuffle_sides.to_string()),
            ("env.context_dim", e.context_dim.to_string()),
            ("env.encoding", format_encoding(e.encoding)),
            ("model.encoder_hidden", m.encoder_hidden.to_string()),
            ("model.features", m.features.to_string()),
            ("model.hidden", m.hidden.to_string()),
            ("train.episodes", t.episodes_train.to_string()),
            ("train.test_episodes", t.episodes_test.to_string()),
            ("train.gamma", t.gamma.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.rms_alpha", t.rms_alpha.to_string()),
            ("train.rms_eps", t.rms_eps.to_string()),
            ("train.value_coef", t.value_coef.to_string()),
            ("train.entropy_start", t.entropy_start.to_string()),
            ("train.entropy_end", t.entropy_end.to_string()),
            ("train.grad_clip_norm", t.grad_clip_norm.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.filter_episodes", t.filter_episodes.to_string()),
            ("train.filter_top", t.filter_top.to_string()),
            (
                "train.filter_reward_threshold",
                t.filter_reward_threshold.map_or("none".into(), |v| v.to_string()),
            ),
            ("train.r_star_window", t.r_star_window.to_string()),
            ("analysis.eval_seed", a.eval_seed.to_string()),
            ("analysis.ablation_episodes", a.ablation_episodes.to_string()),
            ("analysis.cosine_episodes", a.cosine_episodes.to_string()),
            ("analysis.sparse_threshold", a.sparse_threshold.to_string()),
            ("analysis.histogram_bins", a.histogram_bins.to_string()),
            ("analysis.convergence_stride", a.convergence_stride.to_string()),
            ("analysis.quantiles", a.quantiles.to_string()),
            ("analysis.exposure_cap", a.exposure_cap.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let (e, m, t, a) = (&mut self.env, &mut self.model, &mut self.train, &mut self.analysis);
        match key {
            "env.world_size" => e.world_size = parse(key, v)?,
            "env.field_size" => e.field_size = parse(key, v)?,
            "env.center" => e.center = parse(key, v)?,
            "env.trials" => e.trials = parse(key, v)?,
            "env.step_cap" => e.step_cap = parse(key, v)?,
            "env.num_objects" => e.num_objects = parse(key, v)?,
            "env.train_objects" => e.train_objects = parse(key, v)?,
            "env.reward_correct" => e.reward_correct = parse(key, v)?,
            "env.reward_wrong" => e.reward_wrong = parse(key, v)?,
            "env.reward_fixation" => e.reward_fixation = parse(key, v)?,
            "env.object_slots" => {
                let parts: Vec<&str> = v.split(',').map(str::trim).collect();
                if parts.len() != 2 {
                    return Err(Error::Config(format!("{key}: expected two comma-separated indices")));
                }
                e.object_slots = [parse(key, parts[0])?, parse(key, parts[1])?];
            }
            "env.shuffle_sides" => e.shuffle_sides = parse(key, v)?,
            "env.context_dim" => e.context_dim = parse(key, v)?,
            "env.encoding" => e.encoding = parse_encoding(v)?,
            "model.encoder_hidden" => m.encoder_hidden = parse(key, v)?,
            "model.features" => m.features = parse(key, v)?,
            "model.hidden" => m.hidden = parse(key, v)?,
            "train.episodes" => t.episodes_train = parse(key, v)?,
            "train.test_episodes" => t.episodes_test = parse(key, v)?,
            "train.gamma" => t.gamma = parse(key, v)?,
            "train.lr" => t.lr = parse(key, v)?,
            "train.rms_alpha" => t.rms_alpha = parse(key, v)?,
            "train.rms_eps" => t.rms_eps = parse(key, v)?,
            "train.value_coef" => t.value_coef = parse(key, v)?,
            "train.entropy_start" => t.entropy_start = parse(key, v)?,
            "train.entropy_end" => t.entropy_end = parse(key, v)?,
            "train.grad_clip_norm" => t.grad_clip_norm = parse(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            "train.filter_episodes" => t.filter_episodes = parse(key, v)?,
            "train.filter_top" => t.filter_top = parse(key, v)?,
            "train.filter_reward_threshold" => {
                t.filter_reward_threshold = if v == "none" { None } else { Some(parse(key, v)?) }
            }
            "train.r_star_window" => t.r_star_window = parse(key, v)?,
            "analysis.eval_seed" => a.eval_seed = parse(key, v)?,
            "analysis.ablation_episodes" => a.ablation_episodes = parse(key, v)?,
            "analysis.cosine_episodes" => a.cosine_episodes = parse(key, v)?,
            "analysis.sparse_threshold" => a.sparse_threshold = parse(key, v)?,
            "analysis.histogram_bins" => a.histogram_bins = parse(key, v)?,
            "analysis.convergence_stride" => a.convergence_stride = parse(key, v)?,
            "analysis.quantiles" => a.quantiles = parse(key, v)?,
            "analysis.exposure_cap" => a.exposure_cap = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown configuration key {other:?}"))),
        }
        self.sync();
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment. A `profile` line, if
    /// present, selects the base settings the other lines modify.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let profile = match pairs.iter().rev().find(|(k, _)| k == "profile") {
            Some((_, v)) => v.parse()?,
            None => Profile::Default,
        };
        let mut c = Self::profile(profile);
        for (k, v) in pairs.iter().filter(|(k, _)| k != "profile") {
            c.set(k, v)?;
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_text(&fs::read_to_string(path)?)
    }

    /// Environment variable name for a key.
    pub fn env_var_name(key: &str) -> String {
        format!("EPH_{}", key.to_ascii_uppercase().replace('.', "_"))
    }

    /// Applies overrides from `lookup`, which maps an `EPH_*` name to its value.
    pub fn apply_overrides(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<Vec<String>> {
        let mut applied = Vec::new();
        let keys: Vec<&str> = self.entries().iter().map(|(k, _)| *k).collect();
        for key in keys {
            if let Some(v) = lookup(&Self::env_var_name(key)) {
                self.set(key, &v)?;
                applied.push(key.to_string());
            }
        }
        Ok(applied)
    }

    pub fn apply_env_overrides(&mut self) -> Result<Vec<String>> {
        self.apply_overrides(|name| std::env::var(name).ok())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    /// Equal apart from the training seed.
    pub fn compatible(&self, other: &Self) -> bool {
        let mut a = self.clone();
        a.train.seed = other.train.seed;
        &a == other
    }
}

/// Files inside one run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunPaths { root: root.into() }
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.txt")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("checkpoint.json")
    }
    pub fn memory(&self) -> PathBuf {
        self.root.join("memory.json")
    }
    pub fn gates(&self) -> PathBuf {
        self.root.join("gates.json")
    }
    pub fn train_log(&self) -> PathBuf {
        self.root.join("train_log.csv")
    }
    pub fn run_info(&self) -> PathBuf {
        self.root.join("run.json")
    }
    pub fn eval_log(&self, mask: Option<&MaskSpec>) -> PathBuf {
        match mask {
            None => self.root.join("eval_log.csv"),
            Some(m) => self.root.join(format!("eval_log_{}_{}.csv", m.region.name(), m.theta)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub seed: u64,
    pub episodes: usize,
    pub skipped_updates: usize,
    pub first_block_mean_reward: f64,
    pub last_block_mean_reward: f64,
}

/// A loaded, completed run.
#[derive(Debug, Clone)]
pub struct Run {
    pub name: String,
    pub paths: RunPaths,
    pub config: ExperimentConfig,
    pub params: ModelParams,
    pub memory: EpisodicStore,
}

impl Run {
    pub fn load(dir: &Path) -> Result<Run> {
        let paths = RunPaths::new(dir);
        let ckpt = paths.checkpoint();
        if !ckpt.exists() {
            return Err(Error::Config(format!("no checkpoint in {}", dir.display())));
        }
        let config = ExperimentConfig::load(&paths.config())?;
        let (params, _) = io::load_checkpoint(&ckpt)?;
        if params.config() != &config.model {
            return Err(Error::Format(format!(
                "checkpoint in {} does not match its config.txt",
                dir.display()
            )));
        }
        let memory = io::load_memory(&paths.memory())?;
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        Ok(Run {
            name,
            paths,
            config,
            params,
            memory,
        })
    }

    pub fn gate_history(&self) -> Result<Vec<f64>> {
        let (h, width) = io::load_gate_history(&self.paths.gates())?;
        if width != self.config.model.hidden {
            return Err(Error::Format("gate history width does not match the model".into()));
        }
        Ok(h)
    }

    pub fn r_star(&self) -> Result<Vec<f64>> {
        compute_r_star(&self.gate_history()?, self.config.model.hidden, self.config.train.r_star_window)
    }
}

fn block_mean(log: &[EpisodeSummary], first: bool) -> f64 {
    let n = log.len().min(1_000);
    if n == 0 {
        return 0.0;
    }
    let block = if first { &log[..n] } else { &log[log.len() - n..] };
    block.iter().map(|s| s.total_reward).sum::<f64>() / n as f64
}

/// Trains one seed and writes a complete run directory. Output goes to a
/// sibling staging directory first, so a failed run leaves nothing behind.
pub fn train_to_dir(config: &ExperimentConfig, seed: u64, out: &Path) -> Result<RunInfo> {
    let mut config = config.clone();
    config.train.seed = seed;
    config.validate()?;
    let staging = staging_dir(out);
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    fs::create_dir_all(&staging)?;
    let result = (|| {
        let outcome = train_run(&config.env, &config.model, &config.train)?;
        let paths = RunPaths::new(&staging);
        fs::write(paths.config(), config.to_text())?;
        io::save_checkpoint(&paths.checkpoint(), &outcome.params, seed, config.train.episodes_train)?;
        io::save_memory(&paths.memory(), &outcome.memory)?;
        io::save_gate_history(&paths.gates(), &outcome.gate_history, config.model.hidden, seed)?;
        io::write_episode_log(&paths.train_log(), &outcome.log)?;
        let info = RunInfo {
            seed,
            episodes: outcome.log.len(),
            skipped_updates: outcome.skipped_updates,
            first_block_mean_reward: block_mean(&outcome.log, true),
            last_block_mean_reward: block_mean(&outcome.log, false),
        };
        io::write_json_file(&paths.run_info(), &info)?;
        Ok(info)
    })();
    match result {
        Ok(info) => {
            if out.exists() {
                fs::remove_dir_all(out)?;
            }
            fs::rename(&staging, out)?;
            Ok(info)
        }
        Err(e) => {
            let _ = fs::remove_dir_all(&staging);
            Err(e)
        }
    }
}

fn staging_dir(out: &Path) -> PathBuf {
    let name = out
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    out.with_file_name(format!(".{name}.partial"))
}

/// Runs `work` over `items` on up to `jobs` threads, keeping input order.
pub fn run_parallel<T: Sync, R: Send>(
    items: &[T],
    jobs: usize,
    work: impl Fn(&T) -> R + Sync,
) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                if k >= items.len() {
                    break;
                }
                let r = work(&items[k]);
                results.lock().expect("worker panicked")[k] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every item processed"))
        .collect()
}

/// Parses `a..b` (exclusive), `a..=b` or a single seed.
pub fn parse_seed_range(s: &str) -> Result<Vec<u64>> {
    let bad = || Error::Config(format!("bad seed range {s:?}; expected a..b, a..=b or n"));
    if let Some((a, b)) = s.split_once("..=") {
        let (a, b): (u64, u64) = (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
        return if a <= b { Ok((a..=b).collect()) } else { Err(bad()) };
    }
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (u64, u64) = (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
        return if a < b { Ok((a..b).collect()) } else { Err(bad()) };
    }
    Ok(vec![s.parse().map_err(|_| bad())?])
}

/// Trains every seed into `root/seed-<n>`.
pub fn train_seeds(config: &ExperimentConfig, seeds: &[u64], root: &Path, jobs: usize) -> Result<Vec<RunInfo>> {
    fs::create_dir_all(root)?;
    run_parallel(seeds, jobs, |&seed| {
        let dir = root.join(format!("seed-{seed}"));
        info!("training seed {seed} into {}", dir.display());
        train_to_dir(config, seed, &dir)
    })
    .into_iter()
    .collect()
}

/// `REGION:THETA`, e.g. `episodic:0.9`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub region: RegionKind,
    pub theta: f64,
}

impl FromStr for MaskSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (region, theta) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("mask {s:?}: expected REGION:THETA")))?;
        let theta: f64 = parse("mask", theta)?;
        if !(0.0..=1.0).contains(&theta) {
            return Err(Error::Config(format!("mask threshold {theta} outside [0, 1]")));
        }
        Ok(MaskSpec {
            region: region.parse()?,
            theta,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mask: Option<MaskSpec>,
    pub dropped: usize,
    pub metrics: EvalMetrics,
    pub log: PathBuf,
}

/// Evaluates a run on the test split and writes its per-trial log.
pub fn eval_run(dir: &Path, episodes: usize, mask: Option<MaskSpec>) -> Result<EvalReport> {
    let run = Run::load(dir)?;
    let cell_mask = match mask {
        Some(m) => Some(m.region.mask(&run.r_star()?, m.theta)?),
        None => None,
    };
    let mut memory = run.memory.clone();
    let summaries = evaluate(
        &run.config.env,
        &run.params,
        &mut memory,
        EvalSpec {
            episodes,
            split: Split::Test,
            seed: run.config.analysis.eval_seed,
            mask: cell_mask.as_ref(),
            retrieval_enabled: true,
        },
        |_, _| {},
    )?;
    let log = run.paths.eval_log(mask.as_ref());
    io::write_episode_log(&log, &summaries)?;
    Ok(EvalReport {
        mask,
        dropped: cell_mask.as_ref().map_or(0, CellMask::len),
        metrics: eval_metrics(&summaries),
        log,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseReport {
    pub threshold: f64,
    pub kept: usize,
    pub storage: StorageReport,
    pub dense_first_trial_accuracy: f64,
    pub sparse_first_trial_accuracy: f64,
}

/// Everything the analysis derives from one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub name: String,
    pub seed: u64,
    pub r_star: Vec<f64>,
    pub open_fraction: f64,
    pub closed_fraction: f64,
    pub histogram: Histogram,
    pub convergence: Vec<ConvergencePoint>,
    pub convergence_ratio: f64,
    pub training_quantiles: Vec<CurveRow>,
    pub exposure: Vec<CurveRow>,
    pub test: EvalMetrics,
    pub cosine_regions: Vec<Region>,
    pub cosine: Vec<Vec<f64>>,
    pub ablation: Vec<AblationResult>,
    pub sparse: SparseReport,
}

impl AnalysisReport {
    fn ablation_at(&self, region: RegionKind, theta: f64) -> Option<&AblationResult> {
        self.ablation
            .iter()
            .find(|a| a.region == region && (a.theta - theta).abs() < 1e-9)
    }

    /// Drop in repeat-task first-trial accuracy when episodic neurons at θ are masked.
    pub fn episodic_regression(&self, theta: f64) -> Option<f64> {
        self.ablation_at(RegionKind::Episodic, theta)
            .map(|a| self.test.first_trial_accuracy - a.first_trial_accuracy)
    }

    /// Relative change in mean steps to fixation when episodic neurons at θ are masked.
    pub fn episodic_steps_change(&self, theta: f64) -> Option<f64> {
        self.ablation_at(RegionKind::Episodic, theta).map(|a| {
            (a.mean_steps_to_fixation - self.test.mean_steps_to_fixation) / self.test.mean_steps_to_fixation
        })
    }
}

/// Runs the full analysis for one run.
pub fn analyze_run(run: &Run) -> Result<AnalysisReport> {
    let c = &run.config;
    let hidden = c.model.hidden;
    let history = run.gate_history()?;
    let r_star = compute_r_star(&history, hidden, c.train.r_star_window)?;
    let (open_fraction, closed_fraction) = open_closed_fractions(&r_star);
    let histogram = openness_histogram(&r_star, &equal_bins(c.analysis.histogram_bins))?;
    let convergence = gate_convergence(&history, hidden, c.train.r_star_window, c.analysis.convergence_stride)?;
    let convergence_ratio = convergence_ratio(&history, hidden, c.train.r_star_window)?;
    let train_log = io::read_episode_log(&run.paths.train_log())?;
    let training_quantiles = training_quantile_curve(&train_log, c.env.trials, c.analysis.quantiles);

    let spec = |episodes| EvalSpec {
        episodes,
        split: Split::Test,
        seed: c.analysis.eval_seed,
        mask: None,
        retrieval_enabled: true,
    };
    let regions = decile_regions(&r_star);
    let mut cos = CosineAccumulator::new(regions, c.env.step_cap);
    let mut cos_left = c.analysis.cosine_episodes;
    let mut cos_err = None;
    let mut memory = run.memory.clone();
    let test_log = evaluate(&c.env, &run.params, &mut memory, spec(c.train.episodes_test), |_, trace| {
        if cos_left == 0 || cos_err.is_some() {
            return;
        }
        if let Some(fix) = trace.retrieval_index {
            let cells: Vec<&[f64]> = trace.steps.iter().map(|s| s.c.as_slice()).collect();
            if let Err(e) = cos.add(&cells, fix) {
                cos_err = Some(e);
            }
            cos_left -= 1;
        }
    })?;
    if let Some(e) = cos_err {
        return Err(e);
    }
    let test = eval_metrics(&test_log);
    let exposure = exposure_curve(&test_log, c.env.trials, c.analysis.exposure_cap);

    let ab_spec = AblationSpec {
        episodes: c.analysis.ablation_episodes,
        split: Split::Test,
        seed: c.analysis.eval_seed,
    };
    let thetas = theta_grid();
    let mut ablation = masking_ablation(&c.env, &run.params, &run.memory, &r_star, &thetas, RegionKind::Episodic, ab_spec)?;
    ablation.extend(masking_ablation(&c.env, &run.params, &run.memory, &r_star, &thetas, RegionKind::Abstract, ab_spec)?);

    let kept: Vec<usize> = RegionKind::Episodic.indices(&r_star, c.analysis.sparse_threshold);
    let sparse_store = run.memory.to_sparse(kept.clone())?;
    let storage = sparse_store.storage_report();
    let mut sparse_eval_store = sparse_store.clone();
    let sparse_log = evaluate(&c.env, &run.params, &mut sparse_eval_store, spec(c.train.episodes_test), |_, _| {})?;
    let sparse = SparseReport {
        threshold: c.analysis.sparse_threshold,
        kept: kept.len(),
        storage,
        dense_first_trial_accuracy: test.first_trial_accuracy,
        sparse_first_trial_accuracy: eval_metrics(&sparse_log).first_trial_accuracy,
    };

    Ok(AnalysisReport {
        name: run.name.clone(),
        seed: c.train.seed,
        r_star,
        open_fraction,
        closed_fraction,
        histogram,
        convergence,
        convergence_ratio,
        training_quantiles,
        exposure,
        test,
        cosine_regions: cos.regions().to_vec(),
        cosine: cos.means(),
        ablation,
        sparse,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> MeanStd {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeadline {
    pub name: String,
    pub seed: u64,
    pub open_fraction: f64,
    pub closed_fraction: f64,
    pub convergence_ratio: f64,
    pub test_first_trial_accuracy: f64,
    pub test_later_trial_accuracy: f64,
    pub test_mean_steps_to_fixation: f64,
    pub theta_09_regression: Option<f64>,
    pub theta_09_steps_change: Option<f64>,
    pub storage_savings: f64,
    pub sparse_kept: usize,
    pub sparse_first_trial_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledHeadline {
    pub singleton: bool,
    pub runs: usize,
    pub open_fraction: MeanStd,
    pub closed_fraction: MeanStd,
    pub convergence_ratio: MeanStd,
    pub test_first_trial_accuracy: MeanStd,
    pub test_later_trial_accuracy: MeanStd,
    pub theta_09_regression: MeanStd,
    pub theta_09_steps_change: MeanStd,
    pub storage_savings: MeanStd,
    pub sparse_first_trial_accuracy: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub applied: bool,
    pub episodes: usize,
    pub scores: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub runs_supplied: usize,
    pub accepted: Vec<String>,
    pub filter: FilterReport,
    pub runs: Vec<RunHeadline>,
    pub pooled: PooledHeadline,
}

fn headline(r: &AnalysisReport) -> RunHeadline {
    RunHeadline {
        name: r.name.clone(),
        seed: r.seed,
        open_fraction: r.open_fraction,
        closed_fraction: r.closed_fraction,
        convergence_ratio: r.convergence_ratio,
        test_first_trial_accuracy: r.test.first_trial_accuracy,
        test_later_trial_accuracy: r.test.later_trial_accuracy,
        test_mean_steps_to_fixation: r.test.mean_steps_to_fixation,
        theta_09_regression: r.episodic_regression(0.9),
        theta_09_steps_change: r.episodic_steps_change(0.9),
        storage_savings: r.sparse.storage.savings_fraction,
        sparse_kept: r.sparse.kept,
        sparse_first_trial_accuracy: r.sparse.sparse_first_trial_accuracy,
    }
}

fn pooled(runs: &[RunHeadline]) -> PooledHeadline {
    let col = |f: &dyn Fn(&RunHeadline) -> Option<f64>| MeanStd::of(&runs.iter().filter_map(f).collect::<Vec<_>>());
    PooledHeadline {
        singleton: runs.len() == 1,
        runs: runs.len(),
        open_fraction: col(&|r| Some(r.open_fraction)),
        closed_fraction: col(&|r| Some(r.closed_fraction)),
        convergence_ratio: col(&|r| Some(r.convergence_ratio)),
        test_first_trial_accuracy: col(&|r| Some(r.test_first_trial_accuracy)),
        test_later_trial_accuracy: col(&|r| Some(r.test_later_trial_accuracy)),
        theta_09_regression: col(&|r| r.theta_09_regression),
        theta_09_steps_change: col(&|r| r.theta_09_steps_change),
        storage_savings: col(&|r| Some(r.storage_savings)),
        sparse_first_trial_accuracy: col(&|r| Some(r.sparse_first_trial_accuracy)),
    }
}

/// Keeps the best `filter_top` runs by mean reward when more were supplied.
pub fn filter_runs(runs: Vec<Run>) -> Result<(Vec<Run>, FilterReport)> {
    let Some(first) = runs.first() else {
        return Err(Error::Config("no runs to analyze".into()));
    };
    let t = first.config.train.clone();
    let eval_seed = first.config.analysis.eval_seed;
    if runs.len() <= t.filter_top {
        return Ok((
            runs,
            FilterReport {
                applied: false,
                episodes: 0,
                scores: Vec::new(),
            },
        ));
    }
    let mut scores = Vec::with_capacity(runs.len());
    for (index, run) in runs.iter().enumerate() {
        let mean_reward = score_run(&run.config.env, &run.params, &run.memory, t.filter_episodes, eval_seed)?;
        scores.push(SeedScore {
            index,
            seed: run.config.train.seed,
            mean_reward,
        });
    }
    let report_scores = scores.iter().map(|s| (runs[s.index].name.clone(), s.mean_reward)).collect();
    let kept = rank_seeds(scores, t.filter_top, t.filter_reward_threshold);
    let mut keep: Vec<usize> = kept.iter().map(|s| s.index).collect();
    keep.sort_unstable();
    let runs = runs
        .into_iter()
        .enumerate()
        .filter(|(i, _)| keep.binary_search(i).is_ok())
        .map(|(_, r)| r)
        .collect();
    Ok((
        runs,
        FilterReport {
            applied: true,
            episodes: t.filter_episodes,
            scores: report_scores,
        },
    ))
}

#[derive(Serialize)]
struct CurveCsv<'a> {
    run: &'a str,
    group: usize,
    trial: usize,
    accuracy: f64,
    episodes: usize,
}

#[derive(Serialize)]
struct Fig2aCsv<'a> {
    run: &'a str,
    start_episode: usize,
    mean_std: f64,
}

#[derive(Serialize)]
struct Fig2bCsv<'a> {
    run: &'a str,
    bin_lo: f64,
    bin_hi: f64,
    count: usize,
    fraction: f64,
}

#[derive(Serialize)]
struct Fig2cCsv<'a> {
    run: &'a str,
    region_lo: f64,
    region_hi: f64,
    neurons: usize,
    step: usize,
    similarity: f64,
}

#[derive(Serialize)]
struct Fig3Csv<'a> {
    run: &'a str,
    region: &'static str,
    theta: f64,
    dropped_count: usize,
    value: f64,
}

const POOLED: &str = "pooled";

fn curve_rows<'a>(name: &'a str, rows: &[CurveRow]) -> Vec<CurveCsv<'a>> {
    rows.iter()
        .flat_map(|r| {
            r.accuracy.iter().enumerate().map(move |(k, &a)| CurveCsv {
                run: name,
                group: r.group,
                trial: k + 1,
                accuracy: a,
                episodes: r.episodes,
            })
        })
        .collect()
}

/// Mean over runs of curve rows keyed by (group, trial).
fn pool_curves(per_run: &[&[CurveRow]]) -> Vec<CurveCsv<'static>> {
    let mut acc: BTreeMap<(usize, usize), (f64, usize, usize)> = BTreeMap::new();
    for rows in per_run {
        for r in rows.iter() {
            for (k, &a) in r.accuracy.iter().enumerate() {
                let e = acc.entry((r.group, k + 1)).or_insert((0.0, 0, 0));
                e.0 += a;
                e.1 += 1;
                e.2 += r.episodes;
            }
        }
    }
    acc.into_iter()
        .map(|((group, trial), (sum, n, episodes))| CurveCsv {
            run: POOLED,
            group,
            trial,
            accuracy: sum / n as f64,
            episodes,
        })
        .collect()
}

fn write_figures(out: &Path, reports: &[AnalysisReport]) -> Result<()> {
    let multi = reports.len() > 1;
    let renamed = |header: &str, rows: Vec<CurveCsv>, path: PathBuf| -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["run", header, "trial", "accuracy", "episodes"])?;
        for r in rows {
            w.write_record([
                r.run.to_string(),
                r.group.to_string(),
                r.trial.to_string(),
                r.accuracy.to_string(),
                r.episodes.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    };

    let mut rows = Vec::new();
    for r in reports {
        rows.extend(curve_rows(&r.name, &r.training_quantiles));
    }
    if multi {
        let per: Vec<&[CurveRow]> = reports.iter().map(|r| r.training_quantiles.as_slice()).collect();
        rows.extend(pool_curves(&per));
    }
    renamed("quantile", rows, out.join("fig1d.csv"))?;

    let mut rows = Vec::new();
    for r in reports {
        rows.extend(curve_rows(&r.name, &r.exposure));
    }
    if multi {
        let per: Vec<&[CurveRow]> = reports.iter().map(|r| r.exposure.as_slice()).collect();
        rows.extend(pool_curves(&per));
    }
    renamed("exposure", rows, out.join("fig1e.csv"))?;

    io::write_csv(
        &out.join("fig2a.csv"),
        reports.iter().flat_map(|r| {
            r.convergence.iter().map(move |p| Fig2aCsv {
                run: &r.name,
                start_episode: p.start,
                mean_std: p.mean_std,
            })
        }),
    )?;

    let mut rows: Vec<Fig2bCsv> = Vec::new();
    for r in reports {
        let h = &r.histogram;
        for k in 0..h.counts.len() {
            rows.push(Fig2bCsv {
                run: &r.name,
                bin_lo: h.edges[k],
                bin_hi: h.edges[k + 1],
                count: h.counts[k],
                fraction: h.fractions[k],
            });
        }
    }
    if multi {
        let h0 = &reports[0].histogram;
        for k in 0..h0.counts.len() {
            rows.push(Fig2bCsv {
                run: POOLED,
                bin_lo: h0.edges[k],
                bin_hi: h0.edges[k + 1],
                count: reports.iter().map(|r| r.histogram.counts[k]).sum(),
                fraction: reports.iter().map(|r| r.histogram.fractions[k]).sum::<f64>() / reports.len() as f64,
            });
        }
    }
    io::write_csv(&out.join("fig2b.csv"), rows)?;

    io::write_csv(
        &out.join("fig2c.csv"),
        reports.iter().flat_map(|r| {
            r.cosine_regions.iter().zip(&r.cosine).flat_map(move |(region, trace)| {
                trace.iter().enumerate().map(move |(t, &s)| Fig2cCsv {
                    run: &r.name,
                    region_lo: region.lo,
                    region_hi: region.hi,
                    neurons: region.indices.len(),
                    step: t,
                    similarity: s,
                })
            })
        }),
    )?;

    for (file, column, pick) in [
        ("fig3a.csv", "mean_steps_to_fixation", (|a: &AblationResult| a.mean_steps_to_fixation) as fn(&AblationResult) -> f64),
        ("fig3b.csv", "first_trial_accuracy", |a: &AblationResult| a.first_trial_accuracy),
    ] {
        let mut rows: Vec<Fig3Csv> = Vec::new();
        for r in reports {
            rows.extend(r.ablation.iter().map(|a| Fig3Csv {
                run: &r.name,
                region: a.region.name(),
                theta: a.theta,
                dropped_count: a.dropped_count,
                value: pick(a),
            }));
        }
        if multi {
            let n = reports.len() as f64;
            for (k, a) in reports[0].ablation.iter().enumerate() {
                rows.push(Fig3Csv {
                    run: POOLED,
                    region: a.region.name(),
                    theta: a.theta,
                    dropped_count: (reports.iter().map(|r| r.ablation[k].dropped_count).sum::<usize>() as f64 / n).round() as usize,
                    value: reports.iter().map(|r| pick(&r.ablation[k])).sum::<f64>() / n,
                });
            }
        }
        let mut w = csv::Writer::from_path(out.join(file))?;
        w.write_record(["run", "region", "theta", "dropped_count", column])?;
        for r in rows {
            w.write_record([
                r.run.to_string(),
                r.region.to_string(),
                r.theta.to_string(),
                r.dropped_count.to_string(),
                r.value.to_string(),
            ])?;
        }
        w.flush()?;
    }
    Ok(())
}

/// Loads the runs, filters them, analyzes each one and writes every figure
/// table plus `summary.json` into `out`.
pub fn analyze_dirs(run_dirs: &[PathBuf], out: &Path, jobs: usize) -> Result<Summary> {
    if run_dirs.is_empty() {
        return Err(Error::Config("no run directories given".into()));
    }
    let runs = run_dirs.iter().map(|d| Run::load(d)).collect::<Result<Vec<_>>>()?;
    for r in &runs[1..] {
        if !r.config.compatible(&runs[0].config) {
            return Err(Error::Config(format!(
                "run {} was trained with a different configuration than {}",
                r.name, runs[0].name
            )));
        }
    }
    let supplied = runs.len();
    let (runs, filter) = filter_runs(runs)?;
    if filter.applied {
        info!("seed filter kept {} of {supplied} runs", runs.len());
    }
    let reports = run_parallel(&runs, jobs, |run| {
        info!("analyzing {}", run.name);
        analyze_run(run)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    fs::create_dir_all(out)?;
    write_figures(out, &reports)?;
    let heads: Vec<RunHeadline> = reports.iter().map(headline).collect();
    let summary = Summary {
        runs_supplied: supplied,
        accepted: reports.iter().map(|r| r.name.clone()).collect(),
        filter,
        pooled: pooled(&heads),
        runs: heads,
    };
    if summary.pooled.singleton {
        warn!("a single run was analyzed; pooled statistics are that run's values");
    }
    io::write_json_file(&out.join("summary.json"), &summary)?;
    Ok(summary)
}
