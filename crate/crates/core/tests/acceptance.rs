//! Acceptance suite. Prints one line per criterion and exits non-zero if any
//! criterion fails.
//!
//! Trained runs go to a temporary directory. Set `EPH_ACCEPTANCE_DIR` to keep
//! them and reuse runs whose stored configuration matches.

mod common;

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::Instant;

use eph_core::analysis::{AblationResult, RegionKind};
use eph_core::env::{
    oracle_optimal_steps, read_trace, sample_task, write_trace, Action, Cell, ContextRegistry, EnvConfig, Phase,
    Split, TraceRecord, WorldState,
};
use eph_core::experiment::{analyze_run, eval_run, train_to_dir, AnalysisReport, ExperimentConfig, Profile, Run};
use eph_core::model::{eplstm_step, eplstm_step_opt, EpLstmState, ModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// ---------------------------------------------------------------- criterion 1

fn gradient_check() -> Outcome {
    let seeds = 100;
    let worst = (0..seeds)
        .map(|s| common::max_rel_error(s, 3, None))
        .fold(0.0_f64, f64::max);
    outcome(
        worst < 1e-4,
        format!("worst relative error {worst:.2e} over {seeds} seeds (hidden 8, input 7, 3 steps)"),
    )
}

// ---------------------------------------------------------------- criterion 2

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Textbook LSTM step from the `lstm.*` tensors only (blocks i, f, o, g).
fn reference_lstm(p: &ModelParams, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let hd = h_prev.len();
    let wx = p.tensor("lstm.weight_x").unwrap();
    let wh = p.tensor("lstm.weight_h").unwrap();
    let b = p.tensor("lstm.bias").unwrap();
    let pre = |row: usize| {
        let mut s = b[row];
        for (k, xv) in x.iter().enumerate() {
            s += wx[row * x.len() + k] * xv;
        }
        for (k, hv) in h_prev.iter().enumerate() {
            s += wh[row * hd + k] * hv;
        }
        s
    };
    let mut h = vec![0.0; hd];
    let mut c = vec![0.0; hd];
    for j in 0..hd {
        let i = sigmoid(pre(j));
        let f = sigmoid(pre(hd + j));
        let o = sigmoid(pre(2 * hd + j));
        let g = pre(3 * hd + j).tanh();
        c[j] = f * c_prev[j] + i * g;
        h[j] = o * c[j].tanh();
    }
    (h, c)
}

fn lstm_reduction() -> Outcome {
    let cfg = common::tiny();
    let mut worst: f64 = 0.0;
    let sequences = 50;
    for seed in 0..sequences {
        let mut rng = ChaCha8Rng::seed_from_u64(1_000 + seed);
        let params = ModelParams::init(&cfg, &mut rng);
        let zeros = vec![0.0; cfg.hidden];
        let mut ep = EpLstmState::zeros(cfg.hidden);
        let mut none = EpLstmState::zeros(cfg.hidden);
        let (mut h, mut c) = (vec![0.0; cfg.hidden], vec![0.0; cfg.hidden]);
        for _ in 0..20 {
            let x: Vec<f64> = (0..cfg.input_width()).map(|_| rng.random_range(-2.0..2.0)).collect();
            let (next, _) = eplstm_step(&params, &x, &ep, &zeros, None).unwrap();
            let (next_none, _) = eplstm_step_opt(&params, &x, &none, None, None).unwrap();
            let (rh, rc) = reference_lstm(&params, &x, &h, &c);
            for j in 0..cfg.hidden {
                worst = worst
                    .max((next.h[j] - rh[j]).abs())
                    .max((next.c[j] - rc[j]).abs())
                    .max((next_none.h[j] - rh[j]).abs())
                    .max((next_none.c[j] - rc[j]).abs());
            }
            (ep, none, h, c) = (next, next_none, rh, rc);
        }
    }
    outcome(
        worst <= 1e-12,
        format!("max |epLSTM - LSTM| {worst:.2e} over {sequences} random 20-step sequences"),
    )
}

// ---------------------------------------------------------------- criterion 3

/// Turns toward the nearest target by signed circular distance.
fn scripted_action(config: &EnvConfig, s: &WorldState) -> Action {
    let n = config.world_size as i64;
    let centered = (s.heading + config.center) as i64;
    let best = (0..config.world_size)
        .filter(|&w| match s.phase {
            Phase::Fixation => s.world[w] == Cell::Fixation,
            Phase::Choice => matches!(s.world[w], Cell::Object(_)),
        })
        .map(|w| (w as i64 - centered).rem_euclid(n))
        .map(|d| if d >= n / 2 { d - n } else { d })
        .min_by_key(|d| d.abs())
        .expect("a target is always present");
    if best < 0 {
        Action::Left
    } else {
        Action::Right
    }
}

fn random_action(rng: &mut ChaCha8Rng) -> Action {
    if rng.random_bool(0.5) {
        Action::Left
    } else {
        Action::Right
    }
}

fn environment_oracle() -> Outcome {
    let config = EnvConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut registry = ContextRegistry::new();
    let states = 1_000;
    let mut mismatches = 0;
    for _ in 0..states {
        let task = sample_task(&config, &mut rng, Split::Train, &mut registry);
        let (mut s, _) = WorldState::reset(&config, task, &mut rng);
        let walk = rng.random_range(0..60);
        for _ in 0..walk {
            let a = random_action(&mut rng);
            s.step(&config, a, &mut rng).unwrap();
            if s.done {
                break;
            }
        }
        if s.done {
            let task = sample_task(&config, &mut rng, Split::Train, &mut registry);
            s = WorldState::reset(&config, task, &mut rng).0;
        }
        let expected = oracle_optimal_steps(&config, &s).expect("targets present");
        let mut steps = 0;
        loop {
            let a = scripted_action(&config, &s);
            let out = s.step(&config, a, &mut rng).unwrap();
            steps += 1;
            if out.reward != 0.0 || out.done {
                break;
            }
        }
        if steps != expected {
            mismatches += 1;
        }
    }

    let (replay_ok, episodes) = replay_check(&config);
    outcome(
        mismatches == 0 && replay_ok,
        format!("{mismatches}/{states} scripted-vs-oracle mismatches; {episodes} logged episodes replayed exactly: {replay_ok}"),
    )
}

/// Logs random-policy episodes to a trace file, reads them back and replays
/// the logged actions against fresh worlds from the same seeds.
fn replay_check(config: &EnvConfig) -> (bool, usize) {
    let episodes = 200;
    let mut records = Vec::new();
    let mut totals = Vec::new();
    for ep in 0..episodes {
        let mut rng = ChaCha8Rng::seed_from_u64(5_000 + ep as u64);
        let mut registry = ContextRegistry::new();
        let task = sample_task(config, &mut rng, Split::Train, &mut registry);
        let (mut s, _) = WorldState::reset(config, task, &mut rng);
        let mut policy = ChaCha8Rng::seed_from_u64(9_000 + ep as u64);
        let mut step = 0;
        let (mut total, mut accounted) = (0.0, 0.0);
        while !s.done {
            let a = random_action(&mut policy);
            let out = s.step(config, a, &mut rng).unwrap();
            records.push(TraceRecord::from_outcome(ep, step, a, &s, &out));
            total += out.reward;
            accounted += match out.info.chose_correct {
                Some(true) => config.reward_correct,
                Some(false) => config.reward_wrong,
                None if out.info.fixated => config.reward_fixation,
                None => 0.0,
            };
            step += 1;
        }
        if total != accounted {
            return (false, episodes);
        }
        totals.push(total);
    }
    let mut buf = Vec::new();
    write_trace(&mut buf, &records).unwrap();
    let logged = read_trace(BufReader::new(buf.as_slice())).unwrap();
    if logged != records {
        return (false, episodes);
    }
    for (ep, &logged_total) in totals.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(5_000 + ep as u64);
        let mut registry = ContextRegistry::new();
        let task = sample_task(config, &mut rng, Split::Train, &mut registry);
        let (mut s, _) = WorldState::reset(config, task, &mut rng);
        let mut total = 0.0;
        for r in logged.iter().filter(|r| r.episode == ep) {
            let out = s.step(config, r.action, &mut rng).unwrap();
            if out.reward != r.reward || out.done != r.done || s.heading != r.heading {
                return (false, episodes);
            }
            total += out.reward;
        }
        if !s.done || total != logged_total {
            return (false, episodes);
        }
    }
    (true, episodes)
}

// ---------------------------------------------------------------- criterion 9

fn tiny_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::profile(Profile::Reduced);
    for (k, v) in [
        ("env.num_objects", "6"),
        ("env.train_objects", "4"),
        ("model.hidden", "8"),
        ("train.episodes", "60"),
        ("train.test_episodes", "20"),
        ("train.r_star_window", "10"),
    ] {
        c.set(k, v).unwrap();
    }
    c
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let config = tiny_config();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let c = tmp.path().join("c");
    train_to_dir(&config, 3, &a).unwrap();
    train_to_dir(&config, 3, &b).unwrap();
    train_to_dir(&config, 4, &c).unwrap();
    eval_run(&a, 20, None).unwrap();
    eval_run(&b, 20, None).unwrap();
    let (fa, fb) = (dir_bytes(&a), dir_bytes(&b));
    let identical = fa == fb;
    let seed_matters = fs::read(a.join("checkpoint.bin")).ok() != fs::read(c.join("checkpoint.bin")).ok()
        || fs::read(a.join("train_log.csv")).unwrap() != fs::read(c.join("train_log.csv")).unwrap();
    outcome(
        identical && seed_matters,
        format!(
            "{} files byte-identical across repeated runs: {identical}; different seed differs: {seed_matters}",
            fa.len()
        ),
    )
}

// ------------------------------------------------------------ trained runs

struct Workspace {
    _tmp: Option<tempfile::TempDir>,
    root: PathBuf,
}

impl Workspace {
    fn new() -> Workspace {
        match std::env::var_os("EPH_ACCEPTANCE_DIR") {
            Some(dir) => {
                let root = PathBuf::from(dir);
                fs::create_dir_all(&root).unwrap();
                Workspace { _tmp: None, root }
            }
            None => {
                let tmp = tempfile::tempdir().unwrap();
                let root = tmp.path().to_path_buf();
                Workspace { _tmp: Some(tmp), root }
            }
        }
    }

    /// Trains `seed` under `config` unless a matching run is already there.
    /// Returns the wall time of a fresh training run.
    fn run(&self, name: &str, config: &ExperimentConfig, seed: u64) -> (PathBuf, Option<f64>) {
        let dir = self.root.join(name);
        let mut wanted = config.clone();
        wanted.train.seed = seed;
        if let Ok(existing) = ExperimentConfig::load(&dir.join("config.txt")) {
            if existing == wanted && dir.join("run.json").exists() {
                return (dir, None);
            }
        }
        let start = Instant::now();
        train_to_dir(config, seed, &dir).unwrap();
        (dir, Some(start.elapsed().as_secs_f64()))
    }
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn pooled_ablation(reports: &[AnalysisReport], region: RegionKind, theta: f64) -> (f64, f64, f64) {
    let rows: Vec<&AblationResult> = reports
        .iter()
        .map(|r| {
            r.ablation
                .iter()
                .find(|a| a.region == region && (a.theta - theta).abs() < 1e-9)
                .expect("theta on the grid")
        })
        .collect();
    let hidden = reports[0].r_star.len() as f64;
    (
        mean(rows.iter().map(|a| a.dropped_count as f64 / hidden)),
        mean(rows.iter().map(|a| a.mean_steps_to_fixation)),
        mean(rows.iter().map(|a| a.first_trial_accuracy)),
    )
}

fn learning_default(ws: &Workspace) -> Outcome {
    let config = ExperimentConfig::profile(Profile::Default);
    let (dir, secs) = ws.run("default-seed-0", &config, 0);
    let report = eval_run(&dir, 1_000, None).unwrap();
    let m = report.metrics;
    let pass = m.later_trial_accuracy >= 0.9 && m.first_trial_accuracy >= 0.85;
    outcome(
        pass,
        format!(
            "default run: trials 2-6 accuracy {:.3} (>= 0.9), repeat first-trial accuracy {:.3} (>= 0.85) over {} episodes{}",
            m.later_trial_accuracy,
            m.first_trial_accuracy,
            m.repeat_episodes,
            secs.map_or(String::new(), |s| format!(", trained in {s:.0} s"))
        ),
    )
}

fn learning_reduced(reports: &[AnalysisReport], times: &[Option<f64>]) -> Outcome {
    let later = mean(reports.iter().map(|r| r.test.later_trial_accuracy));
    let first = mean(reports.iter().map(|r| r.test.first_trial_accuracy));
    let slowest = times.iter().flatten().fold(0.0_f64, |a, &b| a.max(b));
    let pass = later >= 0.9 && first >= 0.85 && slowest <= 600.0;
    outcome(
        pass,
        format!(
            "reduced profile, {} seeds: trials 2-6 accuracy {later:.3}, repeat first-trial accuracy {first:.3}, slowest run {slowest:.0} s",
            reports.len()
        ),
    )
}

fn gate_brackets(reports: &[AnalysisReport]) -> Outcome {
    let open = mean(reports.iter().map(|r| r.open_fraction));
    let closed = mean(reports.iter().map(|r| r.closed_fraction));
    let pass = (0.10..=0.40).contains(&open) && (0.15..=0.45).contains(&closed);
    outcome(
        pass,
        format!(
            "{} seeds: fraction r* >= 0.9 {open:.3} in [0.10, 0.40]; fraction r* < 0.1 {closed:.3} in [0.15, 0.45]",
            reports.len()
        ),
    )
}

fn gate_convergence(reports: &[AnalysisReport]) -> Outcome {
    let ratios: Vec<f64> = reports.iter().map(|r| r.convergence_ratio).collect();
    let worst = ratios.iter().cloned().fold(0.0_f64, f64::max);
    outcome(
        worst < 0.25,
        format!("last/first window r_fix std ratio per seed {ratios:.3?} (< 0.25)"),
    )
}

fn masking(reports: &[AnalysisReport]) -> Outcome {
    let base_steps = mean(reports.iter().map(|r| r.test.mean_steps_to_fixation));
    let base_acc = mean(reports.iter().map(|r| r.test.first_trial_accuracy));
    let (ep_frac, ep_steps, ep_acc) = pooled_ablation(reports, RegionKind::Episodic, 0.9);
    let regression = base_acc - ep_acc;
    let steps_change = (ep_steps - base_steps).abs() / base_steps;
    let episodic_ok = regression >= 0.20 && steps_change < 0.20;

    let mut abstract_ok = true;
    let mut largest_small: Option<(f64, f64, f64, f64)> = None;
    for theta in eph_core::analysis::theta_grid() {
        let (frac, steps, acc) = pooled_ablation(reports, RegionKind::Abstract, theta);
        if frac == 0.0 || frac > 0.5 {
            continue;
        }
        if base_acc - acc > 0.10 {
            abstract_ok = false;
        }
        largest_small = Some((theta, frac, steps, acc));
    }
    let abstract_detail = match largest_small {
        Some((theta, frac, steps, acc)) => {
            if steps <= base_steps {
                abstract_ok = false;
            }
            format!("abstract θ {theta:.1} drops {frac:.2}: steps {base_steps:.2} -> {steps:.2}, first-trial {base_acc:.3} -> {acc:.3}")
        }
        None => {
            abstract_ok = false;
            "no abstract θ drops between 0 and half the neurons".into()
        }
    };
    outcome(
        episodic_ok && abstract_ok,
        format!(
            "episodic θ 0.9 drops {ep_frac:.2}: first-trial regression {regression:.3} (>= 0.20), steps change {steps_change:.3} (< 0.20); {abstract_detail}"
        ),
    )
}

fn sparse_storage(reports: &[AnalysisReport]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for r in reports {
        let s = &r.sparse;
        let savings = s.storage.savings_fraction;
        let needed = if s.kept <= 64 { 0.70 } else { 0.5 };
        let gap = s.dense_first_trial_accuracy - s.sparse_first_trial_accuracy;
        pass &= savings >= needed && gap.abs() <= 0.10;
        parts.push(format!("kept {} savings {savings:.3} (>= {needed:.2}) accuracy gap {gap:.3}", s.kept));
    }
    outcome(pass, format!("threshold 0.1: {}", parts.join("; ")))
}

fn main() {
    let mut results: Vec<(u8, Outcome)> = Vec::new();
    let mut report = |n: u8, o: Outcome| {
        println!("criterion {n}: {} {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, o));
    };
    report(1, gradient_check());
    report(2, lstm_reduction());
    report(3, environment_oracle());
    report(9, determinism());

    let ws = Workspace::new();
    let reduced = ExperimentConfig::profile(Profile::Reduced);
    let mut reports = Vec::new();
    let mut times = Vec::new();
    for seed in 0..5 {
        let (dir, secs) = ws.run(&format!("reduced-seed-{seed}"), &reduced, seed);
        times.push(secs);
        reports.push(analyze_run(&Run::load(&dir).unwrap()).unwrap());
    }
    report(4, learning_reduced(&reports, &times));
    report(5, gate_brackets(&reports));
    report(6, gate_convergence(&reports));
    report(7, masking(&reports));
    report(8, sparse_storage(&reports));
    report(4, learning_default(&ws));

    let failed: Vec<u8> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    if failed.is_empty() {
        println!("acceptance: all criteria pass");
    } else {
        println!("acceptance: failing criteria {failed:?}");
        std::process::exit(1);
    }
}
