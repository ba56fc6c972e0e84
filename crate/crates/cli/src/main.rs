use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use eph_core::experiment::{
    analyze_dirs, eval_run, parse_seed_range, train_seeds, train_to_dir, ExperimentConfig,
    MaskSpec, Profile,
};

#[derive(Parser)]
#[command(name = "eph", version, about = "Episodic Harlow meta-RL: train, evaluate, analyze")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one seed (or a range of seeds) into a run directory.
    Train {
        /// Flat key = value configuration file. Defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Base profile when no config file is given: default or reduced.
        #[arg(long, default_value = "default")]
        profile: String,
        #[arg(long, conflicts_with = "seeds")]
        seed: Option<u64>,
        /// Seed range `a..b` (exclusive) or `a..=b`; runs go to OUT/seed-<n>.
        #[arg(long)]
        seeds: Option<String>,
        /// Concurrent trainers for a seed range.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a trained run on the test objects.
    Eval {
        #[arg(long)]
        run: PathBuf,
        /// Defaults to the run's configured test episodes.
        #[arg(long)]
        episodes: Option<usize>,
        /// Zero a neuron region every step, e.g. `episodic:0.9` or `abstract:0.3`.
        #[arg(long)]
        mask: Option<String>,
    },
    /// Analyze completed runs and write figure tables plus summary.json.
    Analyze {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

fn load_config(path: Option<&PathBuf>, profile: &str) -> Result<ExperimentConfig> {
    let mut config = match path {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => ExperimentConfig::profile(profile.parse::<Profile>()?),
    };
    for key in config.apply_env_overrides()? {
        info!("{key} overridden from the environment");
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            profile,
            seed,
            seeds,
            jobs,
            out,
        } => {
            let config = load_config(config.as_ref(), &profile)?;
            match (seed, seeds) {
                (_, Some(range)) => {
                    let seeds = parse_seed_range(&range)?;
                    for info in train_seeds(&config, &seeds, &out, jobs)? {
                        println!(
                            "seed {}: {} episodes, mean reward {:.3} -> {:.3}",
                            info.seed, info.episodes, info.first_block_mean_reward, info.last_block_mean_reward
                        );
                    }
                }
                (seed, None) => {
                    let seed = seed.unwrap_or(config.train.seed);
                    let info = train_to_dir(&config, seed, &out)?;
                    println!(
                        "seed {}: {} episodes, mean reward {:.3} -> {:.3}, run in {}",
                        info.seed,
                        info.episodes,
                        info.first_block_mean_reward,
                        info.last_block_mean_reward,
                        out.display()
                    );
                }
            }
        }
        Command::Eval { run, episodes, mask } => {
            if !run.join("checkpoint.json").exists() {
                bail!("no checkpoint in {}", run.display());
            }
            let mask: Option<MaskSpec> = mask.as_deref().map(str::parse).transpose()?;
            let episodes = match episodes {
                Some(n) => n,
                None => ExperimentConfig::load(&run.join("config.txt"))?.train.episodes_test,
            };
            let report = eval_run(&run, episodes, mask)?;
            let m = report.metrics;
            println!("episodes {}", m.episodes);
            println!("dropped neurons {}", report.dropped);
            println!("first-trial accuracy (repeat tasks) {:.4} over {}", m.first_trial_accuracy, m.repeat_episodes);
            println!("later-trial accuracy {:.4}", m.later_trial_accuracy);
            println!("mean steps to fixation {:.3}", m.mean_steps_to_fixation);
            println!("log {}", report.log.display());
        }
        Command::Analyze { runs, out, jobs } => {
            let summary = analyze_dirs(&runs, &out, jobs)?;
            let p = &summary.pooled;
            println!("runs supplied {}, accepted {}", summary.runs_supplied, summary.accepted.len());
            println!("open fraction {:.3} ± {:.3}", p.open_fraction.mean, p.open_fraction.std);
            println!("closed fraction {:.3} ± {:.3}", p.closed_fraction.mean, p.closed_fraction.std);
            println!("theta 0.9 regression {:.3}", p.theta_09_regression.mean);
            println!("storage savings {:.3}", p.storage_savings.mean);
            println!("outputs in {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
