use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fastgsc::error::{Error, Result};
use fastgsc::experiment::{self, ExperimentConfig, Mode};

#[derive(Parser)]
#[command(name = "fastgsc", version, about = "Parallel generative semantic communication experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the conditional denoiser and write its checkpoint.
    TrainDenoiser(Common),
    /// Train the transmission-order policy with PPO.
    TrainPolicy(Common),
    /// Evaluate one mode and write a run directory.
    Run(Common),
    /// Mean score over a grid of correction strengths and extraction latencies.
    SweepAlpha {
        #[command(flatten)]
        common: Common,
        /// Comma-separated correction strengths.
        #[arg(long, value_delimiter = ',', default_value = "0,2,4,6,8,10,12,14,16,18,20")]
        alphas: Vec<f64>,
        /// Comma-separated extraction latencies.
        #[arg(long, value_delimiter = ',', default_value = "2.5,5,7.5")]
        tau_e_list: Vec<f64>,
        /// Segment length for each latency, same order.
        #[arg(long, value_delimiter = ',', default_value = "5,10,15")]
        segment_list: Vec<usize>,
    },
    /// Collect metrics.json from run directories into one table.
    Report {
        dirs: Vec<PathBuf>,
        /// Write the table as CSV here as well.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    tau_e: Option<f64>,
    #[arg(long)]
    segment: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    episodes: Option<usize>,
    /// Denoiser checkpoint (default: <out>/denoiser.ckpt).
    #[arg(long)]
    denoiser: Option<PathBuf>,
    /// Policy directory (default: <out>/policy).
    #[arg(long)]
    policy_dir: Option<PathBuf>,
    /// Denoiser training steps.
    #[arg(long)]
    steps: Option<usize>,
    /// PPO iterations.
    #[arg(long)]
    iterations: Option<usize>,
    /// Train the PPO baseline without the action mask.
    #[arg(long)]
    unmasked: bool,
    /// Evaluate the policy greedily instead of sampling.
    #[arg(long)]
    greedy: bool,
    /// Train missing checkpoints instead of failing.
    #[arg(long)]
    train_if_missing: bool,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::from_file(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = &self.out {
            c.output_dir = v.clone();
        }
        if let Some(v) = &self.mode {
            c.mode = Mode::parse(v)?;
        }
        if let Some(v) = self.alpha {
            c.sampling.alpha = v;
        }
        if let Some(v) = self.tau_e {
            c.env.latency.tau_e = v;
        }
        if let Some(v) = self.segment {
            c.env.latency.segment = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.replicates {
            c.replicates = v;
        }
        if let Some(v) = self.episodes {
            c.episodes_per_replicate = v;
        }
        if let Some(v) = &self.denoiser {
            c.denoiser_checkpoint = Some(v.clone());
        }
        if let Some(v) = &self.policy_dir {
            c.policy_dir = Some(v.clone());
        }
        if let Some(v) = self.steps {
            c.denoiser.steps = v;
        }
        if let Some(v) = self.iterations {
            c.ppo.iterations = v;
        }
        c.ppo.masked &= !self.unmasked;
        c.greedy_policy |= self.greedy;
        c.train_if_missing |= self.train_if_missing;
        c.normalize();
        c.validate()?;
        Ok(c)
    }
}

fn log(s: &str) {
    eprintln!("{s}");
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainDenoiser(common) => {
            let c = common.config()?;
            let world = experiment::build_world(&c)?;
            std::fs::create_dir_all(&c.output_dir)?;
            std::fs::write(c.output_dir.join("world.json"), serde_json::to_string_pretty(&world)?)?;
            experiment::train_denoiser_artifact(&c, &world, log)?;
            println!("{}", c.denoiser_path().display());
        }
        Command::TrainPolicy(common) => {
            let c = common.config()?;
            let world = experiment::build_world(&c)?;
            let model = experiment::load_denoiser(&c, &world, log)?;
            experiment::train_policy_artifact(&c, &world, &model, log)?;
            println!("{}", c.policy_path().display());
        }
        Command::Run(common) => {
            let c = common.config()?;
            let m = experiment::run_experiment(&c, log)?;
            println!(
                "{} score {:.4} ± {:.4} residual {:.3} efficiency {:.5} -> {}",
                m.mode.name(),
                m.score.mean,
                m.score.std,
                m.residual_latency.mean,
                m.efficiency,
                c.output_dir.display()
            );
        }
        Command::SweepAlpha { common, alphas, tau_e_list, segment_list } => {
            let c = common.config()?;
            if tau_e_list.len() != segment_list.len() {
                return Err(Error::ConfigInvalid("--tau-e-list and --segment-list differ in length".into()));
            }
            let world = experiment::build_world(&c)?;
            let model = experiment::load_denoiser(&c, &world, log)?;
            let policy = if c.mode.uses_policy() { Some(experiment::load_policy(&c, &world, &model, log)?) } else { None };
            let settings: Vec<(f64, usize)> = tau_e_list.into_iter().zip(segment_list).collect();
            let rows = experiment::sweep_alpha(&c, &world, &model, policy.as_ref(), &alphas, &settings)?;
            std::fs::create_dir_all(&c.output_dir)?;
            experiment::write_rows_csv(&rows, &c.output_dir.join("sweep.csv"))?;
            let best = experiment::best_alpha(&rows);
            std::fs::write(
                c.output_dir.join("sweep.json"),
                serde_json::to_string_pretty(&serde_json::json!({ "rows": rows, "best_alpha": best }))?,
            )?;
            for r in &rows {
                println!("tau_e {:<4} alpha {:<4} score {:.4} ± {:.4}", r.tau_e, r.alpha, r.mean_score, r.se_score);
            }
            println!("best alpha {best:?}");
        }
        Command::Report { dirs, csv } => {
            let rows = experiment::report(&dirs)?;
            if let Some(p) = csv {
                experiment::write_rows_csv(&rows, &p)?;
            }
            println!("{:<32} {:<14} {:>6} {:>6} {:>8} {:>8} {:>9}", "run", "mode", "alpha", "tau_e", "score", "resid", "eff");
            for r in rows {
                println!(
                    "{:<32} {:<14} {:>6} {:>6} {:>8.4} {:>8.3} {:>9.5}",
                    r.run, r.mode, r.alpha, r.tau_e, r.score_mean, r.residual_mean, r.efficiency
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
