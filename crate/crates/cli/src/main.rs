use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mmrec_core::config::RunConfig;
use mmrec_core::data::{Split, SplitRatios};
use mmrec_core::experiment::{self, GridAxis, PrepareOptions};
use mmrec_core::synth::SynthSpec;
use mmrec_core::{Error, ErrorClass, Result};

#[derive(Parser)]
#[command(name = "mmrec", version, about = "Denoised multimedia recommendation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split raw interactions and bundle them with item features into a dataset directory.
    Prepare {
        /// Tab-separated `user<TAB>item` file.
        #[arg(long)]
        interactions: PathBuf,
        /// One modality as `name=path.ibmf`; repeat for each modality.
        #[arg(long = "feature", value_name = "NAME=PATH", required = true)]
        features: Vec<String>,
        #[arg(long, default_value = "0.8,0.1,0.1")]
        ratios: String,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        /// Item ids in feature-row order, one per line.
        #[arg(long)]
        item_order: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a run directory.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a saved checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Report path; defaults to `eval_<split>.json` next to the checkpoint directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full / w/o FIB / w/o GIB / w/o IB variants.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Train every point of a hyperparameter grid.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// One axis as `key=v1,v2,...`; repeat for more axes.
        #[arg(long = "grid", value_name = "KEY=V1,V2", required = true)]
        grid: Vec<String>,
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Generate a planted-signal dataset directory.
    Synth {
        #[arg(long, default_value_t = 500)]
        users: usize,
        #[arg(long, default_value_t = 300)]
        items: usize,
        #[arg(long, default_value_t = 8)]
        rank: usize,
        #[arg(long, default_value_t = 16)]
        relevant_dim: usize,
        #[arg(long, default_value_t = 64)]
        irrelevant_dim: usize,
        #[arg(long, default_value_t = 1.0)]
        noise: f64,
        #[arg(long, default_value_t = 20)]
        interactions_per_user: usize,
        #[arg(long, default_value_t = 2)]
        modalities: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` config file; keys not given keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override applied after the file; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

fn parse_ratios(text: &str) -> Result<SplitRatios> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid ratio `{p}`")))
        })
        .collect::<Result<_>>()?;
    match parts[..] {
        [train, val, test] => SplitRatios::new(train, val, test),
        _ => Err(Error::Config(
            "--ratios needs three comma-separated values".into(),
        )),
    }
}

fn parse_feature(spec: &str) -> Result<(String, PathBuf)> {
    match spec.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => {
            Ok((name.to_string(), PathBuf::from(path)))
        }
        _ => Err(Error::Config(format!(
            "--feature `{spec}` is not name=path"
        ))),
    }
}

fn write_json(path: &Path, json: &str) -> Result<()> {
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare {
            interactions,
            features,
            ratios,
            seed,
            item_order,
            out,
        } => {
            let opts = PrepareOptions {
                interactions,
                features: features
                    .iter()
                    .map(|f| parse_feature(f))
                    .collect::<Result<_>>()?,
                ratios: parse_ratios(&ratios)?,
                seed,
                item_order,
            };
            let summary = experiment::prepare(&opts, &out)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Train { config, out } => {
            let cfg = config.load()?;
            let outcome = experiment::train_run(&cfg, &out)?;
            println!(
                "best epoch {} of {}; test recall@20 {:.5}; wrote {}",
                outcome.report.best_epoch,
                outcome.report.epochs.len(),
                outcome.test.recall_at(20),
                out.display()
            );
        }
        Command::Evaluate {
            checkpoint,
            split,
            out,
        } => {
            let split = Split::from(split);
            let (cfg, result) = experiment::evaluate_checkpoint(&checkpoint, split)?;
            let json = experiment::metrics_json(&result, &cfg)?;
            let path = out.unwrap_or_else(|| {
                let parent = checkpoint.parent().unwrap_or(Path::new("."));
                parent.join(format!("eval_{}.json", split.name()))
            });
            write_json(&path, &json)?;
            print!("{json}");
        }
        Command::Ablate { config, seeds, out } => {
            let cfg = config.load()?;
            let rows = experiment::ablate(&cfg, seeds, &out)?;
            for row in &rows {
                println!(
                    "{:8} test recall@20 {:.5}",
                    row.variant.name(),
                    row.mean_test_recall(20)
                );
            }
        }
        Command::Sweep {
            config,
            grid,
            seeds,
            out,
        } => {
            let cfg = config.load()?;
            let axes: Vec<GridAxis> = grid
                .iter()
                .map(|g| GridAxis::parse(g))
                .collect::<Result<_>>()?;
            let points = experiment::sweep(&cfg, &axes, seeds, &out)?;
            println!(
                "{} grid points; wrote {}",
                points.len(),
                out.join("sweep.csv").display()
            );
        }
        Command::Synth {
            users,
            items,
            rank,
            relevant_dim,
            irrelevant_dim,
            noise,
            interactions_per_user,
            modalities,
            seed,
            out,
        } => {
            let spec = SynthSpec {
                users,
                items,
                rank,
                relevant_dim,
                irrelevant_dim,
                noise,
                interactions_per_user,
                modalities,
                seed,
            };
            let dataset = spec.generate()?.dataset;
            dataset.save(&out)?;
            println!("{}", serde_json::to_string_pretty(&dataset.summary())?);
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numerical => 4,
        ErrorClass::Internal => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
