//! `muldef`: train a target model, craft adversarial sets against it, build
//! a randomized multi-model defense, and measure how well it holds up.

use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};

use muldef_cli::config::{ConfigFile, Scale};
use muldef_cli::pipeline::{self, AttackScenario, Session};
use muldef_cli::presets::{preset, PRESET_NAMES};

#[derive(Parser)]
#[command(
    name = "muldef",
    about = "adversarial-defense workbench: randomized multi-model classification",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config file (TOML). Exactly one of --config/--preset.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Named preset; see `muldef list-presets`.
    #[arg(long, value_name = "NAME")]
    preset: Option<String>,
    /// Output directory for every artifact of this experiment.
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Overrides every seed in the config, derived per stage.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the number of evaluation repeats.
    #[arg(long)]
    repeats: Option<usize>,
    /// desk = laptop-sized run, full = paper-sized run.
    #[arg(long, default_value = "full")]
    scale: Scale,
    /// Upper bound on worker threads (the engine computes on one).
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Train the target model.
    Train(Common),
    /// Craft an adversarial set against the trained target.
    Attack {
        #[command(flatten)]
        common: Common,
        /// white-box (gradient access) or black-box (label oracle only).
        #[arg(long, default_value = "white-box")]
        scenario: AttackScenario,
    },
    /// Generate the defense model family.
    Defend(Common),
    /// Run the evaluation plan and write eval.csv.
    Eval(Common),
    /// Replay the full pipeline: train, attack, defend, eval.
    Repro(Common),
    /// List the built-in presets.
    ListPresets,
}

impl Common {
    fn load(&self) -> Result<ConfigFile> {
        if self.threads == 0 {
            bail!("--threads: must be at least 1");
        }
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), None) => ConfigFile::from_path(path)?,
            (None, Some(name)) => preset(name)?,
            (None, None) => bail!("pass --config FILE or --preset NAME"),
            (Some(_), Some(_)) => bail!("--config and --preset are mutually exclusive"),
        };
        cfg.apply_scale(self.scale);
        if let Some(seed) = self.seed {
            cfg.override_seeds(seed);
        }
        if let Some(repeats) = self.repeats {
            cfg.eval.repeats = repeats;
        }
        Ok(cfg)
    }

    fn session(&self) -> Result<Session> {
        Session::prepare(&self.load()?, &self.out)
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train(c) => {
            pipeline::cmd_train(&c.session()?)?;
        }
        Command::Attack { common, scenario } => {
            pipeline::cmd_attack(&common.session()?, scenario)?;
        }
        Command::Defend(c) => {
            pipeline::cmd_defend(&c.session()?)?;
        }
        Command::Eval(c) => {
            pipeline::cmd_eval(&c.session()?)?;
        }
        Command::Repro(c) => {
            pipeline::cmd_repro(&c.session()?)?;
        }
        Command::ListPresets => {
            for name in PRESET_NAMES {
                println!("{name}");
            }
        }
    }
    Ok(())
}
