//! The `bevpaint` command line.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{cmd_colorize, cmd_datagen, cmd_eval, cmd_ipm, cmd_report, cmd_train};
pub use config::RunConfig;

use crate::error::Result;

#[derive(Debug, Parser)]
#[command(name = "bevpaint", version, about = "Occupancy and appearance BEV grids from surround cameras")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset.
    Datagen(Common),
    /// Train a model on the training split.
    Train(Common),
    /// Score a checkpoint on the test split and render panels.
    Eval(Common),
    /// Warp camera images onto the ground plane.
    Ipm(Common),
    /// Paint a BEV grid from LiDAR points, cuboids and camera images.
    Colorize(Common),
    /// Compare a joint and an occupancy-only evaluation.
    Report(Common),
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    /// Train or evaluate without the appearance head.
    #[arg(long)]
    pub occupancy_only: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Datagen(c)
            | Command::Train(c)
            | Command::Eval(c)
            | Command::Ipm(c)
            | Command::Colorize(c)
            | Command::Report(c) => c,
        }
    }
}

/// Loads the config named on the command line and applies the overrides.
pub fn resolve(command: &Command) -> Result<RunConfig> {
    let common = command.common();
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(out) = &common.out {
        match command {
            Command::Datagen(_) => cfg.data.dir = out.clone(),
            _ => cfg.out = out.clone(),
        }
    }
    if let Some(seed) = common.seed {
        match command {
            Command::Datagen(_) => cfg.data.seed = seed,
            _ => cfg.train.seed = seed,
        }
    }
    if common.occupancy_only {
        cfg.model.appearance_head = false;
        cfg.model.lambda_app = 0.0;
    }
    Ok(cfg)
}

pub fn run(command: &Command) -> Result<()> {
    let cfg = resolve(command)?;
    match command {
        Command::Datagen(_) => cmd_datagen(&cfg).map(|m| {
            println!("wrote {} scenes to {}", m.scenes.len(), cfg.data.dir.display());
        }),
        Command::Train(_) => cmd_train(&cfg).map(|s| {
            println!(
                "{} steps, final loss_occ {:.4} loss_app {:.4}; checkpoint {}",
                s.steps,
                s.last.loss_occ,
                s.last.loss_app,
                s.checkpoint.display()
            );
        }),
        Command::Eval(_) => cmd_eval(&cfg).map(|r| {
            for c in &r.iou {
                println!("{:<8} IoU {:.4}", c.class, c.iou);
            }
            if let Some(l1) = r.appearance_l1 {
                println!("appearance L1 {l1:.4}");
            }
        }),
        Command::Ipm(_) => cmd_ipm(&cfg).map(|s| println!("{} of {} cells covered", s.valid_cells, s.cells)),
        Command::Colorize(_) => cmd_colorize(&cfg).map(|s| {
            println!("{} painted cells, {} cuboids ({} unseen)", s.valid_cells, s.cuboids, s.unseen_cuboids)
        }),
        Command::Report(_) => cmd_report(&cfg).map(|text| print!("{text}")),
    }
}
