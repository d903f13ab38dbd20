//! Argument handling and the top-level run loop.

use std::path::PathBuf;

use anyhow::Result;
use clap::Parser;

use crate::config::PipelineConfig;
use crate::runlog::{RunLog, WorkDirLock};
use crate::stages::{Pipeline, RunOptions, Stage, PIPELINE};

#[derive(Debug, Parser)]
#[command(name = "saeaudit", version, about = "Train a small GPT, fit sparse autoencoders to its hidden states and audit their latents against labeled concepts")]
pub struct Cli {
    /// Pipeline config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Stage to run, or `all` for prepare through report.
    #[arg(long, default_value = "all")]
    pub stage: String,
    /// Re-run even when the stage's manifest says it is up to date.
    #[arg(long)]
    pub force: bool,
    /// Global seed, replacing the config's.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated 1-based layers for extract, train-sae, eval-sae and audit.
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<u32>>,
    /// Work dir, replacing `paths.work_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Prompt for `generate`.
    #[arg(long)]
    pub prompt: Option<String>,
    /// Tokens to sample in `generate`.
    #[arg(long)]
    pub max_new: Option<usize>,
    /// Sampling temperature for `generate`.
    #[arg(long)]
    pub temperature: Option<f64>,
}

fn stages(name: &str) -> Result<Vec<Stage>> {
    if name == "all" {
        Ok(PIPELINE.to_vec())
    } else {
        Ok(vec![name.parse()?])
    }
}

fn load(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::load(&cli.config, std::env::vars())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.model.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.paths.work_dir = out.clone();
    }
    if let Some(p) = &cli.prompt {
        cfg.generate.prompt = p.clone();
    }
    if let Some(n) = cli.max_new {
        cfg.generate.max_new = n;
    }
    if let Some(t) = cli.temperature {
        cfg.generate.temperature = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs the requested stages; every failure becomes an error record.
/// Returns the process exit code.
pub fn run(cli: &Cli, log: &mut RunLog) -> i32 {
    if let Err(e) = run_inner(cli, log) {
        log.error(None, format!("{e:#}"));
    }
    i32::from(log.errored())
}

fn run_inner(cli: &Cli, log: &mut RunLog) -> Result<()> {
    let plan = stages(&cli.stage)?;
    let cfg = load(cli)?;
    let _lock = WorkDirLock::acquire(&cfg.paths.work_dir)?;
    log.attach(&cfg.paths.work_dir)?;
    log.info(None, "run", format!("stages: {}", cli.stage), serde_json::json!({"seed": cfg.seed}));
    let mut pipeline = Pipeline {
        cfg: &cfg,
        opts: RunOptions {
            force: cli.force,
            layers: cli.layers.clone(),
        },
        log,
    };
    for stage in plan {
        pipeline
            .run_stage(stage)
            .map_err(|e| e.context(format!("stage `{stage}` failed")))?;
    }
    Ok(())
}
