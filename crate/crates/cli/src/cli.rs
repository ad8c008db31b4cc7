use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::analyze::{cmd_analyze, selected, Analysis};
use crate::config::RunConfig;
use crate::error::Result;
use crate::simulate::{cmd_perturb, cmd_simulate};

#[derive(Debug, Parser)]
#[command(name = "rscope", version, about = "Representation analysis for masked-autoencoder encoders")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic images and write one trace archive per (image, mask, level).
    Simulate(Common),
    /// Write perturbed images and their PSNR/SSIM.
    Perturb(Common),
    /// Class-subspace principal angles per layer.
    Subspace(Common),
    /// Mean attention distance and rollout scores.
    Attn(Common),
    /// Feature retention, mean drop and alignment per perturbation level.
    Indicators(Common),
    /// Every analysis enabled in the configuration.
    Report(Common),
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Subspace dimension.
    #[arg(long)]
    pub k: Option<usize>,
    /// Common-feature membership fraction.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Active features per head.
    #[arg(long = "topk")]
    pub top_k: Option<usize>,
    /// Blur preset I..X; repeatable.
    #[arg(long = "blur-level")]
    pub blur_level: Vec<String>,
    /// Occlusion fraction in [0, 1]; repeatable.
    #[arg(long = "occlude-frac")]
    pub occlude_frac: Vec<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Trace directory holding manifest.json.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Also render SVG plots.
    #[arg(long)]
    pub plots: bool,
}

impl Common {
    /// Configuration file (or defaults) with every given flag applied.
    pub fn effective_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.k {
            cfg.k = v;
        }
        if let Some(v) = self.tau {
            cfg.tau = v;
        }
        if let Some(v) = self.top_k {
            cfg.top_k = v;
        }
        if !self.blur_level.is_empty() {
            cfg.blur_levels = self.blur_level.clone();
        }
        if !self.occlude_frac.is_empty() {
            cfg.occlusion_fracs = self.occlude_frac.clone();
        }
        if let Some(v) = &self.out {
            cfg.out = v.clone();
        }
        if let Some(v) = &self.input {
            cfg.traces = Some(v.clone());
        }
        if let Some(v) = self.workers {
            cfg.workers = v;
        }
        cfg.plots |= self.plots;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Runs one subcommand, returning a short line for stdout.
pub fn run(command: &Command) -> Result<String> {
    match command {
        Command::Simulate(c) => {
            let s = cmd_simulate(&c.effective_config()?)?;
            Ok(format!("wrote {} trace archives and {}", s.archives.len(), s.manifest.display()))
        }
        Command::Perturb(c) => {
            let files = cmd_perturb(&c.effective_config()?)?;
            Ok(format!("wrote {} files", files.len()))
        }
        Command::Subspace(c) => analyze(c, "subspace", &[Analysis::Subspace]),
        Command::Attn(c) => analyze(c, "attn", &[Analysis::Attention, Analysis::Rollout]),
        Command::Indicators(c) => analyze(c, "indicators", &[Analysis::Indicators]),
        Command::Report(c) => {
            let cfg = c.effective_config()?;
            let m = cmd_analyze(&cfg, "report", &selected(&cfg))?;
            Ok(format!("wrote {}", m.display()))
        }
    }
}

fn analyze(c: &Common, name: &str, analyses: &[Analysis]) -> Result<String> {
    let m = cmd_analyze(&c.effective_config()?, name, analyses)?;
    Ok(format!("wrote {}", m.display()))
}
