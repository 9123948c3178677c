mod analyze;
mod data;
mod detect;
mod diffusion;
mod evaluate;
mod probe;
mod report;

use std::path::{Path, PathBuf};

use anl::data::DatasetManifest;
use anl::detector::{BackboneConfig, DetectorConfig, DetectorHyper, InputMode};
use anl::diffusion::{EpsilonNetwork, Geometry};
use anl_nn::checkpoint::write_atomic;
use clap::{ArgAction, ArgMatches, Args, Subcommand};
use serde::{Deserialize, Serialize};

pub use analyze::{AnalyzeLem, AnalyzePsd};
pub use data::{GenCorpus, SampleFakes};
pub use detect::{Infer, TrainDetector};
pub use diffusion::TrainDiffusion;
pub use evaluate::{Eval, SweepTimestep};
pub use probe::Probe;
pub use report::Report;

use crate::{execute, Cli, RunContext, UsageError};

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a procedural "real" corpus and its manifest.
    GenCorpus(GenCorpus),
    /// Train a DDPM ε-network on the training reals of a manifest.
    TrainDiffusion(TrainDiffusion),
    /// Draw images from a trained ε-network by ancestral sampling.
    SampleFakes(SampleFakes),
    /// Cache single-step predicted noise for every manifest row.
    Probe(Probe),
    /// Train one detector on the standard split.
    TrainDetector(TrainDetector),
    /// Classify image files with a trained detector.
    Infer(Infer),
    /// Run an evaluation protocol, optionally as an attention ablation.
    Eval(Eval),
    /// Re-probe, retrain and evaluate at several probe timesteps.
    SweepTimestep(SweepTimestep),
    /// Radial power spectra of predicted noise, real vs fake.
    AnalyzePsd(AnalyzePsd),
    /// Local entropy maps of predicted noise, real vs fake.
    AnalyzeLem(AnalyzeLem),
    /// Collect evaluation and analysis outputs into one markdown report.
    Report(Report),
}

pub(crate) fn dispatch(cli: &Cli, m: &ArgMatches, argv: &[String]) -> anyhow::Result<()> {
    match &cli.command {
        Command::GenCorpus(c) => execute(cli, c, m, argv),
        Command::TrainDiffusion(c) => execute(cli, c, m, argv),
        Command::SampleFakes(c) => execute(cli, c, m, argv),
        Command::Probe(c) => execute(cli, c, m, argv),
        Command::TrainDetector(c) => execute(cli, c, m, argv),
        Command::Infer(c) => execute(cli, c, m, argv),
        Command::Eval(c) => execute(cli, c, m, argv),
        Command::SweepTimestep(c) => execute(cli, c, m, argv),
        Command::AnalyzePsd(c) => execute(cli, c, m, argv),
        Command::AnalyzeLem(c) => execute(cli, c, m, argv),
        Command::Report(c) => execute(cli, c, m, argv),
    }
}

/// Detector and training settings shared by every detector-training stage.
#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct DetectorArgs {
    #[arg(long, default_value_t = 1e-5)]
    pub lr: f64,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = InputMode::Noise)]
    pub input_mode: InputMode,
    /// Modulate features with the noise attention map.
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    pub use_attention: bool,
    /// Undersample the majority class each epoch.
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    pub balance: bool,
    /// Seed of the content-hash split assignment.
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    /// Image side used when no probe fixes the geometry.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 1)]
    pub channels: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl DetectorArgs {
    pub fn hyper(&self) -> DetectorHyper {
        DetectorHyper {
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            balance: self.balance,
        }
    }

    /// Detector configuration at probe timestep `t`. With a probe, the
    /// geometry is the probe's and must agree with `size`/`channels`.
    pub fn config(&self, t: usize, probe: Option<&EpsilonNetwork>) -> anyhow::Result<DetectorConfig> {
        let geometry = Geometry::square(self.channels, self.size);
        if let Some(p) = probe {
            if p.geometry() != geometry {
                return Err(UsageError(format!(
                    "probe geometry {:?} differs from --size {} --channels {}",
                    p.geometry().shape(),
                    self.size,
                    self.channels
                ))
                .into());
            }
        }
        let cfg = DetectorConfig {
            input_mode: self.input_mode,
            use_attention: self.use_attention,
            backbone: BackboneConfig::desk(),
            timestep: t,
            geometry,
        };
        if cfg.needs_probe() && probe.is_none() {
            return Err(UsageError(format!("variant {} needs --checkpoint", cfg.variant())).into());
        }
        Ok(cfg)
    }
}

pub(crate) fn required<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, UsageError> {
    v.as_deref().ok_or_else(|| UsageError(format!("missing --{flag}")))
}

pub(crate) fn load_manifests(paths: &[PathBuf], flag: &str) -> anyhow::Result<DatasetManifest> {
    if paths.is_empty() {
        return Err(UsageError(format!("missing --{flag}")).into());
    }
    let parts = paths
        .iter()
        .map(|p| DatasetManifest::read(p))
        .collect::<anl::Result<Vec<_>>>()?;
    Ok(DatasetManifest::merge(&parts.iter().collect::<Vec<_>>())?)
}

pub(crate) fn load_probe(checkpoint: &Option<PathBuf>) -> anyhow::Result<Option<EpsilonNetwork>> {
    checkpoint
        .as_deref()
        .map(|p| EpsilonNetwork::load(p).map_err(anyhow::Error::from))
        .transpose()
}

/// Noise tensors live under `<cache root>/noise`.
pub(crate) fn noise_dir(cache_root: &Path) -> PathBuf {
    cache_root.join("noise")
}

/// Writes `<out>/<name>` atomically and records it as an artifact.
pub(crate) fn emit(ctx: &mut RunContext, name: &str, bytes: &[u8]) -> anyhow::Result<PathBuf> {
    let path = ctx.out.join(name);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| anl::Error::io(dir, e))?;
    }
    write_atomic(&path, bytes).map_err(|e| anl::Error::io(&path, e))?;
    ctx.artifact(&path);
    Ok(path)
}

pub(crate) fn emit_json(ctx: &mut RunContext, name: &str, value: &impl Serialize) -> anyhow::Result<PathBuf> {
    emit(ctx, name, serde_json::to_string_pretty(value)?.as_bytes())
}
