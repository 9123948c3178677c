use std::path::{Path, PathBuf};

use anl::data::{load_and_normalize, Label, Split};
use anl::diffusion::{train_epsilon_net, Geometry, LatentImage, NoiseSchedule, TrainingConfig, UNetConfig};
use clap::Args;
use serde::{Deserialize, Serialize};

use super::{emit, emit_json, load_manifests};
use crate::{RunContext, Stage};

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainDiffusion {
    /// Manifest(s); the real rows of the train split are the training set
    /// and those of the val split the held-out set.
    #[arg(long)]
    pub manifest: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of diffusion steps T.
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub beta_start: f64,
    #[arg(long, default_value_t = 0.02)]
    pub beta_end: f64,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 2e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 8)]
    pub base_width: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 2])]
    pub channel_mults: Vec<usize>,
    #[arg(long, default_value_t = 32)]
    pub time_embed_dim: usize,
    #[arg(long, default_value_t = 4)]
    pub groups: usize,
    /// Emit 2C output channels; the first C are the noise prediction.
    #[arg(long, default_value_t = false, action = clap::ArgAction::Set)]
    pub learned_variance: bool,
    /// Use only the first N training images.
    #[arg(long)]
    pub max_images: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 1)]
    pub channels: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl Stage for TrainDiffusion {
    const NAME: &'static str = "train-diffusion";

    fn out(&self) -> Option<&Path> {
        self.out.as_deref()
    }

    fn seed(&self) -> Option<u64> {
        Some(self.seed)
    }

    fn run(&self, ctx: &mut RunContext) -> anyhow::Result<()> {
        let manifest = load_manifests(&self.manifest, "manifest")?;
        let load = |split: Split, limit: Option<usize>| -> anl::Result<Vec<LatentImage>> {
            manifest
                .rows()
                .iter()
                .filter(|r| r.split == split && r.label == Label::Real)
                .take(limit.unwrap_or(usize::MAX))
                .map(|r| load_and_normalize(&r.path, self.size, self.channels))
                .collect()
        };
        let train = load(Split::Train, self.max_images)?;
        let heldout = load(Split::Val, None)?;
        log::info!(
            "training ε-network on {} images ({} held out)",
            train.len(),
            heldout.len()
        );

        let schedule = NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)?;
        let unet = UNetConfig {
            geometry: Geometry::square(self.channels, self.size),
            base_width: self.base_width,
            channel_mults: self.channel_mults.clone(),
            time_embed_dim: self.time_embed_dim,
            groups: self.groups,
            learned_variance: self.learned_variance,
        };
        let config = TrainingConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
            max_steps: self.max_steps,
        };
        let (net, report) = train_epsilon_net(&train, &heldout, &schedule, unet, &config)?;

        let ckpt = ctx.out.join("epsilon.ckpt");
        net.save(&ckpt)?;
        ctx.artifact(&ckpt);
        emit_json(ctx, "train_report.json", &report)?;
        let mut csv = String::from("epoch,loss\n");
        for (i, l) in report.epoch_losses.iter().enumerate() {
            csv.push_str(&format!("{i},{l}\n"));
        }
        emit(ctx, "loss.csv", csv.as_bytes())?;
        ctx.note("network_id", net.id());
        ctx.note("parameters", net.params().num_scalars());
        ctx.note("initial_heldout_loss", report.initial_heldout_loss);
        ctx.note("final_heldout_loss", report.final_heldout_loss);
        println!(
            "ε-network {} trained; held-out loss {:.4} -> {:.4}",
            net.id(),
            report.initial_heldout_loss,
            report.final_heldout_loss
        );
        Ok(())
    }
}
