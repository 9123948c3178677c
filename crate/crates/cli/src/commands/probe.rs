use std::path::{Path, PathBuf};

use anl::diffusion::EpsilonNetwork;
use anl::probe::{batch_probe, DEFAULT_TIMESTEP};
use clap::Args;
use serde::{Deserialize, Serialize};

use super::{emit_json, load_manifests, noise_dir, required};
use crate::{RunContext, Stage};

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct Probe {
    #[arg(long)]
    pub manifest: Vec<PathBuf>,
    /// ε-network used as the probe.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_TIMESTEP)]
    pub t: usize,
    #[arg(long, env = "ANL_CACHE_DIR", default_value = ".anl-cache")]
    pub cache_dir: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Stage for Probe {
    const NAME: &'static str = "probe";

    fn out(&self) -> Option<&Path> {
        self.out.as_deref()
    }

    fn run(&self, ctx: &mut RunContext) -> anyhow::Result<()> {
        let manifest = load_manifests(&self.manifest, "manifest")?;
        let net = EpsilonNetwork::load(required(&self.checkpoint, "checkpoint")?)?;
        let (cache, stats) = batch_probe(&manifest, self.t, &net, &noise_dir(&self.cache_dir))?;
        emit_json(
            ctx,
            "probe_stats.json",
            &serde_json::json!({
                "probe_id": net.id(),
                "t": self.t,
                "stats": stats,
                "skipped": cache.skipped(),
            }),
        )?;
        ctx.note("probe_id", net.id());
        ctx.note("stats", stats);
        println!(
            "probe {} at t = {}: {} probed, {} reused, {} skipped",
            net.id(),
            self.t,
            stats.probed,
            stats.reused,
            stats.skipped
        );
        Ok(())
    }
}
