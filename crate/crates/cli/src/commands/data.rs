use std::path::{Path, PathBuf};

use anl::data::corpus::MANIFEST_NAME;
use anl::data::split::assign_splits;
use anl::data::{save_png, synthesize_real_corpus, DatasetManifest, Label, ManifestRow, Split};
use anl::diffusion::{reverse_sample_batch, EpsilonNetwork, Geometry};
use anl::rng;
use clap::Args;
use serde::{Deserialize, Serialize};

use super::required;
use crate::{RunContext, Stage};

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GenCorpus {
    /// Directory for the PNGs and manifest.jsonl.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 1)]
    pub channels: usize,
    /// Seeds both the images and the split assignment.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn split_counts(m: &DatasetManifest) -> serde_json::Value {
    let count = |s: Split| m.rows().iter().filter(|r| r.split == s).count();
    serde_json::json!({"train": count(Split::Train), "val": count(Split::Val), "test": count(Split::Test)})
}

impl Stage for GenCorpus {
    const NAME: &'static str = "gen-corpus";

    fn out(&self) -> Option<&Path> {
        self.out.as_deref()
    }

    fn seed(&self) -> Option<u64> {
        Some(self.seed)
    }

    fn run(&self, ctx: &mut RunContext) -> anyhow::Result<()> {
        let g = Geometry::square(self.channels, self.size);
        let m = synthesize_real_corpus(self.n, self.seed, &ctx.out, g)?;
        for row in m.rows() {
            ctx.artifact(&row.path);
        }
        ctx.artifact(ctx.out.join(MANIFEST_NAME));
        ctx.note("rows", m.len());
        ctx.note("splits", split_counts(&m));
        println!("wrote {} images to {}", m.len(), ctx.out.display());
        Ok(())
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SampleFakes {
    /// Trained ε-network.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// Generator id written to the manifest.
    #[arg(long, default_value = "ddpm")]
    pub generator: String,
    /// Images per reverse-chain batch.
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    /// Seeds the per-image reverse chains and the split assignment.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl Stage for SampleFakes {
    const NAME: &'static str = "sample-fakes";

    fn out(&self) -> Option<&Path> {
        self.out.as_deref()
    }

    fn seed(&self) -> Option<u64> {
        Some(self.seed)
    }

    fn run(&self, ctx: &mut RunContext) -> anyhow::Result<()> {
        if self.generator.is_empty() || self.generator == anl::data::REAL_GENERATOR {
            return Err(crate::UsageError(format!("invalid generator id {:?}", self.generator)).into());
        }
        let net = EpsilonNetwork::load(required(&self.checkpoint, "checkpoint")?)?;
        let seeds: Vec<u64> = (0..self.n)
            .map(|i| rng::derive_seed(self.seed, &format!("fake/{i}")))
            .collect();
        let mut rows = Vec::with_capacity(self.n);
        let out = std::path::absolute(&ctx.out).map_err(|e| anl::Error::io(&ctx.out, e))?;
        for (chunk_idx, chunk) in seeds.chunks(self.batch.max(1)).enumerate() {
            let images = reverse_sample_batch(&net, net.schedule(), chunk)?;
            for (j, img) in images.iter().enumerate() {
                let i = chunk_idx * self.batch.max(1) + j;
                let path = out.join(format!("fake_{i:05}.png"));
                save_png(img, &path)?;
                rows.push(ManifestRow::from_file(
                    &path,
                    Label::Fake,
                    &self.generator,
                    Split::Train,
                )?);
                ctx.artifact(&path);
            }
            log::info!("sampled {}/{} images", rows.len(), self.n);
        }
        assign_splits(&mut rows, self.seed);
        let m = DatasetManifest::new(rows)?;
        let manifest_path = out.join(MANIFEST_NAME);
        m.write(&manifest_path)?;
        ctx.artifact(manifest_path);
        ctx.note("rows", m.len());
        ctx.note("generator", &self.generator);
        ctx.note("network_id", net.id());
        ctx.note("splits", split_counts(&m));
        println!(
            "sampled {} `{}` images into {}",
            m.len(),
            self.generator,
            ctx.out.display()
        );
        Ok(())
    }
}
