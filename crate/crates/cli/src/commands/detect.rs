use std::path::{Path, PathBuf};

use anl::data::{split_manifest, Protocol, Split};
use anl::detector::{predict_samples, prepare_samples, train_detector, Detector};
use anl::eval::{accuracy, average_precision};
use anl::probe::{NoiseCache, DEFAULT_TIMESTEP};
use clap::Args;
use serde::{Deserialize, Serialize};

use super::{emit, emit_json, load_manifests, load_probe, noise_dir, required, DetectorArgs};
use crate::{RunContext, Stage};

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainDetector {
    #[arg(long)]
    pub manifest: Vec<PathBuf>,
    /// ε-network used as the probe; not needed for the image baseline.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, env = "ANL_CACHE_DIR", default_value = ".anl-cache")]
    pub cache_dir: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_TIMESTEP)]
    pub t: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub detector: DetectorArgs,
}

impl Stage for TrainDetector {
    const NAME: &'static str = "train-detector";

    fn out(&self) -> Option<&Path> {
        self.out.as_deref()
    }

    fn seed(&self) -> Option<u64> {
        Some(self.detector.seed)
    }

    fn run(&self, ctx: &mut RunContext) -> anyhow::Result<()> {
        let manifest = load_manifests(&self.manifest, "manifest")?;
        let bundle = split_manifest(&manifest, Protocol::Standard, self.detector.split_seed)?;
        let probe = load_probe(&self.checkpoint)?;
        let cfg = self.detector.config(self.t, probe.as_ref())?;
        let probe_id = probe.as_ref().map(|p| p.id());
        let cache = if cfg.needs_probe() {
            Some(NoiseCache::open(&noise_dir(&self.cache_dir))?)
        } else {
            None
        };
        let prep = |s: Split| prepare_samples(&bundle.rows(s), cache.as_ref(), probe_id.as_deref(), &cfg);
        let (train, val, test) = (prep(Split::Train)?, prep(Split::Val)?, prep(Split::Test)?);
        let n_fake = train.iter().filter(|s| s.label > 0.5).count();
        log::info!(
            "training {} on {} real / {n_fake} fake images (balanced sampling: {})",
            cfg.variant(),
            train.len() - n_fake,
            self.detector.balance
        );

        let (det, report) = train_detector(&train, &val, cfg, probe_id, &self.detector.hyper())?;
        let ckpt = ctx.out.join("detector.ckpt");
        det.save(&ckpt)?;
        ctx.artifact(&ckpt);
        emit_json(ctx, "train_report.json", &report)?;
        ctx.note("variant", det.config().variant());
        ctx.note("best_epoch", report.best_epoch);
        ctx.note("train_real", train.len() - n_fake);
        ctx.note("train_fake", n_fake);

        if !test.is_empty() {
            let preds = predict_samples(&det, &test)?;
            let labels: Vec<f64> = test.iter().map(|s| s.label).collect();
            let scores: Vec<f64> = preds.iter().map(|p| p.probability).collect();
            let acc = accuracy(&preds, &labels)?;
            let ap = average_precision(&scores, &labels).ok();
            ctx.note("test_acc", acc);
            ctx.note("test_ap", ap);
            println!(
                "{}: test ACC {acc:.4}, AP {}",
                det.config().variant(),
                ap.map_or("n/a".into(), |a| format!("{a:.4}"))
            );
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct Infer {
    /// Trained detector checkpoint.
    #[arg(long)]
    pub detector: Option<PathBuf>,
    /// ε-network the detector was trained with.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Image file(s) to classify.
    #[arg(long)]
    pub image: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write each attention map as a PNG.
    #[arg(long, default_value_t = false, action = clap::ArgAction::Set)]
    pub save_attention: bool,
}

impl Stage for Infer {
    const NAME: &'static str = "infer";

    fn out(&self) -> Option<&Path> {
        self.out.as_deref()
    }

    fn run(&self, ctx: &mut RunContext) -> anyhow::Result<()> {
        if self.image.is_empty() {
            return Err(crate::UsageError("missing --image".into()).into());
        }
        let det = Detector::load(required(&self.detector, "detector")?)?;
        let probe = load_probe(&self.checkpoint)?;
        let mut lines = String::new();
        for (i, path) in self.image.iter().enumerate() {
            let inf = det.infer(path, probe.as_ref())?;
            let p = inf.prediction;
            let label = if p.label == 1 { "fake" } else { "real" };
            println!("{}\t{label}\tp(fake) = {:.6}", path.display(), p.probability);
            lines.push_str(&serde_json::to_string(&serde_json::json!({
                "path": path,
                "logit": p.logit,
                "probability": p.probability,
                "label": label,
            }))?);
            lines.push('\n');
            if let (true, Some(map)) = (self.save_attention, &inf.attention) {
                let png = ctx.out.join(format!("attention_{i:04}.png"));
                map.save_png(&png)?;
                ctx.artifact(png);
            }
        }
        emit(ctx, "predictions.jsonl", lines.as_bytes())?;
        ctx.note("images", self.image.len());
        Ok(())
    }
}
