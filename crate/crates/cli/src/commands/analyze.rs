use std::path::{Path, PathBuf};

use anl::analysis::{local_entropy_map, mann_whitney_greater, mean_psd, radial_psd, LEM_BINS, LEM_STRIDE, LEM_WINDOW};
use anl::data::{DatasetManifest, Label, ManifestRow, Split};
use anl::probe::{NoiseCache, PredictedNoise, DEFAULT_TIMESTEP};
use clap::Args;
use serde::{Deserialize, Serialize};

use super::{emit, emit_json, load_manifests, noise_dir, required};
use crate::{RunContext, UsageError};

/// Rows, cache and probe shared by both analyses.
#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct NoiseSource {
    #[arg(long)]
    pub manifest: Vec<PathBuf>,
    /// ε-network whose cached predictions are analysed.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, env = "ANL_CACHE_DIR", default_value = ".anl-cache")]
    pub cache_dir: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_TIMESTEP)]
    pub t: usize,
    /// `all`, `train`, `val` or `test`.
    #[arg(long, default_value = "all")]
    pub split: String,
    /// Keep at most this many rows per class, in manifest order.
    #[arg(long)]
    pub max_per_class: Option<usize>,
}

/// Cached noise per class, reals first.
struct Corpus {
    probe_id: String,
    real: Vec<(ManifestRow, PredictedNoise)>,
    fake: Vec<(ManifestRow, PredictedNoise)>,
}

impl NoiseSource {
    fn load(&self) -> anyhow::Result<Corpus> {
        let split = match self.split.as_str() {
            "all" => None,
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            other => return Err(UsageError(format!("unknown split `{other}`")).into()),
        };
        let manifest: DatasetManifest = load_manifests(&self.manifest, "manifest")?;
        let probe_id = anl::diffusion::EpsilonNetwork::load(required(&self.checkpoint, "checkpoint")?)?.id();
        let cache = NoiseCache::open(&noise_dir(&self.cache_dir))?;
        let pick = |label: Label| -> Vec<&ManifestRow> {
            manifest
                .rows()
                .iter()
                .filter(|r| r.label == label && split.is_none_or(|s| r.split == s))
                .take(self.max_per_class.unwrap_or(usize::MAX))
                .collect()
        };
        let (real, fake) = (pick(Label::Real), pick(Label::Fake));
        let missing = cache.missing(real.iter().chain(&fake).copied(), &probe_id, self.t);
        if !missing.is_empty() {
            return Err(anl::Error::MissingCache(missing).into());
        }
        let fetch = |rows: Vec<&ManifestRow>| -> anl::Result<Vec<(ManifestRow, PredictedNoise)>> {
            rows.into_iter()
                .map(|r| Ok((r.clone(), cache.require(r, &probe_id, self.t)?)))
                .collect()
        };
        Ok(Corpus {
            real: fetch(real)?,
            fake: fetch(fake)?,
            probe_id,
        })
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct AnalyzePsd {
    #[command(flatten)]
    #[serde(flatten)]
    pub source: NoiseSource,
}

impl crate::Stage for AnalyzePsd {
    const NAME: &'static str = "analyze-psd";

    fn out(&self) -> Option<&Path> {
        self.source.out.as_deref()
    }

    /// Per image, the flatness statistic is the coefficient of variation of
    /// the mid-band power; the test asks whether reals are less flat.
    fn run(&self, ctx: &mut RunContext) -> anyhow::Result<()> {
        let corpus = self.source.load()?;
        let mut per_image = String::from("content_hash,label,generator,mid_flatness\n");
        let mut curves = [Vec::new(), Vec::new()];
        let mut flat = [Vec::new(), Vec::new()];
        let mut band = (0, 0);
        for (k, (name, rows)) in [("real", &corpus.real), ("fake", &corpus.fake)].into_iter().enumerate() {
            for (row, noise) in rows {
                let curve = radial_psd(noise.values())?;
                band = curve.mid_band();
                let f = curve.flatness(band.0, band.1);
                per_image.push_str(&format!("{},{name},{},{f}\n", row.content_hash, row.generator));
                flat[k].push(f);
                curves[k].push(curve);
            }
        }
        let [real_curves, fake_curves] = curves;
        let real_mean = mean_psd(&real_curves)?;
        let fake_mean = mean_psd(&fake_curves)?;
        let test = mann_whitney_greater(&flat[0], &flat[1])?;
        emit(ctx, "psd_real.csv", real_mean.to_csv().as_bytes())?;
        emit(ctx, "psd_fake.csv", fake_mean.to_csv().as_bytes())?;
        emit(ctx, "psd_per_image.csv", per_image.as_bytes())?;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let summary = serde_json::json!({
            "probe_id": corpus.probe_id,
            "t": self.source.t,
            "n_real": flat[0].len(),
            "n_fake": flat[1].len(),
            "mid_band": [band.0, band.1],
            "mean_flatness_real": mean(&flat[0]),
            "mean_flatness_fake": mean(&flat[1]),
            "mean_curve_flatness_real": real_mean.flatness(band.0, band.1),
            "mean_curve_flatness_fake": fake_mean.flatness(band.0, band.1),
            "real_less_flat": test,
        });
        emit_json(ctx, "psd_summary.json", &summary)?;
        ctx.note("p_value", test.p_value);
        println!(
            "mid-band flatness: real {:.4}, fake {:.4}; one-sided p = {:.3e}",
            mean(&flat[0]),
            mean(&flat[1]),
            test.p_value
        );
        Ok(())
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct AnalyzeLem {
    #[command(flatten)]
    #[serde(flatten)]
    pub source: NoiseSource,
    #[arg(long, default_value_t = LEM_WINDOW)]
    pub window: usize,
    #[arg(long, default_value_t = LEM_STRIDE)]
    pub stride: usize,
    #[arg(long, default_value_t = LEM_BINS)]
    pub bins: usize,
    /// Maps per class written as PNG and CSV.
    #[arg(long, default_value_t = 4)]
    pub examples: usize,
}

impl crate::Stage for AnalyzeLem {
    const NAME: &'static str = "analyze-lem";

    fn out(&self) -> Option<&Path> {
        self.source.out.as_deref()
    }

    fn run(&self, ctx: &mut RunContext) -> anyhow::Result<()> {
        let corpus = self.source.load()?;
        let mut per_image = String::from("content_hash,label,generator,mean_entropy\n");
        let mut means = [Vec::new(), Vec::new()];
        for (k, (name, rows)) in [("real", &corpus.real), ("fake", &corpus.fake)].into_iter().enumerate() {
            for (i, (row, noise)) in rows.iter().enumerate() {
                let map = local_entropy_map(noise.values(), self.window, self.stride, self.bins)?;
                per_image.push_str(&format!(
                    "{},{name},{},{}\n",
                    row.content_hash,
                    row.generator,
                    map.mean()
                ));
                means[k].push(map.mean());
                if i < self.examples {
                    emit(ctx, &format!("lem_{name}_{i:02}.csv"), map.to_csv().as_bytes())?;
                    let png = ctx.out.join(format!("lem_{name}_{i:02}.png"));
                    map.save_png(&png)?;
                    ctx.artifact(png);
                }
            }
        }
        emit(ctx, "lem_per_image.csv", per_image.as_bytes())?;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let summary = serde_json::json!({
            "probe_id": corpus.probe_id,
            "t": self.source.t,
            "window": self.window,
            "stride": self.stride,
            "bins": self.bins,
            "n_real": means[0].len(),
            "n_fake": means[1].len(),
            "mean_entropy_real": mean(&means[0]),
            "mean_entropy_fake": mean(&means[1]),
            "real_greater": mann_whitney_greater(&means[0], &means[1])?,
            "fake_greater": mann_whitney_greater(&means[1], &means[0])?,
        });
        emit_json(ctx, "lem_summary.json", &summary)?;
        println!(
            "mean local entropy: real {:.4} bits, fake {:.4} bits",
            mean(&means[0]),
            mean(&means[1])
        );
        Ok(())
    }
}
