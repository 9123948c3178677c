use std::path::{Path, PathBuf};

use anl::data::{split_manifest, Protocol, SplitBundle};
use anl::eval::report::{render_ablation, render_matrix, render_sweep, AblationRow};
use anl::eval::{run_protocol, sweep_timestep, EvalMatrix, ProtocolData, ProtocolRun};
use anl::probe::{NoiseCache, DEFAULT_TIMESTEP};
use clap::Args;
use serde::{Deserialize, Serialize};

use super::{emit, emit_json, load_manifests, load_probe, noise_dir, DetectorArgs};
use crate::{RunContext, Stage, UsageError};

/// Safe file stem for a generator id.
fn stem(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn bundles(
    manifest: &[PathBuf],
    test_manifest: &[PathBuf],
    protocol: Protocol,
    seed: u64,
) -> anyhow::Result<(SplitBundle, Option<SplitBundle>)> {
    let train = split_manifest(&load_manifests(manifest, "manifest")?, protocol, seed)?;
    let test = match (protocol, test_manifest.is_empty()) {
        (Protocol::CrossDataset, false) => Some(split_manifest(
            &load_manifests(test_manifest, "test-manifest")?,
            protocol,
            seed,
        )?),
        (Protocol::CrossDataset, true) => return Err(UsageError("cross_dataset needs --test-manifest".into()).into()),
        (_, false) => return Err(UsageError("--test-manifest is only used by cross_dataset".into()).into()),
        (_, true) => None,
    };
    Ok((train, test))
}

/// Matrix files plus one checkpoint and training report per row.
fn write_run(ctx: &mut RunContext, dir: &str, run: &ProtocolRun) -> anyhow::Result<()> {
    let prefix = if dir.is_empty() {
        String::new()
    } else {
        format!("{dir}/")
    };
    write_matrix(ctx, &prefix, &run.matrix)?;
    for row in &run.rows {
        let name = stem(&row.train_generator);
        let ckpt = ctx.out.join(format!("{prefix}detectors/{name}.ckpt"));
        std::fs::create_dir_all(ckpt.parent().expect("has parent")).map_err(|e| anl::Error::io(&ckpt, e))?;
        row.detector.save(&ckpt)?;
        ctx.artifact(ckpt);
        emit_json(ctx, &format!("{prefix}detectors/{name}.report.json"), &row.report)?;
        let mut hashes = row.train_hashes.join("\n");
        hashes.push('\n');
        emit(
            ctx,
            &format!("{prefix}detectors/{name}.train_hashes.txt"),
            hashes.as_bytes(),
        )?;
    }
    Ok(())
}

fn write_matrix(ctx: &mut RunContext, prefix: &str, m: &EvalMatrix) -> anyhow::Result<()> {
    let dir = ctx.out.join(prefix);
    std::fs::create_dir_all(&dir).map_err(|e| anl::Error::io(&dir, e))?;
    m.write_all(&dir)?;
    for f in ["matrix.json", "acc.csv", "ap.csv", "acc_heatmap.png"] {
        ctx.artifact(dir.join(f));
    }
    Ok(())
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct Eval {
    /// Training-side manifest(s).
    #[arg(long)]
    pub manifest: Vec<PathBuf>,
    /// Test-side manifest(s) for the cross-dataset protocol.
    #[arg(long)]
    pub test_manifest: Vec<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, env = "ANL_CACHE_DIR", default_value = ".anl-cache")]
    pub cache_dir: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = Protocol::Standard)]
    pub protocol: Protocol,
    /// Row label of the cross-dataset protocol.
    #[arg(long, default_value = "train")]
    pub train_name: String,
    #[arg(long, default_value_t = DEFAULT_TIMESTEP)]
    pub t: usize,
    /// Run with attention off and on and emit paired rows.
    #[arg(long, default_value_t = false, action = clap::ArgAction::Set)]
    pub ablation: bool,
    #[command(flatten)]
    #[serde(flatten)]
    pub detector: DetectorArgs,
}

impl Stage for Eval {
    const NAME: &'static str = "eval";

    fn out(&self) -> Option<&Path> {
        self.out.as_deref()
    }

    fn seed(&self) -> Option<u64> {
        Some(self.detector.seed)
    }

    fn run(&self, ctx: &mut RunContext) -> anyhow::Result<()> {
        let (train, test) = bundles(
            &self.manifest,
            &self.test_manifest,
            self.protocol,
            self.detector.split_seed,
        )?;
        let probe = load_probe(&self.checkpoint)?;
        let probe_id = probe.as_ref().map(|p| p.id());
        let cache = match &probe {
            Some(_) => Some(NoiseCache::open(&noise_dir(&self.cache_dir))?),
            None => None,
        };
        let data = ProtocolData {
            train: &train,
            test: test.as_ref().unwrap_or(&train),
            train_name: &self.train_name,
            cache: cache.as_ref(),
            probe_id: probe_id.as_deref(),
        };
        let switches = if self.ablation {
            vec![false, true]
        } else {
            vec![self.detector.use_attention]
        };
        let mut rows = Vec::new();
        for use_attention in switches {
            let args = DetectorArgs {
                use_attention,
                ..self.detector.clone()
            };
            let cfg = args.config(self.t, probe.as_ref())?;
            let variant = cfg.variant().to_string();
            log::info!("eval: {} protocol, variant {variant}", self.protocol);
            let run = run_protocol(self.protocol, &data, &cfg, &self.detector.hyper())?;
            write_run(ctx, if self.ablation { &variant } else { "" }, &run)?;
            ctx.note(&format!("{variant}_mean_acc"), run.matrix.mean_acc);
            ctx.note(&format!("{variant}_mean_ap"), run.matrix.mean_ap);
            println!(
                "{variant}: mean ACC {:?}, mean AP {:?}",
                run.matrix.mean_acc, run.matrix.mean_ap
            );
            rows.push(AblationRow {
                variant,
                use_attention,
                matrix: run.matrix,
            });
        }
        let mut md = format!("# Evaluation ({})\n\n", self.protocol);
        if self.ablation {
            md.push_str(&render_ablation(&rows));
            emit_json(ctx, "ablation.json", &rows)?;
        }
        for row in &rows {
            md.push_str(&render_matrix(&row.variant, &row.matrix));
        }
        emit(ctx, "report.md", md.as_bytes())?;
        Ok(())
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SweepTimestep {
    #[arg(long)]
    pub manifest: Vec<PathBuf>,
    #[arg(long)]
    pub test_manifest: Vec<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, env = "ANL_CACHE_DIR", default_value = ".anl-cache")]
    pub cache_dir: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = Protocol::Standard)]
    pub protocol: Protocol,
    #[arg(long, value_delimiter = ',', default_values_t = [1, 5, 20])]
    pub t_values: Vec<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    pub detector: DetectorArgs,
}

impl Stage for SweepTimestep {
    const NAME: &'static str = "sweep-timestep";

    fn out(&self) -> Option<&Path> {
        self.out.as_deref()
    }

    fn seed(&self) -> Option<u64> {
        Some(self.detector.seed)
    }

    fn run(&self, ctx: &mut RunContext) -> anyhow::Result<()> {
        let (train, test) = bundles(
            &self.manifest,
            &self.test_manifest,
            self.protocol,
            self.detector.split_seed,
        )?;
        let probe = load_probe(&self.checkpoint)?.ok_or_else(|| UsageError("missing --checkpoint".into()))?;
        let cfg = self.detector.config(DEFAULT_TIMESTEP, Some(&probe))?;
        let points = sweep_timestep(
            &self.t_values,
            self.protocol,
            &train,
            test.as_ref().unwrap_or(&train),
            &probe,
            &noise_dir(&self.cache_dir),
            &cfg,
            &self.detector.hyper(),
        )?;
        let mut csv = String::from("t,mean_acc,mean_ap\n");
        for p in &points {
            write_matrix(ctx, &format!("t{}/", p.timestep), &p.matrix)?;
            let f = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
            csv.push_str(&format!(
                "{},{},{}\n",
                p.timestep,
                f(p.matrix.mean_acc),
                f(p.matrix.mean_ap)
            ));
        }
        emit(ctx, "sweep.csv", csv.as_bytes())?;
        emit_json(ctx, "sweep.json", &points)?;
        emit(ctx, "report.md", render_sweep(&points).as_bytes())?;
        // Ties go to the smaller timestep.
        let best = points
            .iter()
            .filter_map(|p| p.matrix.mean_acc.map(|a| (p.timestep, a)))
            .fold(None, |best: Option<(usize, f64)>, (t, a)| match best {
                Some((bt, b)) if b > a || (b == a && bt < t) => best,
                _ => Some((t, a)),
            });
        ctx.note("best_t", best.map(|b| b.0));
        ctx.note("probe_id", probe.id());
        print!("{}", render_sweep(&points));
        Ok(())
    }
}
