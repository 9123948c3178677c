use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anl::eval::report::{render_ablation, render_matrix, render_sweep, AblationRow};
use anl::eval::{EvalMatrix, SweepPoint};
use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::emit;
use crate::{RunContext, Stage, UsageError};

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct Report {
    /// Output directories of earlier eval, sweep-timestep and analyze runs.
    #[arg(long)]
    pub input: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "Results")]
    pub title: String,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<Option<T>> {
    match fs::read_to_string(path) {
        Ok(text) => Ok(Some(serde_json::from_str(&text)?)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(anl::Error::io(path, e).into()),
    }
}

fn fmt_num(v: &Value) -> String {
    match v.as_f64() {
        Some(x) if x != 0.0 && x.abs() < 1e-3 => format!("{x:.3e}"),
        Some(x) => format!("{x:.4}"),
        None => v.to_string(),
    }
}

/// Two-column table of the listed keys of an analysis summary.
fn render_summary(title: &str, s: &Value, keys: &[&str], tests: &[&str]) -> String {
    let mut md = format!("## {title}\n\n| quantity | value |\n|---|---|\n");
    for k in keys {
        let _ = writeln!(md, "| {k} | {} |", fmt_num(&s[*k]));
    }
    for t in tests {
        let _ = writeln!(md, "| {t} p-value | {} |", fmt_num(&s[*t]["p_value"]));
    }
    md.push('\n');
    md
}

/// Markdown for every recognised output file in `dir`.
fn render_dir(dir: &Path) -> anyhow::Result<String> {
    let name = dir
        .file_name()
        .map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
    let mut md = String::new();
    if let Some(rows) = read_json::<Vec<AblationRow>>(&dir.join("ablation.json"))? {
        md.push_str(&render_ablation(&rows));
    } else if let Some(m) = read_json::<EvalMatrix>(&dir.join("matrix.json"))? {
        md.push_str(&render_matrix(&name, &m));
    }
    if let Some(points) = read_json::<Vec<SweepPoint>>(&dir.join("sweep.json"))? {
        md.push_str(&render_sweep(&points));
    }
    if let Some(s) = read_json::<Value>(&dir.join("psd_summary.json"))? {
        md.push_str(&render_summary(
            "Noise power spectrum",
            &s,
            &["n_real", "n_fake", "mean_flatness_real", "mean_flatness_fake"],
            &["real_less_flat"],
        ));
    }
    if let Some(s) = read_json::<Value>(&dir.join("lem_summary.json"))? {
        md.push_str(&render_summary(
            "Local entropy",
            &s,
            &["n_real", "n_fake", "mean_entropy_real", "mean_entropy_fake"],
            &["real_greater", "fake_greater"],
        ));
    }
    Ok(md)
}

impl Stage for Report {
    const NAME: &'static str = "report";

    fn out(&self) -> Option<&Path> {
        self.out.as_deref()
    }

    fn run(&self, ctx: &mut RunContext) -> anyhow::Result<()> {
        if self.input.is_empty() {
            return Err(UsageError("missing --input".into()).into());
        }
        let mut md = format!("# {}\n\n", self.title);
        let mut sections = 0;
        for dir in &self.input {
            let part = render_dir(dir)?;
            if part.is_empty() {
                log::warn!("no recognised outputs in {}", dir.display());
                continue;
            }
            let _ = writeln!(md, "<!-- {} -->", dir.display());
            md.push_str(&part);
            sections += 1;
        }
        if sections == 0 {
            return Err(anl::Error::Empty("report inputs".into()).into());
        }
        emit(ctx, "report.md", md.as_bytes())?;
        ctx.note("sections", sections);
        print!("{md}");
        Ok(())
    }
}
