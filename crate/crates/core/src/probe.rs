//! Single-step noise estimation and its on-disk cache.
//!
//! Any image is treated as a diffusion state `x_t` and the ε-network is
//! evaluated once; no reverse chain runs. Results are cached per
//! `(content hash, probe id, timestep)` so downstream training never
//! re-probes.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use anl_nn::checkpoint::write_atomic;
use anl_nn::Tensor;
use serde::{Deserialize, Serialize};

use crate::data::image_io::{decode_png, normalize_raw};
use crate::data::manifest::{sha256_hex, DatasetManifest, ManifestRow};
use crate::diffusion::process::noise_channels;
use crate::diffusion::{EpsilonNetwork, LatentImage};
use crate::{Error, Result};

/// Probe timestep used unless configured otherwise.
pub const DEFAULT_TIMESTEP: usize = 1;

const INDEX_NAME: &str = "index.json";
const PROBE_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct PredictedNoise {
    values: Tensor,
    timestep: usize,
    probe_id: String,
}

impl PredictedNoise {
    pub fn new(values: Tensor, timestep: usize, probe_id: impl Into<String>) -> Result<Self> {
        if values.shape().len() != 3 {
            return Err(Error::InvalidArgument(format!(
                "predicted noise must be C×H×W, got {:?}",
                values.shape()
            )));
        }
        if !values.all_finite() {
            return Err(Error::NonFinite("predicted noise".into()));
        }
        Ok(Self {
            values,
            timestep,
            probe_id: probe_id.into(),
        })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn timestep(&self) -> usize {
        self.timestep
    }

    pub fn probe_id(&self) -> &str {
        &self.probe_id
    }
}

/// `ε_θ(image, t)`; for `2C`-channel networks only channels `[0, C)`.
pub fn estimate_noise(image: &LatentImage, t: usize, eps_net: &EpsilonNetwork) -> Result<PredictedNoise> {
    Ok(estimate_noise_batch(std::slice::from_ref(image), t, eps_net)?.remove(0))
}

/// Batched [`estimate_noise`].
pub fn estimate_noise_batch(images: &[LatentImage], t: usize, eps_net: &EpsilonNetwork) -> Result<Vec<PredictedNoise>> {
    probe_with_id(images, t, eps_net, &eps_net.id())
}

fn probe_with_id(
    images: &[LatentImage],
    t: usize,
    eps_net: &EpsilonNetwork,
    probe_id: &str,
) -> Result<Vec<PredictedNoise>> {
    eps_net.schedule().check_t(t)?;
    let g = eps_net.geometry();
    for img in images {
        if img.geometry() != g {
            return Err(Error::Shape {
                expected: g.shape(),
                actual: img.pixels().shape().to_vec(),
            });
        }
    }
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(PROBE_BATCH) {
        let refs: Vec<&Tensor> = chunk.iter().map(LatentImage::pixels).collect();
        let batch = Tensor::stack(&refs).expect("equal shapes");
        let pred = noise_channels(&eps_net.predict(&batch, &vec![t; chunk.len()])?, g.channels);
        for values in pred.unstack() {
            out.push(PredictedNoise::new(values, t, probe_id)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub image_hash: String,
    pub path: PathBuf,
    pub timestep: usize,
    pub probe_id: String,
    /// Relative to the cache directory.
    pub tensor_file: PathBuf,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedRow {
    pub path: PathBuf,
    pub image_hash: String,
    pub reason: String,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Index {
    records: Vec<CacheRecord>,
    skipped: Vec<SkippedRow>,
}

/// Counters from one [`batch_probe`] run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ProbeStats {
    pub probed: usize,
    pub reused: usize,
    pub skipped: usize,
}

type Key = (String, String, usize);

/// Directory of raw little-endian `f64` tensors plus a JSON index.
#[derive(Debug)]
pub struct NoiseCache {
    dir: PathBuf,
    index: Index,
    lookup: HashMap<Key, usize>,
}

impl NoiseCache {
    /// Opens (or starts) the cache at `dir`.
    pub fn open(dir: &Path) -> Result<Self> {
        let index_path = dir.join(INDEX_NAME);
        let index: Index = match fs::read(&index_path) {
            Ok(bytes) => serde_json::from_slice(&bytes)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Index::default(),
            Err(e) => return Err(Error::io(&index_path, e)),
        };
        let lookup = index
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| ((r.image_hash.clone(), r.probe_id.clone(), r.timestep), i))
            .collect();
        Ok(Self {
            dir: dir.to_path_buf(),
            index,
            lookup,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn records(&self) -> &[CacheRecord] {
        &self.index.records
    }

    pub fn skipped(&self) -> &[SkippedRow] {
        &self.index.skipped
    }

    pub fn contains(&self, image_hash: &str, probe_id: &str, t: usize) -> bool {
        self.lookup
            .contains_key(&(image_hash.to_string(), probe_id.to_string(), t))
    }

    pub fn get(&self, image_hash: &str, probe_id: &str, t: usize) -> Result<Option<PredictedNoise>> {
        let Some(&i) = self.lookup.get(&(image_hash.to_string(), probe_id.to_string(), t)) else {
            return Ok(None);
        };
        let rec = &self.index.records[i];
        let path = self.dir.join(&rec.tensor_file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let numel: usize = rec.shape.iter().product();
        if bytes.len() != numel * 8 {
            return Err(Error::InvalidArgument(format!(
                "cache tensor {} has {} bytes, expected {}",
                path.display(),
                bytes.len(),
                numel * 8
            )));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let values = Tensor::new(rec.shape.clone(), data).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        PredictedNoise::new(values, rec.timestep, rec.probe_id.clone()).map(Some)
    }

    /// Cached noise for `row`, or [`Error::MissingCache`].
    pub fn require(&self, row: &ManifestRow, probe_id: &str, t: usize) -> Result<PredictedNoise> {
        self.get(&row.content_hash, probe_id, t)?
            .ok_or_else(|| Error::MissingCache(vec![row.path.display().to_string()]))
    }

    /// Paths of rows without a cache entry.
    pub fn missing<'a>(
        &self,
        rows: impl IntoIterator<Item = &'a ManifestRow>,
        probe_id: &str,
        t: usize,
    ) -> Vec<String> {
        rows.into_iter()
            .filter(|r| !self.contains(&r.content_hash, probe_id, t))
            .map(|r| r.path.display().to_string())
            .collect()
    }

    pub fn insert(&mut self, image_hash: &str, path: &Path, noise: &PredictedNoise) -> Result<()> {
        let key = (image_hash.to_string(), noise.probe_id.clone(), noise.timestep);
        let tensor_file = PathBuf::from(&noise.probe_id)
            .join(format!("t{}", noise.timestep))
            .join(format!("{image_hash}.f64"));
        let bytes: Vec<u8> = noise.values.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        let full = self.dir.join(&tensor_file);
        write_atomic(&full, &bytes).map_err(|e| Error::io(&full, e))?;
        let rec = CacheRecord {
            image_hash: image_hash.to_string(),
            path: path.to_path_buf(),
            timestep: noise.timestep,
            probe_id: noise.probe_id.clone(),
            tensor_file,
            shape: noise.values.shape().to_vec(),
        };
        match self.lookup.get(&key) {
            Some(&i) => self.index.records[i] = rec,
            None => {
                self.lookup.insert(key, self.index.records.len());
                self.index.records.push(rec);
            }
        }
        Ok(())
    }

    /// Persists the index via write-then-rename.
    pub fn flush(&self) -> Result<()> {
        let path = self.dir.join(INDEX_NAME);
        let bytes = serde_json::to_vec_pretty(&self.index)?;
        write_atomic(&path, &bytes).map_err(|e| Error::io(&path, e))
    }

    fn record_skip(&mut self, row: &ManifestRow, reason: String) {
        self.index.skipped.retain(|s| s.path != row.path);
        self.index.skipped.push(SkippedRow {
            path: row.path.clone(),
            image_hash: row.content_hash.clone(),
            reason,
        });
    }
}

/// Probes every manifest row missing from the cache at `cache_dir`.
///
/// Rows whose file is unreadable, undecodable, or no longer matches its
/// manifest hash are listed in the index's `skipped` section.
pub fn batch_probe(
    manifest: &DatasetManifest,
    t: usize,
    eps_net: &EpsilonNetwork,
    cache_dir: &Path,
) -> Result<(NoiseCache, ProbeStats)> {
    eps_net.schedule().check_t(t)?;
    let g = eps_net.geometry();
    if g.height != g.width {
        return Err(Error::InvalidArgument("probe geometry must be square".into()));
    }
    fs::create_dir_all(cache_dir).map_err(|e| Error::io(cache_dir, e))?;
    let mut cache = NoiseCache::open(cache_dir)?;
    let probe_id = eps_net.id();
    let mut stats = ProbeStats::default();
    let mut pending: Vec<(&ManifestRow, LatentImage)> = Vec::new();

    let todo: Vec<&ManifestRow> = manifest
        .rows()
        .iter()
        .filter(|row| {
            let hit = cache.contains(&row.content_hash, &probe_id, t);
            stats.reused += usize::from(hit);
            !hit
        })
        .collect();
    for row in todo {
        match load_row(row, g.height, g.channels) {
            Ok(img) => pending.push((row, img)),
            Err(reason) => {
                log::warn!("skipping {}: {reason}", row.path.display());
                cache.record_skip(row, reason);
                stats.skipped += 1;
            }
        }
        if pending.len() == PROBE_BATCH {
            flush_pending(&mut cache, &mut pending, t, eps_net, &probe_id, &mut stats)?;
        }
    }
    flush_pending(&mut cache, &mut pending, t, eps_net, &probe_id, &mut stats)?;
    cache.flush()?;
    Ok((cache, stats))
}

fn load_row(row: &ManifestRow, size: usize, channels: usize) -> std::result::Result<LatentImage, String> {
    let bytes = fs::read(&row.path).map_err(|e| format!("unreadable: {e}"))?;
    if sha256_hex(&bytes) != row.content_hash {
        return Err("content hash differs from manifest".into());
    }
    let raw = decode_png(&bytes, &row.path).map_err(|e| e.to_string())?;
    normalize_raw(&raw, size, channels).map_err(|e| e.to_string())
}

fn flush_pending(
    cache: &mut NoiseCache,
    pending: &mut Vec<(&ManifestRow, LatentImage)>,
    t: usize,
    eps_net: &EpsilonNetwork,
    probe_id: &str,
    stats: &mut ProbeStats,
) -> Result<()> {
    if pending.is_empty() {
        return Ok(());
    }
    let images: Vec<LatentImage> = pending.iter().map(|(_, img)| img.clone()).collect();
    let noise = probe_with_id(&images, t, eps_net, probe_id)?;
    for ((row, _), n) in pending.iter().zip(&noise) {
        cache.insert(&row.content_hash, &row.path, n)?;
        cache.index.skipped.retain(|s| s.path != row.path);
        stats.probed += 1;
    }
    pending.clear();
    Ok(())
}
