use anl_nn::{Adam, AdamConfig, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{assemble_inputs, Detector, DetectorBatch, DetectorConfig, InputMode, Prediction};
use crate::attention::AttentionMap;
use crate::data::image_io::load_and_normalize;
use crate::data::manifest::ManifestRow;
use crate::eval::accuracy;
use crate::probe::NoiseCache;
use crate::{rng, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorHyper {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Undersample the majority class afresh each epoch.
    pub balance: bool,
}

impl Default for DetectorHyper {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            batch_size: 64,
            epochs: 20,
            seed: 0,
            balance: true,
        }
    }
}

/// One ready-to-batch training or evaluation example.
#[derive(Debug, Clone)]
pub struct DetectorSample {
    pub input: Tensor,
    pub attention: Option<AttentionMap>,
    /// 0 real, 1 fake.
    pub label: f64,
    pub image_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorTrainReport {
    pub epoch_losses: Vec<f64>,
    /// Validation accuracy after each epoch; empty without a validation set.
    pub val_accuracy: Vec<f64>,
    /// Epoch (0-based) whose parameters were kept.
    pub best_epoch: usize,
    pub steps: usize,
}

/// Builds samples for `rows`. Cache misses are collected and reported
/// together before anything is loaded.
pub fn prepare_samples(
    rows: &[&ManifestRow],
    cache: Option<&NoiseCache>,
    probe_id: Option<&str>,
    cfg: &DetectorConfig,
) -> Result<Vec<DetectorSample>> {
    let probe = if cfg.needs_probe() {
        let (Some(cache), Some(id)) = (cache, probe_id) else {
            return Err(Error::InvalidArgument(format!(
                "variant {} needs a noise cache and probe id",
                cfg.variant()
            )));
        };
        let missing = cache.missing(rows.iter().copied(), id, cfg.timestep);
        if !missing.is_empty() {
            return Err(Error::MissingCache(missing));
        }
        Some((cache, id))
    } else {
        None
    };
    let g = cfg.geometry;
    rows.iter()
        .map(|row| {
            let noise = match probe {
                Some((cache, id)) => Some(cache.require(row, id, cfg.timestep)?),
                None => None,
            };
            let image = match cfg.input_mode {
                InputMode::Image => Some(load_and_normalize(&row.path, g.height, g.channels)?),
                InputMode::Noise => None,
            };
            let (input, attention) = assemble_inputs(cfg, image.as_ref(), noise.as_ref())?;
            Ok(DetectorSample {
                input,
                attention,
                label: row.label.target(),
                image_hash: row.content_hash.clone(),
            })
        })
        .collect()
}

pub(crate) fn make_batch(samples: &[&DetectorSample]) -> DetectorBatch {
    let inputs: Vec<&Tensor> = samples.iter().map(|s| &s.input).collect();
    let maps: Option<Vec<AttentionMap>> = samples.iter().map(|s| s.attention.clone()).collect();
    DetectorBatch {
        inputs: Tensor::stack(&inputs).expect("equal sample shapes"),
        maps,
        labels: samples.iter().map(|s| s.label).collect(),
    }
}

/// Predictions for `samples`, evaluated in batches.
pub fn predict_samples(detector: &Detector, samples: &[DetectorSample]) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(64) {
        let refs: Vec<&DetectorSample> = chunk.iter().collect();
        out.extend(detector.forward(&make_batch(&refs))?);
    }
    Ok(out)
}

/// Adam on mean BCE; keeps the parameters of the epoch with the best
/// validation accuracy (the last epoch when `val` is empty).
pub fn train_detector(
    train: &[DetectorSample],
    val: &[DetectorSample],
    cfg: DetectorConfig,
    probe_id: Option<String>,
    hyper: &DetectorHyper,
) -> Result<(Detector, DetectorTrainReport)> {
    if train.is_empty() {
        return Err(Error::Empty("detector training set".into()));
    }
    if hyper.batch_size == 0 || hyper.lr.is_nan() || hyper.lr <= 0.0 {
        return Err(Error::InvalidArgument(
            "batch size and learning rate must be positive".into(),
        ));
    }
    let (fakes, reals): (Vec<usize>, Vec<usize>) = (0..train.len()).partition(|&i| train[i].label > 0.5);
    if fakes.is_empty() || reals.is_empty() {
        return Err(Error::SingleClass);
    }
    let mut det = Detector::new(cfg, probe_id, rng::derive_seed(hyper.seed, "detector"))?;
    let mut adam = Adam::new(
        AdamConfig {
            lr: hyper.lr,
            ..AdamConfig::default()
        },
        det.params(),
    );
    let mut r = rng::stream(hyper.seed, "detector/train");
    let mut report = DetectorTrainReport {
        epoch_losses: Vec::new(),
        val_accuracy: Vec::new(),
        best_epoch: 0,
        steps: 0,
    };
    let mut best: Option<(f64, anl_nn::ParamStore)> = None;
    let val_labels: Vec<f64> = val.iter().map(|s| s.label).collect();

    for epoch in 0..hyper.epochs {
        let order = epoch_order(&fakes, &reals, hyper.balance, &mut r);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(hyper.batch_size) {
            let refs: Vec<&DetectorSample> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, grads) = det.loss_and_grads(&make_batch(&refs))?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("detector loss at epoch {epoch}")));
            }
            adam.step(det.params_mut(), &grads);
            sum += loss;
            batches += 1;
        }
        report.steps += batches;
        let mean = sum / batches as f64;
        report.epoch_losses.push(mean);
        if val.is_empty() {
            log::info!("detector epoch {epoch}: loss {mean:.5}");
            continue;
        }
        let acc = accuracy(&predict_samples(&det, val)?, &val_labels)?;
        log::info!("detector epoch {epoch}: loss {mean:.5}, val acc {acc:.4}");
        report.val_accuracy.push(acc);
        if best.as_ref().is_none_or(|(b, _)| acc > *b) {
            best = Some((acc, det.params().clone()));
            report.best_epoch = epoch;
        }
    }
    match best {
        Some((_, params)) => *det.params_mut() = params,
        None => report.best_epoch = hyper.epochs.saturating_sub(1),
    }
    Ok((det, report))
}

fn epoch_order(fakes: &[usize], reals: &[usize], balance: bool, r: &mut rng::Rng) -> Vec<usize> {
    let mut order = if balance {
        let n = fakes.len().min(reals.len());
        let mut f = fakes.to_vec();
        let mut re = reals.to_vec();
        f.shuffle(r);
        re.shuffle(r);
        f.truncate(n);
        re.truncate(n);
        f.extend(re);
        f
    } else {
        fakes.iter().chain(reals).copied().collect()
    };
    order.shuffle(r);
    order
}
