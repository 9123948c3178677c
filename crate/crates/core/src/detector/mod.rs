//! The forensic classifier.
//!
//! A small residual backbone extracts last-stage features `F`; when
//! attention is enabled they are modulated as `F ⊙ resize(A)` with one map
//! broadcast over every channel, globally average-pooled and mapped to a
//! single logit. Labels: real = 0, fake = 1.

mod train;

pub use train::{predict_samples, prepare_samples, train_detector, DetectorHyper, DetectorSample, DetectorTrainReport};

use std::fmt;
use std::path::Path;

use anl_nn::{tape, Checkpoint, Conv2d, GroupNorm, Linear, ParamStore, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::attention::{build_attention, modulation_batch, AttentionMap};
use crate::data::image_io::load_and_normalize;
use crate::diffusion::{EpsilonNetwork, Geometry, LatentImage};
use crate::probe::{estimate_noise, PredictedNoise, DEFAULT_TIMESTEP};
use crate::{rng, Error, Result};

/// Probability clamp in the BCE loss.
pub const BCE_EPS: f64 = 1e-7;
/// Inference resolution unless overridden.
pub const DEFAULT_INFERENCE_SIZE: usize = 256;

const CHECKPOINT_KIND: &str = "detector";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputMode {
    /// The backbone sees the predicted noise.
    Noise,
    /// The backbone sees the image itself.
    Image,
}

impl fmt::Display for InputMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InputMode::Noise => "noise",
            InputMode::Image => "image",
        })
    }
}

impl std::str::FromStr for InputMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise" => Ok(InputMode::Noise),
            "image" => Ok(InputMode::Image),
            _ => Err(Error::InvalidArgument(format!("unknown input mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub width: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub stem_width: usize,
    /// One residual block per stage.
    pub stages: Vec<Stage>,
    pub groups: usize,
}

impl BackboneConfig {
    /// Four stages, 8→16→32→32 channels, total stride 8.
    pub fn desk() -> Self {
        Self {
            stem_width: 8,
            stages: vec![
                Stage { width: 8, stride: 2 },
                Stage { width: 16, stride: 2 },
                Stage { width: 32, stride: 2 },
                Stage { width: 32, stride: 1 },
            ],
            groups: 4,
        }
    }

    pub fn total_stride(&self) -> usize {
        self.stages.iter().map(|s| s.stride).product()
    }

    pub fn feature_channels(&self) -> usize {
        self.stages.last().map_or(self.stem_width, |s| s.width)
    }

    /// Last-stage spatial size for an `h × w` input.
    pub fn feature_size(&self, h: usize, w: usize) -> (usize, usize) {
        self.stages
            .iter()
            .fold((h, w), |(h, w), s| (stride_out(h, s.stride), stride_out(w, s.stride)))
    }
}

fn stride_out(n: usize, stride: usize) -> usize {
    (n - 1) / stride + 1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub input_mode: InputMode,
    pub use_attention: bool,
    pub backbone: BackboneConfig,
    /// Probe timestep feeding the noise input and the attention map.
    pub timestep: usize,
    /// Input geometry; probe and detector run at this size.
    pub geometry: Geometry,
}

impl DetectorConfig {
    /// Full method: noise input with attention.
    pub fn anl(geometry: Geometry) -> Self {
        Self {
            input_mode: InputMode::Noise,
            use_attention: true,
            backbone: BackboneConfig::desk(),
            timestep: DEFAULT_TIMESTEP,
            geometry,
        }
    }

    pub fn variant(&self) -> &'static str {
        match (self.input_mode, self.use_attention) {
            (InputMode::Noise, true) => "anl",
            (InputMode::Noise, false) => "anl-without-attention",
            (InputMode::Image, true) => "image-anl",
            (InputMode::Image, false) => "image-baseline",
        }
    }

    /// Whether the probe must run for this variant.
    pub fn needs_probe(&self) -> bool {
        self.input_mode == InputMode::Noise || self.use_attention
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub logit: f64,
    pub probability: f64,
    /// 1 (fake) iff `probability ≥ 0.5`.
    pub label: u8,
}

impl Prediction {
    pub fn from_logit(logit: f64) -> Self {
        let probability = tape::sigmoid(logit);
        Self {
            logit,
            probability,
            label: u8::from(probability >= 0.5),
        }
    }
}

/// Mean clamped binary cross-entropy of predictions against 0/1 labels.
pub fn bce_loss(predictions: &[Prediction], labels: &[f64]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Empty("bce batch".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let total: f64 = predictions
        .iter()
        .zip(labels)
        .map(|(p, &y)| {
            let p = p.probability.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / labels.len() as f64)
}

#[derive(Debug, Clone)]
struct Block {
    conv1: Conv2d,
    norm1: GroupNorm,
    conv2: Conv2d,
    norm2: GroupNorm,
    skip: Option<Conv2d>,
}

impl Block {
    fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let h = self.conv1.forward(tape, x);
        let h = self.norm1.forward(tape, h);
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, h);
        let h = self.norm2.forward(tape, h);
        let s = match &self.skip {
            Some(c) => c.forward(tape, x),
            None => x,
        };
        let y = tape.add(h, s);
        tape.relu(y)
    }
}

#[derive(Debug, Clone)]
struct Layers {
    stem: Conv2d,
    stem_norm: GroupNorm,
    blocks: Vec<Block>,
    head: Linear,
}

impl Layers {
    fn build(cfg: &DetectorConfig, store: &mut ParamStore, r: &mut rng::Rng) -> Self {
        let b = &cfg.backbone;
        let stem = Conv2d::new(store, "stem", cfg.geometry.channels, b.stem_width, 3, 1, false, r);
        let stem_norm = GroupNorm::new(store, "stem.norm", b.stem_width, b.groups);
        let mut blocks = Vec::new();
        let mut prev = b.stem_width;
        for (i, s) in b.stages.iter().enumerate() {
            let name = format!("stage{i}");
            blocks.push(Block {
                conv1: Conv2d::new(store, &format!("{name}.conv1"), prev, s.width, 3, s.stride, false, r),
                norm1: GroupNorm::new(store, &format!("{name}.norm1"), s.width, b.groups),
                conv2: Conv2d::new(store, &format!("{name}.conv2"), s.width, s.width, 3, 1, false, r),
                norm2: GroupNorm::new(store, &format!("{name}.norm2"), s.width, b.groups),
                skip: (prev != s.width || s.stride != 1)
                    .then(|| Conv2d::new(store, &format!("{name}.skip"), prev, s.width, 1, s.stride, false, r)),
            });
            prev = s.width;
        }
        let head = Linear::new(store, "head", prev, 1, r);
        // A zero head starts every prediction at p = 0.5.
        head.zero_init(store);
        Self {
            stem,
            stem_norm,
            blocks,
            head,
        }
    }
}

/// Network inputs for one batch.
#[derive(Debug, Clone)]
pub struct DetectorBatch {
    /// `[N, C, H, W]` noise or image tensors.
    pub inputs: Tensor,
    /// One map per sample iff attention is enabled.
    pub maps: Option<Vec<AttentionMap>>,
    pub labels: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Detector {
    config: DetectorConfig,
    probe_id: Option<String>,
    params: ParamStore,
    layers: Layers,
}

impl Detector {
    pub fn new(config: DetectorConfig, probe_id: Option<String>, seed: u64) -> Result<Self> {
        if config.backbone.stem_width == 0 || config.backbone.stages.iter().any(|s| s.width == 0 || s.stride == 0) {
            return Err(Error::InvalidArgument("degenerate backbone".into()));
        }
        if config.needs_probe() && probe_id.is_none() {
            return Err(Error::InvalidArgument(format!(
                "variant {} needs a probe checkpoint",
                config.variant()
            )));
        }
        let mut params = ParamStore::new();
        let layers = Layers::build(&config, &mut params, &mut rng::stream(seed, "detector/init"));
        Ok(Self {
            config,
            probe_id,
            params,
            layers,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn probe_id(&self) -> Option<&str> {
        self.probe_id.as_deref()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn check_batch(&self, batch: &DetectorBatch) -> Result<usize> {
        let s = batch.inputs.shape();
        let g = self.config.geometry;
        if s.len() != 4 || s[1..] != g.shape()[..] {
            return Err(Error::Shape {
                expected: g.shape(),
                actual: s.to_vec(),
            });
        }
        let n = s[0];
        match (&batch.maps, self.config.use_attention) {
            (Some(m), true) if m.len() == n => {}
            (Some(_), true) => return Err(Error::InvalidArgument("one attention map per sample".into())),
            (None, false) => {}
            (Some(_), false) => {
                return Err(Error::InvalidArgument(
                    "attention supplied but disabled in config".into(),
                ))
            }
            (None, true) => return Err(Error::InvalidArgument("attention enabled but no maps supplied".into())),
        }
        if !batch.labels.is_empty() && batch.labels.len() != n {
            return Err(Error::InvalidArgument("one label per sample".into()));
        }
        Ok(n)
    }

    /// Last-stage features `[N, D, h, w]` before modulation.
    pub fn features_on_tape(&self, tape: &mut Tape, x: Var) -> Var {
        let l = &self.layers;
        let h = l.stem.forward(tape, x);
        let h = l.stem_norm.forward(tape, h);
        let mut h = tape.relu(h);
        for b in &l.blocks {
            h = b.forward(tape, h);
        }
        h
    }

    /// Pooled (and possibly modulated) features `[N, D]`.
    pub fn pooled_on_tape(&self, tape: &mut Tape, x: Var, maps: Option<&[AttentionMap]>) -> Result<Var> {
        let f = self.features_on_tape(tape, x);
        let f = match maps {
            Some(maps) => {
                let (_, _, h, w) = tape.value(f).dims4();
                let refs: Vec<&AttentionMap> = maps.iter().collect();
                let m = modulation_batch(&refs, h, w)?;
                tape.mul_map(f, m)
            }
            None => f,
        };
        Ok(tape.global_avg_pool(f))
    }

    /// Logits `[N, 1]`.
    pub fn logits_on_tape(&self, tape: &mut Tape, batch: &DetectorBatch) -> Result<Var> {
        self.check_batch(batch)?;
        let x = tape.input(batch.inputs.clone());
        let pooled = self.pooled_on_tape(tape, x, batch.maps.as_deref())?;
        Ok(self.layers.head.forward(tape, pooled))
    }

    pub fn forward(&self, batch: &DetectorBatch) -> Result<Vec<Prediction>> {
        let mut tape = Tape::new(&self.params);
        let z = self.logits_on_tape(&mut tape, batch)?;
        Ok(tape
            .value(z)
            .data()
            .iter()
            .map(|&z| Prediction::from_logit(z))
            .collect())
    }

    /// Pooled feature vectors `[N, D]`.
    pub fn pooled(&self, batch: &DetectorBatch) -> Result<Tensor> {
        self.check_batch(batch)?;
        let mut tape = Tape::new(&self.params);
        let x = tape.input(batch.inputs.clone());
        let p = self.pooled_on_tape(&mut tape, x, batch.maps.as_deref())?;
        Ok(tape.value(p).clone())
    }

    /// Last-stage features `[N, D, h, w]` before modulation.
    pub fn features(&self, inputs: &Tensor) -> Tensor {
        let mut tape = Tape::new(&self.params);
        let x = tape.input(inputs.clone());
        let f = self.features_on_tape(&mut tape, x);
        tape.value(f).clone()
    }

    /// Mean BCE of the batch and its parameter gradients in store order.
    pub fn loss_and_grads(&self, batch: &DetectorBatch) -> Result<(f64, Vec<Tensor>)> {
        if batch.labels.is_empty() {
            return Err(Error::Empty("labels".into()));
        }
        let mut tape = Tape::new(&self.params);
        let z = self.logits_on_tape(&mut tape, batch)?;
        let loss = tape.bce_with_logits(z, batch.labels.clone(), BCE_EPS);
        let value = tape.value(loss).data()[0];
        Ok((value, tape.backward(loss).dense(&self.params)))
    }

    /// Builds the network input for one image: the image itself or its
    /// predicted noise, plus the attention map when enabled.
    pub fn sample_inputs(
        &self,
        image: Option<&LatentImage>,
        noise: Option<&PredictedNoise>,
    ) -> Result<(Tensor, Option<AttentionMap>)> {
        assemble_inputs(&self.config, image, noise)
    }

    /// Resize, probe, build attention and classify one file.
    pub fn infer(&self, image_path: &Path, probe: Option<&EpsilonNetwork>) -> Result<Inference> {
        let g = self.config.geometry;
        let image = load_and_normalize(image_path, g.height, g.channels)?;
        let noise = if self.config.needs_probe() {
            let probe = probe.ok_or_else(|| Error::InvalidArgument("this detector needs a probe".into()))?;
            if probe.geometry() != g {
                return Err(Error::Shape {
                    expected: g.shape(),
                    actual: probe.geometry().shape(),
                });
            }
            let n = estimate_noise(&image, self.config.timestep, probe)?;
            if Some(n.probe_id()) != self.probe_id.as_deref() {
                return Err(Error::InvalidArgument(format!(
                    "detector was trained with probe {:?}, got {}",
                    self.probe_id,
                    n.probe_id()
                )));
            }
            Some(n)
        } else {
            None
        };
        let (input, map) = self.sample_inputs(Some(&image), noise.as_ref())?;
        let mut shape = vec![1];
        shape.extend_from_slice(input.shape());
        let batch = DetectorBatch {
            inputs: input.reshape(shape).expect("shape"),
            maps: map.clone().map(|m| vec![m]),
            labels: Vec::new(),
        };
        let prediction = self.forward(&batch)?[0];
        Ok(Inference {
            prediction,
            attention: map,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            serde_json::json!({
                "kind": CHECKPOINT_KIND,
                "config": self.config,
                "probe_id": self.probe_id,
            }),
            self.params.clone(),
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta.get("kind").and_then(|k| k.as_str()) != Some(CHECKPOINT_KIND) {
            return Err(Error::InvalidArgument("checkpoint is not a detector".into()));
        }
        let config: DetectorConfig = serde_json::from_value(ck.meta["config"].clone())?;
        let probe_id: Option<String> = serde_json::from_value(ck.meta["probe_id"].clone())?;
        let mut d = Self::new(config, probe_id, 0)?;
        if d.params.len() != ck.params.len() {
            return Err(Error::InvalidArgument(
                "checkpoint parameters do not match the configured backbone".into(),
            ));
        }
        d.params
            .load_from(&ck.params)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(d)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

pub(crate) fn assemble_inputs(
    cfg: &DetectorConfig,
    image: Option<&LatentImage>,
    noise: Option<&PredictedNoise>,
) -> Result<(Tensor, Option<AttentionMap>)> {
    let input = match (cfg.input_mode, image, noise) {
        (InputMode::Noise, _, Some(n)) => n.values().clone(),
        (InputMode::Image, Some(img), _) => img.pixels().clone(),
        (mode, _, _) => {
            return Err(Error::InvalidArgument(format!("{mode} input missing")));
        }
    };
    let map = match (cfg.use_attention, noise) {
        (true, Some(n)) => Some(build_attention(n)?),
        (true, None) => return Err(Error::InvalidArgument("attention needs predicted noise".into())),
        (false, _) => None,
    };
    Ok((input, map))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub prediction: Prediction,
    /// The map used for modulation, kept for audit.
    pub attention: Option<AttentionMap>,
}
