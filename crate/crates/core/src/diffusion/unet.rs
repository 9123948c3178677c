//! The ε-network: a small U-shaped encoder–decoder with residual blocks,
//! group normalisation and a sinusoidal timestep embedding.

use std::path::Path;

use anl_nn::{Checkpoint, Conv2d, GroupNorm, Linear, ParamStore, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::{Geometry, NoiseSchedule};
use crate::data::manifest::sha256_hex;
use crate::{rng, Error, Result};

const CHECKPOINT_KIND: &str = "epsilon-network";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub geometry: Geometry,
    /// Channels at the finest level.
    pub base_width: usize,
    /// Width multiplier per resolution level; the image side must be
    /// divisible by `2^(levels − 1)`.
    pub channel_mults: Vec<usize>,
    pub time_embed_dim: usize,
    pub groups: usize,
    /// Emit `2C` channels: noise plus a variance head.
    #[serde(default)]
    pub learned_variance: bool,
}

impl UNetConfig {
    /// 32×32 grayscale, widths 8/16/16.
    pub fn desk(geometry: Geometry) -> Self {
        Self {
            geometry,
            base_width: 8,
            channel_mults: vec![1, 2, 2],
            time_embed_dim: 32,
            groups: 4,
            learned_variance: false,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.geometry.channels * if self.learned_variance { 2 } else { 1 }
    }

    fn validate(&self) -> Result<()> {
        let levels = self.channel_mults.len();
        if levels == 0 || self.base_width == 0 || self.time_embed_dim < 2 {
            return Err(Error::InvalidArgument("degenerate network configuration".into()));
        }
        let factor = 1usize << (levels - 1);
        let g = self.geometry;
        if g.channels == 0 || !g.height.is_multiple_of(factor) || !g.width.is_multiple_of(factor) {
            return Err(Error::InvalidArgument(format!(
                "image {}×{} not divisible by {factor} for {levels} levels",
                g.height, g.width
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, cfg: &UNetConfig, r: &mut rng::Rng) -> Self {
        Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), cin, cfg.groups),
            conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, 1, true, r),
            temb: Linear::new(store, &format!("{name}.temb"), cfg.time_embed_dim, cout, r),
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), cout, cfg.groups),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, true, r),
            skip: (cin != cout).then(|| Conv2d::new(store, &format!("{name}.skip"), cin, cout, 1, 1, true, r)),
        }
    }

    fn forward(&self, tape: &mut Tape, x: Var, temb: Var) -> Var {
        let h = self.norm1.forward(tape, x);
        let h = tape.silu(h);
        let h = self.conv1.forward(tape, h);
        let t = self.temb.forward(tape, temb);
        let h = tape.add_channel(h, t);
        let h = self.norm2.forward(tape, h);
        let h = tape.silu(h);
        let h = self.conv2.forward(tape, h);
        let skip = match &self.skip {
            Some(s) => s.forward(tape, x),
            None => x,
        };
        tape.add(skip, h)
    }
}

#[derive(Debug, Clone)]
struct Layers {
    time1: Linear,
    time2: Linear,
    stem: Conv2d,
    down: Vec<ResBlock>,
    downsample: Vec<Conv2d>,
    mid: ResBlock,
    up: Vec<ResBlock>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
}

impl Layers {
    /// Registers every parameter in a fixed order; the order is part of the
    /// checkpoint format.
    fn build(cfg: &UNetConfig, store: &mut ParamStore, r: &mut rng::Rng) -> Self {
        let e = cfg.time_embed_dim;
        let widths: Vec<usize> = cfg.channel_mults.iter().map(|m| m * cfg.base_width).collect();
        let time1 = Linear::new(store, "time.fc1", e, e, r);
        let time2 = Linear::new(store, "time.fc2", e, e, r);
        let stem = Conv2d::new(store, "stem", cfg.geometry.channels, widths[0], 3, 1, true, r);
        let mut down = Vec::new();
        let mut downsample = Vec::new();
        let mut prev = widths[0];
        for (i, &w) in widths.iter().enumerate() {
            down.push(ResBlock::new(store, &format!("down{i}"), prev, w, cfg, r));
            prev = w;
            if i + 1 < widths.len() {
                downsample.push(Conv2d::new(store, &format!("downsample{i}"), w, w, 3, 2, true, r));
            }
        }
        let mid = ResBlock::new(store, "mid", prev, prev, cfg, r);
        let mut up = Vec::new();
        for (i, &w) in widths.iter().enumerate().rev() {
            up.push(ResBlock::new(store, &format!("up{i}"), prev + w, w, cfg, r));
            prev = w;
        }
        let out_norm = GroupNorm::new(store, "out.norm", widths[0], cfg.groups);
        let out_conv = Conv2d::new(store, "out.conv", widths[0], cfg.out_channels(), 3, 1, true, r);
        // A zero output layer makes the untrained network predict ε ≡ 0.
        out_conv.zero_init(store);
        Self {
            time1,
            time2,
            stem,
            down,
            downsample,
            mid,
            up,
            out_norm,
            out_conv,
        }
    }
}

/// `[N, dim]` sinusoidal features of the timesteps.
pub fn timestep_embedding(t: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0; t.len() * dim];
    for (row, &step) in data.chunks_mut(dim).zip(t) {
        for i in 0..half {
            let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
            let arg = step as f64 * freq;
            row[i] = arg.sin();
            row[half + i] = arg.cos();
        }
    }
    Tensor::new(vec![t.len(), dim], data).expect("shape")
}

/// Trainable ε_θ(x, t) together with the schedule it was trained under.
#[derive(Debug, Clone)]
pub struct EpsilonNetwork {
    config: UNetConfig,
    schedule: NoiseSchedule,
    params: ParamStore,
    layers: Layers,
    trained: bool,
}

impl EpsilonNetwork {
    pub fn new(config: UNetConfig, schedule: NoiseSchedule, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut r = rng::stream(seed, "unet/init");
        let layers = Layers::build(&config, &mut store, &mut r);
        Ok(Self {
            config,
            schedule,
            params: store,
            layers,
            trained: false,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn geometry(&self) -> Geometry {
        self.config.geometry
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn mark_trained(&mut self) {
        self.trained = true;
    }

    /// Builds the graph for `x: [N, C, H, W]` at per-sample timesteps `t`.
    /// The output has [`UNetConfig::out_channels`] channels.
    pub fn forward(&self, tape: &mut Tape, x: Var, t: &[usize]) -> Var {
        let l = &self.layers;
        let emb = tape.input(timestep_embedding(t, self.config.time_embed_dim));
        let emb = l.time1.forward(tape, emb);
        let emb = tape.silu(emb);
        let emb = l.time2.forward(tape, emb);
        let temb = tape.silu(emb);

        let mut h = l.stem.forward(tape, x);
        let mut skips = Vec::with_capacity(l.down.len());
        for (i, block) in l.down.iter().enumerate() {
            h = block.forward(tape, h, temb);
            skips.push(h);
            if let Some(ds) = l.downsample.get(i) {
                h = ds.forward(tape, h);
            }
        }
        h = l.mid.forward(tape, h, temb);
        let levels = l.down.len();
        for (j, block) in l.up.iter().enumerate() {
            let level = levels - 1 - j;
            if level + 1 < levels {
                h = tape.upsample2(h);
            }
            h = tape.concat(h, skips[level]);
            h = block.forward(tape, h, temb);
        }
        let h = l.out_norm.forward(tape, h);
        let h = tape.silu(h);
        l.out_conv.forward(tape, h)
    }

    /// Evaluates the network on a batch without keeping the graph.
    pub fn predict(&self, x: &Tensor, t: &[usize]) -> Result<Tensor> {
        let (n, _, h, w) = check_batch(x, self.geometry())?;
        if t.len() != n {
            return Err(Error::InvalidArgument(format!(
                "{} timesteps for a batch of {n}",
                t.len()
            )));
        }
        for &step in t {
            self.schedule.check_t(step)?;
        }
        let mut tape = Tape::new(&self.params);
        let xv = tape.input(x.clone());
        let out = self.forward(&mut tape, xv, t);
        let out = tape.value(out).clone();
        debug_assert_eq!(out.shape(), &[n, self.config.out_channels(), h, w]);
        Ok(out)
    }

    /// Content identifier: the first 16 hex digits of the checkpoint's SHA-256.
    pub fn id(&self) -> String {
        let bytes = self.to_checkpoint().to_bytes().expect("serialisable checkpoint");
        sha256_hex(&bytes)[..16].to_string()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            serde_json::json!({
                "kind": CHECKPOINT_KIND,
                "config": self.config,
                "schedule": self.schedule,
                "geometry": self.config.geometry,
                "trained": self.trained,
            }),
            self.params.clone(),
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta.get("kind").and_then(|k| k.as_str()) != Some(CHECKPOINT_KIND) {
            return Err(Error::InvalidArgument("checkpoint is not an ε-network".into()));
        }
        let config: UNetConfig = serde_json::from_value(ck.meta["config"].clone())?;
        let schedule: NoiseSchedule = serde_json::from_value(ck.meta["schedule"].clone())?;
        let trained = ck.meta["trained"].as_bool().unwrap_or(false);
        let mut net = Self::new(config, schedule, 0)?;
        if net.params.len() != ck.params.len() {
            return Err(Error::InvalidArgument(
                "checkpoint parameters do not match the configured architecture".into(),
            ));
        }
        net.params
            .load_from(&ck.params)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        net.trained = trained;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Validates `[N, C, H, W]` against a geometry.
pub(crate) fn check_batch(x: &Tensor, g: Geometry) -> Result<(usize, usize, usize, usize)> {
    let s = x.shape();
    if s.len() != 4 || s[1] != g.channels || s[2] != g.height || s[3] != g.width {
        let mut expected = vec![s.first().copied().unwrap_or(0)];
        expected.extend(g.shape());
        return Err(Error::Shape {
            expected,
            actual: s.to_vec(),
        });
    }
    Ok((s[0], s[1], s[2], s[3]))
}
