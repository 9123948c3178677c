use anl_nn::{Adam, AdamConfig, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::process::noised;
use super::{EpsilonNetwork, LatentImage, NoiseSchedule, UNetConfig};
use crate::{rng, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Stops after this many optimiser steps in total.
    #[serde(default)]
    pub max_steps: Option<usize>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 2e-3,
            seed: 0,
            max_steps: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss of every optimiser step, in order.
    pub step_losses: Vec<f64>,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Held-out loss before the first and after the last step, over the same
    /// fixed `(t, ε)` draws.
    pub initial_heldout_loss: f64,
    pub final_heldout_loss: f64,
    pub heldout_images: usize,
}

/// Trains a fresh ε-network with the simple denoising objective
/// `E‖ε − ε_θ(√ᾱ_t·x0 + √(1−ᾱ_t)·ε, t)‖²` (mean over pixels), `t` uniform.
///
/// `heldout` images are never trained on; when empty, the first training
/// batch stands in so the report still has a before/after comparison.
pub fn train_epsilon_net(
    train: &[LatentImage],
    heldout: &[LatentImage],
    sched: &NoiseSchedule,
    unet: UNetConfig,
    config: &TrainingConfig,
) -> Result<(EpsilonNetwork, TrainReport)> {
    if train.is_empty() {
        return Err(Error::Empty("training corpus".into()));
    }
    if config.batch_size == 0 || config.lr.is_nan() || config.lr <= 0.0 {
        return Err(Error::InvalidArgument(
            "batch size and learning rate must be positive".into(),
        ));
    }
    let geometry = unet.geometry;
    for img in train.iter().chain(heldout) {
        if img.geometry() != geometry {
            return Err(Error::Shape {
                expected: geometry.shape(),
                actual: img.pixels().shape().to_vec(),
            });
        }
    }
    let mut net = EpsilonNetwork::new(unet, sched.clone(), rng::derive_seed(config.seed, "unet"))?;
    let heldout: Vec<&LatentImage> = if heldout.is_empty() {
        train.iter().take(config.batch_size).collect()
    } else {
        heldout.iter().collect()
    };
    let probe = HeldoutSet::new(&heldout, sched, config.seed);
    let initial_heldout_loss = probe.loss(&net)?;

    let mut adam = Adam::new(
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
        net.params(),
    );
    let mut r = rng::stream(config.seed, "diffusion/train");
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step_losses = Vec::new();
    let mut epoch_losses = Vec::new();
    let limit = config.max_steps.unwrap_or(usize::MAX);
    'epochs: for epoch in 0..config.epochs {
        order.shuffle(&mut r);
        let mut sum = 0.0;
        let mut count = 0;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            if step_losses.len() >= limit {
                if count > 0 {
                    epoch_losses.push(sum / count as f64);
                }
                break 'epochs;
            }
            let images: Vec<&LatentImage> = chunk.iter().map(|&i| &train[i]).collect();
            let batch = draw_batch(&images, sched, &mut r);
            let (loss, grads) = {
                let mut tape = Tape::new(net.params());
                let loss = batch.loss(&net, &mut tape);
                let value = tape.value(loss).data()[0];
                (value, tape.backward(loss).dense(net.params()))
            };
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "denoising loss at epoch {epoch}, step {step}"
                )));
            }
            adam.step(net.params_mut(), &grads);
            step_losses.push(loss);
            sum += loss;
            count += 1;
        }
        epoch_losses.push(sum / count as f64);
        log::info!("diffusion epoch {epoch}: loss {:.5}", sum / count as f64);
    }
    net.mark_trained();
    let final_heldout_loss = probe.loss(&net)?;
    Ok((
        net,
        TrainReport {
            step_losses,
            epoch_losses,
            initial_heldout_loss,
            final_heldout_loss,
            heldout_images: heldout.len(),
        },
    ))
}

struct NoisedBatch {
    x_t: Tensor,
    eps: Tensor,
    t: Vec<usize>,
}

impl NoisedBatch {
    fn loss(&self, net: &EpsilonNetwork, tape: &mut Tape) -> anl_nn::Var {
        let x = tape.input(self.x_t.clone());
        let mut out = net.forward(tape, x, &self.t);
        let c = net.geometry().channels;
        if net.config().learned_variance {
            out = tape.narrow_channels(out, 0, c);
        }
        tape.mse(out, self.eps.clone())
    }
}

fn draw_batch(images: &[&LatentImage], sched: &NoiseSchedule, r: &mut rng::Rng) -> NoisedBatch {
    let per = images[0].pixels().len();
    let mut x_t = Vec::with_capacity(images.len() * per);
    let mut eps = Vec::with_capacity(images.len() * per);
    let mut t = Vec::with_capacity(images.len());
    for img in images {
        let step = r.random_range(1..=sched.steps());
        let e: Vec<f64> = (0..per).map(|_| StandardNormal.sample(r)).collect();
        x_t.extend(noised(img.pixels().data(), &e, sched.alpha_bar(step)));
        eps.extend(e);
        t.push(step);
    }
    let mut shape = vec![images.len()];
    shape.extend_from_slice(images[0].pixels().shape());
    NoisedBatch {
        x_t: Tensor::new(shape.clone(), x_t).expect("shape"),
        eps: Tensor::new(shape, eps).expect("shape"),
        t,
    }
}

/// Fixed noisy copies of the held-out images.
struct HeldoutSet {
    batches: Vec<NoisedBatch>,
    sizes: Vec<usize>,
}

impl HeldoutSet {
    const BATCH: usize = 64;

    fn new(images: &[&LatentImage], sched: &NoiseSchedule, seed: u64) -> Self {
        let mut r = rng::stream(seed, "diffusion/heldout");
        let batches: Vec<NoisedBatch> = images
            .chunks(Self::BATCH)
            .map(|c| draw_batch(c, sched, &mut r))
            .collect();
        let sizes = images.chunks(Self::BATCH).map(<[_]>::len).collect();
        Self { batches, sizes }
    }

    fn loss(&self, net: &EpsilonNetwork) -> Result<f64> {
        let mut total = 0.0;
        let mut n = 0;
        for (b, &size) in self.batches.iter().zip(&self.sizes) {
            let mut tape = Tape::new(net.params());
            let loss = b.loss(net, &mut tape);
            total += tape.value(loss).data()[0] * size as f64;
            n += size;
        }
        let mean = total / n as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite("held-out denoising loss".into()));
        }
        Ok(mean)
    }
}
