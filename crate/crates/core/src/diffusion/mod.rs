//! Denoising diffusion: schedules, forward/reverse processes, the ε-network,
//! and its training loop.

pub(crate) mod process;
mod schedule;
mod train;
mod unet;

pub use process::{posterior_params, q_sample, reverse_sample, reverse_sample_batch, PosteriorParams};
pub use schedule::NoiseSchedule;
pub use train::{train_epsilon_net, TrainReport, TrainingConfig};
pub use unet::{EpsilonNetwork, UNetConfig};

use anl_nn::Tensor;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Image geometry shared by probes, generators and detectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Geometry {
    pub fn square(channels: usize, size: usize) -> Self {
        Self {
            channels,
            height: size,
            width: size,
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        vec![self.channels, self.height, self.width]
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// An image (or noisy diffusion state) as a `C × H × W` tensor in `[-1, 1]`.
///
/// `step == 0` marks a clean image.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentImage {
    pixels: Tensor,
    step: usize,
}

impl LatentImage {
    pub fn new(pixels: Tensor, step: usize) -> Result<Self> {
        if pixels.shape().len() != 3 {
            return Err(Error::InvalidArgument(format!(
                "latent image must be C×H×W, got {:?}",
                pixels.shape()
            )));
        }
        if !pixels.all_finite() {
            return Err(Error::NonFinite("latent image pixels".into()));
        }
        Ok(Self { pixels, step })
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn into_pixels(self) -> Tensor {
        self.pixels
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn geometry(&self) -> Geometry {
        let s = self.pixels.shape();
        Geometry {
            channels: s[0],
            height: s[1],
            width: s[2],
        }
    }
}
