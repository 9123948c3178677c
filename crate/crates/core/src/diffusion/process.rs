use anl_nn::Tensor;
use rand_distr::{Distribution, StandardNormal};

use super::unet::check_batch;
use super::{EpsilonNetwork, LatentImage, NoiseSchedule};
use crate::{rng, Error, Result};

/// Gaussian `p_θ(x_{t−1} | x_t)`: per-pixel mean and an isotropic variance.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorParams {
    pub mean: Tensor,
    pub variance: f64,
}

/// Closed-form forward noising `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
pub fn q_sample(x0: &LatentImage, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<LatentImage> {
    sched.check_t(t)?;
    let x = x0.pixels();
    if eps.shape() != x.shape() {
        return Err(Error::Shape {
            expected: x.shape().to_vec(),
            actual: eps.shape().to_vec(),
        });
    }
    let out = noised(x.data(), eps.data(), sched.alpha_bar(t));
    LatentImage::new(Tensor::new(x.shape().to_vec(), out).expect("shape"), t)
}

pub(crate) fn noised(x0: &[f64], eps: &[f64], alpha_bar: f64) -> Vec<f64> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect()
}

/// Posterior parameters at step `t` using the network's noise prediction.
pub fn posterior_params(
    x_t: &LatentImage,
    t: usize,
    eps_net: &EpsilonNetwork,
    sched: &NoiseSchedule,
) -> Result<PosteriorParams> {
    sched.check_t(t)?;
    let x = x_t.pixels();
    let mut batch_shape = vec![1];
    batch_shape.extend_from_slice(x.shape());
    let batch = x.clone().reshape(batch_shape).expect("shape");
    let eps = noise_channels(&eps_net.predict(&batch, &[t])?, x.shape()[0]);
    Ok(PosteriorParams {
        mean: Tensor::new(x.shape().to_vec(), posterior_mean(x.data(), eps.data(), t, sched)).expect("shape"),
        variance: sched.posterior_variance(t),
    })
}

fn posterior_mean(x: &[f64], eps: &[f64], t: usize, sched: &NoiseSchedule) -> Vec<f64> {
    let coef = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
    let inv = 1.0 / sched.alpha(t).sqrt();
    x.iter().zip(eps).map(|(x, e)| inv * (x - coef * e)).collect()
}

/// First `c` channels of an `[N, C', H, W]` prediction.
pub(crate) fn noise_channels(pred: &Tensor, c: usize) -> Tensor {
    let (n, cp, h, w) = pred.dims4();
    if cp == c {
        return pred.clone();
    }
    let plane = c * h * w;
    let mut out = Vec::with_capacity(n * plane);
    for s in 0..n {
        let start = s * cp * h * w;
        out.extend_from_slice(&pred.data()[start..start + plane]);
    }
    Tensor::new(vec![n, c, h, w], out).expect("shape")
}

/// Full ancestral sampling from `x_T ~ N(0, I)`; the result is clamped to
/// `[-1, 1]` and is a pure function of `(network, schedule, seed)`.
pub fn reverse_sample(eps_net: &EpsilonNetwork, sched: &NoiseSchedule, seed: u64) -> Result<LatentImage> {
    Ok(reverse_sample_batch(eps_net, sched, &[seed])?.remove(0))
}

/// Samples one image per seed, evaluating the network on the whole batch at
/// each step. Every sample draws from its own stream.
pub fn reverse_sample_batch(
    eps_net: &EpsilonNetwork,
    sched: &NoiseSchedule,
    seeds: &[u64],
) -> Result<Vec<LatentImage>> {
    if !eps_net.is_trained() {
        return Err(Error::Untrained);
    }
    if sched != eps_net.schedule() {
        return Err(Error::InvalidArgument(
            "sampling schedule differs from the network's training schedule".into(),
        ));
    }
    if seeds.is_empty() {
        return Ok(Vec::new());
    }
    let g = eps_net.geometry();
    let per = g.numel();
    let mut streams: Vec<rng::Rng> = seeds.iter().map(|&s| rng::stream(s, "reverse")).collect();
    let mut x = Vec::with_capacity(seeds.len() * per);
    for r in &mut streams {
        x.extend((0..per).map(|_| -> f64 { StandardNormal.sample(r) }));
    }
    let mut shape = vec![seeds.len()];
    shape.extend(g.shape());
    let mut x = Tensor::new(shape, x).expect("shape");
    check_batch(&x, g)?;

    for t in (1..=sched.steps()).rev() {
        let steps = vec![t; seeds.len()];
        let eps = noise_channels(&eps_net.predict(&x, &steps)?, g.channels);
        let mut next = posterior_mean(x.data(), eps.data(), t, sched);
        let sigma = sched.posterior_variance(t).sqrt();
        if t > 1 {
            for (chunk, r) in next.chunks_mut(per).zip(&mut streams) {
                for v in chunk {
                    let z: f64 = StandardNormal.sample(r);
                    *v += sigma * z;
                }
            }
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("reverse sampling at t = {t}")));
        }
        x = Tensor::new(x.shape().to_vec(), next).expect("shape");
    }
    x.map(|v| v.clamp(-1.0, 1.0))
        .unstack()
        .into_iter()
        .map(|p| LatentImage::new(p, 0))
        .collect()
}
