//! Spatial attention from predicted noise: the per-pixel channel mean of
//! `|ε̂|`, min-max normalised to `[0, 1]`.

use std::path::Path;

use anl_nn::Tensor;

use crate::data::image_io::save_gray_plane;
use crate::probe::PredictedNoise;
use crate::{resample, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    weights: Vec<f64>,
    height: usize,
    width: usize,
    source_timestep: usize,
}

impl AttentionMap {
    /// All-ones map; modulating with it leaves features unchanged.
    pub fn identity(height: usize, width: usize, source_timestep: usize) -> Self {
        Self {
            weights: vec![1.0; height * width],
            height,
            width,
            source_timestep,
        }
    }

    pub fn from_weights(weights: Vec<f64>, height: usize, width: usize, source_timestep: usize) -> Result<Self> {
        if weights.len() != height * width || weights.is_empty() {
            return Err(Error::Shape {
                expected: vec![height, width],
                actual: vec![weights.len()],
            });
        }
        if weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::InvalidArgument("attention weights must lie in [0, 1]".into()));
        }
        Ok(Self {
            weights,
            height,
            width,
            source_timestep,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn source_timestep(&self) -> usize {
        self.source_timestep
    }

    fn is_constant(&self) -> bool {
        self.weights.iter().all(|w| *w == self.weights[0])
    }

    /// 8-bit grayscale export, 0 → black and 1 → white.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        save_gray_plane(&self.weights, self.height, self.width, 0.0, 1.0, path)
    }
}

pub fn build_attention(noise: &PredictedNoise) -> Result<AttentionMap> {
    attention_from_values(noise.values(), noise.timestep())
}

/// [`build_attention`] on a raw `C × H × W` tensor.
pub fn attention_from_values(values: &Tensor, source_timestep: usize) -> Result<AttentionMap> {
    let s = values.shape();
    if s.len() != 3 || values.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "attention needs a non-empty C×H×W tensor, got {s:?}"
        )));
    }
    if !values.all_finite() {
        return Err(Error::NonFinite("noise passed to attention".into()));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let hw = h * w;
    let data = values.data();
    // Summing in sorted order makes the map exactly invariant to channel order.
    let mut column = Vec::with_capacity(c);
    let m: Vec<f64> = (0..hw)
        .map(|p| {
            column.clear();
            column.extend((0..c).map(|k| data[k * hw + p].abs()));
            column.sort_by(f64::total_cmp);
            column.iter().sum::<f64>() / c as f64
        })
        .collect();
    let (lo, hi) = m.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(*v), hi.max(*v))
    });
    if hi == lo {
        return Ok(AttentionMap::identity(h, w, source_timestep));
    }
    let span = hi - lo;
    let weights = m.iter().map(|v| ((v - lo) / span).clamp(0.0, 1.0)).collect();
    Ok(AttentionMap {
        weights,
        height: h,
        width: w,
        source_timestep,
    })
}

/// Bilinear resize to `height × width`, clamped to `[0, 1]`. Constant maps
/// stay exactly constant.
pub fn resize_attention(a: &AttentionMap, height: usize, width: usize) -> Result<AttentionMap> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument(format!(
            "attention target {height}×{width} must be positive"
        )));
    }
    let weights = if a.is_constant() {
        vec![a.weights[0]; height * width]
    } else {
        resample::bilinear(&a.weights, a.height, a.width, height, width)
            .into_iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect()
    };
    Ok(AttentionMap {
        weights,
        height,
        width,
        source_timestep: a.source_timestep,
    })
}

/// Stacks maps resized to `height × width` into an `[N, 1, h, w]` tensor.
pub fn modulation_batch(maps: &[&AttentionMap], height: usize, width: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(maps.len() * height * width);
    for m in maps {
        data.extend(resize_attention(m, height, width)?.weights);
    }
    Ok(Tensor::new(vec![maps.len(), 1, height, width], data).expect("shape"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn min_max_example() {
        let a = attention_from_values(&t(&[1, 2, 2], &[1.0, -1.0, 2.0, 0.0]), 1).unwrap();
        assert_eq!(a.weights(), &[0.5, 0.5, 1.0, 0.0]);
    }

    #[test]
    fn constant_noise_gives_ones() {
        let a = attention_from_values(&Tensor::full(vec![3, 4, 4], -0.7), 1).unwrap();
        assert!(a.weights().iter().all(|w| *w == 1.0));
    }

    #[test]
    fn channel_mean_before_normalisation() {
        // Pixel 0 has channels (3, −1) → 2; pixel 1 has (0, 0) → 0; pixel 2 (1, 1) → 1.
        let a = attention_from_values(&t(&[2, 1, 3], &[3.0, 0.0, 1.0, -1.0, 0.0, 1.0]), 1).unwrap();
        assert_eq!(a.weights(), &[1.0, 0.0, 0.5]);
    }

    #[test]
    fn rejects_non_finite() {
        assert!(attention_from_values(&t(&[1, 1, 2], &[f64::NAN, 0.0]), 1).is_err());
    }

    #[test]
    fn resize_cases() {
        let a = attention_from_values(&t(&[1, 2, 2], &[1.0, -1.0, 2.0, 0.0]), 1).unwrap();
        assert_eq!(resize_attention(&a, 2, 2).unwrap(), a);
        assert!(resize_attention(&a, 0, 2).is_err());

        let c = AttentionMap::from_weights(vec![0.3; 9], 3, 3, 1).unwrap();
        let big = resize_attention(&c, 7, 5).unwrap();
        assert!(big.weights().iter().all(|w| *w == 0.3));

        let checker: Vec<f64> = (0..16).map(|i| ((i / 4 + i % 4) % 2) as f64).collect();
        let cb = AttentionMap::from_weights(checker, 4, 4, 1).unwrap();
        let small = resize_attention(&cb, 2, 2).unwrap();
        assert_eq!(small.weights(), &[0.5; 4]);
    }

    #[test]
    fn png_export() {
        let dir = tempfile::tempdir().unwrap();
        let a = attention_from_values(&t(&[1, 2, 2], &[1.0, -1.0, 2.0, 0.0]), 1).unwrap();
        let p = dir.path().join("a.png");
        a.save_png(&p).unwrap();
        let raw = crate::data::image_io::read_png(&p).unwrap();
        assert_eq!(raw.planes, vec![128, 128, 255, 0]);
    }

    fn noise() -> impl Strategy<Value = (usize, usize, usize, Vec<f64>)> {
        (1usize..4, 1usize..6, 1usize..6).prop_flat_map(|(c, h, w)| {
            (
                Just(c),
                Just(h),
                Just(w),
                prop::collection::vec(-3.0f64..3.0, c * h * w),
            )
        })
    }

    proptest! {
        #[test]
        fn range_and_extremes((c, h, w, v) in noise(), nh in 1usize..9, nw in 1usize..9) {
            let a = attention_from_values(&t(&[c, h, w], &v), 1).unwrap();
            prop_assert!(a.weights().iter().all(|x| (0.0..=1.0).contains(x)));
            if !a.is_constant() {
                prop_assert!(a.weights().contains(&0.0) && a.weights().contains(&1.0));
            }
            let r = resize_attention(&a, nh, nw).unwrap();
            prop_assert!(r.weights().iter().all(|x| (0.0..=1.0).contains(x)));
        }

        #[test]
        fn power_of_two_scale_is_bit_exact((c, h, w, v) in noise(), k in -8i32..8) {
            let s = 2f64.powi(k);
            let scaled: Vec<f64> = v.iter().map(|x| x * s).collect();
            prop_assert_eq!(
                attention_from_values(&t(&[c, h, w], &v), 1).unwrap(),
                attention_from_values(&t(&[c, h, w], &scaled), 1).unwrap()
            );
        }

        #[test]
        fn channel_permutation_invariant((c, h, w, v) in noise(), rot in 0usize..4) {
            let hw = h * w;
            let r = rot % c;
            let mut permuted = v[r * hw..].to_vec();
            permuted.extend_from_slice(&v[..r * hw]);
            let a = attention_from_values(&t(&[c, h, w], &v), 1).unwrap();
            let b = attention_from_values(&t(&[c, h, w], &permuted), 1).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
