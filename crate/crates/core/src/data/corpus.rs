//! Procedural stand-in for a corpus of real images.
//!
//! Each image mixes multi-octave value noise (amplitude falling with
//! frequency), a linear gradient, a few soft-edged geometric primitives and
//! faint per-pixel grain. The octave weighting gives a steeply falling,
//! non-flat radial spectrum.

use std::fs;
use std::path::Path;

use anl_nn::Tensor;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::image_io::save_png;
use super::manifest::{DatasetManifest, Label, ManifestRow, Split, REAL_GENERATOR};
use super::split::assign_splits;
use crate::diffusion::{Geometry, LatentImage};
use crate::{resample, rng, Error, Result};

pub const MANIFEST_NAME: &str = "manifest.jsonl";

/// Renders one procedural image.
pub fn procedural_image<R: Rng + ?Sized>(geometry: Geometry, rng: &mut R) -> LatentImage {
    let (h, w) = (geometry.height, geometry.width);
    let mut base = vec![0.0; h * w];

    // Value-noise octaves, coarse to fine.
    let falloff = rng.random_range(0.8..1.3);
    let mut cells = 2usize;
    while cells <= h.max(w) / 2 {
        let grid: Vec<f64> = (0..cells * cells).map(|_| rng.random_range(-1.0..1.0)).collect();
        let up = resample::bilinear(&grid, cells, cells, h, w);
        let amp = (2.0 / cells as f64).powf(falloff);
        for (b, u) in base.iter_mut().zip(up) {
            *b += amp * u;
        }
        cells *= 2;
    }

    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    let grad_amp = rng.random_range(0.0..0.8);
    for y in 0..h {
        for x in 0..w {
            let u = (x as f64 / w as f64 - 0.5) * theta.cos() + (y as f64 / h as f64 - 0.5) * theta.sin();
            base[y * w + x] += grad_amp * u;
        }
    }

    let shapes = rng.random_range(1..=4);
    for _ in 0..shapes {
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        let r = rng.random_range(0.1..0.35) * h.min(w) as f64;
        let value = rng.random_range(-0.8..0.8);
        let circle = rng.random_bool(0.5);
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let dist = if circle {
                    (dx * dx + dy * dy).sqrt() - r
                } else {
                    dx.abs().max(dy.abs()) - r
                };
                // One-pixel anti-aliased edge.
                let cover = (0.5 - dist).clamp(0.0, 1.0);
                let b = &mut base[y * w + x];
                *b = *b * (1.0 - cover) + value * cover;
            }
        }
    }

    let peak = base.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-9);
    let contrast = rng.random_range(0.5..0.95);
    let grain = rng.random_range(0.004..0.012);
    let mut pixels = Vec::with_capacity(geometry.numel());
    for _ in 0..geometry.channels {
        let gain = if geometry.channels == 1 {
            1.0
        } else {
            rng.random_range(0.75..1.0)
        };
        for b in &base {
            let z: f64 = StandardNormal.sample(rng);
            pixels.push((b / peak * contrast * gain + grain * z).clamp(-1.0, 1.0));
        }
    }
    LatentImage::new(Tensor::new(geometry.shape(), pixels).expect("shape"), 0).expect("finite pixels")
}

/// Writes `n` procedural PNGs plus `manifest.jsonl` into `out_dir` with an
/// 80/10/10 split. Output is a pure function of `(n, seed, geometry)`.
pub fn synthesize_real_corpus(n: usize, seed: u64, out_dir: &Path, geometry: Geometry) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(Error::InvalidArgument("corpus size must be at least 1".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let out_dir = std::path::absolute(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let mut r = rng::stream(seed, &format!("corpus/{i}"));
        let img = procedural_image(geometry, &mut r);
        let path = out_dir.join(format!("real_{i:05}.png"));
        save_png(&img, &path)?;
        rows.push(ManifestRow::from_file(
            &path,
            Label::Real,
            REAL_GENERATOR,
            Split::Train,
        )?);
    }
    assign_splits(&mut rows, seed);
    let manifest = DatasetManifest::new(rows)?;
    manifest.write(&out_dir.join(MANIFEST_NAME))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_image_corpus_is_train_only() {
        let dir = tempfile::tempdir().unwrap();
        let m = synthesize_real_corpus(1, 5, dir.path(), Geometry::square(1, 16)).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.rows()[0].split, Split::Train);
        m.verify_hashes().unwrap();
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let g = Geometry::square(3, 16);
        let ma = synthesize_real_corpus(6, 11, a.path(), g).unwrap();
        let mb = synthesize_real_corpus(6, 11, b.path(), g).unwrap();
        for (ra, rb) in ma.rows().iter().zip(mb.rows()) {
            assert_eq!(ra.content_hash, rb.content_hash);
            assert_eq!(ra.split, rb.split);
            assert_eq!(fs::read(&ra.path).unwrap(), fs::read(&rb.path).unwrap());
        }
    }

    #[test]
    fn zero_images_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(synthesize_real_corpus(0, 1, dir.path(), Geometry::square(1, 8)).is_err());
    }

    #[test]
    fn unwritable_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("occupied");
        fs::write(&file, b"x").unwrap();
        assert!(synthesize_real_corpus(2, 1, &file.join("sub"), Geometry::square(1, 8)).is_err());
    }
}
