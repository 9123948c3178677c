use std::io::Cursor;
use std::path::Path;

use anl_nn::Tensor;
use image::{DynamicImage, ImageFormat};

use crate::diffusion::LatentImage;
use crate::resample;
use crate::{Error, Result};

/// Decoded 8-bit image as planar `C × H × W` bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub planes: Vec<u8>,
}

pub fn decode_png(bytes: &[u8], path: &Path) -> Result<RawImage> {
    let err = |reason: String| Error::Image {
        path: path.display().to_string(),
        reason,
    };
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png).map_err(|e| err(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, interleaved) = match img {
        DynamicImage::ImageLuma8(b) => (1, b.into_raw()),
        DynamicImage::ImageLumaA8(b) => (1, b.into_raw().chunks(2).map(|p| p[0]).collect()),
        DynamicImage::ImageRgb8(b) => (3, b.into_raw()),
        DynamicImage::ImageRgba8(b) => (3, b.into_raw().chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect()),
        other => return Err(err(format!("unsupported pixel format {:?}", other.color()))),
    };
    let mut planes = vec![0u8; channels * h * w];
    for (i, px) in interleaved.chunks(channels).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            planes[c * h * w + i] = v;
        }
    }
    Ok(RawImage {
        channels,
        height: h,
        width: w,
        planes,
    })
}

pub fn read_png(path: &Path) -> Result<RawImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_png(&bytes, path)
}

/// Converts between 1 and 3 channels (luma weights for RGB → gray).
fn convert_channels(raw: &RawImage, channels: usize) -> Result<Vec<f64>> {
    let hw = raw.height * raw.width;
    let src: Vec<f64> = raw.planes.iter().map(|&v| f64::from(v)).collect();
    match (raw.channels, channels) {
        (a, b) if a == b => Ok(src),
        (1, 3) => Ok(src.repeat(3)),
        (3, 1) => Ok((0..hw)
            .map(|i| 0.299 * src[i] + 0.587 * src[hw + i] + 0.114 * src[2 * hw + i])
            .collect()),
        (a, b) => Err(Error::InvalidArgument(format!(
            "cannot convert {a}-channel image to {b} channels"
        ))),
    }
}

/// Decodes, converts to `channels`, resizes bilinearly to `size × size`
/// and maps 8-bit values to `[-1, 1]` via `v / 127.5 − 1`.
pub fn load_and_normalize(path: &Path, size: usize, channels: usize) -> Result<LatentImage> {
    let raw = read_png(path)?;
    normalize_raw(&raw, size, channels)
}

pub fn normalize_raw(raw: &RawImage, size: usize, channels: usize) -> Result<LatentImage> {
    if size == 0 {
        return Err(Error::InvalidArgument("target size must be positive".into()));
    }
    let values = convert_channels(raw, channels)?;
    let hw = raw.height * raw.width;
    let mut out = Vec::with_capacity(channels * size * size);
    for c in 0..channels {
        let plane = &values[c * hw..(c + 1) * hw];
        let resized = resample::bilinear(plane, raw.height, raw.width, size, size);
        out.extend(resized.into_iter().map(|v| v / 127.5 - 1.0));
    }
    LatentImage::new(Tensor::new(vec![channels, size, size], out).expect("shape"), 0)
}

/// Quantises `[-1, 1]` values back to bytes.
pub fn quantize(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Encodes a 1- or 3-channel latent image as an 8-bit PNG.
pub fn encode_png(img: &LatentImage) -> Result<Vec<u8>> {
    let g = img.geometry();
    let hw = g.height * g.width;
    let d = img.pixels().data();
    let mut interleaved = vec![0u8; g.numel()];
    for i in 0..hw {
        for c in 0..g.channels {
            interleaved[i * g.channels + c] = quantize(d[c * hw + i]);
        }
    }
    let color = match g.channels {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        c => {
            return Err(Error::InvalidArgument(format!(
                "cannot encode {c}-channel image as PNG"
            )))
        }
    };
    encode_raw_png(&interleaved, g.width as u32, g.height as u32, color)
}

fn encode_raw_png(interleaved: &[u8], width: u32, height: u32, color: image::ExtendedColorType) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    image::write_buffer_with_format(&mut buf, interleaved, width, height, color, ImageFormat::Png).map_err(|e| {
        Error::Image {
            path: "<memory>".into(),
            reason: e.to_string(),
        }
    })?;
    Ok(buf.into_inner())
}

pub fn save_png(img: &LatentImage, path: &Path) -> Result<()> {
    let bytes = encode_png(img)?;
    anl_nn::checkpoint::write_atomic(path, &bytes).map_err(|e| Error::io(path, e))
}

/// Writes a plane with values in `[lo, hi]` as an 8-bit grayscale PNG using a
/// linear mapping.
pub fn save_gray_plane(values: &[f64], height: usize, width: usize, lo: f64, hi: f64, path: &Path) -> Result<()> {
    let span = if hi > lo { hi - lo } else { 1.0 };
    let bytes: Vec<u8> = values
        .iter()
        .map(|v| (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let png = encode_raw_png(&bytes, width as u32, height as u32, image::ExtendedColorType::L8)?;
    anl_nn::checkpoint::write_atomic(path, &png).map_err(|e| Error::io(path, e))
}
