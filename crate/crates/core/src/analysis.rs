//! Spectral and entropy diagnostics of predicted-noise fields, plus the
//! one-sided rank test used to compare two corpora.

use std::fmt::Write as _;
use std::path::Path;

use anl_nn::Tensor;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::image_io::save_gray_plane;
use crate::{Error, Result};

/// Local entropy map defaults.
pub const LEM_WINDOW: usize = 16;
pub const LEM_STRIDE: usize = 8;
pub const LEM_BINS: usize = 32;

/// Radially averaged power spectrum.
///
/// Bin `b` holds frequencies whose normalised radius, scaled by
/// `min(H, W)`, rounds to `b`; there are `floor(min(H, W) / 2)` bins and bin
/// 0 is DC. Corner frequencies beyond the last bin are left out of the
/// curve but counted in `total_power`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsdCurve {
    /// Normalised spatial frequency of each bin centre, in `[0, 0.5)`.
    pub radial_bins: Vec<f64>,
    /// Mean power over the bin's frequencies.
    pub power: Vec<f64>,
    pub counts: Vec<usize>,
    /// Sum of power over every frequency; equals the mean-removed signal
    /// energy.
    pub total_power: f64,
}

impl PsdCurve {
    /// Summed power in bin `b`.
    pub fn bin_energy(&self, b: usize) -> f64 {
        self.power[b] * self.counts[b] as f64
    }

    /// Coefficient of variation (std / mean) of the power over bins
    /// `[lo, hi)`; 0 for a perfectly flat spectrum.
    pub fn flatness(&self, lo: usize, hi: usize) -> f64 {
        let band = &self.power[lo..hi];
        let mean = band.iter().sum::<f64>() / band.len() as f64;
        let var = band.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / band.len() as f64;
        if mean > 0.0 {
            var.sqrt() / mean
        } else {
            0.0
        }
    }

    /// Bins `[n/4, ⌈3n/4⌉)`, excluding DC.
    pub fn mid_band(&self) -> (usize, usize) {
        let n = self.power.len();
        ((n / 4).max(1), (3 * n).div_ceil(4).max(2).min(n))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin,frequency,power,count\n");
        for (b, ((f, p), c)) in self.radial_bins.iter().zip(&self.power).zip(&self.counts).enumerate() {
            let _ = writeln!(s, "{b},{f},{p},{c}");
        }
        s
    }
}

/// Per-channel mean removal, 2-D DFT, `|X|² / (H·W)` averaged over channels,
/// then annular averaging.
pub fn radial_psd(values: &Tensor) -> Result<PsdCurve> {
    let s = values.shape();
    if s.len() != 3 {
        return Err(Error::InvalidArgument(format!("expected C×H×W, got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if h < 2 || w < 2 || c == 0 {
        return Err(Error::InvalidArgument(format!("{h}×{w} is too small for a spectrum")));
    }
    if !values.all_finite() {
        return Err(Error::NonFinite("PSD input".into()));
    }
    let mut planner = FftPlanner::<f64>::new();
    let row_fft = planner.plan_fft_forward(w);
    let col_fft = planner.plan_fft_forward(h);
    let mut power = vec![0.0; h * w];
    let norm = (h * w) as f64;
    for plane in values.data().chunks(h * w) {
        let mean = plane.iter().sum::<f64>() / norm;
        let mut buf: Vec<Complex<f64>> = plane.iter().map(|v| Complex::new(v - mean, 0.0)).collect();
        for row in buf.chunks_mut(w) {
            row_fft.process(row);
        }
        let mut col = vec![Complex::new(0.0, 0.0); h];
        for x in 0..w {
            for y in 0..h {
                col[y] = buf[y * w + x];
            }
            col_fft.process(&mut col);
            for y in 0..h {
                buf[y * w + x] = col[y];
            }
        }
        for (p, z) in power.iter_mut().zip(&buf) {
            *p += z.norm_sqr() / norm / c as f64;
        }
    }

    let side = h.min(w);
    let n = side / 2;
    let mut sums = vec![0.0; n];
    let mut counts = vec![0usize; n];
    let signed = |k: usize, len: usize| if k <= len / 2 { k as f64 } else { k as f64 - len as f64 };
    for y in 0..h {
        let fy = signed(y, h) / h as f64;
        for x in 0..w {
            let fx = signed(x, w) / w as f64;
            let b = ((fy * fy + fx * fx).sqrt() * side as f64).round() as usize;
            if b < n {
                sums[b] += power[y * w + x];
                counts[b] += 1;
            }
        }
    }
    Ok(PsdCurve {
        radial_bins: (0..n).map(|b| b as f64 / side as f64).collect(),
        power: sums
            .iter()
            .zip(&counts)
            .map(|(s, &k)| if k > 0 { s / k as f64 } else { 0.0 })
            .collect(),
        counts,
        total_power: power.iter().sum(),
    })
}

/// Bin-wise mean of equally sized curves.
pub fn mean_psd(curves: &[PsdCurve]) -> Result<PsdCurve> {
    let first = curves.first().ok_or_else(|| Error::Empty("PSD curves".into()))?;
    if curves.iter().any(|c| c.power.len() != first.power.len()) {
        return Err(Error::InvalidArgument("PSD curves differ in bin count".into()));
    }
    let k = curves.len() as f64;
    let mut out = first.clone();
    for (b, p) in out.power.iter_mut().enumerate() {
        *p = curves.iter().map(|c| c.power[b]).sum::<f64>() / k;
    }
    out.total_power = curves.iter().map(|c| c.total_power).sum::<f64>() / k;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyMap {
    /// Row-major `rows × cols` entropies in bits.
    pub values: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
    pub window: usize,
    pub stride: usize,
    pub bins: usize,
}

impl EntropyMap {
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in self.values.chunks(self.cols) {
            let line: Vec<String> = row.iter().map(f64::to_string).collect();
            s.push_str(&line.join(","));
            s.push('\n');
        }
        s
    }

    /// Grayscale PNG, 0 bits → black, `log₂(bins)` → white.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        save_gray_plane(&self.values, self.rows, self.cols, 0.0, (self.bins as f64).log2(), path)
    }
}

/// Shannon entropy (bits) of values in `[0, 1]` histogrammed into `bins`
/// equal-width bins; 1.0 falls in the last bin.
pub fn window_entropy(values: &[f64], bins: usize) -> f64 {
    let mut hist = vec![0usize; bins];
    for v in values {
        hist[((v * bins as f64) as usize).min(bins - 1)] += 1;
    }
    let n = values.len() as f64;
    hist.iter()
        .filter(|&&k| k > 0)
        .map(|&k| {
            let p = k as f64 / n;
            -p * p.log2()
        })
        .sum()
}

/// Sliding-window entropy of the channel-mean `|noise|` field, min-max
/// scaled per image (a constant field scales to 0).
pub fn local_entropy_map(values: &Tensor, window: usize, stride: usize, bins: usize) -> Result<EntropyMap> {
    let s = values.shape();
    if s.len() != 3 {
        return Err(Error::InvalidArgument(format!("expected C×H×W, got {s:?}")));
    }
    if window < 1 || stride < 1 || bins < 1 {
        return Err(Error::InvalidArgument(
            "window, stride and bins must be at least 1".into(),
        ));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if window > h.min(w) {
        return Err(Error::InvalidArgument(format!("window {window} exceeds {h}×{w}")));
    }
    if !values.all_finite() {
        return Err(Error::NonFinite("entropy input".into()));
    }
    let mut field = vec![0.0; h * w];
    for plane in values.data().chunks(h * w) {
        for (f, v) in field.iter_mut().zip(plane) {
            *f += v.abs() / c as f64;
        }
    }
    let (lo, hi) = field
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    for f in &mut field {
        *f = if hi > lo { (*f - lo) / (hi - lo) } else { 0.0 };
    }
    let rows = (h - window) / stride + 1;
    let cols = (w - window) / stride + 1;
    let mut out = Vec::with_capacity(rows * cols);
    let mut buf = Vec::with_capacity(window * window);
    for r in 0..rows {
        for q in 0..cols {
            buf.clear();
            for y in r * stride..r * stride + window {
                buf.extend_from_slice(&field[y * w + q * stride..y * w + q * stride + window]);
            }
            out.push(window_entropy(&buf, bins));
        }
    }
    Ok(EntropyMap {
        values: out,
        rows,
        cols,
        window,
        stride,
        bins,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankTest {
    /// Mann–Whitney U of the first sample.
    pub u: f64,
    pub z: f64,
    /// One-sided p-value for "first sample tends to be larger".
    pub p_value: f64,
}

/// One-sided Mann–Whitney U test (normal approximation with tie and
/// continuity corrections) that `a` is stochastically greater than `b`.
pub fn mann_whitney_greater(a: &[f64], b: &[f64]) -> Result<RankTest> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("rank test sample".into()));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::NonFinite("rank test input".into()));
    }
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let mut all: Vec<(f64, bool)> = a
        .iter()
        .map(|&v| (v, true))
        .chain(b.iter().map(|&v| (v, false)))
        .collect();
    all.sort_by(|x, y| x.0.total_cmp(&y.0));
    let n = all.len();
    let mut rank_sum_a = 0.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        rank_sum_a += all[i..=j].iter().filter(|x| x.1).count() as f64 * avg_rank;
        i = j + 1;
    }
    let u = rank_sum_a - n1 * (n1 + 1.0) / 2.0;
    let mean = n1 * n2 / 2.0;
    let nt = n1 + n2;
    let var = n1 * n2 / 12.0 * ((nt + 1.0) - tie_term / (nt * (nt - 1.0)).max(1.0));
    if var <= 0.0 {
        return Ok(RankTest {
            u,
            z: 0.0,
            p_value: 1.0,
        });
    }
    let z = (u - mean - 0.5) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(RankTest {
        u,
        z,
        p_value: 1.0 - normal.cdf(z),
    })
}
