//! Bilinear resampling of single planes with half-pixel centres.

/// Resizes an `h × w` row-major plane to `nh × nw`.
///
/// Output pixel `i` samples source coordinate `(i + 0.5)·h/nh − 0.5`, clamped
/// to the valid range, so equal sizes reproduce the input exactly.
pub fn bilinear(src: &[f64], h: usize, w: usize, nh: usize, nw: usize) -> Vec<f64> {
    assert_eq!(src.len(), h * w);
    if h == nh && w == nw {
        return src.to_vec();
    }
    let ys: Vec<(usize, usize, f64)> = (0..nh).map(|i| axis_weights(i, h, nh)).collect();
    let xs: Vec<(usize, usize, f64)> = (0..nw).map(|j| axis_weights(j, w, nw)).collect();
    let mut out = Vec::with_capacity(nh * nw);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

fn axis_weights(i: usize, size: usize, new_size: usize) -> (usize, usize, f64) {
    let scale = size as f64 / new_size as f64;
    let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (size - 1) as f64);
    let i0 = pos.floor() as usize;
    let i1 = (i0 + 1).min(size - 1);
    (i0, i1, pos - i0 as f64)
}
