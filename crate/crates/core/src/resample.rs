//! Resampling kernels shared by preprocessing, map upsampling and transforms.
//!
//! All kernels use half-pixel centres: output index `o` samples source
//! coordinate `(o + 0.5) * in / out - 0.5`. No anti-aliasing is applied when
//! downsampling.

/// Keys cubic convolution coefficient (`a = -0.5`, Catmull-Rom).
pub const CUBIC_A: f64 = -0.5;

pub fn cubic_weight(t: f64) -> f64 {
    let t = t.abs();
    if t <= 1.0 {
        ((CUBIC_A + 2.0) * t - (CUBIC_A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((CUBIC_A * t - 5.0 * CUBIC_A) * t + 8.0 * CUBIC_A) * t - 4.0 * CUBIC_A
    } else {
        0.0
    }
}

#[inline]
pub fn source_coord(out_index: usize, in_len: usize, out_len: usize) -> f64 {
    (out_index as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5
}

/// Four clamped taps and normalised weights for one output index.
fn cubic_taps(out_index: usize, in_len: usize, out_len: usize) -> ([usize; 4], [f64; 4]) {
    let x = source_coord(out_index, in_len, out_len);
    let base = x.floor();
    let frac = x - base;
    let mut idx = [0usize; 4];
    let mut w = [0f64; 4];
    let mut sum = 0.0;
    for k in 0..4 {
        let pos = base as i64 + k as i64 - 1;
        idx[k] = pos.clamp(0, in_len as i64 - 1) as usize;
        w[k] = cubic_weight(frac - (k as f64 - 1.0));
        sum += w[k];
    }
    for wk in &mut w {
        *wk /= sum;
    }
    (idx, w)
}

/// Separable bicubic resize of one `in_h x in_w` plane (rows first, then
/// columns).
pub fn bicubic_plane(src: &[f64], in_w: usize, in_h: usize, out_w: usize, out_h: usize) -> Vec<f64> {
    debug_assert_eq!(src.len(), in_w * in_h);
    let col_taps: Vec<_> = (0..out_w).map(|o| cubic_taps(o, in_w, out_w)).collect();
    let row_taps: Vec<_> = (0..out_h).map(|o| cubic_taps(o, in_h, out_h)).collect();

    let mut horizontal = vec![0f64; in_h * out_w];
    for y in 0..in_h {
        let row = &src[y * in_w..(y + 1) * in_w];
        for (x, (idx, w)) in col_taps.iter().enumerate() {
            let mut acc = 0.0;
            for k in 0..4 {
                acc += w[k] * row[idx[k]];
            }
            horizontal[y * out_w + x] = acc;
        }
    }
    let mut out = vec![0f64; out_h * out_w];
    for (y, (idx, w)) in row_taps.iter().enumerate() {
        for x in 0..out_w {
            let mut acc = 0.0;
            for k in 0..4 {
                acc += w[k] * horizontal[idx[k] * out_w + x];
            }
            out[y * out_w + x] = acc;
        }
    }
    out
}

/// Two clamped taps and weights for linear interpolation.
#[inline]
pub fn linear_taps(x: f64, in_len: usize) -> (usize, usize, f64) {
    let max = (in_len - 1) as f64;
    let x = x.clamp(0.0, max);
    let lo = x.floor();
    let hi = (lo + 1.0).min(max);
    (lo as usize, hi as usize, x - lo)
}

/// Bilinear resize of one plane with edge clamping.
pub fn bilinear_plane(src: &[f64], in_w: usize, in_h: usize, out_w: usize, out_h: usize) -> Vec<f64> {
    let cols: Vec<_> = (0..out_w)
        .map(|o| linear_taps(source_coord(o, in_w, out_w), in_w))
        .collect();
    let mut out = vec![0f64; out_w * out_h];
    for y in 0..out_h {
        let (y0, y1, fy) = linear_taps(source_coord(y, in_h, out_h), in_h);
        for (x, &(x0, x1, fx)) in cols.iter().enumerate() {
            let top = src[y0 * in_w + x0] * (1.0 - fx) + src[y0 * in_w + x1] * fx;
            let bottom = src[y1 * in_w + x0] * (1.0 - fx) + src[y1 * in_w + x1] * fx;
            out[y * out_w + x] = top * (1.0 - fy) + bottom * fy;
        }
    }
    out
}

/// Nearest-neighbour resize; output index `o` reads `floor(o * in / out)`.
pub fn nearest_plane<T: Copy>(src: &[T], in_w: usize, in_h: usize, out_w: usize, out_h: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(out_w * out_h);
    for y in 0..out_h {
        let sy = y * in_h / out_h;
        for x in 0..out_w {
            out.push(src[sy * in_w + x * in_w / out_w]);
        }
    }
    out
}

/// Bilinear resize of an 8-bit RGB raster, rounding to nearest.
pub fn resize_rgb_bilinear(src: &image::RgbImage, out_w: u32, out_h: u32) -> image::RgbImage {
    let (w, h) = (src.width() as usize, src.height() as usize);
    let mut planes = Vec::with_capacity(3);
    for c in 0..3 {
        let plane: Vec<f64> = src.pixels().map(|p| f64::from(p.0[c])).collect();
        planes.push(bilinear_plane(&plane, w, h, out_w as usize, out_h as usize));
    }
    image::RgbImage::from_fn(out_w, out_h, |x, y| {
        let i = y as usize * out_w as usize + x as usize;
        image::Rgb([0, 1, 2].map(|c| planes[c][i].round().clamp(0.0, 255.0) as u8))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_kernel_interpolates() {
        assert_eq!(cubic_weight(0.0), 1.0);
        assert_eq!(cubic_weight(1.0), 0.0);
        assert_eq!(cubic_weight(2.0), 0.0);
        let s: f64 = (-1..=2).map(|k| cubic_weight(0.3 - k as f64)).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identity_sizes_copy_exactly() {
        let src: Vec<f64> = (0..20).map(|v| v as f64 * 0.37).collect();
        assert_eq!(bicubic_plane(&src, 5, 4, 5, 4), src);
        assert_eq!(bilinear_plane(&src, 5, 4, 5, 4), src);
        assert_eq!(nearest_plane(&src, 5, 4, 5, 4), src);
    }

    #[test]
    fn constant_plane_stays_constant() {
        let src = vec![0.25; 64];
        assert!(bicubic_plane(&src, 8, 8, 4, 4).iter().all(|v| *v == 0.25));
        assert!(bilinear_plane(&src, 8, 8, 13, 5).iter().all(|v| (*v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn nearest_replicates_blocks() {
        let src = [1, 2, 3, 4];
        let out = nearest_plane(&src, 2, 2, 4, 4);
        assert_eq!(out, vec![1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4]);
    }
}
