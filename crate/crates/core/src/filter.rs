//! Convolution primitives with reflective (edge-repeating) boundaries.
//!
//! Each forward filter has a matching adjoint that scatters contributions
//! back through the same reflected index map, so `<Fx, y> == <x, F*y>` holds
//! to rounding error, including at the borders.

use crate::image::Image;

/// Maps an arbitrary integer index onto `[0, n)` by mirror reflection with
/// the edge sample repeated (`-1 -> 0`, `n -> n-1`). Works for any offset,
/// including offsets larger than `n`.
#[inline]
pub fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Samples of `exp(-i²/2σ²)` for `i in -radius..=radius`, normalized to sum 1.
/// Returns `[1.0]` (identity) when `sigma == 0` or `radius == 0`.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    if sigma <= 0.0 || radius == 0 {
        return vec![1.0];
    }
    let r = radius as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Source index of every padded position `-r..n+r`.
fn padded_index(n: usize, r: usize) -> Vec<usize> {
    (0..n + 2 * r).map(|i| reflect(i as isize - r as isize, n)).collect()
}

fn correlate_rows(img: &Image, kernel: &[f64]) -> Image {
    let (w, h) = img.dims();
    let r = kernel.len() / 2;
    let idx = padded_index(w, r);
    let src = img.data();
    let mut out = vec![0.0; w * h];
    let mut padded = vec![0.0; w + 2 * r];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for (p, &i) in padded.iter_mut().zip(&idx) {
            *p = row[i];
        }
        for (x, o) in out[y * w..(y + 1) * w].iter_mut().enumerate() {
            *o = kernel.iter().zip(&padded[x..]).map(|(k, v)| k * v).sum();
        }
    }
    Image::from_vec_unchecked(w, h, out)
}

fn correlate_cols(img: &Image, kernel: &[f64]) -> Image {
    let (w, h) = img.dims();
    let r = kernel.len() / 2;
    let idx = padded_index(h, r);
    let src = img.data();
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let orow = &mut out[y * w..(y + 1) * w];
        for (&kv, &sy) in kernel.iter().zip(&idx[y..]) {
            let srow = &src[sy * w..(sy + 1) * w];
            for (o, s) in orow.iter_mut().zip(srow) {
                *o += kv * s;
            }
        }
    }
    Image::from_vec_unchecked(w, h, out)
}

fn correlate_rows_adjoint(img: &Image, kernel: &[f64]) -> Image {
    let (w, h) = img.dims();
    let r = kernel.len() / 2;
    let idx = padded_index(w, r);
    let src = img.data();
    let mut out = vec![0.0; w * h];
    let mut padded = vec![0.0; w + 2 * r];
    for y in 0..h {
        padded.iter_mut().for_each(|p| *p = 0.0);
        for (x, &v) in src[y * w..(y + 1) * w].iter().enumerate() {
            for (p, &kv) in padded[x..].iter_mut().zip(kernel) {
                *p += kv * v;
            }
        }
        let orow = &mut out[y * w..(y + 1) * w];
        for (&p, &i) in padded.iter().zip(&idx) {
            orow[i] += p;
        }
    }
    Image::from_vec_unchecked(w, h, out)
}

fn correlate_cols_adjoint(img: &Image, kernel: &[f64]) -> Image {
    let (w, h) = img.dims();
    let r = kernel.len() / 2;
    let idx = padded_index(h, r);
    let src = img.data();
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let srow = &src[y * w..(y + 1) * w];
        for (&kv, &oy) in kernel.iter().zip(&idx[y..]) {
            let orow = &mut out[oy * w..(oy + 1) * w];
            for (o, s) in orow.iter_mut().zip(srow) {
                *o += kv * s;
            }
        }
    }
    Image::from_vec_unchecked(w, h, out)
}

/// Separable correlation with the same 1D kernel along both axes.
pub fn separable(img: &Image, kernel: &[f64]) -> Image {
    if kernel.len() == 1 && kernel[0] == 1.0 {
        return img.clone();
    }
    correlate_cols(&correlate_rows(img, kernel), kernel)
}

/// Exact adjoint of [`separable`].
pub fn separable_adjoint(img: &Image, kernel: &[f64]) -> Image {
    if kernel.len() == 1 && kernel[0] == 1.0 {
        return img.clone();
    }
    correlate_rows_adjoint(&correlate_cols_adjoint(img, kernel), kernel)
}

/// 3x3 correlation, `kernel[dy][dx]` weighting the pixel at offset
/// `(dx - 1, dy - 1)`.
pub fn correlate3(img: &Image, kernel: &[[f64; 3]; 3]) -> Image {
    let (w, h) = img.dims();
    let (xi, yi) = (padded_index(w, 1), padded_index(h, 1));
    let pw = w + 2;
    let src = img.data();
    let mut padded = vec![0.0; pw * (h + 2)];
    for (py, &sy) in yi.iter().enumerate() {
        for (px, &sx) in xi.iter().enumerate() {
            padded[py * pw + px] = src[sy * w + sx];
        }
    }
    let mut out = vec![0.0; w * h];
    for (dy, krow) in kernel.iter().enumerate() {
        for (dx, &kv) in krow.iter().enumerate() {
            if kv == 0.0 {
                continue;
            }
            for y in 0..h {
                let prow = &padded[(y + dy) * pw + dx..(y + dy) * pw + dx + w];
                for (o, p) in out[y * w..(y + 1) * w].iter_mut().zip(prow) {
                    *o += kv * p;
                }
            }
        }
    }
    Image::from_vec_unchecked(w, h, out)
}

/// Exact adjoint of [`correlate3`].
pub fn correlate3_adjoint(img: &Image, kernel: &[[f64; 3]; 3]) -> Image {
    let (w, h) = img.dims();
    let (xi, yi) = (padded_index(w, 1), padded_index(h, 1));
    let pw = w + 2;
    let src = img.data();
    let mut padded = vec![0.0; pw * (h + 2)];
    for (dy, krow) in kernel.iter().enumerate() {
        for (dx, &kv) in krow.iter().enumerate() {
            if kv == 0.0 {
                continue;
            }
            for y in 0..h {
                let prow = &mut padded[(y + dy) * pw + dx..(y + dy) * pw + dx + w];
                for (p, s) in prow.iter_mut().zip(&src[y * w..(y + 1) * w]) {
                    *p += kv * s;
                }
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for (py, &sy) in yi.iter().enumerate() {
        for (px, &sx) in xi.iter().enumerate() {
            out[sy * w + sx] += padded[py * pw + px];
        }
    }
    Image::from_vec_unchecked(w, h, out)
}
