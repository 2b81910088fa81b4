//! Parameter-free layers.

use rand::Rng;

use super::Tensor;

pub fn relu_inplace(x: &mut Tensor) {
    x.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Gradient of ReLU given its output.
pub fn relu_backward(out: &Tensor, dy: &mut Tensor) {
    for (d, &o) in dy.data.iter_mut().zip(&out.data) {
        if o <= 0.0 {
            *d = 0.0;
        }
    }
}

/// Inverted dropout; returns the scaled keep mask for the backward pass.
pub fn dropout_inplace<R: Rng>(x: &mut Tensor, rate: f32, rng: &mut R) -> Vec<f32> {
    if rate <= 0.0 {
        return Vec::new();
    }
    let scale = 1.0 / (1.0 - rate);
    let mask: Vec<f32> = (0..x.data.len())
        .map(|_| if rng.random::<f32>() < rate { 0.0 } else { scale })
        .collect();
    for (v, m) in x.data.iter_mut().zip(&mask) {
        *v *= m;
    }
    mask
}

pub fn dropout_backward(mask: &[f32], dy: &mut Tensor) {
    if mask.is_empty() {
        return;
    }
    for (d, m) in dy.data.iter_mut().zip(mask) {
        *d *= m;
    }
}

/// Source taps for bilinear resampling along one axis
/// (half-pixel centers, edge clamped).
fn taps(len_in: usize, factor: usize) -> Vec<(usize, usize, f32)> {
    let len_out = len_in * factor;
    (0..len_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len_in - 1);
            let i1 = (i0 + 1).min(len_in - 1);
            (i0, i1, (src - i0 as f64) as f32)
        })
        .collect()
}

/// Bilinear upsampling by an integer factor.
pub fn upsample_bilinear(x: &Tensor, factor: usize) -> Tensor {
    if factor == 1 {
        return x.clone();
    }
    let (h, w) = (x.h(), x.w());
    let (oh, ow) = (h * factor, w * factor);
    let ty = taps(h, factor);
    let tx = taps(w, factor);
    let mut y = Tensor::zeros([x.n(), x.c(), oh, ow]);
    let mut rows = vec![0.0f32; h * ow];
    for (src, dst) in x.data.chunks(h * w).zip(y.data.chunks_mut(oh * ow)) {
        for r in 0..h {
            let s = &src[r * w..(r + 1) * w];
            let d = &mut rows[r * ow..(r + 1) * ow];
            for (o, &(a, b, t)) in tx.iter().enumerate() {
                d[o] = s[a] * (1.0 - t) + s[b] * t;
            }
        }
        for (o, &(a, b, t)) in ty.iter().enumerate() {
            let (ra, rb) = (&rows[a * ow..(a + 1) * ow], &rows[b * ow..(b + 1) * ow]);
            let d = &mut dst[o * ow..(o + 1) * ow];
            for q in 0..ow {
                d[q] = ra[q] * (1.0 - t) + rb[q] * t;
            }
        }
    }
    y
}

/// Adjoint of [`upsample_bilinear`].
pub fn upsample_bilinear_backward(dy: &Tensor, factor: usize) -> Tensor {
    if factor == 1 {
        return dy.clone();
    }
    let (oh, ow) = (dy.h(), dy.w());
    let (h, w) = (oh / factor, ow / factor);
    let ty = taps(h, factor);
    let tx = taps(w, factor);
    let mut dx = Tensor::zeros([dy.n(), dy.c(), h, w]);
    let mut rows = vec![0.0f32; h * ow];
    for (src, dst) in dy.data.chunks(oh * ow).zip(dx.data.chunks_mut(h * w)) {
        rows.fill(0.0);
        for (o, &(a, b, t)) in ty.iter().enumerate() {
            let g = &src[o * ow..(o + 1) * ow];
            for q in 0..ow {
                rows[a * ow + q] += g[q] * (1.0 - t);
                rows[b * ow + q] += g[q] * t;
            }
        }
        for r in 0..h {
            let g = &rows[r * ow..(r + 1) * ow];
            let d = &mut dst[r * w..(r + 1) * w];
            for (o, &(a, b, t)) in tx.iter().enumerate() {
                d[a] += g[o] * (1.0 - t);
                d[b] += g[o] * t;
            }
        }
    }
    dx
}

pub fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}
