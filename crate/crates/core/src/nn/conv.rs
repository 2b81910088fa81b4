//! 2-D convolution via im2col and `sgemm`.

use rand::Rng;
use rayon::prelude::*;

use super::{join, Param, Tensor, VisitParams};

/// Row-major `C = A·B + beta·C` where `A` is `m×k` and `B` is `k×n`; either
/// operand may be read transposed from its stored layout.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; strides describe the stated layouts.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    /// `[out, in, k, k]`
    pub weight: Param,
    pub bias: Option<Param>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<R: Rng>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        Self {
            weight: Param::kaiming(vec![out_ch, in_ch, kernel, kernel], fan_in, rng),
            bias: bias.then(|| Param::filled(vec![out_ch], 0.0, true)),
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn im2col(&self, x: &[f32], h: usize, w: usize, oh: usize, ow: usize, col: &mut [f32]) {
        let (k, s, p) = (self.kernel, self.stride, self.pad as isize);
        let n = oh * ow;
        for c in 0..self.in_ch {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + ky) * k + kx) * n;
                    let dst = &mut col[row..row + n];
                    for oy in 0..oh {
                        let iy = (oy * s) as isize + ky as isize - p;
                        let out = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            out.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        if s == 1 {
                            let off = kx as isize - p;
                            for (ox, o) in out.iter_mut().enumerate() {
                                let ix = ox as isize + off;
                                *o = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                            }
                        } else {
                            for (ox, o) in out.iter_mut().enumerate() {
                                let ix = (ox * s) as isize + kx as isize - p;
                                *o = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f32], h: usize, w: usize, oh: usize, ow: usize, dx: &mut [f32]) {
        let (k, s, p) = (self.kernel, self.stride, self.pad as isize);
        let n = oh * ow;
        for c in 0..self.in_ch {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + ky) * k + kx) * n;
                    let src = &col[row..row + n];
                    for oy in 0..oh {
                        let iy = (oy * s) as isize + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        let g = &src[oy * ow..(oy + 1) * ow];
                        for (ox, &v) in g.iter().enumerate() {
                            let ix = (ox * s) as isize + kx as isize - p;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c(), self.in_ch, "conv input channels");
        let (h, w) = (x.h(), x.w());
        let (oh, ow) = self.out_hw(h, w);
        let mut y = Tensor::zeros([x.n(), self.out_ch, oh, ow]);
        let kk = self.col_rows();
        let n = oh * ow;
        let out_len = self.out_ch * n;
        y.data
            .par_chunks_mut(out_len)
            .enumerate()
            .for_each(|(s, ys)| {
                let xs = x.sample(s);
                let mut col_buf;
                let col: &[f32] = if self.pointwise() {
                    xs
                } else {
                    col_buf = vec![0.0f32; kk * n];
                    self.im2col(xs, h, w, oh, ow, &mut col_buf);
                    &col_buf
                };
                gemm(self.out_ch, kk, n, &self.weight.value, false, col, false, 0.0, ys);
                if let Some(b) = &self.bias {
                    for (o, plane) in ys.chunks_mut(n).enumerate() {
                        let bv = b.value[o];
                        plane.iter_mut().for_each(|v| *v += bv);
                    }
                }
            });
        y
    }

    /// Accumulates weight/bias gradients; returns the input gradient when
    /// `need_dx`.
    pub fn backward(&mut self, x: &Tensor, dy: &Tensor, need_dx: bool) -> Option<Tensor> {
        let (h, w) = (x.h(), x.w());
        let (oh, ow) = self.out_hw(h, w);
        assert_eq!(dy.shape, [x.n(), self.out_ch, oh, ow], "conv upstream gradient shape");
        let kk = self.col_rows();
        let n = oh * ow;
        let this = &*self;
        let per_sample: Vec<(Vec<f32>, Option<Vec<f32>>)> = (0..x.n())
            .into_par_iter()
            .map(|s| {
                let xs = x.sample(s);
                let dys = dy.sample(s);
                let mut col_buf;
                let col: &[f32] = if this.pointwise() {
                    xs
                } else {
                    col_buf = vec![0.0f32; kk * n];
                    this.im2col(xs, h, w, oh, ow, &mut col_buf);
                    &col_buf
                };
                let mut dw = vec![0.0f32; this.out_ch * kk];
                gemm(this.out_ch, n, kk, dys, false, col, true, 0.0, &mut dw);
                let dx = need_dx.then(|| {
                    if this.pointwise() {
                        let mut dxs = vec![0.0f32; kk * n];
                        gemm(kk, this.out_ch, n, &this.weight.value, true, dys, false, 0.0, &mut dxs);
                        dxs
                    } else {
                        let mut dcol = vec![0.0f32; kk * n];
                        gemm(kk, this.out_ch, n, &this.weight.value, true, dys, false, 0.0, &mut dcol);
                        let mut dxs = vec![0.0f32; this.in_ch * h * w];
                        this.col2im(&dcol, h, w, oh, ow, &mut dxs);
                        dxs
                    }
                });
                (dw, dx)
            })
            .collect();

        if let Some(b) = &mut self.bias {
            for s in 0..x.n() {
                for (o, plane) in dy.sample(s).chunks(n).enumerate() {
                    b.grad[o] += plane.iter().map(|&v| v as f64).sum::<f64>() as f32;
                }
            }
        }
        let mut dx = need_dx.then(|| Tensor::zeros(x.shape));
        let len = self.in_ch * h * w;
        for (s, (dw, dxs)) in per_sample.into_iter().enumerate() {
            for (g, d) in self.weight.grad.iter_mut().zip(&dw) {
                *g += d;
            }
            if let (Some(dx), Some(dxs)) = (dx.as_mut(), dxs) {
                dx.data[s * len..(s + 1) * len].copy_from_slice(&dxs);
            }
        }
        dx
    }
}

impl VisitParams for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}
