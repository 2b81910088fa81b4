use super::{join, Param, Tensor, VisitParams};

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub eps: f32,
    pub momentum: f32,
}

pub struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f32>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::filled(vec![channels], 1.0, true),
            beta: Param::filled(vec![channels], 0.0, true),
            running_mean: Param::filled(vec![channels], 0.0, false),
            running_var: Param::filled(vec![channels], 1.0, false),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    /// Normalizes with running statistics.
    pub fn forward_eval(&self, x: &Tensor) -> Tensor {
        let c = self.channels();
        assert_eq!(x.c(), c);
        let hw = x.h() * x.w();
        let mut y = x.clone();
        for (i, plane) in y.data.chunks_mut(hw).enumerate() {
            let ch = i % c;
            let scale = self.gamma.value[ch] / (self.running_var.value[ch] + self.eps).sqrt();
            let shift = self.beta.value[ch] - self.running_mean.value[ch] * scale;
            plane.iter_mut().for_each(|v| *v = *v * scale + shift);
        }
        y
    }

    /// Normalizes with batch statistics and updates the running estimates.
    pub fn forward_train(&mut self, x: &Tensor) -> (Tensor, BnCache) {
        let c = self.channels();
        assert_eq!(x.c(), c);
        let hw = x.h() * x.w();
        let m = (x.n() * hw) as f64;
        let mut mean = vec![0.0f64; c];
        for (i, plane) in x.data.chunks(hw).enumerate() {
            mean[i % c] += plane.iter().map(|&v| v as f64).sum::<f64>();
        }
        mean.iter_mut().for_each(|v| *v /= m);
        let mut var = vec![0.0f64; c];
        for (i, plane) in x.data.chunks(hw).enumerate() {
            let mu = mean[i % c];
            var[i % c] += plane.iter().map(|&v| (v as f64 - mu).powi(2)).sum::<f64>();
        }
        var.iter_mut().for_each(|v| *v /= m);

        let inv_std: Vec<f32> = var.iter().map(|&v| (1.0 / (v + self.eps as f64).sqrt()) as f32).collect();
        let mut xhat = x.clone();
        let mut y = x.clone();
        for (i, (hp, yp)) in xhat.data.chunks_mut(hw).zip(y.data.chunks_mut(hw)).enumerate() {
            let ch = i % c;
            let (mu, is) = (mean[ch] as f32, inv_std[ch]);
            let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
            for (h, o) in hp.iter_mut().zip(yp.iter_mut()) {
                *h = (*h - mu) * is;
                *o = *h * g + b;
            }
        }
        let unbiased = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
        for ch in 0..c {
            let rm = &mut self.running_mean.value[ch];
            *rm = (1.0 - self.momentum) * *rm + self.momentum * mean[ch] as f32;
            let rv = &mut self.running_var.value[ch];
            *rv = (1.0 - self.momentum) * *rv + self.momentum * (var[ch] * unbiased) as f32;
        }
        (y, BnCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &BnCache, dy: &Tensor) -> Tensor {
        let c = self.channels();
        let hw = dy.h() * dy.w();
        let m = (dy.n() * hw) as f64;
        let mut sum_dy = vec![0.0f64; c];
        let mut sum_dy_xhat = vec![0.0f64; c];
        for (i, (dp, hp)) in dy.data.chunks(hw).zip(cache.xhat.data.chunks(hw)).enumerate() {
            let ch = i % c;
            for (&d, &h) in dp.iter().zip(hp) {
                sum_dy[ch] += d as f64;
                sum_dy_xhat[ch] += d as f64 * h as f64;
            }
        }
        for ch in 0..c {
            self.gamma.grad[ch] += sum_dy_xhat[ch] as f32;
            self.beta.grad[ch] += sum_dy[ch] as f32;
        }
        let mut dx = dy.clone();
        for (i, (dp, hp)) in dx.data.chunks_mut(hw).zip(cache.xhat.data.chunks(hw)).enumerate() {
            let ch = i % c;
            let k = self.gamma.value[ch] as f64 * cache.inv_std[ch] as f64 / m;
            let (sd, sdh) = (sum_dy[ch], sum_dy_xhat[ch]);
            for (d, &h) in dp.iter_mut().zip(hp) {
                *d = (k * (m * *d as f64 - sd - h as f64 * sdh)) as f32;
            }
        }
        dx
    }
}

impl VisitParams for BatchNorm2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}
