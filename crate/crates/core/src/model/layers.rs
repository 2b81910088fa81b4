use rand::Rng;

use crate::nn::norm::BnCache;
use crate::nn::{join, BatchNorm2d, Conv2d, Param, Tensor, VisitParams};

/// Bias-free convolution followed by batch normalization.
pub(super) struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

pub(super) struct ConvBnCache {
    x: Tensor,
    bn: BnCache,
}

impl ConvBn {
    pub fn new<R: Rng>(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, rng: &mut R) -> Self {
        Self {
            conv: Conv2d::new(in_ch, out_ch, kernel, stride, kernel / 2, false, rng),
            bn: BatchNorm2d::new(out_ch),
        }
    }

    pub fn forward_eval(&self, x: &Tensor) -> Tensor {
        self.bn.forward_eval(&self.conv.forward(x))
    }

    pub fn forward_train(&mut self, x: &Tensor) -> (Tensor, ConvBnCache) {
        let z = self.conv.forward(x);
        let (y, bn) = self.bn.forward_train(&z);
        (y, ConvBnCache { x: x.clone(), bn })
    }

    pub fn backward(&mut self, cache: ConvBnCache, dy: &Tensor, need_dx: bool) -> Option<Tensor> {
        let dz = self.bn.backward(&cache.bn, dy);
        self.conv.backward(&cache.x, &dz, need_dx)
    }
}

impl VisitParams for ConvBn {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
    }
}
