//! Encoder-decoder segmentation network.
//!
//! A residual (or plain) convolutional encoder downsamples by 2 per stage.
//! The head projects the deepest features with a stride-1 pointwise
//! convolution, upsamples them bilinearly to input resolution, adds a
//! pointwise projection of the full-resolution stem features, and then runs
//! three conv → batch-norm → dropout → ReLU blocks followed by a final
//! batch norm. Every layer is convolutional, so one weight set serves any
//! input size divisible by the downsampling factor.

mod checkpoint;
mod layers;

pub use checkpoint::{extend_input_channels, transfer_weights, weights_digest, ExtendInit, ModelCheckpoint, NamedTensor, WeightMap};

use std::collections::BTreeMap;

use ndarray::{Array4, ArrayView4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::ops::{relu_backward, relu_inplace, upsample_bilinear, upsample_bilinear_backward};
use crate::nn::{join, BatchNorm2d, Conv2d, Param, Tensor, VisitParams};
use crate::raster::{BandId, RasterError};
use layers::{ConvBn, ConvBnCache};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unsupported backbone {0:?}")]
    UnsupportedBackbone(BackboneKind),
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("input has {got} channels, model expects {expected}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("spatial size {h}x{w} not divisible by {factor}")]
    NonDivisibleSize { h: usize, w: usize, factor: usize },
    #[error("checkpoint spec does not match model: {0}")]
    SpecMismatch(String),
    #[error("missing weight '{0}'")]
    MissingWeight(String),
    #[error("weight '{name}' has shape {got:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("band {0} of the checkpoint is absent from the new band set")]
    BandSubsetViolation(BandId),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BackboneKind {
    SmallResnet,
    UnetEncoder,
    Custom,
}

impl std::str::FromStr for BackboneKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().replace('-', "_").as_str() {
            "SMALL_RESNET" => Ok(Self::SmallResnet),
            "UNET_ENCODER" => Ok(Self::UnetEncoder),
            "CUSTOM" => Ok(Self::Custom),
            other => Err(ModelError::InvalidSpec(format!("unknown backbone '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadSpec {
    /// Channels of the upsampling layer and the first two blocks.
    pub width: usize,
    pub dropout_rate: f32,
    /// Add a projection of the full-resolution stem features before the blocks.
    pub skip: bool,
}

impl Default for HeadSpec {
    fn default() -> Self {
        Self {
            width: 32,
            dropout_rate: 0.1,
            skip: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub backbone: BackboneKind,
    pub in_channels: usize,
    pub n_classes: usize,
    /// Output width of each stride-2 stage; the stem uses `widths[0]`.
    pub widths: Vec<usize>,
    pub head: HeadSpec,
    pub fully_convolutional: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::SmallResnet,
            in_channels: 3,
            n_classes: 3,
            widths: vec![32, 64, 128, 256],
            head: HeadSpec::default(),
            fully_convolutional: true,
        }
    }
}

impl ModelSpec {
    pub fn with_channels(in_channels: usize) -> Self {
        Self {
            in_channels,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidSpec(m.to_string()));
        if !self.fully_convolutional {
            return bad("fully_convolutional must be true");
        }
        if self.n_classes < 2 {
            return bad("n_classes must be at least 2");
        }
        if self.in_channels == 0 {
            return bad("in_channels must be at least 1");
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return bad("widths must be non-empty and positive");
        }
        if self.head.width == 0 {
            return bad("head width must be positive");
        }
        if !(0.0..1.0).contains(&self.head.dropout_rate) {
            return bad("dropout_rate must lie in [0, 1)");
        }
        Ok(())
    }

    /// Total spatial downsampling of the encoder.
    pub fn downsampling(&self) -> usize {
        1 << self.widths.len()
    }

    /// Same architecture (everything except the input channel count).
    pub fn same_architecture(&self, other: &ModelSpec) -> bool {
        self.backbone == other.backbone
            && self.n_classes == other.n_classes
            && self.widths == other.widths
            && self.head == other.head
    }
}

/// Learning-rate group of a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamGroup {
    /// Encoder depth group, 0 (earliest) to 3.
    Backbone(usize),
    Head,
}

pub const BACKBONE_GROUPS: usize = 4;

struct Stage {
    c1: ConvBn,
    c2: ConvBn,
    shortcut: Option<ConvBn>,
}

struct StageCache {
    c1: Option<ConvBnCache>,
    h: Tensor,
    c2: Option<ConvBnCache>,
    sc: Option<ConvBnCache>,
    out: Tensor,
}

impl Stage {
    fn forward_eval(&self, x: &Tensor) -> Tensor {
        let mut h = self.c1.forward_eval(x);
        relu_inplace(&mut h);
        let mut z = self.c2.forward_eval(&h);
        if let Some(sc) = &self.shortcut {
            z.add_assign(&sc.forward_eval(x));
        }
        relu_inplace(&mut z);
        z
    }

    fn forward_train(&mut self, x: &Tensor) -> (Tensor, StageCache) {
        let (mut h, c1) = self.c1.forward_train(x);
        relu_inplace(&mut h);
        let (mut z, c2) = self.c2.forward_train(&h);
        let sc = self.shortcut.as_mut().map(|s| {
            let (y, cache) = s.forward_train(x);
            z.add_assign(&y);
            cache
        });
        relu_inplace(&mut z);
        let cache = StageCache {
            c1: Some(c1),
            h,
            c2: Some(c2),
            sc,
            out: z.clone(),
        };
        (z, cache)
    }

    fn backward(&mut self, mut cache: StageCache, mut dy: Tensor) -> Tensor {
        relu_backward(&cache.out, &mut dy);
        let mut dx_sc = match (&mut self.shortcut, cache.sc.take()) {
            (Some(s), Some(c)) => Some(s.backward(c, &dy, true).expect("dx requested")),
            _ => None,
        };
        let mut dh = self.c2.backward(cache.c2.take().expect("cache"), &dy, true).expect("dx requested");
        relu_backward(&cache.h, &mut dh);
        let mut dx = self.c1.backward(cache.c1.take().expect("cache"), &dh, true).expect("dx requested");
        if let Some(d) = dx_sc.take() {
            dx.add_assign(&d);
        }
        dx
    }
}

impl VisitParams for Stage {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.c1.visit(&join(prefix, "c1"), f);
        self.c2.visit(&join(prefix, "c2"), f);
        if let Some(s) = &self.shortcut {
            s.visit(&join(prefix, "shortcut"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.c1.visit_mut(&join(prefix, "c1"), f);
        self.c2.visit_mut(&join(prefix, "c2"), f);
        if let Some(s) = &mut self.shortcut {
            s.visit_mut(&join(prefix, "shortcut"), f);
        }
    }
}

struct Head {
    up_deep: Conv2d,
    up_skip: Option<Conv2d>,
    factor: usize,
    blocks: Vec<ConvBn>,
    dropout: f32,
    final_bn: BatchNorm2d,
}

struct HeadCache {
    deep: Tensor,
    skip: Tensor,
    u: Tensor,
    blocks: Vec<(ConvBnCache, Vec<f32>, Tensor)>,
    final_bn: crate::nn::norm::BnCache,
}

impl Head {
    fn upsample_eval(&self, deep: &Tensor, skip: &Tensor) -> Tensor {
        let mut u = upsample_bilinear(&self.up_deep.forward(deep), self.factor);
        if let Some(s) = &self.up_skip {
            u.add_assign(&s.forward(skip));
        }
        u
    }

    fn forward_eval(&self, deep: &Tensor, skip: &Tensor) -> Tensor {
        let mut x = self.upsample_eval(deep, skip);
        for b in &self.blocks {
            x = b.forward_eval(&x);
            relu_inplace(&mut x);
        }
        self.final_bn.forward_eval(&x)
    }

    fn forward_train(&mut self, deep: &Tensor, skip: &Tensor, rng: &mut ChaCha8Rng) -> (Tensor, HeadCache) {
        let u = self.upsample_eval(deep, skip);
        let mut x = u.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &mut self.blocks {
            let (mut y, c) = b.forward_train(&x);
            let mask = crate::nn::ops::dropout_inplace(&mut y, self.dropout, rng);
            relu_inplace(&mut y);
            caches.push((c, mask, y.clone()));
            x = y;
        }
        let (out, fc) = self.final_bn.forward_train(&x);
        let cache = HeadCache {
            deep: deep.clone(),
            skip: skip.clone(),
            u,
            blocks: caches,
            final_bn: fc,
        };
        (out, cache)
    }

    /// Returns gradients w.r.t. the deep and skip inputs when `need_dx`.
    fn backward(&mut self, cache: HeadCache, dy: &Tensor, need_dx: bool) -> Option<(Tensor, Option<Tensor>)> {
        let mut d = self.final_bn.backward(&cache.final_bn, dy);
        for (b, (c, mask, out)) in self.blocks.iter_mut().zip(cache.blocks).rev() {
            relu_backward(&out, &mut d);
            crate::nn::ops::dropout_backward(&mask, &mut d);
            d = b.backward(c, &d, true).expect("dx requested");
        }
        drop(cache.u);
        let d_skip = self
            .up_skip
            .as_mut()
            .and_then(|s| s.backward(&cache.skip, &d, need_dx));
        let d_proj = upsample_bilinear_backward(&d, self.factor);
        let d_deep = self.up_deep.backward(&cache.deep, &d_proj, need_dx);
        d_deep.map(|dd| (dd, d_skip))
    }
}

impl VisitParams for Head {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.up_deep.visit(&join(prefix, "up_deep"), f);
        if let Some(s) = &self.up_skip {
            s.visit(&join(prefix, "up_skip"), f);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{}", i + 1)), f);
        }
        self.final_bn.visit(&join(prefix, "final_bn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.up_deep.visit_mut(&join(prefix, "up_deep"), f);
        if let Some(s) = &mut self.up_skip {
            s.visit_mut(&join(prefix, "up_skip"), f);
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{}", i + 1)), f);
        }
        self.final_bn.visit_mut(&join(prefix, "final_bn"), f);
    }
}

/// Which parameters a training forward/backward pass updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainScope {
    /// Encoder in evaluation mode, gradients for the head only.
    HeadOnly,
    All,
}

/// Activations retained by [`Model::forward_train`].
pub struct ForwardCache {
    scope: TrainScope,
    stem: Option<(ConvBnCache, Tensor)>,
    stages: Vec<StageCache>,
    head: HeadCache,
}

pub struct Model {
    spec: ModelSpec,
    stem: ConvBn,
    stages: Vec<Stage>,
    head: Head,
}

/// Builds a model with seeded He-normal initialization.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model, ModelError> {
    spec.validate()?;
    let residual = match spec.backbone {
        BackboneKind::SmallResnet => true,
        BackboneKind::UnetEncoder => false,
        BackboneKind::Custom => return Err(ModelError::UnsupportedBackbone(spec.backbone)),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = &spec.widths;
    let stem = ConvBn::new(spec.in_channels, w[0], 3, 1, &mut rng);
    let mut stages = Vec::with_capacity(w.len());
    let mut prev = w[0];
    for &out in w {
        stages.push(Stage {
            c1: ConvBn::new(prev, out, 3, 2, &mut rng),
            c2: ConvBn::new(out, out, 3, 1, &mut rng),
            shortcut: residual.then(|| ConvBn::new(prev, out, 1, 2, &mut rng)),
        });
        prev = out;
    }
    let hw = spec.head.width;
    let up_deep = Conv2d::new(prev, hw, 1, 1, 0, true, &mut rng);
    let up_skip = spec.head.skip.then(|| Conv2d::new(w[0], hw, 1, 1, 0, false, &mut rng));
    let blocks = (0..3)
        .map(|i| {
            let out = if i == 2 { spec.n_classes } else { hw };
            ConvBn::new(hw, out, 3, 1, &mut rng)
        })
        .collect();
    let head = Head {
        up_deep,
        up_skip,
        factor: spec.downsampling(),
        blocks,
        dropout: spec.head.dropout_rate,
        final_bn: BatchNorm2d::new(spec.n_classes),
    };
    Ok(Model {
        spec: spec.clone(),
        stem,
        stages,
        head,
    })
}

impl Model {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    fn check_input(&self, c: usize, h: usize, w: usize) -> Result<(), ModelError> {
        if c != self.spec.in_channels {
            return Err(ModelError::ChannelMismatch {
                expected: self.spec.in_channels,
                got: c,
            });
        }
        let factor = self.spec.downsampling();
        if h == 0 || w == 0 || h % factor != 0 || w % factor != 0 {
            return Err(ModelError::NonDivisibleSize { h, w, factor });
        }
        Ok(())
    }

    /// Evaluation-mode forward on an NHWC batch; returns NHWC logits.
    pub fn forward(&self, batch: ArrayView4<f32>) -> Result<Array4<f32>, ModelError> {
        let (_, h, w, c) = batch.dim();
        self.check_input(c, h, w)?;
        Ok(tensor_to_nhwc(&self.forward_tensor(&nhwc_to_tensor(batch))))
    }

    /// Evaluation-mode forward on an NCHW tensor.
    pub fn forward_tensor(&self, x: &Tensor) -> Tensor {
        let mut s0 = self.stem.forward_eval(x);
        relu_inplace(&mut s0);
        let mut deep = s0.clone();
        for st in &self.stages {
            deep = st.forward_eval(&deep);
        }
        self.head.forward_eval(&deep, &s0)
    }

    pub fn check_tensor(&self, x: &Tensor) -> Result<(), ModelError> {
        self.check_input(x.c(), x.h(), x.w())
    }

    /// Training-mode forward. With [`TrainScope::HeadOnly`] the encoder runs
    /// in evaluation mode and its batch-norm statistics are left untouched.
    pub fn forward_train(&mut self, x: &Tensor, scope: TrainScope, rng: &mut ChaCha8Rng) -> (Tensor, ForwardCache) {
        let (s0, stem, stages, deep) = match scope {
            TrainScope::HeadOnly => {
                let mut s0 = self.stem.forward_eval(x);
                relu_inplace(&mut s0);
                let mut deep = s0.clone();
                for st in &self.stages {
                    deep = st.forward_eval(&deep);
                }
                (s0, None, Vec::new(), deep)
            }
            TrainScope::All => {
                let (mut s0, c) = self.stem.forward_train(x);
                relu_inplace(&mut s0);
                let mut deep = s0.clone();
                let mut caches = Vec::with_capacity(self.stages.len());
                for st in &mut self.stages {
                    let (y, c) = st.forward_train(&deep);
                    caches.push(c);
                    deep = y;
                }
                (s0.clone(), Some((c, s0)), caches, deep)
            }
        };
        let (out, head) = self.head.forward_train(&deep, &s0, rng);
        (
            out,
            ForwardCache {
                scope,
                stem,
                stages,
                head,
            },
        )
    }

    /// Accumulates parameter gradients for the logits gradient `dy`.
    pub fn backward(&mut self, cache: ForwardCache, dy: &Tensor) {
        let need = cache.scope == TrainScope::All;
        let grads = self.head.backward(cache.head, dy, need);
        if !need {
            return;
        }
        let (mut d, d_skip) = grads.expect("input gradients requested");
        for (st, c) in self.stages.iter_mut().zip(cache.stages).rev() {
            d = st.backward(c, d);
        }
        if let Some(ds) = d_skip {
            d.add_assign(&ds);
        }
        let (c, s0) = cache.stem.expect("stem cache");
        relu_backward(&s0, &mut d);
        self.stem.backward(c, &d, false);
    }

    pub fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }

    /// Learning-rate group for a parameter name.
    pub fn param_group(&self, name: &str) -> ParamGroup {
        if name.starts_with("head.") {
            return ParamGroup::Head;
        }
        let n = self.stages.len();
        let stage = name
            .strip_prefix("stage")
            .and_then(|r| r.split('.').next())
            .and_then(|i| i.parse::<usize>().ok())
            .map_or(0, |i| i - 1);
        ParamGroup::Backbone((stage * BACKBONE_GROUPS / n).min(BACKBONE_GROUPS - 1))
    }

    pub fn state_dict(&self) -> WeightMap {
        let mut map = BTreeMap::new();
        self.visit("", &mut |name, p| {
            map.insert(
                name.to_string(),
                NamedTensor {
                    shape: p.shape.clone(),
                    data: p.value.clone(),
                },
            );
        });
        map
    }

    /// Loads every named tensor; names and shapes must match exactly.
    pub fn load_state_dict(&mut self, weights: &WeightMap) -> Result<(), ModelError> {
        let mut err = None;
        let mut seen = 0usize;
        self.visit_mut("", &mut |name, p| {
            if err.is_some() {
                return;
            }
            match weights.get(name) {
                None => err = Some(ModelError::MissingWeight(name.to_string())),
                Some(t) if t.shape != p.shape => {
                    err = Some(ModelError::ShapeMismatch {
                        name: name.to_string(),
                        expected: p.shape.clone(),
                        got: t.shape.clone(),
                    })
                }
                Some(t) => {
                    p.value.copy_from_slice(&t.data);
                    seen += 1;
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if seen != weights.len() {
            let known: Vec<String> = self.state_dict().into_keys().collect();
            let extra = weights.keys().find(|k| !known.contains(k)).cloned().unwrap_or_default();
            return Err(ModelError::SpecMismatch(format!("unexpected weight '{extra}'")));
        }
        Ok(())
    }
}

impl VisitParams for Model {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.stem.visit(&join(prefix, "stem"), f);
        for (i, s) in self.stages.iter().enumerate() {
            s.visit(&join(prefix, &format!("stage{}", i + 1)), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_mut(&join(prefix, &format!("stage{}", i + 1)), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

pub fn nhwc_to_tensor(x: ArrayView4<f32>) -> Tensor {
    let (n, h, w, c) = x.dim();
    let mut t = Tensor::zeros([n, c, h, w]);
    for ((b, r, q, ch), &v) in x.indexed_iter() {
        t.data[((b * c + ch) * h + r) * w + q] = v;
    }
    t
}

pub fn tensor_to_nhwc(t: &Tensor) -> Array4<f32> {
    let [n, c, h, w] = t.shape;
    Array4::from_shape_fn((n, h, w, c), |(b, r, q, ch)| t.data[((b * c + ch) * h + r) * w + q])
}

/// Per-pixel argmax over channels (ties to the lowest class index).
pub fn argmax_classes(logits: &Tensor, sample: usize) -> Vec<u8> {
    let [_, c, h, w] = logits.shape;
    let s = logits.sample(sample);
    let hw = h * w;
    (0..hw)
        .map(|i| {
            let mut best = 0;
            for k in 1..c {
                if s[k * hw + i] > s[best * hw + i] {
                    best = k;
                }
            }
            best as u8
        })
        .collect()
}
