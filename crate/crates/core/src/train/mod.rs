//! Progressive patch-size training.
//!
//! Each stage trains on patches of one size in two phases: the encoder is
//! frozen (evaluation mode, no updates) while the head trains, then all
//! layers train with learning rates rising geometrically from the earliest
//! encoder group to the head. The best validation-mIoU weights of a stage
//! seed the next, larger stage. Optimizer moments are reset at every phase.

pub mod augment;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use augment::{augment, AugmentParams};

use crate::losses::{hybrid_loss, hybrid_loss_grad, LossError, LossWeights};
use crate::metrics::{ConfusionCounts, MetricsError, MetricsReport};
use crate::model::{
    argmax_classes, build_model, transfer_weights, weights_digest, Model, ModelCheckpoint, ModelError, ModelSpec, ParamGroup,
    TrainScope, WeightMap, BACKBONE_GROUPS,
};
use crate::nn::ops::sigmoid;
use crate::nn::{Adam, Tensor};
use crate::patchify::{self, Patch, PatchError, PatchSet, Split};
use crate::raster::{BandId, LabelMask, MultispectralImage, RasterError, N_CLASSES};
use crate::seed;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("patch size {got} does not match stage size {expected}")]
    SizeMismatch { expected: usize, got: usize },
    #[error("{0:?} patch set is empty")]
    EmptyDataset(Split),
    #[error("stage plan is empty")]
    EmptyPlan,
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("no {split:?} patch set for size {size}")]
    MissingPatchSet { size: usize, split: Split },
    #[error("data has {got} channels, model expects {expected}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("image {h}x{w} is not divisible into {size}x{size} tiles")]
    IndivisibleDimensions { h: usize, w: usize, size: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    pub patch_size: usize,
    pub frozen_epochs: usize,
    pub finetune_epochs: usize,
    pub lr_head: f64,
    pub lr_base: f64,
    pub batch_size: usize,
    /// Fine-tune epochs without validation-mIoU improvement before stopping.
    pub early_stop_patience: usize,
    /// `None` disables augmentation.
    pub augment: Option<AugmentParams>,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            patch_size: 64,
            frozen_epochs: 2,
            finetune_epochs: 20,
            lr_head: 3e-3,
            lr_base: 3e-4,
            batch_size: 16,
            early_stop_patience: 5,
            augment: Some(AugmentParams::default()),
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.patch_size == 0 {
            return bad("patch_size must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lr_base > 0.0 && self.lr_base <= self.lr_head) {
            return bad(format!("need 0 < lr_base ({}) <= lr_head ({})", self.lr_base, self.lr_head));
        }
        if let Some(a) = &self.augment {
            a.validate().map_err(TrainError::InvalidConfig)?;
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.frozen_epochs + self.finetune_epochs
    }

    /// Fine-tune learning rates for the encoder depth groups followed by the head.
    pub fn group_learning_rates(&self) -> [f64; BACKBONE_GROUPS + 1] {
        let ratio = self.lr_head / self.lr_base;
        let mut out = [0.0; BACKBONE_GROUPS + 1];
        for (g, v) in out.iter_mut().enumerate() {
            *v = self.lr_base * ratio.powf(g as f64 / BACKBONE_GROUPS as f64);
        }
        out[BACKBONE_GROUPS] = self.lr_head;
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stages: Vec<StageConfig>,
}

impl StagePlan {
    /// One stage per size, each a copy of `template`.
    pub fn from_sizes(sizes: &[usize], template: &StageConfig) -> Self {
        Self {
            stages: sizes
                .iter()
                .map(|&patch_size| StageConfig {
                    patch_size,
                    ..template.clone()
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.stages.is_empty() {
            return Err(TrainError::EmptyPlan);
        }
        for w in self.stages.windows(2) {
            if w[1].patch_size <= w[0].patch_size {
                return Err(TrainError::InvalidConfig("patch sizes must strictly increase".into()));
            }
        }
        self.stages.iter().try_for_each(StageConfig::validate)
    }

    pub fn total_epochs(&self) -> usize {
        self.stages.iter().map(StageConfig::total_epochs).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Frozen,
    Finetune,
}

/// Per-epoch statistics. Equality ignores the wall time.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: usize,
    pub patch_size: usize,
    pub phase: Phase,
    /// Index within the stage, counting both phases.
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_miou: f64,
    pub val_f1: f64,
    pub wall_time_s: f64,
}

impl PartialEq for EpochRecord {
    fn eq(&self, o: &Self) -> bool {
        (self.stage, self.patch_size, self.phase, self.epoch, self.steps) == (o.stage, o.patch_size, o.phase, o.epoch, o.steps)
            && self.train_loss.to_bits() == o.train_loss.to_bits()
            && self.val_loss.to_bits() == o.val_loss.to_bits()
            && self.val_miou.to_bits() == o.val_miou.to_bits()
            && self.val_f1.to_bits() == o.val_f1.to_bits()
    }
}

/// One stage's training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub stage: usize,
    pub patch_size: usize,
    pub records: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_miou: Option<f64>,
    pub stopped_early: bool,
    /// Digests of all weights at stage start and of the returned weights.
    pub start_digest: u64,
    pub best_digest: u64,
    /// Encoder digests before and after the frozen phase.
    pub backbone_digest_start: u64,
    pub backbone_digest_after_frozen: u64,
}

impl TrainHistory {
    pub fn epochs_run(&self) -> usize {
        self.records.len()
    }
}

pub const HISTORY_CSV_HEADER: &str = "stage,patch_size,phase,epoch,steps,train_loss,val_loss,val_miou,val_f1,wall_time_s";

pub fn histories_to_csv(histories: &[TrainHistory]) -> String {
    let mut out = String::from(HISTORY_CSV_HEADER);
    out.push('\n');
    for r in histories.iter().flat_map(|h| &h.records) {
        let phase = match r.phase {
            Phase::Frozen => "frozen",
            Phase::Finetune => "finetune",
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{:.3}",
            r.stage, r.patch_size, phase, r.epoch, r.steps, r.train_loss, r.val_loss, r.val_miou, r.val_f1, r.wall_time_s
        );
    }
    out
}

/// Hooks invoked at training milestones.
pub trait TrainObserver {
    /// Before the first optimizer step of a stage.
    fn stage_start(&mut self, _stage: usize, _model: &Model) {}
    fn frozen_phase_end(&mut self, _stage: usize, _model: &Model) {}
    fn epoch_end(&mut self, _record: &EpochRecord) {}
    /// The weights the stage returns.
    fn stage_end(&mut self, _stage: usize, _best: &WeightMap) {}
}

pub struct NoObserver;

impl TrainObserver for NoObserver {}

fn backbone_digest(w: &WeightMap) -> u64 {
    weights_digest(w.iter().filter(|(n, _)| !n.starts_with("head.")))
}

/// Stacks patch images into an NCHW tensor.
pub fn batch_tensor(patches: &[&Patch]) -> Tensor {
    let s = patches[0].size;
    let c = patches[0].image.n_bands();
    let plane = s * s;
    let mut t = Tensor::zeros([patches.len(), c, s, s]);
    for (b, p) in patches.iter().enumerate() {
        let dst = &mut t.data[b * c * plane..(b + 1) * c * plane];
        for ((r, q, ch), &v) in p.image.data().indexed_iter() {
            dst[ch * plane + r * s + q] = v;
        }
    }
    t
}

fn batch_targets(patches: &[&Patch]) -> Array4<f64> {
    let s = patches[0].size;
    let mut t = Array4::<f64>::zeros((patches.len(), s, s, N_CLASSES));
    for (b, p) in patches.iter().enumerate() {
        for ((r, q), &k) in p.mask.data().indexed_iter() {
            t[(b, r, q, k as usize)] = 1.0;
        }
    }
    t
}

fn probabilities(logits: &Tensor) -> Array4<f64> {
    let [n, k, h, w] = logits.shape;
    Array4::from_shape_fn((n, h, w, k), |(b, r, q, c)| sigmoid(logits.data[((b * k + c) * h + r) * w + q]) as f64)
}

/// Hybrid loss on sigmoid probabilities and its gradient w.r.t. the logits.
fn loss_and_logit_grad(logits: &Tensor, target: &Array4<f64>, w: &LossWeights) -> Result<(f64, Tensor), TrainError> {
    let probs = probabilities(logits);
    let (loss, g) = hybrid_loss_grad(probs.view(), target.view(), w)?;
    let [n, k, h, wd] = logits.shape;
    let mut d = Tensor::zeros(logits.shape);
    for ((b, r, q, c), &gv) in g.indexed_iter() {
        let p = probs[(b, r, q, c)];
        d.data[((b * k + c) * h + r) * wd + q] = (gv * p * (1.0 - p)) as f32;
    }
    debug_assert_eq!(d.data.len(), n * k * h * wd);
    Ok((loss, d))
}

const EVAL_BATCH: usize = 8;

fn check_channels(model: &Model, bands: usize) -> Result<(), TrainError> {
    let expected = model.spec().in_channels;
    if bands != expected {
        return Err(TrainError::ChannelMismatch { expected, got: bands });
    }
    Ok(())
}

/// Aggregate confusion counts and mean per-batch loss over a patch set.
pub fn evaluate_counts(model: &Model, set: &PatchSet, loss_w: &LossWeights) -> Result<(ConfusionCounts, f64), TrainError> {
    check_channels(model, set.band_set().len())?;
    let mut counts = ConfusionCounts::zeros(N_CLASSES);
    let mut loss_sum = 0.0;
    let mut batches = 0usize;
    let refs: Vec<&Patch> = set.patches().iter().collect();
    for chunk in refs.chunks(EVAL_BATCH) {
        let x = batch_tensor(chunk);
        model.check_tensor(&x)?;
        let logits = model.forward_tensor(&x);
        loss_sum += hybrid_loss(probabilities(&logits).view(), batch_targets(chunk).view(), loss_w)?;
        batches += 1;
        for (b, p) in chunk.iter().enumerate() {
            let pred = Array2::from_shape_vec((p.size, p.size), argmax_classes(&logits, b)).expect("mask shape");
            counts.accumulate(pred.view(), p.mask.data().view())?;
        }
    }
    Ok((counts, loss_sum / batches.max(1) as f64))
}

/// Metrics over a whole patch set from aggregated counts.
pub fn evaluate(model: &Model, val: &PatchSet) -> Result<MetricsReport, TrainError> {
    let (counts, _) = evaluate_counts(model, val, &LossWeights::default())?;
    Ok(MetricsReport::from_counts(&counts)?)
}

/// Metrics of an arbitrary per-patch predictor, from aggregated counts.
pub fn evaluate_predictions(val: &PatchSet, mut predict: impl FnMut(&Patch) -> Array2<u8>) -> Result<MetricsReport, TrainError> {
    let mut counts = ConfusionCounts::zeros(N_CLASSES);
    for p in val.patches() {
        counts.accumulate(predict(p).view(), p.mask.data().view())?;
    }
    Ok(MetricsReport::from_counts(&counts)?)
}

/// Tiles the image, predicts every tile and stitches the class map.
pub fn predict_map(model: &Model, img: &MultispectralImage, tile_size: usize) -> Result<LabelMask, TrainError> {
    check_channels(model, img.n_bands())?;
    let (h, w) = (img.height(), img.width());
    if tile_size == 0 || h % tile_size != 0 || w % tile_size != 0 {
        return Err(TrainError::IndivisibleDimensions { h, w, size: tile_size });
    }
    let dummy = LabelMask::filled(h, w, crate::raster::IrrigationClass::Other);
    let tiles = patchify::tile(img, &dummy, tile_size, 0)?;
    let mut out = Array2::<u8>::zeros((h, w));
    let refs: Vec<&Patch> = tiles.iter().collect();
    for chunk in refs.chunks(EVAL_BATCH) {
        let x = batch_tensor(chunk);
        model.check_tensor(&x)?;
        let logits = model.forward_tensor(&x);
        for (b, p) in chunk.iter().enumerate() {
            let classes = argmax_classes(&logits, b);
            for r in 0..tile_size {
                for c in 0..tile_size {
                    out[(p.origin.row_off + r, p.origin.col_off + c)] = classes[r * tile_size + c];
                }
            }
        }
    }
    Ok(LabelMask::new(out)?)
}

fn check_set(set: &PatchSet, cfg: &StageConfig, split: Split) -> Result<(), TrainError> {
    if set.is_empty() {
        return Err(TrainError::EmptyDataset(split));
    }
    if set.size() != cfg.patch_size {
        return Err(TrainError::SizeMismatch {
            expected: cfg.patch_size,
            got: set.size(),
        });
    }
    Ok(())
}

struct EpochOutcome {
    loss: f64,
    steps: usize,
}

fn run_epoch(
    model: &mut Model,
    opt: &mut Adam,
    train: &PatchSet,
    cfg: &StageConfig,
    scope: TrainScope,
    lr_for: &dyn Fn(&str) -> Option<f64>,
    loss_w: &LossWeights,
    epoch_seed: u64,
) -> Result<EpochOutcome, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    let mut aug_rng = cfg
        .augment
        .as_ref()
        .map(|a| ChaCha8Rng::seed_from_u64(seed::derive(epoch_seed, a.seed)));
    let mut loss_sum = 0.0;
    let mut steps = 0;
    for idx in order.chunks(cfg.batch_size) {
        let owned: Vec<Patch> = idx
            .iter()
            .map(|&i| {
                let p = &train.patches()[i];
                match (&cfg.augment, aug_rng.as_mut()) {
                    (Some(a), Some(r)) => augment(p, a, r),
                    _ => p.clone(),
                }
            })
            .collect();
        let refs: Vec<&Patch> = owned.iter().collect();
        let x = batch_tensor(&refs);
        let (logits, cache) = model.forward_train(&x, scope, &mut rng);
        let (loss, dlogits) = loss_and_logit_grad(&logits, &batch_targets(&refs), loss_w)?;
        model.zero_grad();
        model.backward(cache, &dlogits);
        opt.step(model, lr_for);
        loss_sum += loss;
        steps += 1;
    }
    Ok(EpochOutcome {
        loss: loss_sum / steps.max(1) as f64,
        steps,
    })
}

/// Two-phase training of one stage; leaves the best-validation weights in `model`.
pub fn train_stage(
    model: &mut Model,
    train: &PatchSet,
    val: &PatchSet,
    cfg: &StageConfig,
    loss_w: &LossWeights,
    seed: u64,
) -> Result<TrainHistory, TrainError> {
    train_stage_observed(model, train, val, cfg, loss_w, seed, 0, &mut NoObserver)
}

#[allow(clippy::too_many_arguments)]
pub fn train_stage_observed(
    model: &mut Model,
    train: &PatchSet,
    val: &PatchSet,
    cfg: &StageConfig,
    loss_w: &LossWeights,
    seed: u64,
    stage: usize,
    observer: &mut dyn TrainObserver,
) -> Result<TrainHistory, TrainError> {
    cfg.validate()?;
    loss_w.validate()?;
    check_set(train, cfg, Split::Train)?;
    check_set(val, cfg, Split::Val)?;
    check_channels(model, train.band_set().len())?;
    check_channels(model, val.band_set().len())?;
    let factor = model.spec().downsampling();
    if cfg.patch_size % factor != 0 {
        return Err(ModelError::NonDivisibleSize {
            h: cfg.patch_size,
            w: cfg.patch_size,
            factor,
        }
        .into());
    }

    let stage_seed = seed::derive(seed, stage as u64);
    let start = model.state_dict();
    let mut history = TrainHistory {
        stage,
        patch_size: cfg.patch_size,
        records: Vec::new(),
        best_epoch: None,
        best_val_miou: None,
        stopped_early: false,
        start_digest: weights_digest(&start),
        best_digest: 0,
        backbone_digest_start: backbone_digest(&start),
        backbone_digest_after_frozen: 0,
    };
    observer.stage_start(stage, model);
    let mut best: Option<(f64, WeightMap)> = None;
    let mut epoch = 0usize;

    let finish_epoch = |observer: &mut dyn TrainObserver, model: &Model, phase: Phase, out: EpochOutcome, t0: Instant, epoch: usize, history: &mut TrainHistory, best: &mut Option<(f64, WeightMap)>| -> Result<bool, TrainError> {
        let (counts, val_loss) = evaluate_counts(model, val, loss_w)?;
        let report = MetricsReport::from_counts(&counts)?;
        let rec = EpochRecord {
            stage,
            patch_size: cfg.patch_size,
            phase,
            epoch,
            steps: out.steps,
            train_loss: out.loss,
            val_loss,
            val_miou: report.miou,
            val_f1: report.f1,
            wall_time_s: t0.elapsed().as_secs_f64(),
        };
        log::info!(
            "stage {stage} (S={}) {phase:?} epoch {epoch}: loss {:.4} val_loss {:.4} mIoU {:.4} F1 {:.4}",
            cfg.patch_size,
            rec.train_loss,
            rec.val_loss,
            rec.val_miou,
            rec.val_f1
        );
        observer.epoch_end(&rec);
        history.records.push(rec);
        let improved = best.as_ref().is_none_or(|(m, _)| report.miou > *m);
        if improved {
            *best = Some((report.miou, model.state_dict()));
            history.best_epoch = Some(epoch);
            history.best_val_miou = Some(report.miou);
        }
        Ok(improved)
    };

    let mut opt = Adam::new();
    let head_only = |name: &str| name.starts_with("head.").then_some(cfg.lr_head);
    for _ in 0..cfg.frozen_epochs {
        let t0 = Instant::now();
        let out = run_epoch(model, &mut opt, train, cfg, TrainScope::HeadOnly, &head_only, loss_w, seed::derive(stage_seed, epoch as u64))?;
        finish_epoch(observer, model, Phase::Frozen, out, t0, epoch, &mut history, &mut best)?;
        epoch += 1;
    }
    history.backbone_digest_after_frozen = backbone_digest(&model.state_dict());
    observer.frozen_phase_end(stage, model);

    let rates = cfg.group_learning_rates();
    let groups: BTreeMap<String, ParamGroup> = model
        .state_dict()
        .keys()
        .map(|n| (n.clone(), model.param_group(n)))
        .collect();
    let all = |name: &str| {
        groups.get(name).map(|g| match g {
            ParamGroup::Backbone(i) => rates[*i],
            ParamGroup::Head => rates[BACKBONE_GROUPS],
        })
    };
    let mut opt = Adam::new();
    let mut since_best = 0usize;
    for _ in 0..cfg.finetune_epochs {
        let t0 = Instant::now();
        let out = run_epoch(model, &mut opt, train, cfg, TrainScope::All, &all, loss_w, seed::derive(stage_seed, epoch as u64))?;
        let improved = finish_epoch(observer, model, Phase::Finetune, out, t0, epoch, &mut history, &mut best)?;
        epoch += 1;
        since_best = if improved { 0 } else { since_best + 1 };
        if cfg.early_stop_patience > 0 && since_best >= cfg.early_stop_patience {
            history.stopped_early = true;
            break;
        }
    }

    let best_weights = match best {
        Some((_, w)) => {
            model.load_state_dict(&w)?;
            w
        }
        None => start,
    };
    history.best_digest = weights_digest(&best_weights);
    observer.stage_end(stage, &best_weights);
    Ok(history)
}

/// Supplies the patch set of a given size and split.
pub trait PatchSource {
    fn patch_set(&self, size: usize, split: Split, bands: &[BandId]) -> Result<PatchSet, TrainError>;
}

/// Directory holding `patches_<size>/manifest.jsonl` for every stage size.
pub struct PatchDir(pub PathBuf);

pub fn stage_manifest(root: &Path, size: usize) -> PathBuf {
    root.join(format!("patches_{size}")).join("manifest.jsonl")
}

impl PatchSource for PatchDir {
    fn patch_set(&self, size: usize, split: Split, bands: &[BandId]) -> Result<PatchSet, TrainError> {
        let manifest = stage_manifest(&self.0, size);
        if !manifest.exists() {
            return Err(TrainError::MissingPatchSet { size, split });
        }
        match patchify::load_patch_set(&manifest, split, bands) {
            Err(PatchError::Manifest(_)) => Err(TrainError::MissingPatchSet { size, split }),
            other => Ok(other?),
        }
    }
}

/// In-memory patch sets keyed by `(size, split)`.
#[derive(Default)]
pub struct PatchSets(pub BTreeMap<(usize, Split), PatchSet>);

impl PatchSource for PatchSets {
    fn patch_set(&self, size: usize, split: Split, bands: &[BandId]) -> Result<PatchSet, TrainError> {
        let set = self.0.get(&(size, split)).ok_or(TrainError::MissingPatchSet { size, split })?;
        if set.band_set() == bands {
            Ok(set.clone())
        } else {
            Ok(set.select_bands(bands)?)
        }
    }
}

/// Starting point of a progressive run.
#[derive(Clone, Debug)]
pub enum ModelInit {
    Fresh(ModelSpec),
    Checkpoint(Box<ModelCheckpoint>),
}

/// Trains the stages in order, handing each stage's best weights to the next.
pub fn run_progressive(
    plan: &StagePlan,
    source: &dyn PatchSource,
    init: &ModelInit,
    bands: &[BandId],
    loss_w: &LossWeights,
    seed: u64,
    observer: &mut dyn TrainObserver,
) -> Result<(ModelCheckpoint, Vec<TrainHistory>), TrainError> {
    plan.validate()?;
    let bands = crate::raster::canonical_bands(bands)?;
    let mut ckpt = match init {
        ModelInit::Fresh(spec) => {
            let spec = ModelSpec {
                in_channels: bands.len(),
                ..spec.clone()
            };
            ModelCheckpoint::from_model(&build_model(&spec, seed)?, &bands, Vec::new(), seed)?
        }
        ModelInit::Checkpoint(c) => {
            if c.bands != bands {
                return Err(TrainError::ChannelMismatch {
                    expected: c.bands.len(),
                    got: bands.len(),
                });
            }
            (**c).clone()
        }
    };
    let mut histories = Vec::with_capacity(plan.stages.len());
    for (i, cfg) in plan.stages.iter().enumerate() {
        let train = source.patch_set(cfg.patch_size, Split::Train, &bands)?;
        let val = source.patch_set(cfg.patch_size, Split::Val, &bands)?;
        let mut model = build_model(&ckpt.spec, ckpt.seed)?;
        transfer_weights(&mut model, &ckpt)?;
        let history = train_stage_observed(&mut model, &train, &val, cfg, loss_w, seed, i, observer)?;
        let mut stage_history = ckpt.stage_history.clone();
        stage_history.push((cfg.patch_size, history.epochs_run()));
        ckpt = ModelCheckpoint::from_model(&model, &bands, stage_history, ckpt.seed)?;
        histories.push(history);
    }
    Ok((ckpt, histories))
}
