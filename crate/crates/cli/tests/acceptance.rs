//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `cargo test -p progseg --test acceptance` runs everything; numeric
//! arguments select criteria, e.g. `-- 3 4 5`.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, Array3, Array4};
use progseg::losses::{bce_loss, dice_loss, hybrid_loss, hybrid_loss_grad, LossWeights};
use progseg::metrics::{confusion_counts, MetricsReport};
use progseg::model::{build_model, extend_input_channels, BackboneKind, ExtendInit, HeadSpec, Model, ModelCheckpoint, ModelSpec, WeightMap};
use progseg::patchify::{build_patch_sets, filter_patches, filter_tiles, tile, LabeledTile, Patch, PatchOrigin};
use progseg::preprocess::{clahe_equalize, percentile_normalize, ClaheParams, NormalizeParams};
use progseg::raster::{BandId, LabelMask, MultispectralImage, ValueDomain};
use progseg::synth::SceneParams;
use progseg::train::{run_progressive, EpochRecord, ModelInit, PatchSets, TrainObserver};
use progseg_cli::config::{DataConfig, ExperimentConfig, PlanConfig, StageEntry, SynthConfig};
use progseg_cli::pipeline::{self, run_pipeline, METRICS_JSON};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = fn(&Path) -> Result<String, String>;

const CRITERIA: [(u32, &str, Check); 8] = [
    (1, "progressive plan beats 256-only baseline", progressive_vs_baseline),
    (2, "RGB+NIR beats RGB on NIR-only class", channel_ablation),
    (3, "channel extension zero-equivalence", extension_zero_equivalence),
    (4, "hybrid loss gradients and bounds", loss_correctness),
    (5, "metrics equal confusion oracle", metric_oracle),
    (6, "pipeline determinism and weight handoff", determinism_and_handoff),
    (7, "tiling and OTHER filters", data_rules),
    (8, "percentile normalization and CLAHE oracles", preprocessing),
];

fn main() {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let work = tempfile::tempdir().expect("temp dir");
    std::env::set_var(pipeline::CACHE_ENV, work.path().join("cache"));
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (n, name, check) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let dir = work.path().join(format!("c{n}"));
        fs::create_dir_all(&dir).expect("criterion dir");
        let t = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(|| check(&dir))).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {n} PASS {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} FAIL {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn bits(w: &WeightMap) -> BTreeMap<String, Vec<u32>> {
    w.iter().map(|(k, t)| (k.clone(), t.data.iter().map(|v| v.to_bits()).collect())).collect()
}

fn encoder(w: &WeightMap) -> BTreeMap<String, Vec<u32>> {
    bits(w).into_iter().filter(|(k, _)| !k.starts_with("head.")).collect()
}

fn stage(patch_size: usize, frozen: usize, finetune: usize) -> StageEntry {
    StageEntry {
        patch_size,
        frozen_epochs: frozen,
        finetune_epochs: finetune,
        early_stop_patience: 0,
        ..StageEntry::default()
    }
}

fn desk_model() -> ModelSpec {
    ModelSpec {
        backbone: BackboneKind::SmallResnet,
        widths: vec![8, 16, 32, 64],
        head: HeadSpec {
            width: 8,
            ..HeadSpec::default()
        },
        ..ModelSpec::default()
    }
}

fn synth_experiment(out: &Path, seed: u64, synth: SynthConfig, bands: &str, stages: Vec<StageEntry>) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seed,
        out_dir: out.to_path_buf(),
        bands: bands.into(),
        data: DataConfig {
            tiles_dir: None,
            synth: Some(synth),
        },
        model: desk_model(),
        ..ExperimentConfig::default()
    };
    cfg.plan = Some(PlanConfig {
        stages,
        ..PlanConfig::default()
    });
    cfg.predict.max_images = 1;
    cfg
}

/// Bundled synthetic dataset: 50 default tiles, split 40/10 at tile level.
fn progressive_vs_baseline(dir: &Path) -> Result<String, String> {
    let synth = SynthConfig::default();
    let mut gaps = Vec::new();
    let mut detail = Vec::new();
    for seed in 0..3 {
        let prog = synth_experiment(&dir.join(format!("prog{seed}")), seed, synth.clone(), "all", [64, 128, 256].map(|s| stage(s, 1, 2)).to_vec());
        let base = synth_experiment(&dir.join(format!("base{seed}")), seed, synth.clone(), "all", vec![stage(256, 1, 8)]);
        let p = run_pipeline(&prog, false).map_err(|e| e.to_string())?.metrics.final_metrics.miou;
        let b = run_pipeline(&base, false).map_err(|e| e.to_string())?.metrics.final_metrics.miou;
        gaps.push(p - b);
        detail.push(format!("seed {seed}: {p:.3} vs {b:.3}"));
    }
    let mean = gaps.iter().sum::<f64>() / 3.0;
    let wins = gaps.iter().filter(|&&g| g >= 0.0).count();
    let msg = format!("{}; mean gap {mean:.3} (need >= 0.03), wins {wins}/3 (need >= 2)", detail.join(", "));
    ensure(mean >= 0.03 && wins >= 2, || msg.clone())?;
    Ok(msg)
}

fn channel_ablation(dir: &Path) -> Result<String, String> {
    let synth = SynthConfig {
        n_tiles: 40,
        seed: 1,
        scene: SceneParams {
            size: (128, 128),
            nir_only_class: true,
            n_pivots: 2,
            n_floods: 3,
            pivot_radius: (10, 20),
            flood_side: (16, 36),
            ..SceneParams::default()
        },
    };
    let mut detail = Vec::new();
    let mut diffs = Vec::new();
    for seed in 0..3 {
        let miou = |bands: &str| -> Result<f64, String> {
            let cfg = synth_experiment(&dir.join(format!("{bands}{seed}")), seed, synth.clone(), bands, vec![stage(64, 1, 8)]);
            Ok(run_pipeline(&cfg, false).map_err(|e| e.to_string())?.metrics.final_metrics.miou)
        };
        let (rgbn, rgb) = (miou("RGBN")?, miou("RGB")?);
        diffs.push(rgbn - rgb);
        detail.push(format!("seed {seed}: {rgbn:.3} vs {rgb:.3}"));
    }
    let mean = diffs.iter().sum::<f64>() / 3.0;
    let min = diffs.iter().copied().fold(f64::INFINITY, f64::min);
    let msg = format!("{}; min difference {min:.3}, mean {mean:.3} (need >= 0.10 on every seed)", detail.join(", "));
    ensure(min >= 0.10, || msg.clone())?;
    Ok(msg)
}

/// Every tensor, normalization statistics included, drawn at random.
fn random_model(spec: &ModelSpec, seed: u64) -> Model {
    let mut model = build_model(spec, seed).expect("model");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut w = model.state_dict();
    for (name, t) in w.iter_mut() {
        for v in t.data.iter_mut() {
            *v = if name.ends_with("running_var") {
                rng.random_range(0.5..2.0)
            } else if name.ends_with("gamma") {
                rng.random_range(0.5..1.5)
            } else {
                *v + rng.random_range(-0.1..0.1)
            };
        }
    }
    model.load_state_dict(&w).expect("weights");
    model
}

fn extension_zero_equivalence(_: &Path) -> Result<String, String> {
    let rgb = [BandId::Blue, BandId::Green, BandId::Red];
    let extended = [BandId::Blue, BandId::Green, BandId::Red, BandId::Swir1, BandId::Nir, BandId::Thermal];
    let spec = ModelSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut worst = 0.0f32;
    for i in 0..20u64 {
        let model = random_model(&spec, i);
        let ckpt = ModelCheckpoint::from_model(&model, &rgb, vec![(64, 3)], i).map_err(|e| e.to_string())?;
        let init = [ExtendInit::Mean, ExtendInit::Nearest, ExtendInit::Zeros][i as usize % 3];
        let ext = extend_input_channels(&ckpt, &extended, init).map_err(|e| e.to_string())?;
        let (before, after) = (bits(&ckpt.weights), bits(&ext.weights));
        let changed: Vec<&String> = before.keys().filter(|k| before[*k] != after[*k]).collect();
        ensure(changed.len() == 1 && before.len() == after.len(), || format!("checkpoint {i}: changed tensors {changed:?}"))?;
        let x = Array4::from_shape_fn((2, 32, 32, 3), |_| rng.random::<f32>());
        // Canonical order keeps BLUE, GREEN, RED first.
        let xe = Array4::from_shape_fn((2, 32, 32, 6), |(b, r, c, k)| if k < 3 { x[(b, r, c, k)] } else { 0.0 });
        let a = model.forward(x.view()).map_err(|e| e.to_string())?;
        let b = ext.to_model().map_err(|e| e.to_string())?.forward(xe.view()).map_err(|e| e.to_string())?;
        let diff = a.iter().zip(b.iter()).map(|(p, q)| (p - q).abs()).fold(0.0f32, f32::max);
        worst = worst.max(diff);
    }
    ensure(worst <= 1e-5, || format!("max logit difference {worst:e} > 1e-5"))?;
    Ok(format!("20 checkpoints, max logit difference {worst:e} (<= 1e-5), only the first-layer kernel changed"))
}

fn random_instance(rng: &mut ChaCha8Rng) -> (Array4<f64>, Array4<f64>) {
    let probs = Array4::from_shape_fn((2, 4, 4, 3), |_| rng.random_range(0.02..0.98));
    let target = Array4::from_shape_fn((2, 4, 4, 3), |_| if rng.random_bool(0.4) { 1.0 } else { 0.0 });
    (probs, target)
}

fn loss_correctness(_: &Path) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let h = 1e-4;
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let w = LossWeights {
            alpha: rng.random_range(0.0..1.0),
            beta: rng.random_range(0.0..1.0),
            ..LossWeights::default()
        };
        let (p, t) = random_instance(&mut rng);
        let (_, g) = hybrid_loss_grad(p.view(), t.view(), &w).map_err(|e| e.to_string())?;
        for (idx, &an) in g.indexed_iter() {
            let (mut plus, mut minus) = (p.clone(), p.clone());
            plus[idx] += h;
            minus[idx] -= h;
            let lp = hybrid_loss(plus.view(), t.view(), &w).unwrap();
            let lm = hybrid_loss(minus.view(), t.view(), &w).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            worst = worst.max((fd - an).abs() / an.abs().max(fd.abs()).max(1e-8));
        }
    }
    ensure(worst <= 1e-4, || format!("max relative gradient error {worst:e} > 1e-4"))?;

    let half = Array4::from_elem((2, 4, 4, 3), 0.5);
    let (_, t) = random_instance(&mut rng);
    let bce = bce_loss(half.view(), t.view()).unwrap();
    let bce_err = (bce - std::f64::consts::LN_2).abs();
    ensure(bce_err <= 1e-12, || format!("bce(0.5) off ln 2 by {bce_err:e}"))?;

    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..1000 {
        let shape = (rng.random_range(1..3), rng.random_range(1..6), rng.random_range(1..6), 3);
        // Mix soft, saturated and empty classes.
        let probs = Array4::from_shape_fn(shape, |_| match i % 3 {
            0 => rng.random::<f64>(),
            1 => rng.random_range(0..2) as f64,
            _ => 0.0,
        });
        let target = Array4::from_shape_fn(shape, |_| rng.random_range(0..2) as f64);
        let smooth = [0.0, 1e-6, 1.0, 10.0][i % 4];
        let d = dice_loss(probs.view(), target.view(), smooth).unwrap();
        lo = lo.min(d);
        hi = hi.max(d);
    }
    ensure(lo >= 0.0 && hi <= 1.0, || format!("dice left [0, 1]: min {lo}, max {hi}"))?;
    Ok(format!("max FD relative error {worst:.2e} (<= 1e-4), |bce(0.5) - ln 2| = {bce_err:.1e}, dice range [{lo:.3}, {hi:.3}] over 1000 draws"))
}

struct OracleMetrics {
    miou: f64,
    precision: f64,
    recall: f64,
    f1: f64,
    macro_precision: f64,
    macro_recall: f64,
    macro_f1: f64,
}

fn div(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        a / b
    }
}

fn f1_of(p: f64, r: f64) -> f64 {
    div(2.0 * p * r, p + r)
}

/// Counts each (pred, truth) pair into a full confusion matrix first.
fn confusion_oracle(pred: &Array2<u8>, truth: &Array2<u8>) -> OracleMetrics {
    let mut m = [[0u64; 3]; 3];
    for (&p, &t) in pred.iter().zip(truth.iter()) {
        m[p as usize][t as usize] += 1;
    }
    let tp = |c: usize| m[c][c] as f64;
    let fp = |c: usize| (0..3).filter(|&t| t != c).map(|t| m[c][t]).sum::<u64>() as f64;
    let fn_ = |c: usize| (0..3).filter(|&p| p != c).map(|p| m[p][c]).sum::<u64>() as f64;
    let ious: Vec<f64> = (0..3).filter(|&c| tp(c) + fp(c) + fn_(c) > 0.0).map(|c| tp(c) / (tp(c) + fp(c) + fn_(c))).collect();
    let (stp, sfp, sfn) = (0..3).fold((0.0, 0.0, 0.0), |a, c| (a.0 + tp(c), a.1 + fp(c), a.2 + fn_(c)));
    let precision = div(stp, stp + sfp);
    let recall = div(stp, stp + sfn);
    let per: Vec<(f64, f64)> = (0..3).map(|c| (div(tp(c), tp(c) + fp(c)), div(tp(c), tp(c) + fn_(c)))).collect();
    OracleMetrics {
        miou: ious.iter().sum::<f64>() / ious.len() as f64,
        precision,
        recall,
        f1: f1_of(precision, recall),
        macro_precision: per.iter().map(|x| x.0).sum::<f64>() / 3.0,
        macro_recall: per.iter().map(|x| x.1).sum::<f64>() / 3.0,
        macro_f1: per.iter().map(|&(p, r)| f1_of(p, r)).sum::<f64>() / 3.0,
    }
}

fn metric_oracle(_: &Path) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut worst = 0.0f64;
    for i in 0..200 {
        // Vary class balance so some pairs miss a class entirely.
        let classes = [3u8, 2, 3, 1][i % 4];
        let pred = Array2::from_shape_fn((8, 8), |_| rng.random_range(0..classes));
        let truth = Array2::from_shape_fn((8, 8), |_| rng.random_range(0..3u8));
        let counts = confusion_counts(&LabelMask::new(pred.clone()).unwrap(), &LabelMask::new(truth.clone()).unwrap(), 3).map_err(|e| e.to_string())?;
        let r = MetricsReport::from_counts(&counts).map_err(|e| e.to_string())?;
        let o = confusion_oracle(&pred, &truth);
        for (got, want) in [
            (r.miou, o.miou),
            (r.precision, o.precision),
            (r.recall, o.recall),
            (r.f1, o.f1),
            (r.macro_precision, o.macro_precision),
            (r.macro_recall, o.macro_recall),
            (r.macro_f1, o.macro_f1),
        ] {
            worst = worst.max((got - want).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e} > 1e-12"))?;
    Ok(format!("200 mask pairs, max deviation {worst:e} (<= 1e-12)"))
}

#[derive(Default)]
struct Recorder {
    starts: Vec<WeightMap>,
    after_frozen: Vec<WeightMap>,
    ends: Vec<WeightMap>,
    frozen_epochs: Vec<usize>,
}

impl TrainObserver for Recorder {
    fn stage_start(&mut self, _: usize, model: &Model) {
        self.starts.push(model.state_dict());
        self.frozen_epochs.push(0);
    }
    fn frozen_phase_end(&mut self, _: usize, model: &Model) {
        self.after_frozen.push(model.state_dict());
    }
    fn epoch_end(&mut self, r: &EpochRecord) {
        if r.phase == progseg::train::Phase::Frozen {
            *self.frozen_epochs.last_mut().expect("stage started") += 1;
        }
    }
    fn stage_end(&mut self, _: usize, best: &WeightMap) {
        self.ends.push(best.clone());
    }
}

fn determinism_and_handoff(dir: &Path) -> Result<String, String> {
    let synth = SynthConfig {
        n_tiles: 8,
        seed: 6,
        scene: SceneParams {
            size: (64, 64),
            n_pivots: 1,
            n_floods: 1,
            pivot_radius: (8, 14),
            flood_side: (12, 24),
            ..SceneParams::default()
        },
    };
    let sizes = [16, 32, 64];
    let make = |name: &str| {
        let mut cfg = synth_experiment(&dir.join(name), 3, synth.clone(), "RGBN", sizes.map(|s| stage(s, 1, 2)).to_vec());
        cfg.model.widths = vec![4, 8];
        cfg.model.head.width = 4;
        for s in cfg.plan.as_mut().unwrap().stages.iter_mut() {
            s.batch_size = 4;
        }
        cfg
    };
    let (a, b) = (make("a"), make("b"));
    run_pipeline(&a, false).map_err(|e| e.to_string())?;
    run_pipeline(&b, false).map_err(|e| e.to_string())?;
    let ja = fs::read(a.out_dir.join(METRICS_JSON)).map_err(|e| e.to_string())?;
    let jb = fs::read(b.out_dir.join(METRICS_JSON)).map_err(|e| e.to_string())?;
    ensure(ja == jb, || "metrics JSON differs between identical runs".into())?;
    ensure(run_pipeline(&a, false).is_err(), || "completed run was overwritten without --force".into())?;

    // Same data and plan, observed from inside training.
    let bands = a.band_set().unwrap();
    let tiles_dir = pipeline::synth_cached(&pipeline::cache_root(&a.out_dir), &synth).map_err(|e| e.to_string())?;
    let tiles = pipeline::load_tiles(&tiles_dir, &bands).map_err(|e| e.to_string())?;
    let tiles = pipeline::preprocess_tiles(tiles, &a.normalize, Some(&a.clahe.params)).map_err(|e| e.to_string())?;
    let (sets, _) = build_patch_sets(tiles, &sizes, &a.patches).map_err(|e| e.to_string())?;
    let plan = a.stage_plan().unwrap();
    let mut rec = Recorder::default();
    let init = ModelInit::Fresh(a.model_spec().unwrap());
    run_progressive(&plan, &PatchSets(sets), &init, &bands, &a.loss, a.seed, &mut rec).map_err(|e| e.to_string())?;

    for k in 1..sizes.len() {
        ensure(bits(&rec.starts[k]) == bits(&rec.ends[k - 1]), || format!("stage {k} did not start from stage {} best weights", k - 1))?;
    }
    for k in 0..sizes.len() {
        ensure(rec.frozen_epochs[k] == 1, || format!("stage {k} ran {} frozen epochs", rec.frozen_epochs[k]))?;
        ensure(encoder(&rec.starts[k]) == encoder(&rec.after_frozen[k]), || format!("backbone changed during the frozen phase of stage {k}"))?;
        ensure(bits(&rec.starts[k]) != bits(&rec.after_frozen[k]), || format!("head did not train during the frozen phase of stage {k}"))?;
        let saved = ModelCheckpoint::load(a.out_dir.join(format!("stage{k}_{}.psck", sizes[k]))).map_err(|e| e.to_string())?;
        ensure(bits(&saved.weights) == bits(&rec.ends[k]), || format!("stage {k} checkpoint on disk differs from its best weights"))?;
    }
    Ok(format!("metrics.json identical ({} bytes); 2 handoffs and 3 frozen phases bitwise checked", ja.len()))
}

fn mask_with_other(side: usize, other: usize) -> LabelMask {
    LabelMask::new(Array2::from_shape_fn((side, side), |(r, c)| if r * side + c < other { 0 } else { 1 })).unwrap()
}

fn unit_image(h: usize, w: usize) -> MultispectralImage {
    MultispectralImage::new(Array3::zeros((h, w, 3)), vec![BandId::Blue, BandId::Green, BandId::Red], ValueDomain::UnitNormalized).unwrap()
}

fn data_rules(_: &Path) -> Result<String, String> {
    let img = unit_image(256, 256);
    let mask = mask_with_other(256, 0);
    let counts: Vec<usize> = [64, 128, 256].iter().map(|&s| tile(&img, &mask, s, 0).map(|p| p.len())).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    ensure(counts == [16, 4, 1], || format!("patch counts {counts:?}, want [16, 4, 1]"))?;

    // 20x20 = 400 pixels: 320 OTHER is exactly 0.80.
    let patch = |other: usize, col_off: usize| Patch {
        image: unit_image(20, 20),
        mask: mask_with_other(20, other),
        origin: PatchOrigin { tile_id: 0, row_off: 0, col_off },
        size: 20,
    };
    let kept = filter_patches(vec![patch(320, 0), patch(321, 20)], 0.80);
    ensure(kept.len() == 1 && kept[0].origin.col_off == 0, || "patch filter does not keep exactly-0.80 and drop 0.80 + 1 pixel".into())?;

    let labeled = |tile_id: usize, other: usize| LabeledTile {
        tile_id,
        image: unit_image(20, 20),
        mask: mask_with_other(20, other),
    };
    let kept = filter_tiles(vec![labeled(0, 380), labeled(1, 360), labeled(2, 361)], 0.90);
    let ids: Vec<usize> = kept.iter().map(|t| t.tile_id).collect();
    ensure(ids == [1], || format!("tile filter kept {ids:?}, want only the exactly-0.90 tile"))?;
    Ok("16/4/1 patches; 0.80 kept, 0.80 + 1 px dropped; 0.95 tile dropped, 0.90 kept".into())
}

fn single_band(data: Array3<f32>, domain: ValueDomain) -> MultispectralImage {
    MultispectralImage::new(data, vec![BandId::Blue], domain).unwrap()
}

/// Linear-interpolated percentiles of the sorted band.
fn sort_oracle(band: &[f64], p_low: f64, p_high: f64) -> Vec<f64> {
    let mut s = band.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |p: f64| {
        let pos = p / 100.0 * (s.len() - 1) as f64;
        let (i, f) = (pos.floor() as usize, pos.fract());
        if i + 1 < s.len() {
            s[i] * (1.0 - f) + s[i + 1] * f
        } else {
            s[i]
        }
    };
    let (lo, hi) = (q(p_low), q(p_high));
    band.iter().map(|&v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0)).collect()
}

/// Plain histogram equalization by midpoint rank.
fn equalization_oracle(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    values
        .iter()
        .map(|&v| {
            let below = values.iter().filter(|&&u| u < v).count() as f64;
            let equal = values.iter().filter(|&&u| u == v).count() as f64;
            (below + 0.5 * equal) / n
        })
        .collect()
}

fn preprocessing(_: &Path) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let params = NormalizeParams::default();
    let mut worst = 0.0f64;
    let mut worst_affine = 0.0f64;
    for _ in 0..100 {
        let (h, w) = (rng.random_range(4..32), rng.random_range(4..32));
        let scale = rng.random_range(0.1..5000.0f32);
        let data = Array3::from_shape_fn((h, w, 1), |_| rng.random::<f32>() * scale);
        let out = percentile_normalize(&single_band(data.clone(), ValueDomain::RawReflectance), &params).map_err(|e| e.to_string())?;
        let band: Vec<f64> = data.iter().map(|&v| v as f64).collect();
        for (got, want) in out.image.data().iter().zip(sort_oracle(&band, params.p_low, params.p_high)) {
            // Pixels are stored as f32; compare at that precision.
            worst = worst.max((*got as f64 - want as f32 as f64).abs());
        }

        // Integer counts under an exact rescaling a·x + b.
        let dn = Array3::from_shape_fn((h, w, 1), |_| rng.random_range(0..4096u32) as f32);
        let (a, b) = ([2.0f32, 0.5, 4.0, 8.0][rng.random_range(0..4)], rng.random_range(0..1000u32) as f32);
        let base = percentile_normalize(&single_band(dn.clone(), ValueDomain::RawReflectance), &params).map_err(|e| e.to_string())?;
        let moved = percentile_normalize(&single_band(dn.mapv(|v| a * v + b), ValueDomain::RawReflectance), &params).map_err(|e| e.to_string())?;
        for (x, y) in base.image.data().iter().zip(moved.image.data().iter()) {
            worst_affine = worst_affine.max((x - y).abs() as f64);
        }
    }
    ensure(worst <= 1e-10, || format!("normalize deviates from sort oracle by {worst:e}"))?;
    ensure(worst_affine <= 1e-6, || format!("normalize changes under affine rescaling by {worst_affine:e}"))?;

    let single = ClaheParams {
        clip_limit: 1.0,
        tile_grid: (1, 1),
        n_bins: 64,
        bands: None,
    };
    // Values on the bin lattice so each level has its own bin.
    let data = Array3::from_shape_fn((48, 40, 1), |_| rng.random_range(0..64u32) as f32 / 63.0);
    let img = single_band(data.clone(), ValueDomain::UnitNormalized);
    let eq = clahe_equalize(&img, &single).map_err(|e| e.to_string())?;
    let want = equalization_oracle(&data.iter().map(|&v| v as f64).collect::<Vec<_>>());
    let clahe_err = eq.data().iter().zip(&want).map(|(g, w)| (*g as f64 - w).abs()).fold(0.0, f64::max);
    ensure(clahe_err <= 1.0 / 65535.0, || format!("single-tile CLAHE deviates from equalization by {clahe_err:e}"))?;

    let multi = Array3::from_shape_fn((64, 64, 3), |_| rng.random::<f32>());
    let img = MultispectralImage::new(multi, vec![BandId::Blue, BandId::Green, BandId::Red], ValueDomain::UnitNormalized).unwrap();
    let p = ClaheParams::default();
    let (x, y) = (clahe_equalize(&img, &p).unwrap(), clahe_equalize(&img, &p).unwrap());
    let same = x.data().iter().zip(y.data().iter()).all(|(a, b)| a.to_bits() == b.to_bits());
    ensure(same, || "CLAHE is not deterministic".into())?;
    Ok(format!(
        "oracle deviation {worst:.1e} (<= 1e-10), affine deviation {worst_affine:.1e}, single-tile CLAHE deviation {clahe_err:.1e} (<= 1/65535), repeat bitwise equal"
    ))
}
