//! The end-to-end pipeline and the building blocks the subcommands share.

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};

use progseg::losses::LossWeights;
use progseg::metrics::MetricsReport;
use progseg::model::{extend_input_channels, ExtendInit, Model, ModelCheckpoint, ModelSpec, WeightMap};
use progseg::patchify::{self, build_patch_sets, LabeledTile, PatchConfig, PatchSet, Split};
use progseg::preprocess::{clahe_equalize, percentile_normalize, ClaheParams, NormalizeParams};
use progseg::raster::{self, band_set_label, BandId, MultispectralImage, RasterFormat, ValueDomain};
use progseg::synth::{generate_dataset, DatasetManifest};
use progseg::train::{
    evaluate, histories_to_csv, predict_map, run_progressive, stage_manifest, EpochRecord, ModelInit, PatchSets, StagePlan, TrainHistory,
    TrainObserver,
};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, SynthConfig};
use crate::error::CliError;
use crate::render;

pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const METRICS_JSON: &str = "metrics.json";
pub const HISTORY_CSV: &str = "history.csv";
pub const CONFIG_COPY: &str = "config.toml";
pub const FINAL_CHECKPOINT: &str = "final.psck";
pub const CACHE_ENV: &str = "PROGSEG_CACHE";

/// Intermediate artifacts live under `$PROGSEG_CACHE`, else `<out>/cache`.
pub fn cache_root(out_dir: &Path) -> PathBuf {
    match std::env::var_os(CACHE_ENV) {
        Some(p) if !p.is_empty() => PathBuf::from(p),
        _ => out_dir.join("cache"),
    }
}

fn digest<T: Serialize>(value: &T) -> String {
    let mut h = DefaultHasher::new();
    serde_json::to_string(value).expect("serializable").hash(&mut h);
    format!("{:016x}", h.finish())
}

/// Raster files of a tile directory in name order; GeoTIFF mask sidecars are skipped.
pub fn list_tiles(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    let entries = fs::read_dir(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?;
    for entry in entries {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
        if ext == "pseg" || ((ext == "tif" || ext == "tiff") && !stem.ends_with("_mask")) {
            out.push(path);
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(CliError::data(format!("no tiles in {}", dir.display())));
    }
    Ok(out)
}

/// Loads every labeled tile of `dir`, restricted to `bands`; ids follow name order.
pub fn load_tiles(dir: &Path, bands: &[BandId]) -> Result<Vec<LabeledTile>, CliError> {
    list_tiles(dir)?
        .into_iter()
        .enumerate()
        .map(|(tile_id, path)| {
            let (image, mask) = raster::load_labeled(&path, bands).map_err(|e| CliError::from(e).at(&path.display().to_string()))?;
            Ok(LabeledTile { tile_id, image, mask })
        })
        .collect()
}

pub fn save_tiles(dir: &Path, tiles: &[LabeledTile]) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    for t in tiles {
        raster::save_labeled(&t.image, &t.mask, dir.join(format!("tile_{:04}.pseg", t.tile_id)), RasterFormat::Archive)?;
    }
    Ok(())
}

/// Normalizes raw reflectance, then applies CLAHE when given.
pub fn preprocess_image(img: &MultispectralImage, norm: &NormalizeParams, clahe: Option<&ClaheParams>) -> Result<MultispectralImage, CliError> {
    let img = match img.value_domain() {
        ValueDomain::RawReflectance => {
            let out = percentile_normalize(img, norm)?;
            if !out.degenerate_bands.is_empty() {
                log::warn!("zero-filled degenerate bands {:?}", out.degenerate_bands);
            }
            out.image
        }
        ValueDomain::UnitNormalized => img.clone(),
    };
    Ok(match clahe {
        Some(p) => clahe_equalize(&img, p)?,
        None => img,
    })
}

pub fn preprocess_tiles(tiles: Vec<LabeledTile>, norm: &NormalizeParams, clahe: Option<&ClaheParams>) -> Result<Vec<LabeledTile>, CliError> {
    tiles
        .into_iter()
        .map(|t| {
            Ok(LabeledTile {
                image: preprocess_image(&t.image, norm, clahe)?,
                ..t
            })
        })
        .collect()
}

/// Generates a synthetic dataset into the cache unless an identical one exists.
pub fn synth_cached(cache: &Path, synth: &SynthConfig) -> Result<PathBuf, CliError> {
    let dir = cache.join(format!("synth-{}", digest(synth)));
    if let Ok(m) = DatasetManifest::load(&dir) {
        if m.seed == synth.seed && m.params == synth.scene && m.tiles.len() == synth.n_tiles {
            log::info!("reusing synthetic tiles in {}", dir.display());
            return Ok(dir);
        }
    }
    generate_dataset(synth.n_tiles, &synth.scene, synth.seed, &dir)?;
    Ok(dir)
}

/// Writes `root/patches_<S>/` archives and manifests; returns the manifest paths.
pub fn write_patch_sets(root: &Path, sets: &BTreeMap<(usize, Split), PatchSet>) -> Result<Vec<PathBuf>, CliError> {
    let sizes: BTreeSet<usize> = sets.keys().map(|(s, _)| *s).collect();
    let mut manifests = Vec::new();
    for size in sizes {
        let manifest = stage_manifest(root, size);
        let dir = manifest.parent().expect("manifest has a parent").to_path_buf();
        let mut entries = Vec::new();
        for split in [Split::Train, Split::Val] {
            if let Some(set) = sets.get(&(size, split)) {
                entries.extend(patchify::write_patches(&dir, set.patches(), split)?);
            }
        }
        patchify::write_manifest(&manifest, &entries)?;
        manifests.push(manifest);
    }
    Ok(manifests)
}

/// Saves each stage's best weights as it completes.
pub struct CheckpointWriter {
    dir: PathBuf,
    spec: ModelSpec,
    bands: Vec<BandId>,
    seed: u64,
    history: Vec<(usize, usize)>,
    epochs_this_stage: usize,
    size_this_stage: usize,
    pub written: Vec<PathBuf>,
    pub error: Option<CliError>,
}

impl CheckpointWriter {
    pub fn new(dir: &Path, spec: ModelSpec, bands: Vec<BandId>, seed: u64, history: Vec<(usize, usize)>) -> Self {
        Self {
            dir: dir.to_path_buf(),
            spec,
            bands,
            seed,
            history,
            epochs_this_stage: 0,
            size_this_stage: 0,
            written: Vec::new(),
            error: None,
        }
    }
}

impl TrainObserver for CheckpointWriter {
    fn stage_start(&mut self, _stage: usize, _model: &Model) {
        self.epochs_this_stage = 0;
    }

    fn epoch_end(&mut self, r: &EpochRecord) {
        self.epochs_this_stage += 1;
        self.size_this_stage = r.patch_size;
    }

    fn stage_end(&mut self, stage: usize, best: &WeightMap) {
        self.history.push((self.size_this_stage, self.epochs_this_stage));
        let ckpt = ModelCheckpoint {
            weights: best.clone(),
            spec: self.spec.clone(),
            bands: self.bands.clone(),
            stage_history: self.history.clone(),
            seed: self.seed,
        };
        let path = self.dir.join(format!("stage{stage}_{}.psck", self.size_this_stage));
        match ckpt.save(&path) {
            Ok(()) => self.written.push(path),
            Err(e) => {
                self.error.get_or_insert(CliError::from(e).at("checkpoint"));
            }
        }
    }
}

/// Summary of one stage in `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: usize,
    pub patch_size: usize,
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub best_val_miou: Option<f64>,
    pub stopped_early: bool,
}

/// Contents of `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub bands: String,
    pub plan: Vec<usize>,
    /// Final checkpoint on the validation patches of the last stage size.
    pub final_metrics: MetricsReport,
    pub stages: Vec<StageSummary>,
}

pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    pub histories: Vec<TrainHistory>,
    pub metrics: RunMetrics,
    pub artifacts: Vec<PathBuf>,
}

/// Builds the starting point: fresh weights, or a checkpoint extended to `bands`.
pub fn model_init(spec: &ModelSpec, init_ckpt: Option<&Path>, extend: ExtendInit, bands: &[BandId]) -> Result<ModelInit, CliError> {
    let Some(path) = init_ckpt else {
        return Ok(ModelInit::Fresh(spec.clone()));
    };
    let ckpt = ModelCheckpoint::load(path).map_err(|e| CliError::from(e).at("init checkpoint"))?;
    let ckpt = if ckpt.bands == bands {
        ckpt
    } else {
        extend_input_channels(&ckpt, bands, extend)?
    };
    Ok(ModelInit::Checkpoint(Box::new(ckpt)))
}

/// Trains the plan and writes stage checkpoints, the final checkpoint,
/// `history.csv` and `metrics.json` into `out_dir`.
#[allow(clippy::too_many_arguments)]
pub fn train_and_record(
    plan: &StagePlan,
    sets: &BTreeMap<(usize, Split), PatchSet>,
    init: &ModelInit,
    bands: &[BandId],
    loss: &LossWeights,
    seed: u64,
    out_dir: &Path,
) -> Result<TrainOutcome, CliError> {
    fs::create_dir_all(out_dir)?;
    let (spec, history, ckpt_seed) = match init {
        ModelInit::Fresh(s) => (
            ModelSpec {
                in_channels: bands.len(),
                ..s.clone()
            },
            Vec::new(),
            seed,
        ),
        ModelInit::Checkpoint(c) => (c.spec.clone(), c.stage_history.clone(), c.seed),
    };
    let mut writer = CheckpointWriter::new(out_dir, spec, bands.to_vec(), ckpt_seed, history);
    let source = PatchSets(sets.clone());
    let (ckpt, histories) = run_progressive(plan, &source, init, bands, loss, seed, &mut writer).map_err(|e| CliError::from(e).at("train"))?;
    if let Some(e) = writer.error {
        return Err(e);
    }
    let mut artifacts = writer.written.clone();
    let final_path = out_dir.join(FINAL_CHECKPOINT);
    ckpt.save(&final_path)?;
    artifacts.push(final_path);
    let history_path = out_dir.join(HISTORY_CSV);
    fs::write(&history_path, histories_to_csv(&histories))?;
    artifacts.push(history_path);

    let last = plan.stages.last().expect("validated plan").patch_size;
    let val = sets.get(&(last, Split::Val)).ok_or(CliError::data(format!("no validation patches of size {last}")))?;
    let model = ckpt.to_model()?;
    let final_metrics = evaluate(&model, &val.select_bands(bands)?).map_err(|e| CliError::from(e).at("eval"))?;
    let metrics = RunMetrics {
        seed,
        bands: band_set_label(bands),
        plan: plan.stages.iter().map(|s| s.patch_size).collect(),
        final_metrics,
        stages: histories
            .iter()
            .map(|h| StageSummary {
                stage: h.stage,
                patch_size: h.patch_size,
                epochs_run: h.epochs_run(),
                best_epoch: h.best_epoch,
                best_val_miou: h.best_val_miou,
                stopped_early: h.stopped_early,
            })
            .collect(),
    };
    let metrics_path = out_dir.join(METRICS_JSON);
    fs::write(&metrics_path, serde_json::to_string_pretty(&metrics)? + "\n")?;
    artifacts.push(metrics_path);
    Ok(TrainOutcome {
        checkpoint: ckpt,
        histories,
        metrics,
        artifacts,
    })
}

/// Writes the class-code mask PNG and its colored preview next to each other.
pub fn write_prediction(path_stem: &Path, mask: &raster::LabelMask) -> Result<Vec<PathBuf>, CliError> {
    let mask_path = path_stem.with_extension("mask.png");
    let preview_path = path_stem.with_extension("preview.png");
    render::write_mask_png(&mask_path, mask)?;
    render::write_preview_png(&preview_path, mask)?;
    Ok(vec![mask_path, preview_path])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Complete,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub status: RunStatus,
    pub config_digest: String,
    /// Relative to the run directory when inside it.
    pub artifacts: Vec<PathBuf>,
}

impl RunManifest {
    pub fn load(dir: &Path) -> Option<Self> {
        let text = fs::read_to_string(dir.join(RUN_MANIFEST)).ok()?;
        serde_json::from_str(&text).ok()
    }

    fn save(&self, dir: &Path) -> Result<(), CliError> {
        fs::write(dir.join(RUN_MANIFEST), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

fn relative(out_dir: &Path, p: &Path) -> PathBuf {
    p.strip_prefix(out_dir).map(Path::to_path_buf).unwrap_or_else(|_| p.to_path_buf())
}

pub struct RunSummary {
    pub out_dir: PathBuf,
    pub metrics: RunMetrics,
    pub manifest: RunManifest,
}

/// synth/load → preprocess → patchify → train → eval → predict, recorded in a run manifest.
pub fn run_pipeline(cfg: &ExperimentConfig, force: bool) -> Result<RunSummary, CliError> {
    cfg.validate()?;
    let out = cfg.out_dir.clone();
    if let Some(m) = RunManifest::load(&out) {
        if m.status == RunStatus::Complete && !force {
            return Err(CliError::config(format!(
                "{} already holds a completed run; pass --force to overwrite it",
                out.display()
            )));
        }
    }
    fs::create_dir_all(&out)?;
    let mut manifest = RunManifest {
        status: RunStatus::Running,
        config_digest: digest(cfg),
        artifacts: Vec::new(),
    };
    manifest.save(&out)?;
    let result = run_stages(cfg, &out, &mut manifest);
    manifest.status = if result.is_ok() { RunStatus::Complete } else { RunStatus::Failed };
    manifest.artifacts = manifest.artifacts.iter().map(|p| relative(&out, p)).collect();
    manifest.save(&out)?;
    match result {
        Ok(metrics) => Ok(RunSummary {
            out_dir: out,
            metrics,
            manifest,
        }),
        Err(e) => {
            let _ = fs::write(out.join("error.json"), e.record() + "\n");
            Err(e)
        }
    }
}

fn run_stages(cfg: &ExperimentConfig, out: &Path, manifest: &mut RunManifest) -> Result<RunMetrics, CliError> {
    let bands = cfg.band_set()?;
    let plan = cfg.stage_plan()?;
    let spec = cfg.model_spec()?;
    let cache = cache_root(out);

    let config_path = out.join(CONFIG_COPY);
    fs::write(&config_path, cfg.to_toml()?)?;
    manifest.artifacts.push(config_path);

    let tiles_dir = match (&cfg.data.tiles_dir, &cfg.data.synth) {
        (Some(d), _) => d.clone(),
        (None, Some(s)) => synth_cached(&cache, s).map_err(|e| e.at("synth"))?,
        (None, None) => unreachable!("validated"),
    };
    let tiles = load_tiles(&tiles_dir, &bands).map_err(|e| e.at("load"))?;
    let clahe = cfg.clahe.enabled.then_some(&cfg.clahe.params);
    let tiles = preprocess_tiles(tiles, &cfg.normalize, clahe).map_err(|e| e.at("preprocess"))?;

    let sizes: Vec<usize> = plan.stages.iter().map(|s| s.patch_size).collect();
    let (sets, splits) = build_patch_sets(tiles.clone(), &sizes, &cfg.patches).map_err(|e| CliError::from(e).at("patchify"))?;
    let patch_key = (&tiles_dir, &cfg.bands, &cfg.normalize, &cfg.clahe, &cfg.patches, &sizes);
    let patch_root = cache.join(format!("patches-{}", digest(&patch_key)));
    let cached: Vec<PathBuf> = sizes.iter().map(|&s| stage_manifest(&patch_root, s)).collect();
    let manifests = if cached.iter().all(|m| m.exists()) {
        cached
    } else {
        write_patch_sets(&patch_root, &sets).map_err(|e| e.at("patchify"))?
    };
    manifest.artifacts.extend(manifests);

    let init = model_init(
        &spec,
        cfg.plan.as_ref().and_then(|p| p.init_checkpoint.as_deref()),
        cfg.plan.as_ref().map(|p| p.extend_init).unwrap_or_default(),
        &bands,
    )?;
    let outcome = train_and_record(&plan, &sets, &init, &bands, &cfg.loss, cfg.seed, out)?;
    manifest.artifacts.extend(outcome.artifacts.iter().cloned());

    let tile_size = cfg.predict.tile_size.unwrap_or(*sizes.last().expect("non-empty plan"));
    let model = outcome.checkpoint.to_model()?;
    let pred_dir = out.join("predictions");
    fs::create_dir_all(&pred_dir)?;
    let val_ids = &splits[&Split::Val];
    for t in tiles.iter().filter(|t| val_ids.contains(&t.tile_id)).take(cfg.predict.max_images) {
        let mask = predict_map(&model, &t.image, tile_size).map_err(|e| CliError::from(e).at("predict"))?;
        let stem = pred_dir.join(format!("tile_{:04}", t.tile_id));
        manifest.artifacts.extend(write_prediction(&stem, &mask)?);
        let truth = pred_dir.join(format!("tile_{:04}.truth.png", t.tile_id));
        render::write_preview_png(&truth, &t.mask)?;
        manifest.artifacts.push(truth);
    }
    Ok(outcome.metrics)
}

/// Loads a tile directory and writes patch sets of every size under `out`.
pub fn patchify_dir(input: &Path, out: &Path, bands: &[BandId], sizes: &[usize], cfg: &PatchConfig) -> Result<Vec<PathBuf>, CliError> {
    let tiles = load_tiles(input, bands)?;
    let (sets, _) = build_patch_sets(tiles, sizes, cfg)?;
    for ((size, split), set) in &sets {
        log::info!("size {size} {split:?}: {} patches", set.len());
    }
    write_patch_sets(out, &sets)
}
